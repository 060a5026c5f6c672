//! Sampling-loss terms: Chamfer distance, repulsion, and their weighted
//! composition with the projection and task losses.

use crate::cloud::{sq_dist, PointCloud};
use crate::error::{Error, Result};
use crate::projection::{projection_loss, TemperatureKind};
use crate::tensor::{Binary, Matrix, Reduce, Tape, Unary, VarId};

/// Every loss hyperparameter in one place.
#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Repulsion weight.
    pub alpha: f64,
    /// Projection-loss weight.
    pub beta: f64,
    /// Task-loss weight.
    pub delta: f64,
    /// Repulsion radius (model units).
    pub h: f64,
    /// Repulsion neighbor count.
    pub k_rep: usize,
    pub temperature_kind: TemperatureKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            beta: 1.0,
            delta: 1.0,
            h: 0.001,
            k_rep: 15,
            temperature_kind: TemperatureKind::Exp,
        }
    }
}

/// Symmetric Chamfer distance between an on-tape `M x 3` node and a fixed
/// input cloud: mean squared nearest distance in both directions.
pub fn chamfer(tape: &mut Tape, q: VarId, p: &PointCloud) -> Result<VarId> {
    let (m, d) = tape.shape(q);
    if d != 3 {
        return Err(Error::Contract(format!("chamfer expects M x 3, got M x {d}")));
    }
    let n = p.len();
    let p_const = tape.constant(Matrix::from_rows(
        &p.points().iter().map(|pt| pt.to_vec()).collect::<Vec<_>>(),
    ));
    // D[i][j] = ||q_i - p_j||^2, built row by row so gradients route to q_i.
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let qi = tape.row(q, i);
        let ones = tape.constant(Matrix::ones(n, 1));
        let tiled = tape.matmul(ones, qi)?;
        let diff = tape.binary(Binary::Sub, tiled, p_const)?;
        let sq = tape.unary(Unary::Square, diff);
        let col = tape.reduce(Reduce::SumOverCols, sq); // n x 1
        rows.push(tape.transpose(col)); // 1 x n
    }
    let dmat = tape.concat_rows(&rows)?; // m x n
    let q_to_p = tape.reduce(Reduce::MinOverCols, dmat); // m x 1
    let p_to_q = tape.reduce(Reduce::MinOverRows, dmat); // 1 x n
    let term_q = tape.reduce(Reduce::Mean, q_to_p);
    let term_p = tape.reduce(Reduce::Mean, p_to_q);
    tape.binary(Binary::Add, term_q, term_p)
}

/// Chamfer distance between two plain clouds (no tape).
pub fn chamfer_value(q: &PointCloud, p: &PointCloud) -> f64 {
    let dir = |a: &PointCloud, b: &PointCloud| -> f64 {
        let mut total = 0.0;
        for &qa in a.points() {
            let mut best = f64::INFINITY;
            for &pb in b.points() {
                let d = sq_dist(qa, pb);
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        total / a.len() as f64
    };
    dir(q, p) + dir(p, q)
}

/// Repulsion term and whether the input was degenerate (fewer than 2 points,
/// in which case the loss is a constant zero).
pub struct Repulsion {
    pub loss: VarId,
    pub degenerate: bool,
}

/// Repulsion loss over an on-tape `M x 3` node: mean of
/// `max(0, h^2 - r^2)` over each point's `k` nearest neighbors (self excluded).
pub fn repulsion(tape: &mut Tape, q: VarId, cfg: &LossConfig) -> Result<Repulsion> {
    let (m, d) = tape.shape(q);
    if d != 3 {
        return Err(Error::Contract(format!("repulsion expects M x 3, got M x {d}")));
    }
    if m < 2 {
        let zero = tape.constant(Matrix::zeros(1, 1));
        return Ok(Repulsion { loss: zero, degenerate: true });
    }
    let k = cfg.k_rep.max(1).min(m - 1);
    let h2 = cfg.h * cfg.h;

    let mut gathered = Vec::with_capacity(m);
    for i in 0..m {
        let qi = tape.row(q, i);
        let ones = tape.constant(Matrix::ones(m, 1));
        let tiled = tape.matmul(ones, qi)?;
        let diff = tape.binary(Binary::Sub, tiled, q)?;
        let sq = tape.unary(Unary::Square, diff);
        let dists = tape.reduce(Reduce::SumOverCols, sq); // m x 1

        // k nearest neighbors of q_i, self excluded, ties to lowest index.
        let vals = tape.value(dists);
        let mut order: Vec<usize> = (0..m).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            vals.get(a, 0).partial_cmp(&vals.get(b, 0)).unwrap().then(a.cmp(&b))
        });
        let positions: Vec<(usize, usize)> = order[..k].iter().map(|&j| (j, 0)).collect();
        let near = tape.gather(dists, positions); // 1 x k
        let neg = tape.scale(near, -1.0);
        let shifted = tape.add_scalar(neg, h2);
        let eta = tape.unary(Unary::Relu, shifted);
        gathered.push(eta);
    }
    let all = tape.concat_rows(&gathered)?; // m x k
    let sum = tape.reduce(Reduce::Sum, all);
    let loss = tape.scale(sum, 1.0 / (m as f64 * k as f64));
    Ok(Repulsion { loss, degenerate: false })
}

/// `L_CD + alpha * L_repl + beta * T(t)` over the projected points.
pub fn sampling_loss(
    tape: &mut Tape,
    q_projected: VarId,
    p: &PointCloud,
    t: VarId,
    cfg: &LossConfig,
) -> Result<VarId> {
    let cd = chamfer(tape, q_projected, p)?;
    let mut total = cd;
    if cfg.alpha != 0.0 {
        let rep = repulsion(tape, q_projected, cfg)?;
        let weighted = tape.scale(rep.loss, cfg.alpha);
        total = tape.binary(Binary::Add, total, weighted)?;
    }
    if cfg.beta != 0.0 {
        let proj = projection_loss(tape, t, cfg.temperature_kind)?;
        let weighted = tape.scale(proj, cfg.beta);
        total = tape.binary(Binary::Add, total, weighted)?;
    }
    Ok(total)
}

/// `sampling + delta * task`.
pub fn total_loss(
    tape: &mut Tape,
    sampling: VarId,
    task: Option<VarId>,
    cfg: &LossConfig,
) -> Result<VarId> {
    match task {
        Some(task) if cfg.delta != 0.0 => {
            let weighted = tape.scale(task, cfg.delta);
            tape.binary(Binary::Add, sampling, weighted)
        }
        _ => Ok(sampling),
    }
}
