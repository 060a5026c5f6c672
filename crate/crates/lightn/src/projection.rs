//! Differentiable soft projection of generated points onto the input cloud.
//!
//! Each generated point is replaced by a temperature-weighted average of its
//! `k` nearest input points. Neighbor selection is piecewise-constant; the
//! weights and the temperature stay on the tape.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Reduce, Tape, Unary, VarId};

/// Nonlinearity applied to the temperature in the projection loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TemperatureKind {
    Linear,
    Square,
    Cube,
    Fourth,
    Exp,
}

impl TemperatureKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "t" | "linear" => TemperatureKind::Linear,
            "t2" | "square" => TemperatureKind::Square,
            "t3" | "cube" => TemperatureKind::Cube,
            "t4" | "fourth" => TemperatureKind::Fourth,
            "exp" | "et" => TemperatureKind::Exp,
            other => return Err(Error::Config(format!("unknown temperature kind: {other}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TemperatureKind::Linear => "t",
            TemperatureKind::Square => "t2",
            TemperatureKind::Cube => "t3",
            TemperatureKind::Fourth => "t4",
            TemperatureKind::Exp => "exp",
        }
    }
}

/// Soft-projection configuration.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionConfig {
    /// Neighbor count for the weighted average.
    pub k: usize,
    pub temperature_kind: TemperatureKind,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig { k: 7, temperature_kind: TemperatureKind::Exp }
    }
}

/// The `k` nearest input points to `q` by squared distance, ascending;
/// ties break to the lowest index.
pub fn knn(p: &PointCloud, q: [f64; 3], k: usize) -> Result<Vec<(usize, f64)>> {
    if k > p.len() {
        return Err(Error::Domain(format!("knn: k = {k} exceeds {} points", p.len())));
    }
    let mut dists: Vec<(usize, f64)> =
        (0..p.len()).map(|i| (i, p.sq_dist_to(i, q))).collect();
    dists.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    dists.truncate(k);
    Ok(dists)
}

/// Softened neighbor weights `w_i = exp(-d_i/t) / sum_j exp(-d_j/t)` over
/// squared distances, computed off-tape.
pub fn project_weights(sq_dists: &[f64], t: f64) -> Result<Vec<f64>> {
    if t <= 0.0 {
        return Err(Error::Domain(format!("project_weights: temperature {t} must be positive")));
    }
    // Stable: shift exponents so the smallest distance maps to exp(0).
    let min = sq_dists.iter().cloned().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = sq_dists.iter().map(|&d| (-(d - min) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// On-tape soft projection. `generated` is an `m x 3` node; `t` a positive
/// 1x1 node. Returns the projected `m x 3` node.
pub fn soft_project(
    tape: &mut Tape,
    generated: VarId,
    p: &PointCloud,
    cfg: &ProjectionConfig,
    t: VarId,
) -> Result<VarId> {
    let (m, d) = tape.shape(generated);
    if d != 3 {
        return Err(Error::Contract(format!("soft_project expects m x 3 input, got m x {d}")));
    }
    if cfg.k < 1 || cfg.k > p.len() {
        return Err(Error::Domain(format!(
            "soft_project: k = {} out of range for {} points",
            cfg.k,
            p.len()
        )));
    }
    let mut projected_rows = Vec::with_capacity(m);
    for i in 0..m {
        let gi = tape.value(generated).row_slice(i);
        let q = [gi[0], gi[1], gi[2]];
        let neighbors = knn(p, q, cfg.k)?;

        // Neighbor coordinates as a fixed k x 3 block.
        let coords = Matrix::from_rows(
            &neighbors.iter().map(|&(idx, _)| p.point(idx).to_vec()).collect::<Vec<_>>(),
        );
        let neigh = tape.constant(coords);

        // Squared distances to the neighbors, on the tape.
        let row = tape.row(generated, i);
        let ones = tape.constant(Matrix::ones(cfg.k, 1));
        let tiled = tape.matmul(ones, row)?;
        let diff = tape.binary(crate::tensor::Binary::Sub, tiled, neigh)?;
        let sq = tape.unary(Unary::Square, diff);
        let sq_dists = tape.reduce(Reduce::SumOverCols, sq); // k x 1

        // w = softmax(-d/t) over the k neighbors (row softmax subtracts the
        // max exponent, i.e. the min distance).
        let neg = tape.scale(sq_dists, -1.0);
        let scaled = tape.div_scalar_var(neg, t)?;
        let as_row = tape.transpose(scaled);
        let weights = tape.row_softmax(as_row); // 1 x k

        let z = tape.matmul(weights, neigh)?; // 1 x 3
        projected_rows.push(z);
    }
    tape.concat_rows(&projected_rows)
}

/// Projection loss `T(t)` on the tape; differentiable in `t`.
pub fn projection_loss(tape: &mut Tape, t: VarId, kind: TemperatureKind) -> Result<VarId> {
    if tape.shape(t) != (1, 1) {
        return Err(Error::Contract("projection_loss expects a 1x1 temperature node".into()));
    }
    Ok(match kind {
        TemperatureKind::Linear => tape.scale(t, 1.0),
        TemperatureKind::Square => tape.unary(Unary::Square, t),
        TemperatureKind::Cube => {
            let sq = tape.unary(Unary::Square, t);
            tape.binary(crate::tensor::Binary::Mul, sq, t).expect("scalar shapes")
        }
        TemperatureKind::Fourth => {
            let sq = tape.unary(Unary::Square, t);
            tape.unary(Unary::Square, sq)
        }
        TemperatureKind::Exp => tape.unary(Unary::Exp, t),
    })
}
