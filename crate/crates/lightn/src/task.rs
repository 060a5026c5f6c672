//! A small frozen point classifier (shared per-point MLP + max pooling +
//! linear classifier), its pre-training, and the sampler training loop
//! that keeps the classifier fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::checkpoint::Checkpoint;
use crate::cloud::PointCloud;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{chamfer, repulsion, LossConfig};
use crate::model::{
    forward, forward_mounted, mount_sampler, MountedSampler, SamplerConfig, SamplerParams,
    MIN_TEMPERATURE,
};
use crate::projection::{
    knn, project_weights, projection_loss, soft_project, ProjectionConfig,
};
use crate::samplers::{dedup_and_complete, fps, nn_match, random_sample, voxel_sample_indices};
use crate::tensor::{Binary, Matrix, Reduce, Tape, Unary, VarId};

/// Widths of the shared per-point layers (input first).
pub const TASK_WIDTHS: [usize; 4] = [3, 32, 64, 128];

/// The classifier head's weights.
#[derive(Debug, Clone)]
pub struct TaskParams {
    /// Shared per-point layers, (weights, bias) each, widths `TASK_WIDTHS`.
    pub mlp_layers: Vec<(Matrix, Matrix)>,
    pub classifier_w: Matrix,
    pub classifier_b: Matrix,
    pub num_classes: usize,
}

fn uniform_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (1.0 / rows as f64).sqrt();
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect())
}

impl TaskParams {
    pub fn init(seed: u64, num_classes: usize) -> Result<Self> {
        if num_classes < 1 {
            return Err(Error::Config("task head needs at least one class".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mlp_layers = TASK_WIDTHS
            .windows(2)
            .map(|w| (uniform_init(&mut rng, w[0], w[1]), Matrix::zeros(1, w[1])))
            .collect();
        let last = *TASK_WIDTHS.last().unwrap();
        Ok(TaskParams {
            mlp_layers,
            classifier_w: uniform_init(&mut rng, last, num_classes),
            classifier_b: Matrix::zeros(1, num_classes),
            num_classes,
        })
    }

    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for (w, b) in &self.mlp_layers {
            out.push(w);
            out.push(b);
        }
        out.push(&self.classifier_w);
        out.push(&self.classifier_b);
        out
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for (w, b) in &mut self.mlp_layers {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.classifier_w);
        out.push(&mut self.classifier_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.matrices().iter().map(|m| m.rows() * m.cols()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_meta("kind", "task");
        ckpt.set_meta("num_classes", self.num_classes);
        for (i, (w, b)) in self.mlp_layers.iter().enumerate() {
            ckpt.push_block(&format!("mlp_w_{i}"), w.clone());
            ckpt.push_block(&format!("mlp_b_{i}"), b.clone());
        }
        ckpt.push_block("cls_w", self.classifier_w.clone());
        ckpt.push_block("cls_b", self.classifier_b.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta("kind")? != "task" {
            return Err(Error::Config("checkpoint is not a task-head checkpoint".into()));
        }
        let num_classes: usize = ckpt.meta_parse("num_classes")?;
        let mut mlp_layers = Vec::new();
        for i in 0..TASK_WIDTHS.len() - 1 {
            mlp_layers.push((
                ckpt.block(&format!("mlp_w_{i}"))?.clone(),
                ckpt.block(&format!("mlp_b_{i}"))?.clone(),
            ));
        }
        Ok(TaskParams {
            mlp_layers,
            classifier_w: ckpt.block("cls_w")?.clone(),
            classifier_b: ckpt.block("cls_b")?.clone(),
            num_classes,
        })
    }
}

/// Task weights mounted on a tape.
pub struct MountedTask {
    pub mlp_layers: Vec<(VarId, VarId)>,
    pub classifier_w: VarId,
    pub classifier_b: VarId,
}

impl MountedTask {
    pub fn matrix_ids(&self) -> Vec<VarId> {
        let mut out = Vec::new();
        for &(w, b) in &self.mlp_layers {
            out.extend([w, b]);
        }
        out.extend([self.classifier_w, self.classifier_b]);
        out
    }
}

pub fn mount_task(tape: &mut Tape, theta: &TaskParams, trainable: bool) -> MountedTask {
    let mut put = |m: &Matrix| if trainable { tape.leaf(m.clone()) } else { tape.constant(m.clone()) };
    MountedTask {
        mlp_layers: theta.mlp_layers.iter().map(|(w, b)| (put(w), put(b))).collect(),
        classifier_w: put(&theta.classifier_w),
        classifier_b: put(&theta.classifier_b),
    }
}

/// On-tape classifier forward over an `N x 3` node; returns `1 x classes` logits.
pub fn task_forward_mounted(tape: &mut Tape, x: VarId, mt: &MountedTask) -> Result<VarId> {
    let mut h = x;
    for &(w, b) in &mt.mlp_layers {
        h = tape.linear(h, w, b)?;
        h = tape.unary(Unary::Relu, h);
    }
    let pooled = tape.reduce(Reduce::MaxOverRows, h);
    tape.linear(pooled, mt.classifier_w, mt.classifier_b)
}

/// Plain (no-tape) classifier forward; returns the logits.
pub fn task_forward(p: &PointCloud, theta: &TaskParams) -> Result<Vec<f64>> {
    let mut h = Matrix::from_rows(&p.points().iter().map(|pt| pt.to_vec()).collect::<Vec<_>>());
    for (w, b) in &theta.mlp_layers {
        let mut z = h.matmul(w)?;
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let v = z.get(r, c) + b.get(0, c);
                z.set(r, c, v.max(0.0));
            }
        }
        h = z;
    }
    let mut pooled = Matrix::zeros(1, h.cols());
    for c in 0..h.cols() {
        let mut best = h.get(0, c);
        for r in 1..h.rows() {
            best = best.max(h.get(r, c));
        }
        pooled.set(0, c, best);
    }
    let z = pooled.matmul(&theta.classifier_w)?;
    Ok((0..z.cols()).map(|c| z.get(0, c) + theta.classifier_b.get(0, c)).collect())
}

/// Argmax class; ties break to the lowest index.
pub fn predict(p: &PointCloud, theta: &TaskParams) -> Result<usize> {
    let logits = task_forward(p, theta)?;
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Softmax cross-entropy of a `1 x classes` logits node against a label.
pub fn cross_entropy(tape: &mut Tape, logits: VarId, label: usize) -> Result<VarId> {
    let (r, c) = tape.shape(logits);
    if r != 1 || label >= c {
        return Err(Error::Contract(format!(
            "cross_entropy: logits {r}x{c} incompatible with label {label}"
        )));
    }
    let probs = tape.row_softmax(logits);
    let picked = tape.gather(probs, vec![(0, label)]);
    let log = tape.unary(Unary::Log, picked);
    Ok(tape.scale(log, -1.0))
}

/// Training hyperparameters. Adam moments use the standard defaults.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        TrainConfig { batch_size: 32, learning_rate: 0.01, epochs, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam over a fixed list of parameter matrices.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

fn shuffled_indices(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn pretrain_metrics_csv(log: &[PretrainEpoch]) -> String {
    let mut out = String::from("epoch,loss,train_accuracy,test_accuracy\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch, e.loss, e.train_accuracy, e.test_accuracy
        ));
    }
    out
}

pub fn dataset_accuracy(ds: &Dataset, theta: &TaskParams) -> Result<f64> {
    let mut hits = 0usize;
    for lc in &ds.clouds {
        if predict(&lc.cloud, theta)? == lc.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.clouds.len() as f64)
}

/// Cross-entropy pre-training of the classifier on full-resolution clouds.
/// Deterministic given the seed.
pub fn pretrain_task(
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<(TaskParams, Vec<PretrainEpoch>)> {
    cfg.validate()?;
    if train.num_classes < 2 && train.clouds.iter().any(|c| c.label != train.clouds[0].label) {
        return Err(Error::Config("pretrain: inconsistent class count".into()));
    }
    let mut theta = TaskParams::init(cfg.seed, train.num_classes)?;
    let shapes: Vec<(usize, usize)> = theta.matrices().iter().map(|m| m.shape()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.clouds.len(), &mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            for &ci in batch {
                let lc = &train.clouds[ci];
                let mut tape = Tape::new();
                let mt = mount_task(&mut tape, &theta, true);
                let x = tape.constant(Matrix::from_rows(
                    &lc.cloud.points().iter().map(|p| p.to_vec()).collect::<Vec<_>>(),
                ));
                let logits = task_forward_mounted(&mut tape, x, &mt)?;
                let loss = cross_entropy(&mut tape, logits, lc.label)?;
                let value = tape.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::Training(format!(
                        "pretrain: non-finite loss at epoch {epoch}, cloud {ci}"
                    )));
                }
                epoch_loss += value;
                let grads = tape.backward(loss)?;
                for (gi, id) in mt.matrix_ids().into_iter().enumerate() {
                    let g = grads.expect(id);
                    let dst = acc[gi].data_mut();
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut acc {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            adam.step(&mut theta.matrices_mut(), &acc);
        }
        log.push(PretrainEpoch {
            epoch,
            loss: epoch_loss / train.clouds.len() as f64,
            train_accuracy: dataset_accuracy(train, &theta)?,
            test_accuracy: dataset_accuracy(test, &theta)?,
        });
    }
    Ok((theta, log))
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerEpoch {
    pub epoch: usize,
    pub total: f64,
    pub chamfer: f64,
    pub repulsion: f64,
    pub projection: f64,
    pub task: f64,
}

pub fn sampler_metrics_csv(log: &[SamplerEpoch]) -> String {
    let mut out = String::from("epoch,total,chamfer,repulsion,projection,task\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, e.total, e.chamfer, e.repulsion, e.projection, e.task
        ));
    }
    out
}

/// One cloud's training-graph nodes, exposed so the per-term values can be
/// logged from the same tape.
pub struct PipelineNodes {
    pub generated: VarId,
    pub projected: VarId,
    pub chamfer: VarId,
    pub repulsion: Option<VarId>,
    pub projection: Option<VarId>,
    pub task: Option<VarId>,
    pub total: VarId,
}

/// Build the full training graph for one cloud: sampler forward, soft
/// projection, sampling-loss terms, and (optionally) the frozen-head task
/// loss.
pub fn pipeline_loss(
    tape: &mut Tape,
    p: &PointCloud,
    label: usize,
    ms: &MountedSampler,
    sampler_cfg: &SamplerConfig,
    mt: Option<&MountedTask>,
    loss_cfg: &LossConfig,
    proj_cfg: &ProjectionConfig,
) -> Result<PipelineNodes> {
    let generated = forward_mounted(tape, p, ms, sampler_cfg)?;
    let projected = soft_project(tape, generated, p, proj_cfg, ms.temperature)?;

    let cd = chamfer(tape, projected, p)?;
    let mut total = cd;
    let mut rep_node = None;
    if loss_cfg.alpha != 0.0 {
        let rep = repulsion(tape, projected, loss_cfg)?;
        let weighted = tape.scale(rep.loss, loss_cfg.alpha);
        total = tape.binary(Binary::Add, total, weighted)?;
        rep_node = Some(rep.loss);
    }
    let mut proj_node = None;
    if loss_cfg.beta != 0.0 {
        let proj = projection_loss(tape, ms.temperature, loss_cfg.temperature_kind)?;
        let weighted = tape.scale(proj, loss_cfg.beta);
        total = tape.binary(Binary::Add, total, weighted)?;
        proj_node = Some(proj);
    }
    let mut task_node = None;
    if let Some(mt) = mt {
        if loss_cfg.delta != 0.0 {
            let logits = task_forward_mounted(tape, projected, mt)?;
            let ce = cross_entropy(tape, logits, label)?;
            let weighted = tape.scale(ce, loss_cfg.delta);
            total = tape.binary(Binary::Add, total, weighted)?;
            task_node = Some(ce);
        }
    }
    Ok(PipelineNodes {
        generated,
        projected,
        chamfer: cd,
        repulsion: rep_node,
        projection: proj_node,
        task: task_node,
        total,
    })
}

/// Train the sampler against a frozen classifier. The classifier enters
/// every tape as constants, so no gradient buffers are ever allocated for
/// it; this is asserted each batch.
pub fn train_sampler(
    train: &Dataset,
    theta: &TaskParams,
    sampler_cfg: &SamplerConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    proj_cfg: &ProjectionConfig,
) -> Result<(SamplerParams, Vec<SamplerEpoch>)> {
    cfg.validate()?;
    let mut params = SamplerParams::init(cfg.seed, sampler_cfg)?;
    let mut shapes: Vec<(usize, usize)> = params.matrices().iter().map(|m| m.shape()).collect();
    shapes.push((1, 1)); // temperature
    let mut adam = Adam::new(cfg.learning_rate, &shapes);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x5A4D_5A4D);
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled_indices(train.clouds.len(), &mut rng);
        let mut sums = [0.0f64; 5]; // total, cd, rep, proj, task
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
            for &ci in batch {
                let lc = &train.clouds[ci];
                let mut tape = Tape::new();
                let ms = mount_sampler(&mut tape, &params, true);
                let mt = mount_task(&mut tape, theta, false);
                let nodes = pipeline_loss(
                    &mut tape,
                    &lc.cloud,
                    lc.label,
                    &ms,
                    sampler_cfg,
                    Some(&mt),
                    loss_cfg,
                    proj_cfg,
                )?;
                let value = tape.value(nodes.total).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::Training(format!(
                        "train_sampler: non-finite loss at epoch {epoch}, cloud {ci}"
                    )));
                }
                sums[0] += value;
                sums[1] += tape.value(nodes.chamfer).get(0, 0);
                if let Some(r) = nodes.repulsion {
                    sums[2] += tape.value(r).get(0, 0);
                }
                if let Some(pl) = nodes.projection {
                    sums[3] += tape.value(pl).get(0, 0);
                }
                if let Some(t) = nodes.task {
                    sums[4] += tape.value(t).get(0, 0);
                }
                let grads = tape.backward(nodes.total)?;
                if mt.matrix_ids().iter().any(|&id| grads.get(id).is_some()) {
                    return Err(Error::Contract(
                        "train_sampler: gradient allocated for frozen classifier weights".into(),
                    ));
                }
                let mut ids = ms.matrix_ids();
                ids.push(ms.temperature);
                for (gi, id) in ids.into_iter().enumerate() {
                    if let Some(g) = grads.get(id) {
                        let dst = acc[gi].data_mut();
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut acc {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let mut t_holder = Matrix::row_vector(&[params.temperature.max(MIN_TEMPERATURE)]);
            {
                let mut targets = params.matrices_mut();
                targets.push(&mut t_holder);
                adam.step(&mut targets, &acc);
            }
            params.temperature = t_holder.get(0, 0).max(MIN_TEMPERATURE);
        }
        let n = train.clouds.len() as f64;
        log.push(SamplerEpoch {
            epoch,
            total: sums[0] / n,
            chamfer: sums[1] / n,
            repulsion: sums[2] / n,
            projection: sums[3] / n,
            task: sums[4] / n,
        });
    }
    Ok((params, log))
}

/// Which sampler an evaluation run uses.
pub enum EvalSampler<'a> {
    Lightn { params: &'a SamplerParams, cfg: &'a SamplerConfig },
    Fps,
    Random { seed: u64 },
    Voxel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Soft-projected points are fed to the classifier.
    Soft,
    /// Nearest-input matching plus dedup/completion; only true input points
    /// reach the classifier.
    Matched,
}

/// Off-tape soft projection of generated points onto the input cloud.
pub fn soft_project_value(
    generated: &PointCloud,
    p: &PointCloud,
    proj_cfg: &ProjectionConfig,
    t: f64,
) -> Result<PointCloud> {
    let mut out = Vec::with_capacity(generated.len());
    for &g in generated.points() {
        let neighbors = knn(p, g, proj_cfg.k.min(p.len()))?;
        let dists: Vec<f64> = neighbors.iter().map(|&(_, d)| d).collect();
        let weights = project_weights(&dists, t)?;
        let mut z = [0.0f64; 3];
        for (&(idx, _), &w) in neighbors.iter().zip(&weights) {
            let pt = p.point(idx);
            for c in 0..3 {
                z[c] += w * pt[c];
            }
        }
        out.push(z);
    }
    PointCloud::new(out)
}

fn eval_points_for_cloud(
    p: &PointCloud,
    sampler: &EvalSampler,
    m: usize,
    mode: EvalMode,
    proj_cfg: &ProjectionConfig,
    cloud_index: usize,
) -> Result<PointCloud> {
    match sampler {
        EvalSampler::Lightn { params, cfg } => {
            let generated = forward(p, params, cfg)?;
            match mode {
                EvalMode::Soft => soft_project_value(
                    &generated,
                    p,
                    proj_cfg,
                    params.temperature.max(MIN_TEMPERATURE),
                ),
                EvalMode::Matched => {
                    let matched = nn_match(&generated, p);
                    let idx = dedup_and_complete(&matched, p, m)?;
                    Ok(p.select(&idx))
                }
            }
        }
        EvalSampler::Fps => Ok(p.select(&fps(p, m, 0)?)),
        EvalSampler::Random { seed } => {
            // stable per-cloud stream so the whole evaluation is reproducible
            let s = seed.wrapping_add((cloud_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            Ok(p.select(&random_sample(p, m, s)?))
        }
        EvalSampler::Voxel => Ok(p.select(&voxel_sample_indices(p, m)?)),
    }
}

/// Classification accuracy of the frozen head over sampled clouds.
pub fn evaluate(
    ds: &Dataset,
    sampler: &EvalSampler,
    theta: &TaskParams,
    m: usize,
    mode: EvalMode,
    proj_cfg: &ProjectionConfig,
) -> Result<f64> {
    let mut hits = 0usize;
    for (ci, lc) in ds.clouds.iter().enumerate() {
        let pts = eval_points_for_cloud(&lc.cloud, sampler, m, mode, proj_cfg, ci)?;
        if mode == EvalMode::Matched {
            // every evaluated point must be a true input point
            for &q in pts.points() {
                if !lc.cloud.points().iter().any(|&ip| ip == q) {
                    return Err(Error::Contract(
                        "matched-mode evaluation produced a non-input point".into(),
                    ));
                }
            }
        }
        if predict(&pts, theta)? == lc.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.clouds.len() as f64)
}
