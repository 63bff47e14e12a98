//! Bridge-layer weights and their adaptation.
//!
//! The bridge maps raw features `x_o` (width `d_o`) into the joint embedding
//! space (width `d`) as `z = x_o · W`. Training minimizes cross-entropy over
//! cosine-similarity logits `cos(z, t_c) / τ` against fixed class targets.
//!
//! Three update routes are provided:
//! - full fine-tuning of `W` (first task, the oracle update, the FT baseline)
//! - a constrained low-rank update `ΔW = A·B` with `A` frozen and only `B` trained
//! - a standard low-rank update where both factors train from `B = 0`

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::matrixkit::{self, dot, matmul, matmul_tn, Matrix};

/// Frozen pretrained weights plus the fused updates of all past tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeState {
    w0: Matrix,
    dw_old: Matrix,
}

impl BridgeState {
    pub fn new(w0: Matrix) -> Self {
        let dw_old = Matrix::zeros(w0.rows(), w0.cols());
        Self { w0, dw_old }
    }

    pub fn from_parts(w0: Matrix, dw_old: Matrix) -> Result<Self> {
        if w0.shape() != dw_old.shape() {
            return Err(Error::shape(
                "BridgeState::from_parts",
                format!("w0 {:?} vs dw_old {:?}", w0.shape(), dw_old.shape()),
            ));
        }
        Ok(Self { w0, dw_old })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn dw_old(&self) -> &Matrix {
        &self.dw_old
    }

    pub fn d_o(&self) -> usize {
        self.w0.rows()
    }

    pub fn d(&self) -> usize {
        self.w0.cols()
    }

    /// `W₀ + ΔW_old`
    pub fn effective(&self) -> Matrix {
        self.w0.add(&self.dw_old).expect("shapes fixed at construction")
    }

    /// Fold a dense update into `ΔW_old`.
    pub fn fuse_delta(&self, delta: &Matrix) -> Result<BridgeState> {
        let dw_old = self.dw_old.add(delta).map_err(|_| {
            Error::shape(
                "fuse",
                format!("update {:?} vs bridge {:?}", delta.shape(), self.w0.shape()),
            )
        })?;
        Ok(BridgeState {
            w0: self.w0.clone(),
            dw_old,
        })
    }
}

/// Low-rank update `ΔW = A·B`; `A` is `d_o × k`, `B` is `k × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraUpdate {
    a: Matrix,
    b: Matrix,
}

impl LoraUpdate {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(Error::shape(
                "LoraUpdate::new",
                format!("A {:?} vs B {:?}", a.shape(), b.shape()),
            ));
        }
        Ok(Self { a, b })
    }

    /// `A` frozen to a subspace basis with `B = 0`.
    pub fn zero(a: Matrix, d: usize) -> Self {
        let k = a.cols();
        Self {
            a,
            b: Matrix::zeros(k, d),
        }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn delta(&self) -> Matrix {
        matmul(&self.a, &self.b).expect("shapes checked at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub oracle_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.05,
            epochs: 5,
            batch_size: 64,
            tau: 0.01,
            oracle_epochs: 1,
            seed: 1993,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr0 must be >= 0, got {}", self.lr0)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Cosine-annealed step size for `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if total == 0 {
            return self.lr0;
        }
        0.5 * self.lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
    }
}

/// Class targets for the training loss: one unit row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTargets {
    class_ids: Vec<u32>,
    protos: Matrix,
    index: HashMap<u32, usize>,
}

impl ClassTargets {
    /// Rows of `protos` are re-normalized to unit length.
    pub fn new(class_ids: Vec<u32>, protos: &Matrix) -> Result<Self> {
        if class_ids.len() != protos.rows() {
            return Err(Error::shape(
                "ClassTargets::new",
                format!("{} ids for {} prototypes", class_ids.len(), protos.rows()),
            ));
        }
        if class_ids.is_empty() {
            return Err(Error::InvalidArgument("no class targets".into()));
        }
        let index = class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        Ok(Self {
            class_ids,
            protos: matrixkit::l2_normalize_rows(protos)?,
            index,
        })
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn protos(&self) -> &Matrix {
        &self.protos
    }

    pub fn dim(&self) -> usize {
        self.protos.cols()
    }

    fn rows_for(&self, labels: &[u32]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| self.index.get(l).copied().ok_or(Error::UnknownLabel(*l)))
            .collect()
    }
}

/// Receives each training batch's embeddings (computed before the step).
pub trait BatchObserver {
    fn observe(&mut self, labels: &[u32], embeds: &Matrix) -> Result<()>;
}

impl<F: FnMut(&[u32], &Matrix) -> Result<()>> BatchObserver for F {
    fn observe(&mut self, labels: &[u32], embeds: &Matrix) -> Result<()> {
        self(labels, embeds)
    }
}

/// `x_o · (W₀ + ΔW_old) + (x_o · A) · B`
pub fn forward(bridge: &BridgeState, update: Option<&LoraUpdate>, x_o: &Matrix) -> Result<Matrix> {
    if x_o.cols() != bridge.d_o() {
        return Err(Error::shape(
            "forward",
            format!("features width {} vs bridge input {}", x_o.cols(), bridge.d_o()),
        ));
    }
    let mut z = matmul(x_o, &bridge.effective())?;
    if let Some(u) = update {
        if u.a.rows() != bridge.d_o() || u.b.cols() != bridge.d() {
            return Err(Error::shape(
                "forward",
                format!("update {:?}x{:?} vs bridge {:?}", u.a.shape(), u.b.shape(), bridge.w0.shape()),
            ));
        }
        let low = matmul(&matmul(x_o, &u.a)?, &u.b)?;
        z.add_scaled_in_place(1.0, &low)?;
    }
    Ok(z)
}

/// Mean cosine-softmax cross-entropy of embeddings `z` and its gradient w.r.t. `z`.
pub fn embedding_loss_and_grad(
    z: &Matrix,
    labels: &[u32],
    targets: &ClassTargets,
    tau: f64,
) -> Result<(f64, Matrix)> {
    if z.cols() != targets.dim() {
        return Err(Error::shape(
            "embedding_loss",
            format!("embedding width {} vs targets {}", z.cols(), targets.dim()),
        ));
    }
    let rows = targets.rows_for(labels)?;
    let n = z.rows();
    let d = z.cols();
    let inv_n = 1.0 / n as f64;
    let protos = targets.protos();
    let mut grad = Matrix::zeros(n, d);
    let mut loss = 0.0;
    for (i, &y) in rows.iter().enumerate() {
        let zi = z.row(i);
        let norm = matrixkit::norm(zi);
        if norm == 0.0 {
            return Err(Error::ZeroNorm("embedding_loss"));
        }
        let u: Vec<f64> = zi.iter().map(|v| v / norm).collect();
        let logits: Vec<f64> = (0..protos.rows()).map(|c| dot(&u, protos.row(c)) / tau).collect();
        let p = matrixkit::softmax(&logits);
        loss -= p[y].ln();
        // dL/du = Σ_c (p_c - 1[c=y]) t_c / τ
        let mut g_u = vec![0.0; d];
        for (c, pc) in p.iter().enumerate() {
            let coeff = (pc - if c == y { 1.0 } else { 0.0 }) / tau;
            if coeff == 0.0 {
                continue;
            }
            for (g, t) in g_u.iter_mut().zip(protos.row(c)) {
                *g += coeff * t;
            }
        }
        // project out the radial component of u = z / ‖z‖
        let radial = dot(&g_u, &u);
        let g_row = grad.row_mut(i);
        for j in 0..d {
            g_row[j] = (g_u[j] - radial * u[j]) / norm * inv_n;
        }
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("loss became {loss}")));
    }
    Ok((loss, grad))
}

/// Loss of a full weight matrix on a batch and its gradient w.r.t. that matrix.
pub fn full_loss_and_grad(
    weights: &Matrix,
    batch: &LabeledFeatures,
    targets: &ClassTargets,
    tau: f64,
) -> Result<(f64, Matrix)> {
    let z = matmul(&batch.features, weights)?;
    let (loss, g_z) = embedding_loss_and_grad(&z, &batch.labels, targets, tau)?;
    Ok((loss, matmul_tn(&batch.features, &g_z)?))
}

/// Loss through `forward` with a frozen `A`; returns the gradient w.r.t. `B`.
pub fn constrained_loss_and_grad(
    bridge: &BridgeState,
    update: &LoraUpdate,
    batch: &LabeledFeatures,
    targets: &ClassTargets,
    tau: f64,
) -> Result<(f64, Matrix)> {
    let z = forward(bridge, Some(update), &batch.features)?;
    let (loss, g_z) = embedding_loss_and_grad(&z, &batch.labels, targets, tau)?;
    let xa = matmul(&batch.features, &update.a)?;
    Ok((loss, matmul_tn(&xa, &g_z)?))
}

/// Gradients w.r.t. both low-rank factors: `(loss, dA, dB)`.
pub fn lora_loss_and_grads(
    bridge: &BridgeState,
    update: &LoraUpdate,
    batch: &LabeledFeatures,
    targets: &ClassTargets,
    tau: f64,
) -> Result<(f64, Matrix, Matrix)> {
    let z = forward(bridge, Some(update), &batch.features)?;
    let (loss, g_z) = embedding_loss_and_grad(&z, &batch.labels, targets, tau)?;
    let xa = matmul(&batch.features, &update.a)?;
    let grad_b = matmul_tn(&xa, &g_z)?;
    let grad_a = matmul_tn(&batch.features, &matmul(&g_z, &update.b.transpose())?)?;
    Ok((loss, grad_a, grad_b))
}

/// Mean loss of `weights` over a whole labeled set.
pub fn dataset_loss(
    weights: &Matrix,
    data: &LabeledFeatures,
    targets: &ClassTargets,
    tau: f64,
) -> Result<f64> {
    let z = matmul(&data.features, weights)?;
    Ok(embedding_loss_and_grad(&z, &data.labels, targets, tau)?.0)
}

/// Shuffled mini-batch loop with a cosine-annealed step size.
fn run_sgd(
    data: &LabeledFeatures,
    cfg: &TrainConfig,
    epochs: usize,
    mut step: impl FnMut(&LabeledFeatures, f64) -> Result<()>,
) -> Result<()> {
    let n = data.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total = epochs * batches_per_epoch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select(chunk);
            step(&batch, cfg.lr_at(t, total))?;
            t += 1;
        }
    }
    Ok(())
}

fn check_task(task: &LabeledFeatures, bridge: &BridgeState, targets: &ClassTargets) -> Result<()> {
    if task.is_empty() {
        return Err(Error::EmptyTask);
    }
    if task.width() != bridge.d_o() {
        return Err(Error::shape(
            "train",
            format!("features width {} vs bridge input {}", task.width(), bridge.d_o()),
        ));
    }
    if targets.dim() != bridge.d() {
        return Err(Error::shape(
            "train",
            format!("target width {} vs bridge output {}", targets.dim(), bridge.d()),
        ));
    }
    targets.rows_for(&task.labels)?;
    Ok(())
}

/// Fine-tune the whole bridge for `epochs`, starting from the effective
/// weights. Returns the dense change; `bridge` itself is not modified.
pub fn finetune_full(
    bridge: &BridgeState,
    task: &LabeledFeatures,
    targets: &ClassTargets,
    cfg: &TrainConfig,
    epochs: usize,
    observer: Option<&mut dyn BatchObserver>,
) -> Result<Matrix> {
    cfg.validate()?;
    check_task(task, bridge, targets)?;
    let before = bridge.effective();
    if epochs == 0 {
        return Ok(Matrix::zeros(bridge.d_o(), bridge.d()));
    }
    let mut w = before.clone();
    let mut observer = observer;
    run_sgd(task, cfg, epochs, |batch, lr| {
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(&batch.labels, &matmul(&batch.features, &w)?)?;
        }
        let (_, grad) = full_loss_and_grad(&w, batch, targets, cfg.tau)?;
        w.add_scaled_in_place(-lr, &grad)
    })?;
    if !w.is_finite() {
        return Err(Error::Diverged("bridge weights became non-finite".into()));
    }
    w.sub(&before)
}

/// Brief unconstrained fine-tune (`oracle_epochs`) used to seed `B`.
pub fn oracle_finetune(
    bridge: &BridgeState,
    task: &LabeledFeatures,
    targets: &ClassTargets,
    cfg: &TrainConfig,
) -> Result<Matrix> {
    finetune_full(bridge, task, targets, cfg, cfg.oracle_epochs, None)
}

/// `B₀ = P*ᵀ ΔW̃`, the least-squares fit of `ΔW̃` within `span(P*)` when `P*`
/// has orthonormal columns.
pub fn init_b(p_star: &Matrix, dw_oracle: &Matrix) -> Result<Matrix> {
    if p_star.rows() != dw_oracle.rows() {
        return Err(Error::shape(
            "init_b",
            format!("basis {:?} vs update {:?}", p_star.shape(), dw_oracle.shape()),
        ));
    }
    matmul_tn(p_star, dw_oracle)
}

/// Train only `B` of a frozen-`A` update.
pub fn train_constrained(
    bridge: &BridgeState,
    update: &LoraUpdate,
    task: &LabeledFeatures,
    targets: &ClassTargets,
    cfg: &TrainConfig,
) -> Result<LoraUpdate> {
    train_constrained_observed(bridge, update, task, targets, cfg, None)
}

pub fn train_constrained_observed(
    bridge: &BridgeState,
    update: &LoraUpdate,
    task: &LabeledFeatures,
    targets: &ClassTargets,
    cfg: &TrainConfig,
    observer: Option<&mut dyn BatchObserver>,
) -> Result<LoraUpdate> {
    cfg.validate()?;
    check_task(task, bridge, targets)?;
    let mut current = update.clone();
    let mut observer = observer;
    run_sgd(task, cfg, cfg.epochs, |batch, lr| {
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(&batch.labels, &forward(bridge, Some(&current), &batch.features)?)?;
        }
        let (_, grad_b) = constrained_loss_and_grad(bridge, &current, batch, targets, cfg.tau)?;
        current.b.add_scaled_in_place(-lr, &grad_b)
    })?;
    if !current.b.is_finite() {
        return Err(Error::Diverged("B became non-finite".into()));
    }
    Ok(current)
}

/// Standard LoRA initialization: Gaussian `A` scaled by `1/√d_o`, `B = 0`.
pub fn standard_lora_init(d_o: usize, d: usize, k: usize, seed: u64) -> LoraUpdate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d_o as f64).sqrt();
    let data = (0..d_o * k)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    LoraUpdate::zero(Matrix::from_raw(d_o, k, data), d)
}

/// Train both factors of an unconstrained low-rank update.
pub fn train_standard_lora(
    bridge: &BridgeState,
    update: &LoraUpdate,
    task: &LabeledFeatures,
    targets: &ClassTargets,
    cfg: &TrainConfig,
    observer: Option<&mut dyn BatchObserver>,
) -> Result<LoraUpdate> {
    cfg.validate()?;
    check_task(task, bridge, targets)?;
    let mut current = update.clone();
    let mut observer = observer;
    run_sgd(task, cfg, cfg.epochs, |batch, lr| {
        if let Some(obs) = observer.as_deref_mut() {
            obs.observe(&batch.labels, &forward(bridge, Some(&current), &batch.features)?)?;
        }
        let (_, grad_a, grad_b) = lora_loss_and_grads(bridge, &current, batch, targets, cfg.tau)?;
        current.a.add_scaled_in_place(-lr, &grad_a)?;
        current.b.add_scaled_in_place(-lr, &grad_b)
    })?;
    if !current.a.is_finite() || !current.b.is_finite() {
        return Err(Error::Diverged("LoRA factors became non-finite".into()));
    }
    Ok(current)
}

/// `ΔW_old ← ΔW_old + A·B`
pub fn fuse(bridge: &BridgeState, update: &LoraUpdate) -> Result<BridgeState> {
    if update.a.rows() != bridge.d_o() || update.b.cols() != bridge.d() {
        return Err(Error::shape(
            "fuse",
            format!("update {:?}·{:?} vs bridge {:?}", update.a.shape(), update.b.shape(), bridge.w0.shape()),
        ));
    }
    bridge.fuse_delta(&update.delta())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrixkit::orthonormal_columns;
    use crate::subspace::ScatterState;

    fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Gaussian clusters around random unit means; targets are the means projected by `w`.
    fn clustered_task(
        classes: usize,
        per_class: usize,
        d_o: usize,
        spread: f64,
        w: &Matrix,
        rng: &mut ChaCha8Rng,
    ) -> (LabeledFeatures, ClassTargets) {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..d_o).map(|_| rng.sample(StandardNormal)).collect();
                matrixkit::normalize(&v).unwrap()
            })
            .collect();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, m) in means.iter().enumerate() {
            for _ in 0..per_class {
                rows.push(m.iter().map(|x| x + spread * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<f64>>());
                labels.push(c as u32);
            }
        }
        let task = LabeledFeatures::new(labels, Matrix::from_rows(&rows).unwrap()).unwrap();
        let proj = matmul(&Matrix::from_rows(&means).unwrap(), w).unwrap();
        let targets = ClassTargets::new((0..classes as u32).collect(), &proj).unwrap();
        (task, targets)
    }

    fn accuracy(weights: &Matrix, data: &LabeledFeatures, targets: &ClassTargets) -> f64 {
        let z = matmul(&data.features, weights).unwrap();
        let mut hits = 0;
        for i in 0..data.len() {
            let scores: Vec<f64> = (0..targets.protos().rows())
                .map(|c| matrixkit::cosine(z.row(i), targets.protos().row(c)).unwrap())
                .collect();
            if targets.class_ids()[matrixkit::argmax(&scores)] == data.labels[i] {
                hits += 1;
            }
        }
        hits as f64 / data.len() as f64
    }

    #[test]
    fn forward_identity_and_zero_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = gaussian(5, 4, &mut rng);
        let bridge = BridgeState::new(Matrix::identity(4));
        assert_eq!(forward(&bridge, None, &x).unwrap(), x);

        let p = orthonormal_columns(&gaussian(4, 2, &mut rng)).unwrap();
        let upd = LoraUpdate::zero(p, 4);
        assert_eq!(forward(&bridge, Some(&upd), &x).unwrap(), x);
        assert!(forward(&bridge, None, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn forward_distributes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w0 = gaussian(8, 4, &mut rng);
        let dw = gaussian(8, 4, &mut rng);
        let bridge = BridgeState::from_parts(w0.clone(), dw.clone()).unwrap();
        let p = orthonormal_columns(&gaussian(8, 2, &mut rng)).unwrap();
        let upd = LoraUpdate::new(p.clone(), gaussian(2, 4, &mut rng)).unwrap();
        let x = gaussian(6, 8, &mut rng);
        let explicit = matmul(&x, &w0)
            .unwrap()
            .add(&matmul(&x, &dw).unwrap())
            .unwrap()
            .add(&matmul(&matmul(&x, &p).unwrap(), upd.b()).unwrap())
            .unwrap();
        assert!(forward(&bridge, Some(&upd), &x).unwrap().max_abs_diff(&explicit) <= 1e-12);
    }

    #[test]
    fn oracle_zero_epochs_and_single_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w0 = gaussian(6, 3, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        let (task, targets) = clustered_task(2, 10, 6, 0.1, &w0, &mut rng);
        let cfg = TrainConfig { oracle_epochs: 0, ..TrainConfig::default() };
        let d = oracle_finetune(&bridge, &task, &targets, &cfg).unwrap();
        assert_eq!(d, Matrix::zeros(6, 3));

        let (single, t1) = clustered_task(1, 10, 6, 0.1, &w0, &mut rng);
        let d = oracle_finetune(&bridge, &single, &t1, &TrainConfig::default()).unwrap();
        assert_eq!(d, Matrix::zeros(6, 3));
    }

    #[test]
    fn oracle_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let w0 = gaussian(6, 3, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        let (task, targets) = clustered_task(2, 4, 6, 0.1, &w0, &mut rng);
        let empty = LabeledFeatures::empty(6);
        assert!(matches!(
            oracle_finetune(&bridge, &empty, &targets, &TrainConfig::default()),
            Err(Error::EmptyTask)
        ));
        let mut bad = task.clone();
        bad.labels[0] = 99;
        assert!(matches!(
            oracle_finetune(&bridge, &bad, &targets, &TrainConfig::default()),
            Err(Error::UnknownLabel(99))
        ));
    }

    #[test]
    fn oracle_reduces_loss_and_leaves_bridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let w0 = gaussian(16, 8, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        // targets from a different projection so there is something to learn
        let w_true = gaussian(16, 8, &mut rng);
        let (task, targets) = clustered_task(2, 40, 16, 0.2, &w_true, &mut rng);
        let before = dataset_loss(&bridge.effective(), &task, &targets, 0.01).unwrap();
        let dw = oracle_finetune(&bridge, &task, &targets, &TrainConfig::default()).unwrap();
        let after = dataset_loss(&bridge.effective().add(&dw).unwrap(), &task, &targets, 0.01).unwrap();
        assert!(after <= before, "{after} > {before}");
        assert_eq!(bridge.dw_old(), &Matrix::zeros(16, 8));
    }

    #[test]
    fn init_b_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = orthonormal_columns(&gaussian(10, 3, &mut rng)).unwrap();
        let c = gaussian(3, 4, &mut rng);
        let b0 = init_b(&p, &matmul(&p, &c).unwrap()).unwrap();
        assert!(b0.max_abs_diff(&c) <= 1e-12);

        // columns orthogonal to span(P): project a random matrix out of it
        let r = gaussian(10, 4, &mut rng);
        let ortho = r.sub(&matmul(&p, &matmul_tn(&p, &r).unwrap()).unwrap()).unwrap();
        assert!(init_b(&p, &ortho).unwrap().max_abs_diff(&Matrix::zeros(3, 4)) <= 1e-12);

        let dw = gaussian(10, 4, &mut rng);
        let b0 = init_b(&p, &dw).unwrap();
        let resid = |b: &Matrix| dw.sub(&matmul(&p, b).unwrap()).unwrap().frobenius();
        let best = resid(&b0);
        for _ in 0..100 {
            let e = gaussian(3, 4, &mut rng);
            let e = e.scale(0.1 / e.frobenius());
            assert!(best <= resid(&b0.add(&e).unwrap()));
        }
        assert!(init_b(&p, &Matrix::zeros(9, 4)).is_err());
    }

    fn finite_difference_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_o, d, k) = (8, 5, 3);
        let bridge = BridgeState::from_parts(gaussian(d_o, d, &mut rng), gaussian(d_o, d, &mut rng).scale(0.1)).unwrap();
        let w_true = gaussian(d_o, d, &mut rng);
        let (task, targets) = clustered_task(3, 4, d_o, 0.3, &w_true, &mut rng);
        let p = orthonormal_columns(&gaussian(d_o, k, &mut rng)).unwrap();
        let upd = LoraUpdate::new(p, gaussian(k, d, &mut rng)).unwrap();
        let tau = 0.5;
        let (_, grad) = constrained_loss_and_grad(&bridge, &upd, &task, &targets, tau).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for r in 0..k {
            for c in 0..d {
                let mut plus = upd.clone();
                plus.b.set(r, c, upd.b.get(r, c) + h).unwrap();
                let mut minus = upd.clone();
                minus.b.set(r, c, upd.b.get(r, c) - h).unwrap();
                let lp = constrained_loss_and_grad(&bridge, &plus, &task, &targets, tau).unwrap().0;
                let lm = constrained_loss_and_grad(&bridge, &minus, &task, &targets, tau).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                let an = grad.get(r, c);
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8));
            }
        }
        worst
    }

    #[test]
    fn constrained_gradient_matches_finite_differences() {
        for seed in 0..3 {
            let err = finite_difference_check(100 + seed);
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn lora_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let (d_o, d, k) = (6, 4, 2);
        let bridge = BridgeState::new(gaussian(d_o, d, &mut rng));
        let w_true = gaussian(d_o, d, &mut rng);
        let (task, targets) = clustered_task(3, 3, d_o, 0.3, &w_true, &mut rng);
        let upd = LoraUpdate::new(gaussian(d_o, k, &mut rng), gaussian(k, d, &mut rng)).unwrap();
        let tau = 0.5;
        let (_, ga, _) = lora_loss_and_grads(&bridge, &upd, &task, &targets, tau).unwrap();
        let h = 1e-5;
        for r in 0..d_o {
            for c in 0..k {
                let mut plus = upd.clone();
                plus.a.set(r, c, upd.a.get(r, c) + h).unwrap();
                let mut minus = upd.clone();
                minus.a.set(r, c, upd.a.get(r, c) - h).unwrap();
                let fd = (lora_loss_and_grads(&bridge, &plus, &task, &targets, tau).unwrap().0
                    - lora_loss_and_grads(&bridge, &minus, &task, &targets, tau).unwrap().0)
                    / (2.0 * h);
                let an = ga.get(r, c);
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-8) <= 1e-4);
            }
        }
    }

    #[test]
    fn zero_lr_keeps_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let w0 = gaussian(8, 4, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        let (task, targets) = clustered_task(3, 10, 8, 0.2, &gaussian(8, 4, &mut rng), &mut rng);
        let upd = LoraUpdate::new(orthonormal_columns(&gaussian(8, 2, &mut rng)).unwrap(), gaussian(2, 4, &mut rng)).unwrap();
        let cfg = TrainConfig { lr0: 0.0, ..TrainConfig::default() };
        let out = train_constrained(&bridge, &upd, &task, &targets, &cfg).unwrap();
        assert_eq!(out, upd);
    }

    #[test]
    fn constrained_training_improves_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let (d_o, d, k) = (32, 16, 8);
        let w0 = gaussian(d_o, d, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        let w_true = gaussian(d_o, d, &mut rng);
        let (task, targets) = clustered_task(5, 40, d_o, 0.15, &w_true, &mut rng);
        let p = orthonormal_columns(&gaussian(d_o, k, &mut rng)).unwrap();
        let dw = oracle_finetune(&bridge, &task, &targets, &TrainConfig::default()).unwrap();
        let upd = LoraUpdate::new(p.clone(), init_b(&p, &dw).unwrap()).unwrap();
        let before = accuracy(&bridge.effective(), &task, &targets);
        let trained = train_constrained(&bridge, &upd, &task, &targets, &TrainConfig::default()).unwrap();
        let after = accuracy(&fuse(&bridge, &trained).unwrap().effective(), &task, &targets);
        assert!(after >= before, "{after} < {before}");
        assert_eq!(trained.a(), &p);
    }

    #[test]
    fn fuse_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let bridge = BridgeState::new(gaussian(6, 3, &mut rng));
        let p = orthonormal_columns(&gaussian(6, 2, &mut rng)).unwrap();
        assert_eq!(fuse(&bridge, &LoraUpdate::zero(p.clone(), 3)).unwrap(), bridge);

        let u1 = LoraUpdate::new(p.clone(), gaussian(2, 3, &mut rng)).unwrap();
        let u2 = LoraUpdate::new(p.clone(), gaussian(2, 3, &mut rng)).unwrap();
        let ab = fuse(&fuse(&bridge, &u1).unwrap(), &u2).unwrap();
        let ba = fuse(&fuse(&bridge, &u2).unwrap(), &u1).unwrap();
        let sum = u1.delta().add(&u2.delta()).unwrap();
        assert!(ab.dw_old().max_abs_diff(&sum) <= 1e-12);
        assert!(ab.dw_old().max_abs_diff(ba.dw_old()) <= 1e-12);
        assert_eq!(ab.w0(), bridge.w0());

        let x = gaussian(5, 6, &mut rng);
        let pre = forward(&bridge, Some(&u1), &x).unwrap();
        let post = forward(&fuse(&bridge, &u1).unwrap(), None, &x).unwrap();
        assert!(pre.max_abs_diff(&post) <= 1e-12);

        let bad = LoraUpdate::zero(orthonormal_columns(&gaussian(5, 2, &mut rng)).unwrap(), 3);
        assert!(fuse(&bridge, &bad).is_err());
    }

    #[test]
    fn trained_update_respects_interference_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let (d_o, d, k) = (16, 6, 4);
        let w0 = gaussian(d_o, d, &mut rng);
        let bridge = BridgeState::new(w0.clone());
        let x_old = gaussian(50, d_o, &mut rng);
        let sub = ScatterState::new(d_o).accumulate(&x_old).unwrap().safe_subspace(k).unwrap();
        let (task, targets) = clustered_task(3, 20, d_o, 0.2, &gaussian(d_o, d, &mut rng), &mut rng);
        let dw = oracle_finetune(&bridge, &task, &targets, &TrainConfig::default()).unwrap();
        let upd = LoraUpdate::new(sub.basis.clone(), init_b(&sub.basis, &dw).unwrap()).unwrap();
        let trained = train_constrained(&bridge, &upd, &task, &targets, &TrainConfig::default()).unwrap();
        let delta = trained.delta();
        let lhs = matmul(&x_old, &delta).unwrap().frobenius();
        assert!(lhs <= sub.residual_energy.sqrt() * trained.b().frobenius() + 1e-9);
        // row-space confinement
        let proj = matmul(&sub.basis, &matmul_tn(&sub.basis, &delta).unwrap()).unwrap();
        assert!(delta.sub(&proj).unwrap().frobenius() <= 1e-10);
        // old-feature stability
        let fused = fuse(&bridge, &trained).unwrap();
        let drift = matmul(&x_old, &fused.effective()).unwrap().sub(&matmul(&x_old, &bridge.effective()).unwrap()).unwrap();
        assert!(drift.frobenius() <= sub.residual_energy.sqrt() * trained.b().frobenius() + 1e-9);
    }

    #[test]
    fn exact_null_space_gives_zero_interference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (d_o, d, k) = (10, 4, 3);
        // old features confined to the first d_o - k coordinates
        let mut x_old = gaussian(30, d_o, &mut rng);
        for r in 0..30 {
            for c in (d_o - k)..d_o {
                x_old.set(r, c, 0.0).unwrap();
            }
        }
        let sub = ScatterState::new(d_o).accumulate(&x_old).unwrap().safe_subspace(k).unwrap();
        let upd = LoraUpdate::new(sub.basis.clone(), gaussian(k, d, &mut rng)).unwrap();
        assert!(matmul(&x_old, &upd.delta()).unwrap().frobenius() <= 1e-9);
    }

    #[test]
    fn lr_schedule_is_cosine() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0, 10), 0.05);
        assert!((cfg.lr_at(5, 10) - 0.025).abs() < 1e-15);
        assert!(cfg.lr_at(9, 10) > 0.0);
        assert!(TrainConfig { tau: 0.0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..cfg }.validate().is_err());
    }
}
