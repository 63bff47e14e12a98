//! Cosine-softmax scoring and the two-stage decision.
//!
//! Stage one runs every task's auxiliary head on the raw feature, softmaxes
//! each head separately, pools all `(class, probability)` pairs and keeps the
//! global top `s`. Stage two scores the bridge embedding against the hybrid
//! prototypes of those candidates only.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bridge::{forward, BridgeState, TrainConfig};
use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::matrixkit::{self, argmax, matmul, Matrix};
use crate::prototypes::PrototypeBank;

pub const DEFAULT_CANDIDATES: usize = 5;

/// Linear softmax head over one task's classes, fit on raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxClassifier {
    pub task_id: usize,
    /// `d_o × |Y_t|`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub class_ids: Vec<u32>,
}

impl AuxClassifier {
    pub fn new(task_id: usize, weights: Matrix, bias: Vec<f64>, class_ids: Vec<u32>) -> Result<Self> {
        if weights.cols() != class_ids.len() || bias.len() != class_ids.len() {
            return Err(Error::shape(
                "AuxClassifier::new",
                format!(
                    "weights {:?}, {} biases, {} classes",
                    weights.shape(),
                    bias.len(),
                    class_ids.len()
                ),
            ));
        }
        if bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("AuxClassifier::new"));
        }
        Ok(Self {
            task_id,
            weights,
            bias,
            class_ids,
        })
    }

    pub fn d_o(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_o() {
            return Err(Error::shape(
                "AuxClassifier::logits",
                format!("feature width {} vs {}", x.len(), self.d_o()),
            ));
        }
        let z = matmul(&Matrix::row_vector(x)?, &self.weights)?;
        Ok(z.row(0).iter().zip(&self.bias).map(|(a, b)| a + b).collect())
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(matrixkit::softmax(&self.logits(x)?))
    }
}

/// Mean cross-entropy of a linear head on a batch: `(loss, dW, db)`.
pub fn aux_loss_and_grad(
    weights: &Matrix,
    bias: &[f64],
    class_ids: &[u32],
    batch: &LabeledFeatures,
) -> Result<(f64, Matrix, Vec<f64>)> {
    let index: HashMap<u32, usize> = class_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
    let logits = matmul(&batch.features, weights)?;
    let n = batch.len();
    let k = class_ids.len();
    let inv_n = 1.0 / n as f64;
    let mut g_logits = Matrix::zeros(n, k);
    let mut loss = 0.0;
    for i in 0..n {
        let y = *index.get(&batch.labels[i]).ok_or(Error::UnknownLabel(batch.labels[i]))?;
        let row: Vec<f64> = logits.row(i).iter().zip(bias).map(|(a, b)| a + b).collect();
        let p = matrixkit::softmax(&row);
        loss -= p[y].ln();
        let g = g_logits.row_mut(i);
        for c in 0..k {
            g[c] = (p[c] - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    let grad_w = matrixkit::matmul_tn(&batch.features, &g_logits)?;
    let grad_b = (0..k).map(|c| (0..n).map(|i| g_logits.get(i, c)).sum()).collect();
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("auxiliary loss became {loss}")));
    }
    Ok((loss, grad_w, grad_b))
}

/// Fit a task's auxiliary head from zero by cosine-annealed mini-batch descent.
pub fn train_aux(task_id: usize, task: &LabeledFeatures, cfg: &TrainConfig) -> Result<AuxClassifier> {
    cfg.validate()?;
    if task.is_empty() {
        return Err(Error::EmptyTask);
    }
    let class_ids = task.classes();
    let k = class_ids.len();
    let mut weights = Matrix::zeros(task.width(), k);
    let mut bias = vec![0.0; k];
    let n = task.len();
    let total = cfg.epochs * n.div_ceil(cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = task.select(chunk);
            let lr = cfg.lr_at(step, total);
            let (_, gw, gb) = aux_loss_and_grad(&weights, &bias, &class_ids, &batch)?;
            weights.add_scaled_in_place(-lr, &gw)?;
            for (b, g) in bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
            step += 1;
        }
    }
    AuxClassifier::new(task_id, weights, bias, class_ids)
}

/// `softmax(cos(embed, proto_c) / τ)` over the given prototypes.
pub fn score(embed: &[f64], protos: &[Vec<f64>], tau: f64) -> Result<Vec<f64>> {
    if protos.is_empty() {
        return Err(Error::InvalidArgument("no prototypes to score against".into()));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("tau must be > 0, got {tau}")));
    }
    let logits = protos
        .iter()
        .map(|p| Ok(matrixkit::cosine(embed, p)? / tau))
        .collect::<Result<Vec<f64>>>()?;
    Ok(matrixkit::softmax(&logits))
}

/// Global top-`s` classes after per-head softmax pooling. Output is ordered
/// by descending probability, ties by ascending class id.
pub fn select_candidates(x_o: &[f64], classifiers: &[AuxClassifier], s: usize) -> Result<Vec<u32>> {
    if s == 0 {
        return Err(Error::InvalidArgument("candidate count must be at least 1".into()));
    }
    if classifiers.is_empty() {
        return Err(Error::InvalidArgument("no auxiliary classifiers".into()));
    }
    let mut pooled: Vec<(u32, f64)> = Vec::new();
    for head in classifiers {
        let p = head.probabilities(x_o)?;
        pooled.extend(head.class_ids.iter().copied().zip(p));
    }
    pooled.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    pooled.truncate(s);
    Ok(pooled.into_iter().map(|(c, _)| c).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class_id: u32,
    pub probability: f64,
    /// Stage-two classes, ascending.
    pub candidate_set: Vec<u32>,
}

/// Decide among `classes` by hybrid-prototype scoring of a unit embedding.
fn decide(embed: &[f64], bank: &PrototypeBank, mut classes: Vec<u32>, tau: f64) -> Result<Prediction> {
    classes.sort_unstable();
    classes.dedup();
    let protos = classes.iter().map(|&c| bank.hybrid(c)).collect::<Result<Vec<_>>>()?;
    let p = score(embed, &protos, tau)?;
    let best = argmax(&p);
    Ok(Prediction {
        class_id: classes[best],
        probability: p[best],
        candidate_set: classes,
    })
}

fn embed_one(x_o: &[f64], bridge: &BridgeState) -> Result<Vec<f64>> {
    let z = forward(bridge, None, &Matrix::row_vector(x_o)?)?;
    matrixkit::normalize(z.row(0))
}

/// Two-stage decision for one raw feature.
pub fn classify(
    x_o: &[f64],
    bridge: &BridgeState,
    bank: &PrototypeBank,
    classifiers: &[AuxClassifier],
    s: usize,
    tau: f64,
) -> Result<Prediction> {
    let candidates = select_candidates(x_o, classifiers, s)?;
    decide(&embed_one(x_o, bridge)?, bank, candidates, tau)
}

/// Single-stage decision over every class in the bank.
pub fn classify_flat(x_o: &[f64], bridge: &BridgeState, bank: &PrototypeBank, tau: f64) -> Result<Prediction> {
    decide(&embed_one(x_o, bridge)?, bank, bank.classes(), tau)
}

/// Predictions for every row, hierarchical when `classifiers` is non-empty.
pub fn predict_all(
    data: &LabeledFeatures,
    bridge: &BridgeState,
    bank: &PrototypeBank,
    classifiers: &[AuxClassifier],
    s: usize,
    tau: f64,
) -> Result<Vec<Prediction>> {
    if data.is_empty() {
        return Ok(Vec::new());
    }
    let embeds = matrixkit::l2_normalize_rows(&forward(bridge, None, &data.features)?)?;
    let all = bank.classes();
    (0..data.len())
        .map(|i| {
            let classes = if classifiers.is_empty() {
                all.clone()
            } else {
                select_candidates(data.features.row(i), classifiers, s)?
            };
            decide(embeds.row(i), bank, classes, tau)
        })
        .collect()
}

/// Fraction of rows whose prediction matches the label.
pub fn accuracy(data: &LabeledFeatures, predictions: &[Prediction]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data
        .labels
        .iter()
        .zip(predictions)
        .filter(|(y, p)| **y == p.class_id)
        .count();
    hits as f64 / data.len() as f64
}
