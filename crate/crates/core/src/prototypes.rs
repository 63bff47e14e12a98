//! Textual, visual and hybrid class prototypes.
//!
//! Textual prototypes come from the frozen text encoder and never change.
//! Visual prototypes are the bridge projection of each class's mean raw
//! feature, tracked by EMA while the bridge trains and recomputed once the
//! bridge is fused. The classifier uses `(1-λ)·text + λ·visual`, re-normalized.

use std::collections::BTreeMap;

use crate::bridge::BridgeState;
use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::matrixkit::{self, argmax, dot, matmul, Matrix};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.9;

/// `{0.0, 0.1, …, 1.0}`
pub fn default_lambda_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEntry {
    pub text: Vec<f64>,
    pub mean_feat: Vec<f64>,
    pub count: u64,
    pub visual: Option<Vec<f64>>,
}

/// Classes that `final_refresh` could not recompute.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RefreshReport {
    pub refreshed: usize,
    pub skipped: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    entries: BTreeMap<u32, ClassEntry>,
    lambda: f64,
    lambda_frozen: bool,
    ema_momentum: f64,
    d_o: usize,
    d: usize,
}

/// `normalize(x̄ · W_eff)`
pub fn visual_prototype(mean_feat: &[f64], bridge: &BridgeState) -> Result<Vec<f64>> {
    if mean_feat.len() != bridge.d_o() {
        return Err(Error::shape(
            "visual_prototype",
            format!("mean width {} vs bridge input {}", mean_feat.len(), bridge.d_o()),
        ));
    }
    if matrixkit::norm(mean_feat) == 0.0 {
        return Err(Error::ZeroNorm("visual_prototype"));
    }
    let z = matmul(&Matrix::row_vector(mean_feat)?, &bridge.effective())?;
    matrixkit::normalize(z.row(0))
}

impl PrototypeBank {
    pub fn new(d_o: usize, d: usize, ema_momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_momentum) {
            return Err(Error::InvalidArgument(format!(
                "ema momentum {ema_momentum} outside [0, 1]"
            )));
        }
        Ok(Self {
            entries: BTreeMap::new(),
            lambda: 0.0,
            lambda_frozen: false,
            ema_momentum,
            d_o,
            d,
        })
    }

    /// Rebuild from checkpointed parts.
    pub fn from_parts(
        d_o: usize,
        d: usize,
        ema_momentum: f64,
        lambda: f64,
        lambda_frozen: bool,
        entries: BTreeMap<u32, ClassEntry>,
    ) -> Result<Self> {
        let mut bank = Self::new(d_o, d, ema_momentum)?;
        for (c, e) in &entries {
            if e.text.len() != d || e.mean_feat.len() != d_o {
                return Err(Error::shape(
                    "PrototypeBank::from_parts",
                    format!("class {c} has mismatched prototype widths"),
                ));
            }
        }
        bank.entries = entries;
        bank.lambda = lambda;
        bank.lambda_frozen = lambda_frozen;
        Ok(bank)
    }

    pub fn d_o(&self) -> usize {
        self.d_o
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn lambda_frozen(&self) -> bool {
        self.lambda_frozen
    }

    pub fn ema_momentum(&self) -> f64 {
        self.ema_momentum
    }

    /// Copy with a fixed `λ`, bypassing the grid search.
    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
        }
        self.lambda = lambda;
        self.lambda_frozen = true;
        Ok(self)
    }

    pub fn classes(&self) -> Vec<u32> {
        self.entries.keys().copied().collect()
    }

    pub fn entries(&self) -> &BTreeMap<u32, ClassEntry> {
        &self.entries
    }

    pub fn entry(&self, c: u32) -> Result<&ClassEntry> {
        self.entries.get(&c).ok_or(Error::MissingPrototype(c))
    }

    pub fn contains(&self, c: u32) -> bool {
        self.entries.contains_key(&c)
    }

    /// Register a class with its (re-normalized) textual prototype.
    pub fn add_class(&mut self, c: u32, text: &[f64]) -> Result<()> {
        if text.len() != self.d {
            return Err(Error::shape(
                "add_class",
                format!("text prototype width {} vs {}", text.len(), self.d),
            ));
        }
        let text = matrixkit::normalize(text)?;
        self.entries
            .entry(c)
            .and_modify(|e| e.text = text.clone())
            .or_insert_with(|| ClassEntry {
                text,
                mean_feat: vec![0.0; self.d_o],
                count: 0,
                visual: None,
            });
        Ok(())
    }

    /// Fold raw features into the per-class running means.
    pub fn ingest(&mut self, data: &LabeledFeatures) -> Result<()> {
        if data.width() != self.d_o && !data.is_empty() {
            return Err(Error::shape(
                "ingest",
                format!("features width {} vs {}", data.width(), self.d_o),
            ));
        }
        for (i, &c) in data.labels.iter().enumerate() {
            let e = self.entries.get_mut(&c).ok_or(Error::UnknownLabel(c))?;
            e.count += 1;
            let inv = 1.0 / e.count as f64;
            for (m, x) in e.mean_feat.iter_mut().zip(data.features.row(i)) {
                *m += (x - *m) * inv;
            }
        }
        Ok(())
    }

    /// Set the visual prototype of `c` from its mean feature and `bridge`.
    pub fn refresh_class(&mut self, c: u32, bridge: &BridgeState) -> Result<()> {
        let e = self.entries.get_mut(&c).ok_or(Error::MissingPrototype(c))?;
        if e.count == 0 {
            return Err(Error::ZeroNorm("visual_prototype"));
        }
        e.visual = Some(visual_prototype(&e.mean_feat, bridge)?);
        Ok(())
    }

    /// Recompute every visual prototype through `bridge`. Classes whose mean
    /// feature is unusable keep their old prototype and are reported.
    pub fn final_refresh(&mut self, bridge: &BridgeState) -> RefreshReport {
        let mut report = RefreshReport::default();
        for c in self.classes() {
            match self.refresh_class(c, bridge) {
                Ok(()) => report.refreshed += 1,
                Err(_) => report.skipped.push(c),
            }
        }
        report
    }

    /// `(1-λ)·text + λ·visual`, before normalization. At `λ = 0` no visual
    /// prototype is needed.
    pub fn hybrid_unnormalized(&self, c: u32, lambda: f64) -> Result<Vec<f64>> {
        let e = self.entry(c)?;
        if lambda == 0.0 && e.visual.is_none() {
            return Ok(e.text.clone());
        }
        let visual = e.visual.as_ref().ok_or(Error::MissingPrototype(c))?;
        Ok(e
            .text
            .iter()
            .zip(visual)
            .map(|(t, v)| (1.0 - lambda) * t + lambda * v)
            .collect())
    }

    /// Unit-norm hybrid prototype at the bank's `λ`.
    pub fn hybrid(&self, c: u32) -> Result<Vec<f64>> {
        self.hybrid_at(c, self.lambda)
    }

    pub fn hybrid_at(&self, c: u32, lambda: f64) -> Result<Vec<f64>> {
        matrixkit::normalize(&self.hybrid_unnormalized(c, lambda)?)
    }

    /// EMA step: `z ← normalize(m·z + (1-m)·normalize(mean(batch)))`.
    pub fn ema_update(&mut self, c: u32, batch_embeds: &Matrix) -> Result<()> {
        if batch_embeds.rows() == 0 {
            return Err(Error::EmptyTask);
        }
        if batch_embeds.cols() != self.d {
            return Err(Error::shape(
                "ema_update",
                format!("embedding width {} vs {}", batch_embeds.cols(), self.d),
            ));
        }
        let m = self.ema_momentum;
        let e = self.entries.get_mut(&c).ok_or(Error::MissingPrototype(c))?;
        let n = batch_embeds.rows() as f64;
        let mean: Vec<f64> = (0..batch_embeds.cols())
            .map(|j| (0..batch_embeds.rows()).map(|r| batch_embeds.get(r, j)).sum::<f64>() / n)
            .collect();
        let target = matrixkit::normalize(&mean)?;
        let next = match &e.visual {
            Some(z) => {
                let mixed: Vec<f64> = z.iter().zip(&target).map(|(a, b)| m * a + (1.0 - m) * b).collect();
                matrixkit::normalize(&mixed)?
            }
            None => target,
        };
        e.visual = Some(next);
        Ok(())
    }

    /// Flat hybrid classification accuracy over `data`, restricted to `classes`.
    pub fn hybrid_accuracy(
        &self,
        data: &LabeledFeatures,
        bridge: &BridgeState,
        classes: &[u32],
        lambda: f64,
    ) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyTask);
        }
        let protos = classes
            .iter()
            .map(|&c| self.hybrid_at(c, lambda))
            .collect::<Result<Vec<_>>>()?;
        let embeds = matrixkit::l2_normalize_rows(&matmul(&data.features, &bridge.effective())?)?;
        let mut hits = 0usize;
        for i in 0..data.len() {
            let u = embeds.row(i);
            let scores: Vec<f64> = protos.iter().map(|p| dot(u, p)).collect();
            if classes[argmax(&scores)] == data.labels[i] {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Pick `λ` from `grid` maximizing flat hybrid training accuracy on the
    /// first task (smaller `λ` wins ties), then freeze it.
    pub fn grid_search_lambda(
        &mut self,
        task1: &LabeledFeatures,
        bridge: &BridgeState,
        grid: &[f64],
    ) -> Result<f64> {
        if grid.is_empty() {
            return Err(Error::InvalidArgument("empty lambda grid".into()));
        }
        if self.lambda_frozen {
            return Err(Error::InvalidArgument("lambda already fixed".into()));
        }
        if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidArgument(format!("lambda {bad} outside [0, 1]")));
        }
        let classes = task1.classes();
        let mut sorted = grid.to_vec();
        sorted.sort_by(f64::total_cmp);
        let mut best = (sorted[0], f64::NEG_INFINITY);
        for &lam in &sorted {
            let acc = self.hybrid_accuracy(task1, bridge, &classes, lam)?;
            if acc > best.1 {
                best = (lam, acc);
            }
        }
        self.lambda = best.0;
        self.lambda_frozen = true;
        Ok(best.0)
    }
}
