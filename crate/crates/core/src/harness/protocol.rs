//! The incremental protocol: adapt, fuse, accumulate, refresh, evaluate.
//!
//! [`Pipeline`] holds every piece of persistent state. It never stores raw
//! training features; the only per-sample information that survives a task is
//! folded into the scatter matrix, the class means and the auxiliary heads.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use crate::bridge::{
    self, BatchObserver, BridgeState, ClassTargets, LoraUpdate, TrainConfig,
};
use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::harness::config::{Method, RunConfig};
use crate::harness::format::TextPrototypes;
use crate::harness::metrics::{MemoryReport, RunMetrics};
use crate::harness::stream::{Task, TaskStream};
use crate::inference::{self, AuxClassifier, Prediction};
use crate::matrixkit::Matrix;
use crate::prototypes::PrototypeBank;
use crate::subspace::{ScatterState, SafeSubspace};

/// How a task changed the bridge.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdateKind {
    /// Dense change from unconstrained fine-tuning.
    Full,
    /// Low-rank update with `A` frozen to the safe subspace.
    Constrained {
        subspace: SafeSubspace,
        b_init: Matrix,
        update: LoraUpdate,
    },
    /// Low-rank update with both factors trained.
    Lora { update: LoraUpdate },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    /// 0-based task index.
    pub task: usize,
    pub classes: Vec<u32>,
    pub kind: UpdateKind,
    /// Change fused into the bridge by this task.
    pub delta: Matrix,
    pub accuracy: f64,
    pub old_class_accuracy: Option<f64>,
    pub lambda: f64,
}

/// Persistent state of an incremental run.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub config: RunConfig,
    pub bridge: BridgeState,
    pub scatter: ScatterState,
    pub bank: PrototypeBank,
    pub aux: Vec<AuxClassifier>,
    pub tasks_done: usize,
    pub stage_accuracies: Vec<f64>,
    pub old_class_accuracies: Vec<Option<f64>>,
}

/// Training seed for task `t`, independent of anything but the base seed.
pub fn task_seed(base: u64, t: usize) -> u64 {
    base.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

struct EmaObserver<'a> {
    bank: &'a mut PrototypeBank,
}

impl BatchObserver for EmaObserver<'_> {
    fn observe(&mut self, labels: &[u32], embeds: &Matrix) -> Result<()> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        for (c, rows) in groups {
            self.bank.ema_update(c, &embeds.select_rows(&rows))?;
        }
        Ok(())
    }
}

impl Pipeline {
    pub fn new(w0: Matrix, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (d_o, d) = w0.shape();
        Ok(Self {
            bridge: BridgeState::new(w0),
            scatter: ScatterState::with_normalization(d_o, config.normalize_scatter),
            bank: PrototypeBank::new(d_o, d, config.ema_momentum)?,
            aux: Vec::new(),
            tasks_done: 0,
            stage_accuracies: Vec::new(),
            old_class_accuracies: Vec::new(),
            config,
        })
    }

    pub fn d_o(&self) -> usize {
        self.bridge.d_o()
    }

    pub fn d(&self) -> usize {
        self.bridge.d()
    }

    fn task_config(&self, t: usize) -> TrainConfig {
        TrainConfig {
            seed: task_seed(self.config.train.seed, t),
            ..self.config.train.clone()
        }
    }

    fn targets(&self, classes: &[u32]) -> Result<ClassTargets> {
        let ids: Vec<u32> = if self.config.include_old_negatives {
            self.bank.classes()
        } else {
            let mut v = classes.to_vec();
            v.sort_unstable();
            v
        };
        let rows = ids
            .iter()
            .map(|&c| self.bank.entry(c).map(|e| e.text.clone()))
            .collect::<Result<Vec<_>>>()?;
        ClassTargets::new(ids, &Matrix::from_rows(&rows)?)
    }

    /// Learn one task. Evaluation is left to [`Pipeline::evaluate`].
    pub fn learn_task(&mut self, task: &Task, text: &TextPrototypes) -> Result<(UpdateKind, Matrix)> {
        let t = self.tasks_done;
        let stage = |e: Error| Error::Stage {
            task: t + 1,
            source: Box::new(e),
        };
        self.learn_inner(task, text, t).map_err(stage)
    }

    fn learn_inner(&mut self, task: &Task, text: &TextPrototypes, t: usize) -> Result<(UpdateKind, Matrix)> {
        if task.train.is_empty() {
            return Err(Error::EmptyTask);
        }
        if task.train.width() != self.d_o() {
            return Err(Error::shape(
                "learn_task",
                format!("features width {} vs bridge input {}", task.train.width(), self.d_o()),
            ));
        }
        let own: HashSet<u32> = task.classes.iter().copied().collect();
        for &c in &task.classes {
            if self.bank.contains(c) {
                return Err(Error::InvalidArgument(format!("class {c} was already learned")));
            }
        }
        if let Some(l) = task.train.labels.iter().find(|l| !own.contains(l)) {
            return Err(Error::UnknownLabel(*l));
        }

        for &c in &task.classes {
            let proto = text.get(c).ok_or(Error::MissingPrototype(c))?;
            self.bank.add_class(c, proto)?;
        }
        self.bank.ingest(&task.train)?;
        for c in task.train.classes() {
            self.bank.refresh_class(c, &self.bridge)?;
        }

        let (d_o, d) = (self.d_o(), self.d());
        let rank = self.config.rank_for(d_o);
        let cfg = self.task_config(t);
        let targets = self.targets(&task.classes)?;
        let mut observer = EmaObserver { bank: &mut self.bank };
        let (kind, next) = if t == 0 || self.config.method == Method::Finetune {
            let delta = bridge::finetune_full(&self.bridge, &task.train, &targets, &cfg, cfg.epochs, Some(&mut observer))?;
            (UpdateKind::Full, self.bridge.fuse_delta(&delta)?)
        } else if self.config.method == Method::Bofa {
            let oracle = bridge::oracle_finetune(&self.bridge, &task.train, &targets, &cfg)?;
            let subspace = self.scatter.safe_subspace(rank)?;
            let b_init = bridge::init_b(&subspace.basis, &oracle)?;
            let start = LoraUpdate::new(subspace.basis.clone(), b_init.clone())?;
            let update = bridge::train_constrained_observed(
                &self.bridge,
                &start,
                &task.train,
                &targets,
                &cfg,
                Some(&mut observer),
            )?;
            let next = bridge::fuse(&self.bridge, &update)?;
            (
                UpdateKind::Constrained {
                    subspace,
                    b_init,
                    update,
                },
                next,
            )
        } else {
            let start = bridge::standard_lora_init(d_o, d, rank, cfg.seed ^ 0x5bd1_e995);
            let update =
                bridge::train_standard_lora(&self.bridge, &start, &task.train, &targets, &cfg, Some(&mut observer))?;
            let next = bridge::fuse(&self.bridge, &update)?;
            (UpdateKind::Lora { update }, next)
        };
        let delta = next.dw_old().sub(self.bridge.dw_old())?;
        self.bridge = next;

        self.scatter = self.scatter.accumulate(&task.train.features)?;
        self.aux.push(inference::train_aux(t, &task.train, &cfg)?);
        let refresh = self.bank.final_refresh(&self.bridge);
        if let Some(c) = refresh.skipped.first() {
            return Err(Error::MissingPrototype(*c));
        }
        if t == 0 && !self.bank.lambda_frozen() {
            let grid = self.config.lambda_grid.clone();
            self.bank.grid_search_lambda(&task.train, &self.bridge, &grid)?;
        }
        self.tasks_done += 1;
        Ok((kind, delta))
    }

    pub fn predict(&self, data: &LabeledFeatures) -> Result<Vec<Prediction>> {
        if let Some(l) = data.labels.iter().find(|l| !self.bank.contains(**l)) {
            return Err(Error::UnknownLabel(*l));
        }
        let heads: &[AuxClassifier] = if self.config.hierarchical { &self.aux } else { &[] };
        inference::predict_all(
            data,
            &self.bridge,
            &self.bank,
            heads,
            self.config.candidate_s,
            self.config.train.tau,
        )
    }

    /// Accuracy on `data` and on its rows from classes outside `current`.
    pub fn evaluate(&self, data: &LabeledFeatures, current: &[u32]) -> Result<(f64, Option<f64>)> {
        let preds = self.predict(data)?;
        let acc = inference::accuracy(data, &preds);
        let cur: HashSet<u32> = current.iter().copied().collect();
        let old_idx: Vec<usize> = (0..data.len()).filter(|&i| !cur.contains(&data.labels[i])).collect();
        let old = if old_idx.is_empty() {
            None
        } else {
            let hits = old_idx.iter().filter(|&&i| preds[i].class_id == data.labels[i]).count();
            Some(hits as f64 / old_idx.len() as f64)
        };
        Ok((acc, old))
    }

    /// Learn task `t` of `stream`, evaluate on every seen test set, and record it.
    pub fn step(&mut self, stream: &TaskStream) -> Result<TaskReport> {
        let t = self.tasks_done;
        let task = stream
            .tasks
            .get(t)
            .ok_or_else(|| Error::InvalidArgument(format!("stream has no task {}", t + 1)))?;
        let (kind, delta) = self.learn_task(task, &stream.text)?;
        let eval = stream.seen_test(t)?;
        let (accuracy, old) = if eval.is_empty() {
            (0.0, None)
        } else {
            self.evaluate(&eval, &task.classes)?
        };
        self.stage_accuracies.push(accuracy);
        self.old_class_accuracies.push(old);
        Ok(TaskReport {
            task: t,
            classes: task.classes.clone(),
            kind,
            delta,
            accuracy,
            old_class_accuracy: old,
            lambda: self.bank.lambda(),
        })
    }

    pub fn metrics(&self) -> Result<RunMetrics> {
        RunMetrics::new(
            self.stage_accuracies.clone(),
            self.old_class_accuracies.clone(),
            self.bank.lambda(),
        )
    }

    pub fn memory_report(&self) -> MemoryReport {
        MemoryReport::new(self.d_o(), self.d(), self.bank.classes().len(), self.tasks_done)
    }

    /// Number of stored state rows equal to some row of `past`.
    pub fn audit_exemplar_free(&self, past: &LabeledFeatures) -> usize {
        let stored: HashSet<Vec<u64>> = self
            .state_rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        (0..past.len())
            .filter(|&i| {
                let key: Vec<u64> = past.features.row(i).iter().map(|v| v.to_bits()).collect();
                stored.contains(&key)
            })
            .count()
    }

    /// Every `d_o`-wide row held in persistent state.
    fn state_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        let s = self.scatter.scatter();
        rows.extend((0..s.rows()).map(|i| s.row(i).to_vec()));
        rows.extend(self.bank.entries().values().map(|e| e.mean_feat.clone()));
        for head in &self.aux {
            let wt = head.weights.transpose();
            rows.extend((0..wt.rows()).map(|i| wt.row(i).to_vec()));
        }
        let dwt = self.bridge.dw_old().transpose();
        if dwt.cols() == self.d_o() {
            rows.extend((0..dwt.rows()).map(|i| dwt.row(i).to_vec()));
        }
        rows
    }
}

/// Run every task of `stream` from a fresh state.
pub fn run_protocol(stream: &TaskStream, cfg: &RunConfig) -> Result<RunMetrics> {
    let mut pipeline = Pipeline::new(stream.w0.clone(), cfg.clone())?;
    run_from(&mut pipeline, stream, None, |_, _| Ok(()))
}

/// Continue `pipeline` through `stream`, stopping after task `stop_after`
/// (1-based) when given. `on_task` sees the state after each task.
pub fn run_from(
    pipeline: &mut Pipeline,
    stream: &TaskStream,
    stop_after: Option<usize>,
    mut on_task: impl FnMut(&Pipeline, &TaskReport) -> Result<()>,
) -> Result<RunMetrics> {
    stream.validate()?;
    if stream.w0.shape() != pipeline.bridge.w0().shape() {
        return Err(Error::shape(
            "run_from",
            format!("stream bridge {:?} vs state {:?}", stream.w0.shape(), pipeline.bridge.w0().shape()),
        ));
    }
    let start = Instant::now();
    let end = stop_after.unwrap_or(stream.tasks.len()).min(stream.tasks.len());
    while pipeline.tasks_done < end {
        let report = pipeline.step(stream)?;
        on_task(pipeline, &report)?;
    }
    let mut metrics = pipeline.metrics()?;
    metrics.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::stream::{synth_stream, SynthConfig};

    fn tiny() -> (TaskStream, RunConfig) {
        let bench = synth_stream(&SynthConfig {
            tasks: 3,
            classes_per_task: 3,
            train_per_class: 12,
            test_per_class: 6,
            d_o: 16,
            d: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = RunConfig {
            inc_n: 3,
            train: TrainConfig {
                epochs: 2,
                batch_size: 16,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        (bench.stream, cfg)
    }

    #[test]
    fn runs_every_task() {
        let (stream, cfg) = tiny();
        let m = run_protocol(&stream, &cfg).unwrap();
        assert_eq!(m.stage_accuracies.len(), 3);
        assert!(m.old_class_accuracies[0].is_none());
        assert!(m.old_class_accuracies[1].is_some());
        assert!(m.stage_accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn deterministic() {
        let (stream, cfg) = tiny();
        let a = run_protocol(&stream, &cfg).unwrap();
        let b = run_protocol(&stream, &cfg).unwrap();
        assert_eq!(a.canonical_text(), b.canonical_text());
    }

    #[test]
    fn lambda_frozen_after_first_task() {
        let (stream, cfg) = tiny();
        let mut p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        let r1 = p.step(&stream).unwrap();
        assert!(p.bank.lambda_frozen());
        let r2 = p.step(&stream).unwrap();
        assert_eq!(r1.lambda, r2.lambda);
    }

    #[test]
    fn relearning_a_class_is_rejected() {
        let (stream, cfg) = tiny();
        let mut p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        p.step(&stream).unwrap();
        let err = p.learn_task(&stream.tasks[0], &stream.text).unwrap_err();
        assert!(matches!(err.root(), Error::InvalidArgument(_)));
    }

    #[test]
    fn no_training_rows_in_state() {
        let (stream, cfg) = tiny();
        let mut p = Pipeline::new(stream.w0.clone(), cfg).unwrap();
        run_from(&mut p, &stream, None, |_, _| Ok(())).unwrap();
        let (train, _) = stream.pools().unwrap();
        assert_eq!(p.audit_exemplar_free(&train), 0);
    }

    #[test]
    fn all_methods_run() {
        let (stream, cfg) = tiny();
        for method in [Method::Bofa, Method::Finetune, Method::Lora] {
            let m = run_protocol(&stream, &RunConfig { method, ..cfg.clone() }).unwrap();
            assert_eq!(m.stage_accuracies.len(), 3);
        }
    }
}
