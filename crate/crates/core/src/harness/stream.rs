//! Task streams: B-m Inc-n splits of a labeled feature pool, and a seeded
//! synthetic generator standing in for encoder features.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::LabeledFeatures;
use crate::error::{Error, Result};
use crate::harness::config::DEFAULT_CLASS_ORDER_SEED;
use crate::harness::format::TextPrototypes;
use crate::matrixkit::{self, matmul, Matrix};

/// One incremental stage: a disjoint label set with its train/test rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub classes: Vec<u32>,
    pub train: LabeledFeatures,
    pub test: LabeledFeatures,
}

/// Ordered tasks plus the frozen encoder pieces needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub text: TextPrototypes,
    pub w0: Matrix,
    pub base_m: usize,
    pub inc_n: usize,
    pub class_order_seed: u64,
}

impl TaskStream {
    /// Shuffle the class list with `class_order_seed`, give the first task
    /// `base_m` classes (`inc_n` when `base_m` is 0) and every later task `inc_n`.
    pub fn from_pool(
        train: &LabeledFeatures,
        test: &LabeledFeatures,
        text: TextPrototypes,
        w0: Matrix,
        base_m: usize,
        inc_n: usize,
        class_order_seed: u64,
    ) -> Result<Self> {
        if inc_n == 0 {
            return Err(Error::InvalidArgument("inc_n must be at least 1".into()));
        }
        let mut order = train.classes();
        if order.is_empty() {
            return Err(Error::EmptyTask);
        }
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(class_order_seed));
        let base = if base_m == 0 { inc_n } else { base_m };
        let mut groups: Vec<Vec<u32>> = vec![order[..base.min(order.len())].to_vec()];
        for chunk in order[base.min(order.len())..].chunks(inc_n) {
            groups.push(chunk.to_vec());
        }
        let tasks = groups
            .into_iter()
            .map(|classes| {
                let set: HashSet<u32> = classes.iter().copied().collect();
                Task {
                    train: train.filter(|l| set.contains(&l)),
                    test: test.filter(|l| set.contains(&l)),
                    classes,
                }
            })
            .collect();
        let stream = Self {
            tasks,
            text,
            w0,
            base_m,
            inc_n,
            class_order_seed,
        };
        stream.validate()?;
        if test.labels.iter().any(|l| !stream.all_classes().contains(l)) {
            return Err(Error::InvalidArgument(
                "test set contains classes absent from training".into(),
            ));
        }
        Ok(stream)
    }

    pub fn all_classes(&self) -> BTreeSet<u32> {
        self.tasks.iter().flat_map(|t| t.classes.iter().copied()).collect()
    }

    pub fn d_o(&self) -> usize {
        self.w0.rows()
    }

    pub fn d(&self) -> usize {
        self.w0.cols()
    }

    /// Pairwise-disjoint label sets, labels inside their task, widths consistent,
    /// and a textual prototype for every class.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, t) in self.tasks.iter().enumerate() {
            if t.train.is_empty() {
                return Err(Error::Stage {
                    task: i + 1,
                    source: Box::new(Error::EmptyTask),
                });
            }
            for &c in &t.classes {
                if !seen.insert(c) {
                    return Err(Error::InvalidArgument(format!(
                        "class {c} appears in more than one task"
                    )));
                }
                if self.text.get(c).is_none() {
                    return Err(Error::MissingPrototype(c));
                }
            }
            let own: HashSet<u32> = t.classes.iter().copied().collect();
            for l in t.train.labels.iter().chain(&t.test.labels) {
                if !own.contains(l) {
                    return Err(Error::UnknownLabel(*l));
                }
            }
            for set in [&t.train, &t.test] {
                if !set.is_empty() && set.width() != self.d_o() {
                    return Err(Error::shape(
                        "TaskStream::validate",
                        format!("task {} features width {} vs w0 rows {}", i + 1, set.width(), self.d_o()),
                    ));
                }
            }
        }
        if self.text.protos.cols() != self.d() {
            return Err(Error::shape(
                "TaskStream::validate",
                format!("text width {} vs w0 cols {}", self.text.protos.cols(), self.d()),
            ));
        }
        Ok(())
    }

    /// Union of the test sets of tasks `0..=upto`.
    pub fn seen_test(&self, upto: usize) -> Result<LabeledFeatures> {
        let mut out = LabeledFeatures::empty(self.d_o());
        for t in &self.tasks[..=upto] {
            out = out.concat(&t.test)?;
        }
        Ok(out)
    }

    /// Concatenated train and test pools.
    pub fn pools(&self) -> Result<(LabeledFeatures, LabeledFeatures)> {
        let mut train = LabeledFeatures::empty(self.d_o());
        let mut test = LabeledFeatures::empty(self.d_o());
        for t in &self.tasks {
            train = train.concat(&t.train)?;
            test = test.concat(&t.test)?;
        }
        Ok((train, test))
    }
}

/// Parameters of the synthetic benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub d_o: usize,
    pub d: usize,
    /// Norm of the Gaussian perturbation added to each unit textual prototype.
    pub text_noise: f64,
    /// Expected norm of the within-class perturbation of a unit class mean,
    /// drawn inside the class's task subspace.
    pub spread: f64,
    /// Expected norm of an isotropic perturbation added to every sample.
    pub noise_floor: f64,
    /// Norm of a direction shared by every class mean.
    pub shared: f64,
    /// Relative perturbation of the pretrained bridge away from the true projection.
    pub w0_noise: f64,
    /// Dimension of the random subspace holding one task's class means; 0 uses
    /// the whole feature space.
    pub task_dim: usize,
    /// Scale of a per-task Gaussian perturbation of the projection that places
    /// that task's textual prototypes.
    pub task_shift: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1993,
            tasks: 5,
            classes_per_task: 10,
            train_per_class: 100,
            test_per_class: 50,
            d_o: 64,
            d: 32,
            text_noise: 0.5,
            spread: 0.5,
            shared: 0.0,
            w0_noise: 0.0,
            task_dim: 0,
            task_shift: 0.0,
            noise_floor: 0.0,
        }
    }
}

/// Generated stream plus the ground truth it came from.
#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub stream: TaskStream,
    /// Projection the per-task text projections are perturbed from.
    pub w_true: Matrix,
    /// Row `c` is the mean raw feature of class `c`.
    pub class_means: Matrix,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Seeded synthetic stream. All values are rounded to `f32` so the stream
/// survives the on-disk formats unchanged.
pub fn synth_stream(cfg: &SynthConfig) -> Result<SyntheticBenchmark> {
    if cfg.tasks == 0 || cfg.classes_per_task == 0 || cfg.train_per_class == 0 {
        return Err(Error::InvalidArgument(
            "tasks, classes_per_task and train_per_class must be at least 1".into(),
        ));
    }
    if cfg.d_o == 0 || cfg.d == 0 {
        return Err(Error::InvalidArgument("feature widths must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d_o, d) = (cfg.d_o, cfg.d);
    let n_classes = cfg.tasks * cfg.classes_per_task;

    let w_true = Matrix::from_vec(d_o, d, gaussian_vec(d_o * d, 1.0, &mut rng))?;
    let shared_dir = matrixkit::normalize(&gaussian_vec(d_o, 1.0, &mut rng))?;

    // task grouping follows the class order the split will use
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(DEFAULT_CLASS_ORDER_SEED));
    let task_dim = if cfg.task_dim == 0 { d_o } else { cfg.task_dim.min(d_o) };
    let mut dirs = vec![Vec::new(); n_classes];
    let mut bases = vec![Matrix::zeros(0, 0); n_classes];
    let mut projected = vec![Vec::new(); n_classes];
    for group in order.chunks(cfg.classes_per_task) {
        let shift = gaussian_vec(d_o * d, cfg.task_shift, &mut rng);
        let w_task = w_true.add(&Matrix::from_vec(d_o, d, shift)?)?;
        let basis = matrixkit::orthonormal_columns(&Matrix::from_vec(
            d_o,
            task_dim,
            gaussian_vec(d_o * task_dim, 1.0, &mut rng),
        )?)?;
        for &c in group {
            let coef = Matrix::from_vec(task_dim, 1, gaussian_vec(task_dim, 1.0, &mut rng))?;
            dirs[c] = matrixkit::normalize(matmul(&basis, &coef)?.as_slice())?;
            // text sees only the class-specific part of each mean
            projected[c] = matmul(&Matrix::row_vector(&dirs[c])?, &w_task)?.into_vec();
            bases[c] = basis.clone();
        }
    }
    let means: Vec<Vec<f64>> = dirs
        .iter()
        .map(|dir| dir.iter().zip(&shared_dir).map(|(a, s)| a + cfg.shared * s).collect())
        .collect();
    let class_means = Matrix::from_rows(&means)?;

    let mut text_rows = Vec::with_capacity(n_classes);
    for proj in &projected {
        let clean = matrixkit::normalize(proj)?;
        let noise = gaussian_vec(d, cfg.text_noise / (d as f64).sqrt(), &mut rng);
        let noisy: Vec<f64> = clean.iter().zip(&noise).map(|(a, b)| a + b).collect();
        text_rows.push(matrixkit::normalize(&noisy)?.into_iter().map(round_f32).collect());
    }
    let text = TextPrototypes::new((0..n_classes as u32).collect(), Matrix::from_rows(&text_rows)?)?;

    let w0_pert = gaussian_vec(d_o * d, cfg.w0_noise, &mut rng);
    let w0: Vec<f64> = w_true
        .as_slice()
        .iter()
        .zip(&w0_pert)
        .map(|(a, b)| round_f32(a + b))
        .collect();
    let w0 = Matrix::from_vec(d_o, d, w0)?;

    let sample = |n: usize, rng: &mut ChaCha8Rng| -> Result<LabeledFeatures> {
        let per = cfg.spread / (task_dim as f64).sqrt();
        let floor = cfg.noise_floor / (d_o as f64).sqrt();
        let mut labels = Vec::with_capacity(n * n_classes);
        let mut data = Vec::with_capacity(n * n_classes * d_o);
        for (c, m) in means.iter().enumerate() {
            for _ in 0..n {
                labels.push(c as u32);
                let coef = Matrix::from_vec(task_dim, 1, gaussian_vec(task_dim, per, rng))?;
                let within = matmul(&bases[c], &coef)?;
                for (v, w) in m.iter().zip(within.as_slice()) {
                    data.push(round_f32(v + w + floor * rng.sample::<f64, _>(StandardNormal)));
                }
            }
        }
        LabeledFeatures::new(labels, Matrix::from_vec(n * n_classes, d_o, data)?)
    };
    let train = sample(cfg.train_per_class, &mut rng)?;
    let test = sample(cfg.test_per_class, &mut rng)?;

    let stream = TaskStream::from_pool(
        &train,
        &test,
        text,
        w0,
        cfg.classes_per_task,
        cfg.classes_per_task,
        DEFAULT_CLASS_ORDER_SEED,
    )?;
    Ok(SyntheticBenchmark {
        stream,
        w_true,
        class_means,
    })
}
