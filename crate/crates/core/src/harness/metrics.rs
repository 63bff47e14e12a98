//! Stage accuracies, their summaries, and the persistent-state memory budget.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Per-stage results of one protocol run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    /// `A_t`: accuracy on the union of seen test sets after task `t`.
    pub stage_accuracies: Vec<f64>,
    /// Accuracy restricted to classes of earlier tasks; `None` after task 1.
    pub old_class_accuracies: Vec<Option<f64>>,
    pub lambda: f64,
    pub wall_time_secs: f64,
}

impl RunMetrics {
    pub fn new(stage_accuracies: Vec<f64>, old_class_accuracies: Vec<Option<f64>>, lambda: f64) -> Result<Self> {
        if stage_accuracies.len() != old_class_accuracies.len() {
            return Err(Error::shape(
                "RunMetrics::new",
                format!(
                    "{} stage accuracies vs {} old-class entries",
                    stage_accuracies.len(),
                    old_class_accuracies.len()
                ),
            ));
        }
        Ok(Self {
            stage_accuracies,
            old_class_accuracies,
            lambda,
            wall_time_secs: 0.0,
        })
    }

    /// `A_B`, the accuracy after the last task.
    pub fn final_accuracy(&self) -> f64 {
        self.stage_accuracies.last().copied().unwrap_or(0.0)
    }

    /// `Ā`, the mean of the stage accuracies.
    pub fn average_accuracy(&self) -> f64 {
        if self.stage_accuracies.is_empty() {
            return 0.0;
        }
        self.stage_accuracies.iter().sum::<f64>() / self.stage_accuracies.len() as f64
    }

    /// Mean of the defined old-class accuracies.
    pub fn mean_old_class_accuracy(&self) -> Option<f64> {
        let v: Vec<f64> = self.old_class_accuracies.iter().flatten().copied().collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Deterministic text form (no wall time), floats in round-trip form.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (i, (a, o)) in self.stage_accuracies.iter().zip(&self.old_class_accuracies).enumerate() {
            let old = o.map_or("-".to_string(), |v| v.to_string());
            let _ = writeln!(s, "stage {} accuracy {} old {}", i + 1, a, old);
        }
        let _ = writeln!(s, "final {}", self.final_accuracy());
        let _ = writeln!(s, "average {}", self.average_accuracy());
        let _ = writeln!(s, "lambda {}", self.lambda);
        s
    }

    /// Human-readable table with percentages and wall time.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage  accuracy  old-classes");
        for (i, (a, o)) in self.stage_accuracies.iter().zip(&self.old_class_accuracies).enumerate() {
            let old = o.map_or("      -".to_string(), |v| format!("{:6.2}%", 100.0 * v));
            let _ = writeln!(s, "{:>5}  {:7.2}%  {}", i + 1, 100.0 * a, old);
        }
        let _ = writeln!(s, "final accuracy   {:.2}%", 100.0 * self.final_accuracy());
        let _ = writeln!(s, "average accuracy {:.2}%", 100.0 * self.average_accuracy());
        let _ = writeln!(s, "lambda           {}", self.lambda);
        let _ = writeln!(s, "wall time        {:.3}s", self.wall_time_secs);
        s
    }
}

/// Bytes of persistent state, all stored as `f64`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub scatter_bytes: usize,
    pub mean_feat_bytes: usize,
    pub aux_bytes: usize,
    pub bridge_bytes: usize,
}

impl MemoryReport {
    /// Scatter `d_o²`, one mean per class, aux weights `|Y|·d_o`, and the fused
    /// update `d_o·d` once a task has been fused. Bias terms are excluded.
    pub fn new(d_o: usize, d: usize, n_classes: usize, tasks_done: usize) -> Self {
        let f = std::mem::size_of::<f64>();
        Self {
            scatter_bytes: d_o * d_o * f,
            mean_feat_bytes: n_classes * d_o * f,
            aux_bytes: n_classes * d_o * f,
            bridge_bytes: if tasks_done > 0 { d_o * d * f } else { 0 },
        }
    }

    pub fn total(&self) -> usize {
        self.scatter_bytes + self.mean_feat_bytes + self.aux_bytes + self.bridge_bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summaries() {
        let m = RunMetrics::new(vec![0.9, 0.8, 0.7], vec![None, Some(0.75), Some(0.6)], 0.3).unwrap();
        assert_eq!(m.final_accuracy(), 0.7);
        assert!((m.average_accuracy() - 0.8).abs() < 1e-15);
        assert!((m.mean_old_class_accuracy().unwrap() - 0.675).abs() < 1e-15);
        assert!(m.canonical_text().contains("stage 2 accuracy 0.8 old 0.75"));
    }

    #[test]
    fn wall_time_not_canonical() {
        let mut a = RunMetrics::new(vec![0.5], vec![None], 0.0).unwrap();
        let b = a.clone();
        a.wall_time_secs = 12.0;
        assert_eq!(a.canonical_text(), b.canonical_text());
    }

    #[test]
    fn memory_formula() {
        let r = MemoryReport::new(512, 512, 100, 10);
        assert_eq!(r.total(), (512 * 512 + 100 * 512 + 100 * 512 + 512 * 512) * 8);
        assert_eq!(MemoryReport::new(4, 2, 0, 0).bridge_bytes, 0);
    }
}
