//! Continual-learning transfer metrics computed from the R-matrix.
//!
//! `R[t][j]` is test accuracy on task `j` after training stage `t`
//! (1-based in the conventional notation; this module uses 0-based
//! indices). Entries for `j <= t` come from frozen per-task snapshots;
//! the optional `j = t+1` entries are forward-transfer probes. The
//! baseline vector `b[j]` holds the accuracy of an independently trained
//! prompt+head on task `j` alone, measured under the same probe protocol.
//!
//! With snapshot evaluation the backward-transfer sum telescopes to
//! exactly zero, which is the point: frozen prompts cannot be forgotten.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RMatrix {
    t: usize,
    entries: Vec<Vec<Option<f64>>>,
    baseline: Vec<Option<f64>>,
}

impl RMatrix {
    pub fn new(t: usize) -> Self {
        Self {
            t,
            entries: vec![vec![None; t]; t],
            baseline: vec![None; t],
        }
    }

    pub fn tasks(&self) -> usize {
        self.t
    }

    pub fn set(&mut self, stage: usize, task: usize, acc: f64) {
        assert!(stage < self.t && task < self.t, "R[{stage}][{task}]");
        assert!((0.0..=1.0).contains(&acc), "accuracy {acc} outside [0,1]");
        self.entries[stage][task] = Some(acc);
    }

    pub fn get(&self, stage: usize, task: usize) -> Option<f64> {
        self.entries.get(stage)?.get(task).copied()?
    }

    pub fn set_baseline(&mut self, task: usize, acc: f64) {
        assert!(task < self.t);
        assert!((0.0..=1.0).contains(&acc));
        self.baseline[task] = Some(acc);
    }

    pub fn baseline(&self, task: usize) -> Option<f64> {
        self.baseline.get(task).copied()?
    }

    /// Lower-triangular completeness: every `R[t][j]` with `j <= t`.
    pub fn is_complete(&self) -> bool {
        (0..self.t).all(|stage| (0..=stage).all(|task| self.get(stage, task).is_some()))
    }

    fn require_final_row(&self) -> Result<Vec<f64>> {
        let last = self.t - 1;
        (0..self.t)
            .map(|task| {
                self.get(last, task).ok_or_else(|| {
                    Error::State(format!(
                        "final-stage accuracy for task {task} missing from the R-matrix"
                    ))
                })
            })
            .collect()
    }
}

/// Final average accuracy: mean of the last stage's accuracies.
pub fn compute_acc(r: &RMatrix) -> Result<f64> {
    let row = r.require_final_row()?;
    Ok(row.iter().sum::<f64>() / row.len() as f64)
}

/// Backward transfer: `(1/(T-1)) Σ_{j<T} (R[T][j] - R[j][j])`.
/// Exactly zero under snapshot evaluation.
pub fn compute_bwt(r: &RMatrix) -> Result<f64> {
    if r.tasks() < 2 {
        return Err(Error::InvalidArgument(
            "backward transfer needs at least two tasks".into(),
        ));
    }
    let last = r.tasks() - 1;
    let mut sum = 0.0;
    for j in 0..last {
        let final_acc = r.get(last, j).ok_or_else(|| {
            Error::State(format!("R[{last}][{j}] missing"))
        })?;
        let diag = r.get(j, j).ok_or_else(|| Error::State(format!("R[{j}][{j}] missing")))?;
        sum += final_acc - diag;
    }
    Ok(sum / last as f64)
}

/// Forward transfer: `(1/(T-1)) Σ_{j>=2} (R[j-1][j] - b[j])`, where the
/// probe `R[j-1][j]` freezes the accumulated prompt state after stage
/// `j-1` and trains only a fresh probe head and prompt on task `j`.
pub fn compute_fwt(r: &RMatrix) -> Result<f64> {
    if r.tasks() < 2 {
        return Err(Error::InvalidArgument(
            "forward transfer needs at least two tasks".into(),
        ));
    }
    let mut sum = 0.0;
    for j in 1..r.tasks() {
        let probe = r.get(j - 1, j).ok_or_else(|| {
            Error::State(format!("forward-transfer probe R[{}][{j}] missing", j - 1))
        })?;
        let base = r.baseline(j).ok_or_else(|| {
            Error::State(format!("independent baseline b[{j}] missing"))
        })?;
        sum += probe - base;
    }
    Ok(sum / (r.tasks() - 1) as f64)
}

/// Evolution of average accuracy: `curve[t] = (1/(t+1)) Σ_{j<=t} R[t][j]`.
pub fn accuracy_curve(r: &RMatrix) -> Result<Vec<f64>> {
    let mut curve = Vec::with_capacity(r.tasks());
    for stage in 0..r.tasks() {
        let mut sum = 0.0;
        for task in 0..=stage {
            sum += r.get(stage, task).ok_or_else(|| {
                Error::State(format!("R[{stage}][{task}] missing"))
            })?;
        }
        curve.push(sum / (stage + 1) as f64);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransferReport {
    pub acc: f64,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub curve: Vec<f64>,
}

/// All metrics in one pass; BWT needs two tasks and FWT additionally
/// needs probes and baselines, so both degrade to `None` when their
/// inputs are absent.
pub fn transfer_report(r: &RMatrix) -> Result<TransferReport> {
    Ok(TransferReport {
        acc: compute_acc(r)?,
        bwt: compute_bwt(r).ok(),
        fwt: compute_fwt(r).ok(),
        curve: accuracy_curve(r)?,
    })
}

/// Machine CSV of the R-matrix: accuracies to four decimals, absent
/// entries empty, baseline vector appended as its own row.
pub fn rmatrix_csv(r: &RMatrix) -> String {
    let mut out = String::new();
    out.push_str("stage");
    for j in 0..r.tasks() {
        out.push_str(&format!(",task_{j}"));
    }
    out.push('\n');
    for stage in 0..r.tasks() {
        out.push_str(&format!("{stage}"));
        for task in 0..r.tasks() {
            match r.get(stage, task) {
                Some(a) => out.push_str(&format!(",{a:.4}")),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out.push_str("baseline");
    for task in 0..r.tasks() {
        match r.baseline(task) {
            Some(a) => out.push_str(&format!(",{a:.4}")),
            None => out.push(','),
        }
    }
    out.push('\n');
    out
}

/// Accuracy-evolution curve as `(stage, mean_accuracy)` CSV.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("stage,mean_accuracy\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{v:.4}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled(rows: &[&[f64]]) -> RMatrix {
        let t = rows.len();
        let mut r = RMatrix::new(t);
        for (stage, row) in rows.iter().enumerate() {
            for (task, &acc) in row.iter().enumerate() {
                if acc >= 0.0 {
                    r.set(stage, task, acc);
                }
            }
        }
        r
    }

    #[test]
    fn acc_single_task() {
        let r = filled(&[&[0.9]]);
        assert_eq!(compute_acc(&r).unwrap(), 0.9);
    }

    #[test]
    fn acc_final_row_mean() {
        let r = filled(&[&[0.9, -1.0], &[0.9, 0.8]]);
        assert!((compute_acc(&r).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn acc_incomplete_row_is_state_error() {
        let r = filled(&[&[0.9, -1.0], &[-1.0, 0.8]]);
        assert!(matches!(compute_acc(&r), Err(Error::State(_))));
    }

    #[test]
    fn bwt_textbook_cases() {
        let r = filled(&[&[0.9, -1.0], &[0.7, 0.8]]);
        assert!((compute_bwt(&r).unwrap() + 0.2).abs() < 1e-12);

        let improving = filled(&[&[0.5, -1.0], &[0.6, 0.9]]);
        assert!((compute_bwt(&improving).unwrap() - 0.1).abs() < 1e-12);

        let single = filled(&[&[0.9]]);
        assert!(matches!(compute_bwt(&single), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn bwt_zero_for_snapshot_rows() {
        let r = filled(&[&[0.9, -1.0, -1.0], &[0.9, 0.7, -1.0], &[0.9, 0.7, 0.85]]);
        assert_eq!(compute_bwt(&r).unwrap(), 0.0);
    }

    #[test]
    fn fwt_cases() {
        let mut r = filled(&[&[0.9, 0.7], &[0.9, 0.8]]);
        r.set_baseline(1, 0.5);
        assert!((compute_fwt(&r).unwrap() - 0.2).abs() < 1e-12);

        // Probe equal to baseline for every task: zero transfer.
        let mut r = filled(&[&[0.9, 0.61], &[0.9, 0.8]]);
        r.set_baseline(1, 0.61);
        assert_eq!(compute_fwt(&r).unwrap(), 0.0);
    }

    #[test]
    fn fwt_missing_probe_is_state_error() {
        let mut r = filled(&[&[0.9, -1.0], &[0.9, 0.8]]);
        r.set_baseline(1, 0.5);
        assert!(matches!(compute_fwt(&r), Err(Error::State(_))));
    }

    #[test]
    fn curve_cases() {
        let r = filled(&[&[0.8]]);
        assert_eq!(accuracy_curve(&r).unwrap(), vec![0.8]);

        // Snapshot evaluation: curve is the running mean of the diagonal.
        let r = filled(&[&[0.9, -1.0, -1.0], &[0.9, 0.7, -1.0], &[0.9, 0.7, 0.8]]);
        let c = accuracy_curve(&r).unwrap();
        assert!((c[0] - 0.9).abs() < 1e-12);
        assert!((c[1] - 0.8).abs() < 1e-12);
        assert!((c[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_pure() {
        let mut r = filled(&[&[0.9, 0.7], &[0.9, 0.8]]);
        r.set_baseline(1, 0.5);
        assert_eq!(compute_acc(&r).unwrap(), compute_acc(&r).unwrap());
        assert_eq!(compute_bwt(&r).unwrap(), compute_bwt(&r).unwrap());
        assert_eq!(compute_fwt(&r).unwrap(), compute_fwt(&r).unwrap());
    }

    #[test]
    fn csv_has_four_decimals() {
        let mut r = filled(&[&[0.87654]]);
        r.set_baseline(0, 0.5);
        let csv = rmatrix_csv(&r);
        assert!(csv.contains("0.8765"), "{csv}");
        assert!(csv.contains("baseline,0.5000"), "{csv}");
    }
}
