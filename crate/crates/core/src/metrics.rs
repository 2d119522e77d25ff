//! Continual-learning metrics over the accuracy matrix `a[i][j]`: accuracy on
//! task `i` after training task `j` (0-based here, 1-based in JSON files).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Which peak the forgetting rate subtracts the final accuracy from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrMode {
    /// Peak over `j in [i, N]`.
    #[default]
    Peak,
    /// Max over the stored entries with `j <= i` (diagonal and pre-task).
    Literal,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyMatrix {
    n: usize,
    /// Row-major `n x n`; only `j >= i` and the pre-task cells `j = i - 1` are used.
    cells: Vec<Option<f64>>,
    task_sizes: Vec<usize>,
    scratch: Option<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new(task_sizes: Vec<usize>) -> Result<Self> {
        let n = task_sizes.len();
        if n == 0 || task_sizes.contains(&0) {
            return invalid("accuracy matrix needs at least one task with positive size");
        }
        Ok(Self {
            n,
            cells: vec![None; n * n],
            task_sizes,
            scratch: None,
        })
    }

    /// Builds a fully populated matrix from `rows[i][j - i] = a[i][j]`.
    pub fn from_upper(rows: &[Vec<f64>], task_sizes: Vec<usize>) -> Result<Self> {
        let mut m = Self::new(task_sizes)?;
        if rows.len() != m.n {
            return invalid("row count does not match task count");
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != m.n - i {
                return invalid(format!("row {i} must hold {} entries", m.n - i));
            }
            for (off, &v) in row.iter().enumerate() {
                m.set(i, i + off, v)?;
            }
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.n
    }

    pub fn task_sizes(&self) -> &[usize] {
        &self.task_sizes
    }

    pub fn scratch(&self) -> Option<&[f64]> {
        self.scratch.as_deref()
    }

    pub fn set_scratch(&mut self, scratch: Vec<f64>) -> Result<()> {
        if scratch.len() != self.n || scratch.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return invalid("scratch accuracies must be one value in [0,1] per task");
        }
        self.scratch = Some(scratch);
        Ok(())
    }

    /// Stores `a[i][j]`; allowed for `j >= i` and for the pre-task cell `j == i - 1`.
    pub fn set(&mut self, i: usize, j: usize, acc: f64) -> Result<()> {
        if i >= self.n || j >= self.n || j + 1 < i {
            return invalid(format!("cell ({i}, {j}) is not stored"));
        }
        if !(0.0..=1.0).contains(&acc) {
            return invalid(format!("accuracy {acc} outside [0,1]"));
        }
        self.cells[i * self.n + j] = Some(acc);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        if i >= self.n || j >= self.n {
            return None;
        }
        self.cells[i * self.n + j]
    }

    fn need(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j)
            .ok_or_else(|| Error::Invalid(format!("missing accuracy entry a[{}][{}]", i + 1, j + 1)))
    }

    /// Present entries as `(i, j, acc)` in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if let Some(v) = self.get(i, j) {
                    out.push((i, j, v));
                }
            }
        }
        out
    }

    /// Copy with the last column replaced, e.g. by post-merge accuracies.
    pub fn with_final_column(&self, finals: &[f64]) -> Result<Self> {
        if finals.len() != self.n {
            return invalid("final column length mismatch");
        }
        let mut out = self.clone();
        for (i, &v) in finals.iter().enumerate() {
            out.set(i, self.n - 1, v)?;
        }
        Ok(out)
    }
}

/// `Σ|D_i| a[i][N] / Σ|D_i|`.
pub fn final_acc(m: &AccuracyMatrix) -> Result<f64> {
    let last = m.n - 1;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m.n {
        let w = m.task_sizes[i] as f64;
        num += w * m.need(i, last)?;
        den += w;
    }
    Ok(num / den)
}

fn need_two(m: &AccuracyMatrix, what: &str) -> Result<()> {
    if m.n < 2 {
        return invalid(format!("{what} is undefined for a single task"));
    }
    Ok(())
}

/// Backward transfer: mean of `a[i][N] - a[i][i]` over the first `N-1` tasks.
pub fn bwt(m: &AccuracyMatrix) -> Result<f64> {
    need_two(m, "BWT")?;
    let last = m.n - 1;
    let mut s = 0.0;
    for i in 0..last {
        s += m.need(i, last)? - m.need(i, i)?;
    }
    Ok(s / last as f64)
}

/// Forward transfer: mean of `a[i][i-1] - scratch[i]` over tasks `2..=N`.
pub fn fwt(m: &AccuracyMatrix) -> Result<f64> {
    need_two(m, "FWT")?;
    let scratch = m
        .scratch
        .as_ref()
        .ok_or_else(|| Error::Invalid("FWT needs scratch accuracies".into()))?;
    let mut s = 0.0;
    for (i, base) in scratch.iter().enumerate().skip(1) {
        s += m.need(i, i - 1)? - base;
    }
    Ok(s / (m.n - 1) as f64)
}

/// Forgetting rate: mean drop from peak to final over the first `N-1` tasks.
pub fn fr(m: &AccuracyMatrix) -> Result<f64> {
    fr_with(m, FrMode::Peak)
}

pub fn fr_with(m: &AccuracyMatrix, mode: FrMode) -> Result<f64> {
    need_two(m, "FR")?;
    let last = m.n - 1;
    let mut s = 0.0;
    for i in 0..last {
        let peak = match mode {
            FrMode::Peak => (i..m.n)
                .map(|j| m.need(i, j))
                .try_fold(f64::NEG_INFINITY, |a, v| v.map(|v| a.max(v)))?,
            FrMode::Literal => {
                let diag = m.need(i, i)?;
                match i.checked_sub(1).and_then(|j| m.get(i, j)) {
                    Some(pre) => diag.max(pre),
                    None => diag,
                }
            }
        };
        s += peak - m.need(i, last)?;
    }
    Ok(s / last as f64)
}

/// Mean over stages `j` of the unweighted average of `a[0..=j][j]`.
pub fn aaa(m: &AccuracyMatrix) -> Result<f64> {
    let mut total = 0.0;
    for j in 0..m.n {
        let mut stage = 0.0;
        for i in 0..=j {
            stage += m.need(i, j)?;
        }
        total += stage / (j + 1) as f64;
    }
    Ok(total / m.n as f64)
}

/// Sample standard deviation with the `n - 1` denominator; `None` for fewer than two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// All five metrics; entries that are undefined for this matrix are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub fr: Option<f64>,
    pub aaa: Option<f64>,
}

impl MetricSummary {
    pub fn compute(m: &AccuracyMatrix, mode: FrMode) -> Self {
        Self {
            acc: final_acc(m).ok(),
            bwt: bwt(m).ok(),
            fwt: fwt(m).ok(),
            fr: fr_with(m, mode).ok(),
            aaa: aaa(m).ok(),
        }
    }
}

/// On-disk accuracy matrix: `{"n_tasks", "entries": [{"i","j","acc"}], "sizes"}` with 1-based indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccMatrixFile {
    pub n_tasks: usize,
    pub entries: Vec<AccEntry>,
    pub sizes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccEntry {
    pub i: usize,
    pub j: usize,
    pub acc: f64,
}

impl AccMatrixFile {
    pub fn from_matrix(m: &AccuracyMatrix, round: impl Fn(f64) -> f64) -> Self {
        Self {
            n_tasks: m.n,
            entries: m
                .entries()
                .into_iter()
                .map(|(i, j, acc)| AccEntry {
                    i: i + 1,
                    j: j + 1,
                    acc: round(acc),
                })
                .collect(),
            sizes: m.task_sizes.clone(),
            scratch: m.scratch.as_ref().map(|s| s.iter().map(|&v| round(v)).collect()),
        }
    }

    pub fn to_matrix(&self) -> Result<AccuracyMatrix> {
        if self.sizes.len() != self.n_tasks {
            return invalid("sizes length must equal n_tasks");
        }
        let mut m = AccuracyMatrix::new(self.sizes.clone())?;
        for e in &self.entries {
            if e.i == 0 || e.j == 0 {
                return invalid("accuracy entries are 1-based");
            }
            m.set(e.i - 1, e.j - 1, e.acc)?;
        }
        if let Some(s) = &self.scratch {
            m.set_scratch(s.clone())?;
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acc_weighted_and_plain() {
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.8], vec![0.6]], vec![100, 300]).unwrap();
        assert!((final_acc(&m).unwrap() - 0.65).abs() < 1e-12);
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.8], vec![0.6]], vec![5, 5]).unwrap();
        assert!((final_acc(&m).unwrap() - 0.7).abs() < 1e-12);
        let m = AccuracyMatrix::from_upper(&[vec![0.42]], vec![7]).unwrap();
        assert_eq!(final_acc(&m).unwrap(), 0.42);
        assert_eq!(aaa(&m).unwrap(), 0.42);
        assert!(bwt(&m).is_err() && fr(&m).is_err() && fwt(&m).is_err());
    }

    #[test]
    fn bwt_cases() {
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.8], vec![0.5]], vec![1, 1]).unwrap();
        assert!((bwt(&m).unwrap() + 0.1).abs() < 1e-12);
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.85, 0.7], vec![0.8, 0.8], vec![0.6]], vec![1, 1, 1]).unwrap();
        assert!((bwt(&m).unwrap() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn fwt_cases() {
        let mut m = AccuracyMatrix::from_upper(&[vec![0.9, 0.8], vec![0.7]], vec![1, 1]).unwrap();
        assert!(fwt(&m).is_err());
        m.set(1, 0, 0.5).unwrap();
        m.set_scratch(vec![0.9, 0.6]).unwrap();
        assert!((fwt(&m).unwrap() + 0.1).abs() < 1e-12);
    }

    #[test]
    fn fr_cases() {
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.7], vec![0.6]], vec![1, 1]).unwrap();
        assert!((fr(&m).unwrap() - 0.2).abs() < 1e-12);
        let m = AccuracyMatrix::from_upper(&[vec![0.6, 0.9, 0.5], vec![0.8, 0.8], vec![0.7]], vec![1, 1, 1]).unwrap();
        // Row 0 contributes 0.4, row 1 contributes 0.
        assert!((fr(&m).unwrap() - 0.2).abs() < 1e-12);
        assert!((fr_with(&m, FrMode::Literal).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn aaa_stage_means() {
        let m = AccuracyMatrix::from_upper(&[vec![0.9, 0.7], vec![0.9]], vec![1, 1]).unwrap();
        assert!((aaa(&m).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn std_uses_n_minus_one() {
        assert_eq!(sample_std(&[1.0]), None);
        assert!((sample_std(&[1.0, 3.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip() {
        let mut m = AccuracyMatrix::from_upper(&[vec![0.9, 0.8], vec![0.7]], vec![3, 4]).unwrap();
        m.set(1, 0, 0.4).unwrap();
        let f = AccMatrixFile::from_matrix(&m, |v| v);
        assert_eq!(f.to_matrix().unwrap(), m);
        assert!(f.entries.iter().all(|e| e.i >= 1 && e.j >= 1));
    }
}
