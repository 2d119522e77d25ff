//! Synthetic domain-incremental task sequences.
//!
//! Every task shares the same `C` labels. Task 1 draws `C` class means from
//! the master seed, placed mostly inside a seeded 2-D plane of the input
//! space; task `t` rotates those means by its scheduled angle inside that
//! plane. Samples are the class mean plus unit Gaussian noise.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::Matrix;
use crate::rng::stream;

/// Features plus integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn concat(parts: &[&Split]) -> Result<Split> {
        let xs: Vec<&Matrix> = parts.iter().map(|p| &p.x).collect();
        Ok(Split {
            x: Matrix::vstack(&xs)?,
            y: parts.iter().flat_map(|p| p.y.iter().copied()).collect(),
        })
    }

    /// Writes `f0..f{d-1},label` with 9 significant digits per feature.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..self.x.cols()).map(|i| format!("f{i}")).collect();
        writeln!(out, "{},label", header.join(","))?;
        for (r, y) in self.y.iter().enumerate() {
            let row: Vec<String> = self.x.row(r).iter().map(|v| format_sig9(*v)).collect();
            writeln!(out, "{},{}", row.join(","), y)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Split> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Invalid("empty csv".into()))?;
        let d = header.split(',').count() - 1;
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (ln, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return invalid(format!("csv line {} has {} fields", ln + 2, fields.len()));
            }
            for f in &fields[..d] {
                data.push(
                    f.parse::<f32>()
                        .map_err(|e| Error::Invalid(format!("csv line {}: {e}", ln + 2)))?,
                );
            }
            y.push(
                fields[d]
                    .parse::<usize>()
                    .map_err(|e| Error::Invalid(format!("csv line {}: {e}", ln + 2)))?,
            );
        }
        Ok(Split {
            x: Matrix::new(y.len(), d, data)?,
            y,
        })
    }
}

fn format_sig9(v: f32) -> String {
    let s = format!("{:.8e}", v);
    // Normalise to a plain float literal that round-trips through `parse::<f32>`.
    s.parse::<f64>().map(|p| format!("{p}")).unwrap_or(s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub train: Split,
    pub test: Split,
    /// Class means the samples were drawn around.
    pub means: Matrix,
}

impl TaskDataset {
    /// `|D_t|`, the number of training samples.
    pub fn size(&self) -> usize {
        self.train.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub n_tasks: usize,
    pub d_in: usize,
    pub n_classes: usize,
    pub train_per_task: usize,
    pub test_per_task: usize,
    /// Rotation of each generated task relative to task 1, in degrees.
    pub angles_deg: Vec<f64>,
    /// 1-based permutation applied after generation.
    pub order: Vec<usize>,
    pub master_seed: u64,
    /// Norm of each class mean's in-plane component.
    pub plane_radius: f64,
    /// Per-coordinate standard deviation of the off-plane component of each mean.
    pub off_plane_std: f64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        Self::drop_fixture(0)
    }
}

impl SequenceSpec {
    /// Four tasks where the last is strongly rotated away from the first three.
    pub fn drop_fixture(master_seed: u64) -> Self {
        Self {
            n_tasks: 4,
            d_in: 20,
            n_classes: 5,
            train_per_task: 500,
            test_per_task: 200,
            angles_deg: vec![0.0, 15.0, 20.0, 120.0],
            order: vec![1, 2, 3, 4],
            master_seed,
            plane_radius: 4.0,
            off_plane_std: 0.3,
        }
    }

    /// Fifteen tasks drifting gradually with a few sharp departures.
    pub fn long_fixture(master_seed: u64) -> Self {
        let angles = vec![
            0.0, 10.0, 20.0, 15.0, 120.0, 25.0, 30.0, 35.0, 150.0, 40.0, 45.0, 90.0, 50.0, 55.0, 60.0,
        ];
        Self {
            n_tasks: 15,
            angles_deg: angles,
            order: (1..=15).collect(),
            ..Self::drop_fixture(master_seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.d_in < 2 || self.n_classes < 2 {
            return invalid("need n_tasks >= 1, d_in >= 2, n_classes >= 2");
        }
        if self.train_per_task == 0 || self.test_per_task == 0 {
            return invalid("sample counts must be positive");
        }
        if self.angles_deg.len() != self.n_tasks {
            return invalid(format!(
                "angles_deg has {} entries for {} tasks",
                self.angles_deg.len(),
                self.n_tasks
            ));
        }
        if self.angles_deg.iter().any(|a| !(0.0..=180.0).contains(a)) {
            return invalid("angles must lie in [0, 180]");
        }
        let mut seen = vec![false; self.n_tasks];
        if self.order.len() != self.n_tasks {
            return invalid("order must list every task exactly once");
        }
        for &o in &self.order {
            if o == 0 || o > self.n_tasks || seen[o - 1] {
                return invalid(format!(
                    "order {:?} is not a permutation of 1..={}",
                    self.order, self.n_tasks
                ));
            }
            seen[o - 1] = true;
        }
        Ok(())
    }

    /// Orthonormal basis `(u, v)` of the rotation plane.
    pub fn rotation_plane(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = stream(self.master_seed, &[0x91A4E]);
        let mut draw = || -> Vec<f64> { (0..self.d_in).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let mut u = draw();
        normalize(&mut u);
        let mut v = draw();
        let proj = dot(&u, &v);
        v.iter_mut().zip(&u).for_each(|(vi, ui)| *vi -= proj * ui);
        normalize(&mut v);
        (u, v)
    }

    /// Task 1 class means, `C x d_in`.
    pub fn base_means(&self) -> Vec<Vec<f64>> {
        let (u, v) = self.rotation_plane();
        let mut rng = stream(self.master_seed, &[0x3EA5]);
        let phase: f64 = rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU);
        (0..self.n_classes)
            .map(|c| {
                let theta = phase + std::f64::consts::TAU * c as f64 / self.n_classes as f64;
                let mut off: Vec<f64> = (0..self.d_in)
                    .map(|_| self.off_plane_std * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                    .collect();
                // Keep the off-plane part orthogonal to the plane so rotation leaves it alone.
                let (pu, pv) = (dot(&off, &u), dot(&off, &v));
                off.iter_mut()
                    .zip(u.iter().zip(&v))
                    .for_each(|(o, (ui, vi))| *o -= pu * ui + pv * vi);
                let (cu, cv) = (self.plane_radius * theta.cos(), self.plane_radius * theta.sin());
                off.iter()
                    .zip(u.iter().zip(&v))
                    .map(|(o, (ui, vi))| o + cu * ui + cv * vi)
                    .collect()
            })
            .collect()
    }

    /// Class means rotated by `angle_deg` inside the plane.
    pub fn rotated_means(&self, angle_deg: f64) -> Vec<Vec<f64>> {
        let (u, v) = self.rotation_plane();
        let (s, c) = angle_deg.to_radians().sin_cos();
        self.base_means()
            .into_iter()
            .map(|m| {
                let (a, b) = (dot(&m, &u), dot(&m, &v));
                let (ra, rb) = (c * a - s * b, s * a + c * b);
                m.iter()
                    .zip(u.iter().zip(&v))
                    .map(|(mi, (ui, vi))| mi + (ra - a) * ui + (rb - b) * vi)
                    .collect()
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Cosine similarity between two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Mean over classes of the cosine between corresponding class means.
pub fn mean_cosine(a: &TaskDataset, b: &TaskDataset) -> f64 {
    let c = a.means.rows();
    (0..c)
        .map(|k| {
            let x: Vec<f64> = a.means.row(k).iter().map(|&v| v as f64).collect();
            let y: Vec<f64> = b.means.row(k).iter().map(|&v| v as f64).collect();
            cosine(&x, &y)
        })
        .sum::<f64>()
        / c as f64
}

fn sample_split(means: &[Vec<f64>], n: usize, seed: u64, path: &[u64]) -> Split {
    let c = means.len();
    let d = means[0].len();
    let mut rng = stream(seed, path);
    let mut y: Vec<usize> = (0..n).map(|i| i % c).collect();
    y.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * d);
    for &label in &y {
        for mu in &means[label] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push((mu + z) as f32);
        }
    }
    Split {
        x: Matrix::new(n, d, data).expect("consistent sizes"),
        y,
    }
}

/// Generates the task in 1-based generation slot `slot` (before reordering).
pub fn gen_task(spec: &SequenceSpec, slot: usize) -> Result<TaskDataset> {
    spec.validate()?;
    if slot == 0 || slot > spec.n_tasks {
        return invalid(format!("slot {slot} outside 1..={}", spec.n_tasks));
    }
    let angle = spec.angles_deg[slot - 1];
    let means = spec.rotated_means(angle);
    let train = sample_split(&means, spec.train_per_task, spec.master_seed, &[0x7A5C, slot as u64, 0]);
    let test = sample_split(&means, spec.test_per_task, spec.master_seed, &[0x7A5C, slot as u64, 1]);
    let flat: Vec<f32> = means.iter().flatten().map(|&v| v as f32).collect();
    Ok(TaskDataset {
        name: format!("task{slot}@{angle}deg"),
        train,
        test,
        means: Matrix::new(spec.n_classes, spec.d_in, flat)?,
    })
}

/// Ordered list of tasks ready for sequential training.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Test-set sizes, used to weight final accuracy.
    pub fn test_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.test.len()).collect()
    }

    /// Writes `task{k}_train.csv` and `task{k}_test.csv` into `dir`.
    pub fn export_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, t) in self.tasks.iter().enumerate() {
            t.train.write_csv(&dir.join(format!("task{}_train.csv", k + 1)))?;
            t.test.write_csv(&dir.join(format!("task{}_test.csv", k + 1)))?;
        }
        Ok(())
    }
}

pub fn make_sequence(spec: &SequenceSpec) -> Result<TaskSequence> {
    spec.validate()?;
    let generated: Vec<TaskDataset> = (1..=spec.n_tasks).map(|s| gen_task(spec, s)).collect::<Result<_>>()?;
    Ok(TaskSequence {
        tasks: spec.order.iter().map(|&o| generated[o - 1].clone()).collect(),
    })
}

/// Generic pre-training data: a held-out-seed variant of `spec` with mild rotations.
pub fn pretrain_mixture(spec: &SequenceSpec) -> Result<TaskSequence> {
    let held_out = SequenceSpec {
        n_tasks: 3,
        angles_deg: vec![0.0, 10.0, 20.0],
        order: vec![1, 2, 3],
        master_seed: crate::rng::derive_seed(spec.master_seed, &[0x9E7A_1AED]),
        ..spec.clone()
    };
    make_sequence(&held_out)
}
