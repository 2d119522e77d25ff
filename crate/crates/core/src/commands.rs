//! Pipeline stages behind the command-line interface.
//!
//! Every stage reads and writes inside `config.out_dir`:
//!
//! | stage      | reads                          | writes |
//! |------------|--------------------------------|--------|
//! | `pretrain` |                                | `base.pslw`, `pretrain_report.json` |
//! | `train`    | `base.pslw`                    | `adapters.pslr`, `acc_matrix.json`, `loss_traces.csv`, `sign_stats.csv`, `train_report.json` |
//! | `merge`    | `base.pslw`, `adapters.pslr`   | `merged.pslw`, `merge_report.json` |
//! | `eval`     | a `.pslw` file                 | `eval_report.json` |
//! | `metrics`  | accuracy-matrix JSON files     | `metrics.json` |
//! | `analyze`  | `base.pslw`, `adapters.pslr`   | CSV tables and a JSON summary |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::analysis::{
    eval_subset, frob_similarity, pooled_selection, shift_histogram_in_range, sign_split, trained_taylor_study,
    SubsetVariant, TaylorStudyConfig,
};
use crate::checkpoint::{encode_weights, read_adapters, read_weights, write_adapters, write_weights};
use crate::config::{r6, round_json, ExperimentConfig, MergeCadence};
use crate::data::{make_sequence, pretrain_mixture, Split, TaskSequence};
use crate::error::{Error, Result};
use crate::lora::{BaseModel, DenseModel, HistoryMode, LoraAdapter};
use crate::merging::{deltas_by_layer, merge_fold_with_sources, merged_weights, MergeStrategy};
use crate::metrics::{sample_std, AccMatrixFile, FrMode, MetricSummary};
use crate::nn::Matrix;
use crate::trainer::{evaluate, pretrain_base, run_sequence, scratch_accuracies};

pub const BASE_FILE: &str = "base.pslw";
pub const ADAPTERS_FILE: &str = "adapters.pslr";
pub const MERGED_FILE: &str = "merged.pslw";
pub const ACC_MATRIX_FILE: &str = "acc_matrix.json";

/// Fails with every absent path listed.
pub fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<PathBuf> = paths.iter().filter(|p| !p.is_file()).cloned().collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingInputs(missing))
    }
}

/// Pretty JSON with floats at six significant digits and a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    round_json(&mut v);
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn prepare(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

fn load_base(cfg: &ExperimentConfig, path: &Path) -> Result<BaseModel> {
    require(&[path.to_path_buf()])?;
    let net = read_weights(path)?;
    if net.input_dim() != cfg.d_in || net.output_dim() != cfg.n_classes {
        return Err(Error::Config(format!(
            "base checkpoint is {}->{} but config asks for {}->{}",
            net.input_dim(),
            net.output_dim(),
            cfg.d_in,
            cfg.n_classes
        )));
    }
    Ok(BaseModel::freeze(net))
}

fn accuracies(model: &DenseModel, tasks: &TaskSequence) -> Result<Vec<f64>> {
    tasks.tasks.iter().map(|t| evaluate(model, &t.test)).collect()
}

fn weighted(accs: &[f64], sizes: &[usize]) -> f64 {
    let total: usize = sizes.iter().sum();
    accs.iter().zip(sizes).map(|(a, &s)| a * s as f64).sum::<f64>() / total as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub config: ExperimentConfig,
    pub base_accuracy: f64,
    pub checkpoint: PathBuf,
}

/// Trains the base on the held-out mixture and writes `base.pslw`.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PretrainReport> {
    prepare(cfg)?;
    let spec = cfg.sequence();
    let mixture = pretrain_mixture(&spec)?;
    let (base, acc) = pretrain_base(&mixture, spec.d_in, spec.n_classes, &cfg.pretrain())?;
    let path = cfg.out_dir.join(BASE_FILE);
    write_weights(&path, base.net())?;
    let report = PretrainReport {
        config: cfg.clone(),
        base_accuracy: acc,
        checkpoint: path,
    };
    write_json(&cfg.out_dir.join("pretrain_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub config: ExperimentConfig,
    pub metrics: MetricSummary,
    /// Final accuracy of the unmerged adapter stack.
    pub unmerged_final_acc: f64,
    /// Final accuracy of the deployed weights (merged when a strategy is set).
    pub final_acc: f64,
    pub opposite_fraction: Vec<f64>,
    pub same_fraction: Vec<f64>,
    pub outputs: Vec<PathBuf>,
}

/// Runs the task sequence over the frozen base and writes all run artifacts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainReport> {
    prepare(cfg)?;
    let base = load_base(cfg, &cfg.out_dir.join(BASE_FILE))?;
    let tasks = make_sequence(&cfg.sequence())?;
    let train = cfg.train();
    let mode = match (cfg.merge_policy(), cfg.merge_cadence) {
        (Some(p), MergeCadence::PerTask) => HistoryMode::Merged(p),
        _ => HistoryMode::Sum,
    };
    let run = run_sequence(&base, &tasks, &train, mode)?;
    let mut matrix = run.acc_matrix.clone();
    matrix.set_scratch(scratch_accuracies(&base, &tasks, &train)?)?;
    let sizes = tasks.test_sizes();
    let n = tasks.len();
    let unmerged: Vec<f64> = (0..n).map(|i| matrix.get(i, n - 1).unwrap_or(0.0)).collect();
    if let (Some(p), MergeCadence::Final) = (cfg.merge_policy(), cfg.merge_cadence) {
        let merged = merged_weights(&base, &run.flat_adapters(), &p, train.lora_scale)?;
        matrix = matrix.with_final_column(&accuracies(&merged, &tasks)?)?;
    }
    let finals: Vec<f64> = (0..n).map(|i| matrix.get(i, n - 1).unwrap_or(0.0)).collect();

    let out = &cfg.out_dir;
    let adapters_path = out.join(ADAPTERS_FILE);
    write_adapters(&adapters_path, &run.flat_adapters())?;
    let acc_path = out.join(ACC_MATRIX_FILE);
    write_json(&acc_path, &AccMatrixFile::from_matrix(&matrix, r6))?;

    let mut traces = String::from("task,step,total,fine_tune,stability,orth\n");
    for (t, trace) in run.loss_traces.iter().enumerate() {
        for (s, l) in trace.iter().enumerate() {
            let _ = writeln!(
                traces,
                "{},{},{},{},{},{}",
                t + 1,
                s,
                r6(l.total),
                r6(l.fine_tune),
                r6(l.stability),
                r6(l.orth)
            );
        }
    }
    let traces_path = out.join("loss_traces.csv");
    fs::write(&traces_path, traces)?;

    let mut signs = String::from("task,layer,same_fraction,opposite_fraction\n");
    let ids = base.net().layer_ids();
    for s in &run.sign_stats {
        for (id, (same, opp)) in ids.iter().zip(&s.per_layer) {
            let _ = writeln!(signs, "{},{},{},{}", s.task, id, r6(*same), r6(*opp));
        }
        let _ = writeln!(
            signs,
            "{},all,{},{}",
            s.task,
            r6(s.same_fraction),
            r6(s.opposite_fraction)
        );
    }
    let signs_path = out.join("sign_stats.csv");
    fs::write(&signs_path, signs)?;

    let report = TrainReport {
        config: cfg.clone(),
        metrics: MetricSummary::compute(&matrix, FrMode::Peak),
        unmerged_final_acc: weighted(&unmerged, &sizes),
        final_acc: weighted(&finals, &sizes),
        opposite_fraction: run.sign_stats.iter().map(|s| s.opposite_fraction).collect(),
        same_fraction: run.sign_stats.iter().map(|s| s.same_fraction).collect(),
        outputs: vec![adapters_path, acc_path, traces_path, signs_path],
    };
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerSelection {
    pub layer: String,
    /// Fraction of entries taken from each task, in adapter order.
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MergeReport {
    pub config: ExperimentConfig,
    pub strategy: MergeStrategy,
    /// Present for the magnitude strategy only.
    pub selection: Option<Vec<LayerSelection>>,
    /// CRC32 of the merged checkpoint body (the value stored in its trailer), hex.
    pub checksum: String,
    pub checkpoint: PathBuf,
}

/// Consolidates the adapters in `adapters` (default `out_dir/adapters.pslr`) into `merged.pslw`.
pub fn cmd_merge(cfg: &ExperimentConfig, adapters: Option<&Path>) -> Result<MergeReport> {
    prepare(cfg)?;
    let base_path = cfg.out_dir.join(BASE_FILE);
    let ad_path = adapters
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(ADAPTERS_FILE));
    require(&[base_path.clone(), ad_path.clone()])?;
    let base = load_base(cfg, &base_path)?;
    let ads = read_adapters(&ad_path)?;
    let policy = cfg.merge_policy().unwrap_or_default();
    let merged = merged_weights(&base, &ads, &policy, cfg.lora_scale)?;
    let selection = if policy.strategy == MergeStrategy::MagnitudeMax {
        let grouped = deltas_by_layer(&base, &ads, cfg.lora_scale)?;
        let ids = base.net().layer_ids();
        let mut out = Vec::new();
        for (id, ds) in ids.into_iter().zip(&grouped) {
            let (_, sources) = merge_fold_with_sources(ds)?;
            let mut counts = vec![0usize; ds.len()];
            sources.iter().for_each(|&s| counts[s] += 1);
            out.push(LayerSelection {
                layer: id,
                fractions: counts.iter().map(|&c| c as f64 / sources.len() as f64).collect(),
            });
        }
        Some(out)
    } else {
        None
    };
    let bytes = encode_weights(&merged)?;
    let path = cfg.out_dir.join(MERGED_FILE);
    fs::write(&path, &bytes)?;
    let report = MergeReport {
        config: cfg.clone(),
        strategy: policy.strategy,
        selection,
        checksum: format!("{:08x}", crc32fast::hash(&bytes[..bytes.len() - 4])),
        checkpoint: path,
    };
    write_json(&cfg.out_dir.join("merge_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub config: ExperimentConfig,
    pub weights: PathBuf,
    pub per_task: Vec<f64>,
    pub acc: f64,
}

/// Evaluates a dense checkpoint (default `merged.pslw`) on every task's test split.
pub fn cmd_eval(cfg: &ExperimentConfig, weights: Option<&Path>) -> Result<EvalReport> {
    prepare(cfg)?;
    let path = weights
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out_dir.join(MERGED_FILE));
    require(std::slice::from_ref(&path))?;
    let model = read_weights(&path)?;
    let tasks = make_sequence(&cfg.sequence())?;
    let per_task = accuracies(&model, &tasks)?;
    let report = EvalReport {
        config: cfg.clone(),
        weights: path,
        acc: weighted(&per_task, &tasks.test_sizes()),
        per_task,
    };
    write_json(&cfg.out_dir.join("eval_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub acc: Option<f64>,
    pub bwt: Option<f64>,
    pub fwt: Option<f64>,
    pub fr: Option<f64>,
    pub aaa: Option<f64>,
    /// Sample standard deviation across inputs; absent for a single input.
    pub per_order_std: Option<MetricSummary>,
    pub runs: Vec<MetricSummary>,
    pub inputs: Vec<PathBuf>,
}

fn mean_std(values: Vec<Option<f64>>) -> (Option<f64>, Option<f64>) {
    let xs: Option<Vec<f64>> = values.into_iter().collect();
    match xs {
        Some(xs) if !xs.is_empty() => (Some(xs.iter().sum::<f64>() / xs.len() as f64), sample_std(&xs)),
        _ => (None, None),
    }
}

/// Metrics of one or more accuracy-matrix files (one per order or seed), with their spread.
pub fn cmd_metrics(cfg: &ExperimentConfig, inputs: &[PathBuf], mode: FrMode) -> Result<MetricsReport> {
    fs::create_dir_all(&cfg.out_dir)?;
    let inputs: Vec<PathBuf> = if inputs.is_empty() {
        vec![cfg.out_dir.join(ACC_MATRIX_FILE)]
    } else {
        inputs.to_vec()
    };
    require(&inputs)?;
    let runs = inputs
        .iter()
        .map(|p| {
            let file: AccMatrixFile = serde_json::from_str(&fs::read_to_string(p)?)?;
            Ok(MetricSummary::compute(&file.to_matrix()?, mode))
        })
        .collect::<Result<Vec<_>>>()?;
    let pick = |f: fn(&MetricSummary) -> Option<f64>| mean_std(runs.iter().map(f).collect());
    let (acc, acc_s) = pick(|m| m.acc);
    let (bwt, bwt_s) = pick(|m| m.bwt);
    let (fwt, fwt_s) = pick(|m| m.fwt);
    let (fr, fr_s) = pick(|m| m.fr);
    let (aaa, aaa_s) = pick(|m| m.aaa);
    let per_order_std = (runs.len() > 1).then_some(MetricSummary {
        acc: acc_s,
        bwt: bwt_s,
        fwt: fwt_s,
        fr: fr_s,
        aaa: aaa_s,
    });
    let report = MetricsReport {
        acc,
        bwt,
        fwt,
        fr,
        aaa,
        per_order_std,
        runs,
        inputs,
    };
    write_json(&cfg.out_dir.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Analysis {
    SignSplit,
    ShiftHist,
    Similarity,
    Taylor,
}

impl Analysis {
    pub fn name(self) -> &'static str {
        match self {
            Analysis::SignSplit => "sign-split",
            Analysis::ShiftHist => "shift-hist",
            Analysis::Similarity => "similarity",
            Analysis::Taylor => "taylor",
        }
    }
}

/// Per-task deltas `deltas[t][layer]`, tasks sorted by their index.
fn task_deltas(base: &BaseModel, ads: &[LoraAdapter], scale: f32) -> Result<Vec<Vec<Matrix>>> {
    let mut tasks: Vec<u32> = ads.iter().map(|a| a.task_index).collect();
    tasks.sort_unstable();
    tasks.dedup();
    let ids = base.net().layer_ids();
    tasks
        .iter()
        .map(|&t| {
            ids.iter()
                .map(|id| {
                    ads.iter()
                        .find(|a| a.task_index == t && &a.layer_id == id)
                        .map(|a| a.delta().scale(scale))
                        .ok_or_else(|| Error::Invalid(format!("task {t} has no adapter for layer {id:?}")))
                })
                .collect()
        })
        .collect()
}

fn cumulative(deltas: &[Vec<Matrix>], upto: usize, base: &BaseModel) -> Result<Vec<Matrix>> {
    base.net()
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut acc = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            for d in &deltas[..upto] {
                acc.add_assign(&d[l])?;
            }
            Ok(acc)
        })
        .collect()
}

/// Runs one diagnostic over a trained run and writes its tables.
///
/// Returns a JSON summary, also written to `out_dir/<name>.json`.
pub fn cmd_analyze(cfg: &ExperimentConfig, which: Analysis, adapters: Option<&Path>) -> Result<Value> {
    prepare(cfg)?;
    let base_path = cfg.out_dir.join(BASE_FILE);
    let out = &cfg.out_dir;
    let summary = if which == Analysis::Taylor {
        let base = load_base(cfg, &base_path)?;
        let tasks = make_sequence(&cfg.sequence())?;
        let study = trained_taylor_study(&base, &tasks.tasks[0], &cfg.train(), &TaylorStudyConfig::default())?;
        json!({
            "lambda_max": study.lambda_max,
            "grad_norm": study.grad_norm,
            "holds_fraction": study.holds_fraction,
            "perturbations": study.checks.len(),
            "radius": TaylorStudyConfig::default().radius,
        })
    } else {
        let ad_path = adapters
            .map(Path::to_path_buf)
            .unwrap_or_else(|| out.join(ADAPTERS_FILE));
        require(&[base_path.clone(), ad_path.clone()])?;
        let base = load_base(cfg, &base_path)?;
        let deltas = task_deltas(&base, &read_adapters(&ad_path)?, cfg.lora_scale)?;
        let ids = base.net().layer_ids();
        match which {
            Analysis::SignSplit => analyze_sign_split(cfg, &base, &deltas)?,
            Analysis::ShiftHist => analyze_shift_hist(cfg, &base, &deltas, &ids)?,
            Analysis::Similarity => {
                let mut csv = String::from("task,layer,similarity\n");
                let mut rows = Vec::new();
                for (t, d) in deltas.iter().enumerate().skip(1) {
                    for (l, id) in ids.iter().enumerate() {
                        let s = frob_similarity(&d[l], &deltas[0][l])?;
                        let _ = writeln!(csv, "{},{},{}", t + 1, id, r6(s));
                        rows.push(json!({"task": t + 1, "layer": id, "similarity": s}));
                    }
                }
                fs::write(out.join("similarity.csv"), csv)?;
                json!({"reference_task": 1, "rows": rows})
            }
            Analysis::Taylor => unreachable!("handled above"),
        }
    };
    let mut full = json!({ "analysis": which.name(), "config": cfg, "summary": summary });
    round_json(&mut full);
    write_json(&out.join(format!("{}.json", which.name())), &full)?;
    Ok(full)
}

fn analyze_sign_split(cfg: &ExperimentConfig, base: &BaseModel, deltas: &[Vec<Matrix>]) -> Result<Value> {
    let tasks = make_sequence(&cfg.sequence())?;
    if tasks.len() < deltas.len() {
        return Err(Error::Config(format!(
            "adapters cover {} tasks but the config generates {}",
            deltas.len(),
            tasks.len()
        )));
    }
    let mut csv = String::from("task,k_percent,same_fraction,opposite_fraction,acc_same,acc_opposite,acc_both\n");
    let mut rows = Vec::new();
    for t in 1..deltas.len() {
        let prev = cumulative(deltas, t, base)?;
        let probes: Vec<&Split> = tasks.tasks[..=t].iter().map(|d| &d.test).collect();
        for &k in &cfg.sign_k_percent {
            let splits = deltas[t]
                .iter()
                .zip(&prev)
                .map(|(d, p)| sign_split(d, p, k))
                .collect::<Result<Vec<_>>>()?;
            let sel: usize = splits.iter().map(|s| s.selected).sum();
            let same = splits.iter().map(|s| s.same_count()).sum::<usize>() as f64 / sel.max(1) as f64;
            let opp = splits.iter().map(|s| s.opposite_count()).sum::<usize>() as f64 / sel.max(1) as f64;
            let mut accs = [0.0; 3];
            for (slot, v) in accs.iter_mut().zip(SubsetVariant::ALL) {
                *slot = eval_subset(base, &prev, &deltas[t], &splits, v, &probes)?;
            }
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                t + 1,
                k,
                r6(same),
                r6(opp),
                r6(accs[0]),
                r6(accs[1]),
                r6(accs[2])
            );
            rows.push(json!({
                "task": t + 1, "k_percent": k, "same_fraction": same, "opposite_fraction": opp,
                "acc_same": accs[0], "acc_opposite": accs[1], "acc_both": accs[2],
            }));
        }
    }
    fs::write(cfg.out_dir.join("sign_split.csv"), csv)?;
    Ok(json!({"probe": "mean accuracy over all seen tasks", "selection": "smallest |delta| first", "rows": rows}))
}

fn analyze_shift_hist(
    cfg: &ExperimentConfig,
    base: &BaseModel,
    deltas: &[Vec<Matrix>],
    ids: &[String],
) -> Result<Value> {
    let cums: Vec<Vec<Matrix>> = (1..=deltas.len())
        .map(|t| cumulative(deltas, t, base))
        .collect::<Result<_>>()?;
    let mut files = Vec::new();
    for (l, id) in ids.iter().enumerate() {
        let mut m = 0.0f64;
        for c in &cums {
            let sel = pooled_selection(&c[l], cfg.hist_top_fraction, cfg.hist_pool_window)?;
            m = m.max(sel.iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64);
        }
        for (t, c) in cums.iter().enumerate() {
            let h = shift_histogram_in_range(
                &c[l],
                cfg.hist_top_fraction,
                cfg.hist_pool_window,
                m,
                cfg.hist_bins,
                t + 1,
            )?;
            let mut csv = String::from("bin_lo,bin_hi,count\n");
            for (w, n) in h.bin_edges.windows(2).zip(&h.counts) {
                let _ = writeln!(csv, "{},{},{}", r6(w[0]), r6(w[1]), n);
            }
            let name = format!("shift_hist_{id}_task{}.csv", t + 1);
            fs::write(cfg.out_dir.join(&name), csv)?;
            files.push(json!({"layer": id, "task": t + 1, "file": name, "selected": h.counts.iter().sum::<usize>(), "half_range": if m > 0.0 { m } else { 1.0 }}));
        }
    }
    Ok(json!({
        "top_fraction": cfg.hist_top_fraction,
        "pool_window": cfg.hist_pool_window,
        "bins": cfg.hist_bins,
        "files": files,
    }))
}
