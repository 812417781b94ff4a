//! Subcommand implementations. Each writes its resolved configuration into
//! the output directory before doing any work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use mam_core::data::{generate_synthetic, FoldSpec, SyntheticSystem};
use mam_core::experiment::{
    ablation_variants, evaluate_fold, pooled_latents, train_fold, FoldData, FoldRecord, RunConfig,
};
use mam_core::metrics::{
    aggregate, pca_2d, probe, write_markdown, write_reports_csv, MeanStd, MetricsReport, ProbeKind,
};
use mam_core::store;
use mam_core::trainer::load_checkpoint;
use mam_core::{Error, Result};
use mam_tape::ParamSet;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, CommonArgs};
use crate::plot::{overlay_svg, scatter_svg};

pub const CONFIG_FILE: &str = "config.json";

fn out_dir(args: &CommonArgs, fallback: &str) -> PathBuf {
    args.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
}

fn fold_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("fold_{index}"))
}

fn load_run_config(run: &Path) -> Result<RunConfig> {
    let path = run.join(CONFIG_FILE);
    if !path.exists() {
        return Err(Error::Data(format!("{} has no {CONFIG_FILE}", run.display())));
    }
    let text = fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Fold directories of a run, in fold order.
fn fold_dirs(run: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(run)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().to_string();
            let idx = name.strip_prefix("fold_")?.parse().ok()?;
            Some((idx, e.path()))
        })
        .collect();
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticArgs {
    pub system: String,
    pub n_sequences: usize,
    pub length: usize,
    pub seed: u64,
}

/// Writes a synthetic dataset directory plus a `hidden.bin` sidecar holding
/// the hidden trajectories (for tests only).
pub fn make_synthetic(args: &SyntheticArgs, out: &Path) -> Result<()> {
    let sys = SyntheticSystem::preset(&args.system).map_err(|e| Error::Config(format!("--system: {e}")))?;
    if args.n_sequences == 0 || args.length == 0 {
        return Err(Error::Config("--n-sequences and --length must be >= 1".into()));
    }
    fs::create_dir_all(out)?;
    store::write_json(&out.join(CONFIG_FILE), args)?;
    let generated = generate_synthetic(&sys, args.n_sequences, args.length, args.seed)?;
    let source = serde_json::json!({ "generator": args, "system": sys });
    generated.dataset.save(out, source)?;
    let mut hidden = ParamSet::new();
    hidden.insert("hidden", generated.hidden.into_dyn());
    store::write_arrays(&out.join("hidden.bin"), &hidden)
}

/// Trains every configured fold into `<out>/fold_<i>/`. With `resume`, the
/// run directory's own config is the base and existing checkpoints continue.
pub fn train(args: &CommonArgs, resume: Option<&Path>) -> Result<PathBuf> {
    let base = resume.map(load_run_config).transpose()?;
    let cfg = resolve(args, base)?;
    let out = match resume {
        Some(dir) => dir.to_path_buf(),
        None => out_dir(args, "runs/train"),
    };
    fs::create_dir_all(&out)?;
    store::write_json(&out.join(CONFIG_FILE), &cfg)?;
    let raw = cfg.data.load()?;
    for fold in cfg.folds.folds(&raw)? {
        let dir = fold_dir(&out, fold.fold_index);
        let ckpt = dir.join("checkpoint");
        let (data, trainer) = if resume.is_some() && ckpt.join("manifest.json").exists() {
            let (mut trainer, manifest) = load_checkpoint(&ckpt)?;
            let scaler = manifest
                .scaler
                .ok_or_else(|| Error::Data(format!("{} has no scaler", ckpt.display())))?;
            // flags such as --epochs apply to the continued run
            trainer.config.epochs = cfg.train.epochs;
            trainer.config.max_steps = cfg.train.max_steps;
            (FoldData::with_frozen_scaler(&raw, &fold, scaler)?, Some(trainer))
        } else {
            (FoldData::prepare(&raw, &fold)?, None)
        };
        let (trainer, history) = train_fold(&cfg, &data, &fold, Some(&dir), trainer)?;
        log::info!(
            "fold {}: {} steps ({} skipped), final total loss {:.5}",
            fold.fold_index,
            trainer.step,
            trainer.skipped,
            history.last().map_or(f64::NAN, |b| b.total)
        );
    }
    Ok(out)
}

fn write_plots(dir: &Path, fold: usize, a: &mam_core::experiment::EvalArtifacts) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join(format!("fold_{fold}_x_given_y.svg")),
        overlay_svg(
            &a.real_x,
            &a.gen_x,
            &format!("fold {fold}: X | Y, real vs generated (mean ± 1 std)"),
        ),
    )?;
    fs::write(
        dir.join(format!("fold_{fold}_y_given_x.svg")),
        overlay_svg(
            &a.real_y,
            &a.gen_y,
            &format!("fold {fold}: Y | X, real vs generated (mean ± 1 std)"),
        ),
    )?;
    for (tag, z) in [("x", &a.latent_x), ("y", &a.latent_y)] {
        if z.nrows() >= 2 {
            let p = pca_2d(z)?;
            fs::write(
                dir.join(format!("fold_{fold}_latent_{tag}_pca.svg")),
                scatter_svg(
                    &p,
                    &a.labels,
                    &format!("fold {fold}: Z_{} PCA, colored by label", tag.to_uppercase()),
                ),
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct EvalProvenance<'a> {
    run: &'a Path,
    config: &'a RunConfig,
}

/// Evaluates every fold checkpoint of `run`. Reports and plots go to `out`
/// (default `<run>/eval`).
pub fn evaluate(run: &Path, data: Option<&str>, predictive: bool, out: Option<&Path>) -> Result<Vec<MetricsReport>> {
    let mut cfg = load_run_config(run)?;
    if let Some(src) = data {
        cfg.data = crate::config::parse_data(src)?;
    }
    cfg.eval.predictive |= predictive;
    let out = out.map_or_else(|| run.join("eval"), Path::to_path_buf);
    fs::create_dir_all(&out)?;
    store::write_json(&out.join(CONFIG_FILE), &EvalProvenance { run, config: &cfg })?;
    let raw = cfg.data.load()?;
    let dirs = fold_dirs(run)?;
    if dirs.is_empty() {
        return Err(Error::Data(format!("no fold checkpoints under {}", run.display())));
    }
    let mut reports = Vec::new();
    for dir in dirs {
        let ckpt = dir.join("checkpoint");
        if !ckpt.join("manifest.json").exists() {
            return Err(Error::Data(format!("missing checkpoint {}", ckpt.display())));
        }
        let (trainer, manifest) = load_checkpoint(&ckpt)?;
        let record: FoldRecord = serde_json::from_value(manifest.metrics.clone())
            .map_err(|e| Error::Data(format!("{}: fold record: {e}", ckpt.display())))?;
        let scaler = manifest
            .scaler
            .ok_or_else(|| Error::Data(format!("{} has no scaler", ckpt.display())))?;
        let data = FoldData::with_frozen_scaler(&raw, &record.fold, scaler)?;
        let (rows, artifacts) = evaluate_fold(
            &trainer,
            &data,
            record.fold.fold_index,
            &record.modality_pair,
            &cfg.eval,
        )?;
        write_plots(&out.join("plots"), record.fold.fold_index, &artifacts)?;
        reports.extend(rows);
    }
    write_reports_csv(&out.join("reports.csv"), &reports)?;
    write_markdown(&out.join("summary.md"), &aggregate(&reports))?;
    Ok(reports)
}

fn worker_count() -> usize {
    std::env::var("MAM_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n >= 1)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on at most `MAM_NUM_THREADS` threads; results keep job order.
pub fn parallel_map<T: Sync, R: Send>(jobs: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..worker_count().min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Trains and evaluates every fold of `cfg` into `out`, returning all rows.
pub fn train_and_evaluate(cfg: &RunConfig, out: &Path) -> Result<Vec<MetricsReport>> {
    fs::create_dir_all(out)?;
    store::write_json(&out.join(CONFIG_FILE), cfg)?;
    let raw = cfg.data.load()?;
    let folds = cfg.folds.folds(&raw)?;
    store::write_json(&out.join("folds.json"), &folds)?;
    let mut reports = Vec::new();
    for fold in &folds {
        let data = FoldData::prepare(&raw, fold)?;
        let dir = fold_dir(out, fold.fold_index);
        let (trainer, _) = train_fold(cfg, &data, fold, Some(&dir), None)?;
        let (rows, artifacts) = evaluate_fold(&trainer, &data, fold.fold_index, &cfg.data.modality_pair(), &cfg.eval)?;
        write_plots(&dir.join("plots"), fold.fold_index, &artifacts)?;
        reports.extend(rows);
    }
    write_reports_csv(&out.join("reports.csv"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub energy: bool,
    pub contrast: bool,
    pub cov: bool,
    pub mse_x_given_y: MeanStd,
    pub mse_y_given_x: MeanStd,
    pub median_x_given_y: f64,
    pub median_y_given_x: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn test_mse(reports: &[MetricsReport], direction: &str) -> Vec<f64> {
    reports
        .iter()
        .filter(|r| r.split == "test" && r.direction == direction)
        .map(|r| r.mse)
        .collect()
}

pub fn ablation_row(label: &str, flags: (bool, bool, bool), reports: &[MetricsReport]) -> Result<AblationRow> {
    let (contrast, cov, energy) = flags;
    let xy = test_mse(reports, "X|Y");
    let yx = test_mse(reports, "Y|X");
    let summary = |v: &[f64]| MeanStd::of(v).ok_or_else(|| Error::Data(format!("{label}: no test rows")));
    Ok(AblationRow {
        variant: label.to_string(),
        energy,
        contrast,
        cov,
        mse_x_given_y: summary(&xy)?,
        mse_y_given_x: summary(&yx)?,
        median_x_given_y: median(&xy),
        median_y_given_x: median(&yx),
    })
}

/// Markdown ablation table with one checkmark column per loss term, followed
/// by a flag line for every ablated variant whose median MSE beats the full
/// objective.
pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "✓" } else { " " };
    let mut out = String::from(
        "| variant | L_energy | L_contrast | L_cov | X|Y MSE ↓ | Y|X MSE ↓ |\n|---|:-:|:-:|:-:|---|---|\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {:.4} |",
            r.variant,
            mark(r.energy),
            mark(r.contrast),
            mark(r.cov),
            r.mse_x_given_y,
            r.mse_y_given_x
        );
    }
    if let Some(full) = rows.iter().find(|r| r.energy && r.contrast && r.cov) {
        for r in rows.iter().filter(|r| !(r.energy && r.contrast && r.cov)) {
            for (dir, f, v) in [
                ("X|Y", full.median_x_given_y, r.median_x_given_y),
                ("Y|X", full.median_y_given_x, r.median_y_given_x),
            ] {
                if f > v {
                    let _ = writeln!(
                        out,
                        "\nflag: {} has lower median {dir} MSE ({v:.4}) than the full objective ({f:.4})",
                        r.variant
                    );
                }
            }
        }
    }
    out
}

/// Runs the four ablation variants with shared seeds and folds. Each variant
/// gets its own subdirectory; `ablation.md` and `ablation.csv` summarize.
pub fn ablate(args: &CommonArgs) -> Result<Vec<AblationRow>> {
    let cfg = resolve(args, None)?;
    let out = out_dir(args, "runs/ablate");
    fs::create_dir_all(&out)?;
    store::write_json(&out.join(CONFIG_FILE), &cfg)?;
    let variants = ablation_variants(&cfg.train);
    let per_variant = parallel_map(&variants, |v| {
        let run = RunConfig {
            name: format!("{}-{}", cfg.name, v.label),
            train: v.config.clone(),
            ..cfg.clone()
        };
        train_and_evaluate(&run, &out.join(&v.label))
    })?;
    let rows = variants
        .iter()
        .zip(&per_variant)
        .map(|(v, reports)| ablation_row(&v.label, (v.contrast, v.cov, v.energy), reports))
        .collect::<Result<Vec<_>>>()?;
    fs::write(out.join("ablation.md"), ablation_markdown(&rows))?;
    let mut w = csv::Writer::from_path(out.join("ablation.csv")).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.write_record([
            r.variant.clone(),
            r.energy.to_string(),
            r.contrast.to_string(),
            r.cov.to_string(),
            r.mse_x_given_y.mean.to_string(),
            r.mse_x_given_y.std.to_string(),
            r.mse_y_given_x.mean.to_string(),
            r.mse_y_given_x.std.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub variant: String,
    /// Which encoder produced the latents: `X` or `Y`.
    pub encoder: String,
    pub kind: String,
    pub fold_index: usize,
    pub accuracy: f64,
    pub n_test: usize,
    pub chance: f64,
}

/// Linear and nonlinear probes of both encoders on each run's held-out
/// split. Writes `probe.csv` and `probe.md` to `out`.
pub fn probe_runs(runs: &[PathBuf], out: &Path, seed: u64) -> Result<Vec<ProbeRow>> {
    fs::create_dir_all(out)?;
    store::write_json(
        &out.join(CONFIG_FILE),
        &serde_json::json!({ "runs": runs, "seed": seed }),
    )?;
    let mut rows = Vec::new();
    for run in runs {
        let cfg = load_run_config(run)?;
        let raw = cfg.data.load()?;
        for dir in fold_dirs(run)? {
            let ckpt = dir.join("checkpoint");
            let (trainer, manifest) = load_checkpoint(&ckpt)?;
            let record: FoldRecord = serde_json::from_value(manifest.metrics.clone())
                .map_err(|e| Error::Data(format!("{}: fold record: {e}", ckpt.display())))?;
            let scaler = manifest
                .scaler
                .ok_or_else(|| Error::Data(format!("{} has no scaler", ckpt.display())))?;
            let data = FoldData::with_frozen_scaler(&raw, &record.fold, scaler)?;
            let labels = data.test.labels();
            let (zx, zy) = pooled_latents(&trainer, &data.test, seed)?;
            let (_, test_idx) = mam_core::metrics::stratified_split(&labels, seed);
            let k = {
                let mut l = labels.clone();
                l.sort_unstable();
                l.dedup();
                l.len()
            };
            for (encoder, z) in [("X", &zx), ("Y", &zy)] {
                for (kind, name) in [(ProbeKind::Linear, "linear"), (ProbeKind::Nonlinear, "nonlinear")] {
                    rows.push(ProbeRow {
                        variant: record.variant.clone(),
                        encoder: encoder.into(),
                        kind: name.into(),
                        fold_index: record.fold.fold_index,
                        accuracy: probe(z, &labels, kind, seed)?,
                        n_test: test_idx.len(),
                        chance: 1.0 / k as f64,
                    });
                }
            }
        }
    }
    let mut w = csv::Writer::from_path(out.join("probe.csv")).map_err(|e| Error::Data(e.to_string()))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    fs::write(out.join("probe.md"), probe_markdown(&rows))?;
    Ok(rows)
}

pub fn probe_markdown(rows: &[ProbeRow]) -> String {
    let mut groups: std::collections::BTreeMap<(String, String, String), Vec<&ProbeRow>> = Default::default();
    for r in rows {
        groups
            .entry((r.variant.clone(), r.encoder.clone(), r.kind.clone()))
            .or_default()
            .push(r);
    }
    let mut out = String::from(
        "| method | encoder | probe | accuracy ↑ | chance | 3σ above chance |\n|---|---|---|---|---|---|\n",
    );
    for ((variant, encoder, kind), g) in groups {
        let acc: Vec<f64> = g.iter().map(|r| r.accuracy).collect();
        let chance = g[0].chance;
        let sigma = (chance * (1.0 - chance) / g[0].n_test.max(1) as f64).sqrt();
        let m = MeanStd::of(&acc).expect("non-empty group");
        let _ = writeln!(
            out,
            "| {variant} | {encoder} | {kind} | {m:.3} | {chance:.3} | {} |",
            if m.mean > chance + 3.0 * sigma { "yes" } else { "no" }
        );
    }
    out
}

/// Fold specs written next to a run, for cross-variant comparisons.
pub fn read_folds(dir: &Path) -> Result<Vec<FoldSpec>> {
    let text = fs::read_to_string(dir.join("folds.json"))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, direction: &str, mse: f64) -> MetricsReport {
        MetricsReport {
            variant: variant.into(),
            modality_pair: "x-y".into(),
            direction: direction.into(),
            fold_index: 0,
            split: "test".into(),
            mse,
            fid: 0.0,
            predictive: None,
            predictive_ratio: None,
            probe_linear: None,
            probe_nonlinear: None,
            latent_correlation: None,
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn ablation_table_flags_inversions() {
        let full = ablation_row(
            "llma",
            (true, true, true),
            &[row("llma", "X|Y", 0.2), row("llma", "Y|X", 0.1)],
        )
        .unwrap();
        let worse = ablation_row(
            "llma-no-cov",
            (true, false, true),
            &[row("a", "X|Y", 0.3), row("a", "Y|X", 0.2)],
        )
        .unwrap();
        let better = ablation_row(
            "llma-no-energy",
            (true, true, false),
            &[row("a", "X|Y", 0.1), row("a", "Y|X", 0.2)],
        )
        .unwrap();
        let md = ablation_markdown(&[full, worse, better]);
        assert_eq!(md.lines().filter(|l| l.starts_with("| llma")).count(), 3);
        assert!(md.contains("| llma-no-cov | ✓ | ✓ |   |"));
        assert_eq!(md.matches("flag:").count(), 1);
        assert!(md.contains("flag: llma-no-energy has lower median X|Y MSE"));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let jobs: Vec<usize> = (0..7).collect();
        let out = parallel_map(&jobs, |&j| Ok(j * 10)).unwrap();
        assert_eq!(out, vec![0, 10, 20, 30, 40, 50, 60]);
    }
}
