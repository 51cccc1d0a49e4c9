//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use fairbat::analysis::avg_steps_from_trace;
use fairbat::{
    confusion_matrix, fairness_report, spearman, trace_dataset, AttackConfig, ClassErrors, ConfusionMatrix, Dataset,
    Diagnostics, EvalOptions, FairnessReport, MixtureSpec, Model, TargetDistribution, TrainHistory,
};

use crate::config::{exclude_classes, load_dataset_file, ExperimentConfig};
use crate::CliError;

pub struct EvalInputs {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub exclude: Vec<usize>,
    pub out: PathBuf,
    pub opts: EvalOptions,
}

impl EvalInputs {
    fn load(&self) -> Result<(Model, Dataset), CliError> {
        if !self.checkpoint.is_file() {
            return Err(CliError::NotFound { what: "checkpoint", path: self.checkpoint.clone() });
        }
        let model = Model::load(&self.checkpoint)?;
        let ds = exclude_classes(load_dataset_file(&self.dataset)?, &self.exclude)?;
        Ok((model, ds))
    }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), contents)?;
    Ok(())
}

fn ensure_finite(what: &str, values: impl IntoIterator<Item = f64>) -> Result<(), CliError> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CliError::Invalid(format!("non-finite value in {what}")))
    }
}

/// Original class id of each class of `ds`.
fn class_ids(ds: &Dataset) -> Vec<usize> {
    (0..ds.num_classes()).map(|c| ds.original_class(c)).collect()
}

pub fn gen(spec_path: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    if !spec_path.is_file() {
        return Err(CliError::NotFound { what: "spec", path: spec_path.to_path_buf() });
    }
    let text = fs::read_to_string(spec_path)?;
    let spec: MixtureSpec =
        serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", spec_path.display())))?;
    let ds = fairbat::gen_mixture(&spec, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fairbat::save_dataset(&ds, out)?;
    let counts: Vec<String> = ds.class_counts().iter().map(usize::to_string).collect();
    println!("N={} K={} counts={}", ds.len(), ds.num_classes(), counts.join(","));
    Ok(())
}

fn history_snapshots_csv(h: &TrainHistory, ids: &[usize]) -> Option<String> {
    let mut out = String::from("epoch,class,clean_acc,robust_acc\n");
    let mut any = false;
    for r in &h.records {
        if let Some(pc) = &r.per_class {
            any = true;
            for (c, id) in ids.iter().enumerate() {
                writeln!(out, "{},{id},{},{}", r.epoch, pc.clean_acc[c], pc.robust_acc[c]).unwrap();
            }
        }
    }
    any.then_some(out)
}

pub fn train(config_path: &Path, out_override: Option<&Path>) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(out) = out_override {
        cfg.output_dir = out.to_path_buf();
    }
    let train_ds = exclude_classes(cfg.dataset.load()?, &cfg.exclude_classes)?;
    let test_ds = match &cfg.test_dataset {
        Some(src) => Some(exclude_classes(src.load()?, &cfg.exclude_classes)?),
        None => None,
    };
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| CliError::Invalid(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let dir = cfg.output_dir.clone();
    write(&dir, "config.json", &cfg.to_json())?;

    let (model, history) = fairbat::train(&cfg.train_config(), &cfg.model, &train_ds)?;
    ensure_finite(
        "history",
        history.records.iter().flat_map(|r| [r.loss_total, r.loss_source, r.loss_target]),
    )?;
    model.save(dir.join("model.fbm"))?;
    write(&dir, "history.csv", &history.to_csv())?;
    if let Some(csv) = history_snapshots_csv(&history, &class_ids(&train_ds)) {
        write(&dir, "snapshots.csv", &csv)?;
    }
    if let Some(last) = history.records.last() {
        println!(
            "trained {} for {} epochs: final loss {:.4}",
            cfg.train.method.name(),
            last.epoch,
            last.loss_total
        );
    }

    if let Some(test_ds) = test_ds {
        let opts = EvalOptions::with_seed(cfg.seed);
        let trace = trace_dataset(&model, &test_ds, &cfg.eval_attack, &opts)?;
        let errors = ClassErrors::from_trace(&trace)?;
        let cm = ConfusionMatrix::from_trace(&trace, None)?;
        let target = TargetDistribution::from_confusion(&cm).ok();
        let steps = fairbat::analysis::avg_attack_steps(&model, &test_ds, &cfg.longrun_attack, &opts)?;
        let diag = Diagnostics::new(steps, target, &errors);
        let report = fairness_report(errors, Some(diag))?.with_class_map(test_ds.class_map());
        emit_report(&report, &dir)?;
    }
    Ok(())
}

/// The six headline numbers in percent, two decimals. `avg_rob` is printed
/// as the sum of the printed `avg_std` and `avg_bndy` so that the identity
/// holds on the printed values too.
pub fn headline_row(r: &FairnessReport) -> [String; 6] {
    let hundredths = |v: f64| (v * 10_000.0).round() as i64;
    let fmt = |h: i64| format!("{}.{:02}", h / 100, h % 100);
    let avg_std = hundredths(r.avg_std);
    let avg_bndy = hundredths(r.avg_bndy);
    [
        fmt(avg_std),
        fmt(hundredths(r.worst_std)),
        fmt(avg_bndy),
        fmt(hundredths(r.worst_bndy)),
        fmt(avg_std + avg_bndy),
        fmt(hundredths(r.worst_rob)),
    ]
}

fn emit_report(report: &FairnessReport, dir: &Path) -> Result<(), CliError> {
    ensure_finite("report", report.headline())?;
    write(dir, "report.json", &(report.to_json()? + "\n"))?;
    write(dir, "report.csv", &report.to_csv())?;
    if let Some(d) = &report.diagnostics {
        let ids = report
            .original_class
            .clone()
            .unwrap_or_else(|| (0..report.per_class.num_classes()).collect());
        let mut csv = String::from("class,avg_attack_steps,target_mass\n");
        for (c, id) in ids.iter().enumerate() {
            let mass = d.target.as_ref().map_or(String::new(), |t| t.probs[c].to_string());
            writeln!(csv, "{id},{},{mass}", d.avg_attack_steps[c]).unwrap();
        }
        write(dir, "diagnostics.csv", &csv)?;
    }
    println!("avg_std worst_std avg_bndy worst_bndy avg_rob worst_rob");
    println!("{}", headline_row(report).join(" "));
    Ok(())
}

pub fn eval(inputs: &EvalInputs, attack: &AttackConfig) -> Result<(), CliError> {
    let (model, ds) = inputs.load()?;
    let trace = trace_dataset(&model, &ds, attack, &inputs.opts)?;
    let report = fairness_report(ClassErrors::from_trace(&trace)?, None)?.with_class_map(ds.class_map());
    emit_report(&report, &inputs.out)
}

pub fn analyze_steps(inputs: &EvalInputs, longrun: &AttackConfig, eval_attack: &AttackConfig) -> Result<(), CliError> {
    let (model, ds) = inputs.load()?;
    let steps = avg_steps_from_trace(&trace_dataset(&model, &ds, longrun, &inputs.opts)?)?;
    let errors = ClassErrors::from_trace(&trace_dataset(&model, &ds, eval_attack, &inputs.opts)?)?;
    let robust_acc: Vec<f64> = errors.rob_err.iter().map(|e| 1.0 - e).collect();
    ensure_finite("attack steps", steps.iter().copied())?;
    let mut csv = String::from("class,avg_attack_steps,robust_acc\n");
    for (c, id) in class_ids(&ds).iter().enumerate() {
        writeln!(csv, "{id},{},{}", steps[c], robust_acc[c]).unwrap();
    }
    write(&inputs.out, "steps.csv", &csv)?;
    print!("{csv}");
    match spearman(&steps, &robust_acc) {
        Ok(rho) => println!("spearman={rho:.4}"),
        Err(e) => println!("spearman=undefined ({e})"),
    }
    Ok(())
}

pub fn analyze_targets(inputs: &EvalInputs, attack: &AttackConfig) -> Result<(), CliError> {
    let (model, ds) = inputs.load()?;
    let cm = confusion_matrix(&model, &ds, attack, None, &inputs.opts)?;
    let t = TargetDistribution::from_confusion(&cm)?;
    ensure_finite("target distribution", t.probs.iter().copied().chain([t.kl_to_uniform]))?;
    let mut csv = String::from("class,count,prob\n");
    for (c, id) in class_ids(&ds).iter().enumerate() {
        writeln!(csv, "{id},{},{}", t.counts[c], t.probs[c]).unwrap();
    }
    write(&inputs.out, "targets.csv", &csv)?;
    print!("{csv}");
    println!("kl_to_uniform={:.6}", t.kl_to_uniform);
    Ok(())
}

pub fn analyze_confusion(inputs: &EvalInputs, attack: &AttackConfig, at_step: Option<usize>) -> Result<(), CliError> {
    let (model, ds) = inputs.load()?;
    let cm = confusion_matrix(&model, &ds, attack, at_step, &inputs.opts)?;
    let ids = class_ids(&ds);
    let mut csv = String::from("class");
    for id in &ids {
        write!(csv, ",{id}").unwrap();
    }
    csv.push('\n');
    for (row, id) in cm.counts.iter().zip(&ids) {
        write!(csv, "{id}").unwrap();
        for v in row {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    write(&inputs.out, "confusion.csv", &csv)?;
    println!("confusion matrix at step {} ({} samples)", cm.at_step, cm.total());
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(avg_std: f64, avg_bndy: f64) -> FairnessReport {
        let errors = ClassErrors::from_std_and_bndy(vec![avg_std; 2], vec![avg_bndy; 2], vec![1; 2]).unwrap();
        fairness_report(errors, None).unwrap()
    }

    #[test]
    fn headline_row_keeps_the_identity_after_rounding() {
        for (s, b) in [(0.129149, 0.315749), (0.1343, 0.3947), (0.0, 0.0), (0.333333, 0.333333), (0.5, 0.5)] {
            let row = headline_row(&report(s, b));
            let p: Vec<f64> = row.iter().map(|v| v.parse().unwrap()).collect();
            assert!((p[4] - p[0] - p[2]).abs() < 1e-9, "{row:?}");
            assert!((p[4] - 100.0 * (s + b)).abs() <= 0.01 + 1e-9);
        }
        assert_eq!(headline_row(&report(0.1343, 0.3947))[4], "52.90");
    }
}
