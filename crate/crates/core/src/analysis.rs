//! Robust-fairness measurements.
//!
//! Everything here is derived from one early-stopping evaluation attack per
//! sample ([`trace_dataset`]): clean predictions, the step of the first
//! misclassification and the class predicted at that point. Per-class
//! errors, confusion matrices at any step, attack-step statistics and the
//! adversarial target distribution are then exact functions of the trace,
//! which keeps them mutually consistent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_trace, AttackConfig, NoiseKey};
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::model::Model;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "FAIRBAT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    /// Worker threads; 0 picks [`THREADS_ENV`] or the number of CPUs.
    pub threads: usize,
    /// Samples per attack shard.
    pub batch_size: usize,
    /// Seed for random starts.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threads: 0,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    fn thread_count(&self) -> usize {
        if self.threads > 0 {
            return self.threads;
        }
        std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

/// Per-sample outcome of the evaluation attack over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTrace {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub clean_pred: Vec<usize>,
    pub first_failure: Vec<Option<usize>>,
    pub failure_pred: Vec<usize>,
    pub max_steps: usize,
}

impl DatasetTrace {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clean_correct(&self, i: usize) -> bool {
        self.clean_pred[i] == self.labels[i]
    }

    pub fn robust(&self, i: usize) -> bool {
        self.first_failure[i].is_none()
    }

    pub fn prediction_at(&self, i: usize, step: usize) -> usize {
        match self.first_failure[i] {
            Some(t) if t <= step => self.failure_pred[i],
            _ => self.labels[i],
        }
    }

    pub fn steps_to_failure(&self, i: usize) -> usize {
        self.first_failure[i].unwrap_or(self.max_steps)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn clean_accuracy(&self) -> f64 {
        let hits = (0..self.len()).filter(|&i| self.clean_correct(i)).count();
        hits as f64 / self.len() as f64
    }

    pub fn robust_accuracy(&self) -> f64 {
        let hits = (0..self.len()).filter(|&i| self.robust(i)).count();
        hits as f64 / self.len() as f64
    }
}

fn check_compatible(model: &Model, ds: &Dataset) -> Result<()> {
    if model.n_classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but dataset has {}",
            model.n_classes(),
            ds.num_classes()
        )));
    }
    if model.spec().input_shape() != ds.sample_shape() {
        return Err(shape_err(
            "evaluate",
            format!(
                "model expects samples of shape {:?}, dataset has {:?}",
                model.spec().input_shape(),
                ds.sample_shape()
            ),
        ));
    }
    Ok(())
}

/// Runs the evaluation attack over `ds`, sharded across threads. Results
/// do not depend on the thread count or shard size.
pub fn trace_dataset(model: &Model, ds: &Dataset, cfg: &AttackConfig, opts: &EvalOptions) -> Result<DatasetTrace> {
    check_compatible(model, ds)?;
    cfg.validate()?;
    let shard = opts.batch_size.max(1);
    let key = NoiseKey::eval(opts.seed);
    let chunks: Vec<Vec<usize>> = (0..ds.len())
        .collect::<Vec<_>>()
        .chunks(shard)
        .map(<[usize]>::to_vec)
        .collect();
    let run = |idx: &Vec<usize>| attack_trace(model, &ds.batch(idx)?, cfg, key);
    let threads = opts.thread_count();
    let traces: Vec<_> = if threads <= 1 || chunks.len() <= 1 {
        chunks.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(run).collect::<Result<_>>())?
    };
    let mut out = DatasetTrace {
        num_classes: ds.num_classes(),
        labels: Vec::with_capacity(ds.len()),
        clean_pred: Vec::with_capacity(ds.len()),
        first_failure: Vec::with_capacity(ds.len()),
        failure_pred: Vec::with_capacity(ds.len()),
        max_steps: cfg.max_steps,
    };
    for t in traces {
        out.labels.extend(t.labels);
        out.clean_pred.extend(t.clean_pred);
        out.first_failure.extend(t.first_failure);
        out.failure_pred.extend(t.failure_pred);
    }
    Ok(out)
}

/// Per-class standard, robust and boundary error rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassErrors {
    pub std_err: Vec<f64>,
    pub rob_err: Vec<f64>,
    /// `rob_err - std_err`
    pub bndy_err: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassErrors {
    pub fn from_rates(std_err: Vec<f64>, rob_err: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if std_err.len() != rob_err.len() || std_err.len() != counts.len() {
            return Err(shape_err(
                "class_errors",
                format!(
                    "{} std, {} rob, {} counts",
                    std_err.len(),
                    rob_err.len(),
                    counts.len()
                ),
            ));
        }
        for (c, (&s, &r)) in std_err.iter().zip(&rob_err).enumerate() {
            if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&r) || s > r {
                return Err(Error::Domain {
                    op: "class_errors",
                    detail: format!("class {c}: need 0 <= std ({s}) <= rob ({r}) <= 1"),
                });
            }
        }
        let bndy_err = rob_err.iter().zip(&std_err).map(|(r, s)| r - s).collect();
        Ok(Self {
            std_err,
            rob_err,
            bndy_err,
            counts,
        })
    }

    /// Builds the table from standard and boundary errors, `rob = std + bndy`.
    pub fn from_std_and_bndy(std_err: Vec<f64>, bndy_err: Vec<f64>, counts: Vec<usize>) -> Result<Self> {
        if std_err.len() != bndy_err.len() {
            return Err(shape_err(
                "class_errors",
                format!("{} std vs {} bndy", std_err.len(), bndy_err.len()),
            ));
        }
        let rob = std_err.iter().zip(&bndy_err).map(|(s, b)| s + b).collect();
        let mut out = Self::from_rates(std_err, rob, counts)?;
        out.bndy_err = bndy_err;
        Ok(out)
    }

    pub fn from_trace(trace: &DatasetTrace) -> Result<Self> {
        let counts = trace.class_counts();
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(c));
        }
        let k = trace.num_classes;
        let mut std_wrong = vec![0usize; k];
        let mut rob_wrong = vec![0usize; k];
        for i in 0..trace.len() {
            let y = trace.labels[i];
            std_wrong[y] += usize::from(!trace.clean_correct(i));
            rob_wrong[y] += usize::from(!trace.robust(i));
        }
        let rate = |w: &[usize]| -> Vec<f64> {
            w.iter().zip(&counts).map(|(&w, &n)| w as f64 / n as f64).collect()
        };
        Self::from_rates(rate(&std_wrong), rate(&rob_wrong), counts)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }
}

pub fn class_errors(model: &Model, ds: &Dataset, eval_attack: &AttackConfig, opts: &EvalOptions) -> Result<ClassErrors> {
    ClassErrors::from_trace(&trace_dataset(model, ds, eval_attack, opts)?)
}

/// Empirical distribution of the classes that successful attacks land in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    pub counts: Vec<usize>,
    pub probs: Vec<f64>,
    /// `KL(p̂ || U) = Σ p̂_k ln(K p̂_k)`, with `0 ln 0 = 0`.
    pub kl_to_uniform: f64,
}

impl TargetDistribution {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::NoAdversarialTargets);
        }
        let k = counts.len() as f64;
        let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let kl = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * (k * p).ln())
            .sum::<f64>()
            .max(0.0);
        Ok(Self {
            counts,
            probs,
            kl_to_uniform: kl,
        })
    }

    pub fn successes(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Off-diagonal column sums of a confusion matrix.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let k = cm.num_classes();
        let counts = (0..k)
            .map(|j| (0..k).filter(|&i| i != j).map(|i| cm.counts[i][j] as usize).sum())
            .collect();
        Self::from_counts(counts)
    }
}

pub fn target_distribution(
    model: &Model,
    ds: &Dataset,
    eval_attack: &AttackConfig,
    opts: &EvalOptions,
) -> Result<TargetDistribution> {
    let trace = trace_dataset(model, ds, eval_attack, opts)?;
    TargetDistribution::from_confusion(&ConfusionMatrix::from_trace(&trace, None)?)
}

/// `counts[i][j]`: samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub at_step: usize,
}

impl ConfusionMatrix {
    /// Predictions after `at_step` attack steps (default: all of them).
    pub fn from_trace(trace: &DatasetTrace, at_step: Option<usize>) -> Result<Self> {
        let step = at_step.unwrap_or(trace.max_steps);
        if step > trace.max_steps {
            return Err(Error::Config(format!(
                "at_step {step} exceeds the attack's {} steps",
                trace.max_steps
            )));
        }
        let k = trace.num_classes;
        let mut counts = vec![vec![0u64; k]; k];
        for i in 0..trace.len() {
            counts[trace.labels[i]][trace.prediction_at(i, step)] += 1;
        }
        Ok(Self {
            counts,
            at_step: step,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }

    /// Header `class,0,1,...,K-1`, one row per true class.
    pub fn to_csv(&self) -> String {
        let k = self.num_classes();
        let mut out = String::from("class");
        for j in 0..k {
            out.push_str(&format!(",{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(
    model: &Model,
    ds: &Dataset,
    eval_attack: &AttackConfig,
    at_step: Option<usize>,
    opts: &EvalOptions,
) -> Result<ConfusionMatrix> {
    if let Some(s) = at_step {
        if s > eval_attack.max_steps {
            return Err(Error::Config(format!(
                "at_step {s} exceeds the attack's {} steps",
                eval_attack.max_steps
            )));
        }
    }
    ConfusionMatrix::from_trace(&trace_dataset(model, ds, eval_attack, opts)?, at_step)
}

/// Mean steps to misclassification per class, with never-broken samples
/// counted at the cap.
pub fn avg_steps_from_trace(trace: &DatasetTrace) -> Result<Vec<f64>> {
    let counts = trace.class_counts();
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(c));
    }
    let mut sums = vec![0u64; trace.num_classes];
    for i in 0..trace.len() {
        sums[trace.labels[i]] += trace.steps_to_failure(i) as u64;
    }
    Ok(sums.iter().zip(&counts).map(|(&s, &n)| s as f64 / n as f64).collect())
}

pub fn avg_attack_steps(model: &Model, ds: &Dataset, longrun: &AttackConfig, opts: &EvalOptions) -> Result<Vec<f64>> {
    avg_steps_from_trace(&trace_dataset(model, ds, longrun, opts)?)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Undefined(format!(
            "spearman needs two lists of equal length >= 3, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::Undefined("spearman input is not finite".into()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("spearman of a constant list".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub avg_attack_steps: Vec<f64>,
    pub target: Option<TargetDistribution>,
    /// Correlation of per-class average attack steps with robust accuracy.
    pub spearman: Option<f64>,
}

impl Diagnostics {
    /// Steps-versus-robust-accuracy correlation, when defined.
    pub fn new(avg_attack_steps: Vec<f64>, target: Option<TargetDistribution>, errors: &ClassErrors) -> Self {
        let rob_acc: Vec<f64> = errors.rob_err.iter().map(|e| 1.0 - e).collect();
        let spearman = spearman(&avg_attack_steps, &rob_acc).ok();
        Self {
            avg_attack_steps,
            target,
            spearman,
        }
    }

    /// Header `class,avg_attack_steps,target_mass`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,avg_attack_steps,target_mass\n");
        for (c, s) in self.avg_attack_steps.iter().enumerate() {
            let mass = self.target.as_ref().map_or(String::new(), |t| t.probs[c].to_string());
            out.push_str(&format!("{c},{s},{mass}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub avg_std: f64,
    pub worst_std: f64,
    pub avg_bndy: f64,
    pub worst_bndy: f64,
    pub avg_rob: f64,
    pub worst_rob: f64,
    pub per_class: ClassErrors,
    /// Class id in the original labelling, when the dataset was filtered.
    pub original_class: Option<Vec<usize>>,
    pub diagnostics: Option<Diagnostics>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Equal-weight class averages and per-metric worst classes.
pub fn fairness_report(errors: ClassErrors, diagnostics: Option<Diagnostics>) -> Result<FairnessReport> {
    if errors.num_classes() < 2 {
        return Err(Error::Config(format!(
            "a fairness report needs at least 2 classes, got {}",
            errors.num_classes()
        )));
    }
    Ok(FairnessReport {
        avg_std: mean(&errors.std_err),
        worst_std: max(&errors.std_err),
        avg_bndy: mean(&errors.bndy_err),
        worst_bndy: max(&errors.bndy_err),
        avg_rob: mean(&errors.rob_err),
        worst_rob: max(&errors.rob_err),
        per_class: errors,
        original_class: None,
        diagnostics,
    })
}

impl FairnessReport {
    pub fn with_class_map(mut self, map: Option<&[usize]>) -> Self {
        self.original_class = map.map(<[usize]>::to_vec);
        self
    }

    /// Avg/Worst × Std/Bndy/Rob.
    pub fn headline(&self) -> [f64; 6] {
        [
            self.avg_std,
            self.worst_std,
            self.avg_bndy,
            self.worst_bndy,
            self.avg_rob,
            self.worst_rob,
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header `class,std_err,rob_err,bndy_err`, one row per class (labelled
    /// with original ids when a class map is attached), then `AVG` and
    /// `WORST`.
    pub fn to_csv(&self) -> String {
        let pc = &self.per_class;
        let mut out = String::from("class,std_err,rob_err,bndy_err\n");
        for c in 0..pc.num_classes() {
            let id = self.original_class.as_ref().map_or(c, |m| m[c]);
            out.push_str(&format!(
                "{id},{},{},{}\n",
                pc.std_err[c], pc.rob_err[c], pc.bndy_err[c]
            ));
        }
        out.push_str(&format!("AVG,{},{},{}\n", self.avg_std, self.avg_rob, self.avg_bndy));
        out.push_str(&format!(
            "WORST,{},{},{}\n",
            self.worst_std, self.worst_rob, self.worst_bndy
        ));
        out
    }
}
