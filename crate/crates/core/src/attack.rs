//! ℓ∞ projected-gradient attacks.
//!
//! * [`pgd`]: fixed-step PGD maximizing cross-entropy or the KL divergence
//!   from the clean prediction; used for PGD-AT and TRADES training.
//! * [`boundary_search_batch`]: early-stopping PGD that returns, per sample,
//!   the last iterate still classified correctly and the first iterate that
//!   is misclassified.
//! * [`attack_trace`]: cross-entropy PGD that records when each sample is
//!   first misclassified; every evaluation metric is derived from it.
//!
//! Random starts draw `ξ·N(0, I)` from a stream keyed by
//! `(seed, epoch, sample index)`, so outputs do not depend on batching.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::Batch;
use crate::error::{shape_err, Error, Result};
use crate::loss::{cross_entropy_with, kl_div_with, Reduction};
use crate::model::{predict_rows, Model};
use crate::rng::{stream, TAG_START_NOISE};
use crate::tensor::Tensor;

/// Epoch value used for random starts outside training.
pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    /// `KL(f(x) || f(x̃))` with the clean prediction held fixed.
    KlToClean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `x̃ ← x̃ + step_size · sign(∇)`
    #[default]
    Sign,
    /// `x̃ ← x̃ + step_size · ∇`
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// ℓ∞ budget in `[0, 1]` input units.
    pub eps: f32,
    pub step_size: f32,
    pub max_steps: usize,
    /// Scale `ξ` of the Gaussian random start.
    pub random_start_scale: f32,
    pub loss_kind: AttackLoss,
    #[serde(default)]
    pub step_rule: StepRule,
}

impl AttackConfig {
    /// Training attack at image scale: ε = 8/255, 10 steps of 2/255.
    pub fn standard_train() -> Self {
        Self {
            eps: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            max_steps: 10,
            random_start_scale: 0.001,
            loss_kind: AttackLoss::KlToClean,
            step_rule: StepRule::Sign,
        }
    }

    /// Evaluation attack at image scale: cross-entropy, 20 steps of 2/255.
    pub fn standard_eval() -> Self {
        Self {
            eps: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            max_steps: 20,
            random_start_scale: 0.0,
            loss_kind: AttackLoss::CrossEntropy,
            step_rule: StepRule::Sign,
        }
    }

    /// Long-run attack for step counting: 1000 steps of 0.4/255.
    pub fn standard_longrun() -> Self {
        Self {
            eps: 8.0 / 255.0,
            step_size: 0.4 / 255.0,
            max_steps: 1000,
            random_start_scale: 0.0,
            loss_kind: AttackLoss::CrossEntropy,
            step_rule: StepRule::Sign,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be non-negative, got {}", self.eps)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::Config(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.random_start_scale >= 0.0 && self.random_start_scale <= self.eps) {
            return Err(Error::Config(format!(
                "random start scale must lie in [0, eps = {}], got {}",
                self.eps, self.random_start_scale
            )));
        }
        Ok(())
    }
}

/// Key for the random-start streams of one attack invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseKey {
    pub seed: u64,
    pub epoch: u64,
}

impl NoiseKey {
    pub fn new(seed: u64, epoch: u64) -> Self {
        Self { seed, epoch }
    }

    pub fn eval(seed: u64) -> Self {
        Self::new(seed, EVAL_EPOCH)
    }
}

/// Clamps `x_tilde` into `[x - eps, x + eps]` and then into `[0, 1]`.
pub fn project_linf(x_tilde: &Tensor, x: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("eps must be non-negative, got {eps}")));
    }
    if x_tilde.shape() != x.shape() {
        return Err(shape_err(
            "project_linf",
            format!("{:?} vs {:?}", x_tilde.shape(), x.shape()),
        ));
    }
    let mut out = x_tilde.clone();
    project_row(out.data_mut(), x.data(), eps);
    Ok(out)
}

fn project_row(xt: &mut [f32], x: &[f32], eps: f32) {
    for (v, &c) in xt.iter_mut().zip(x) {
        *v = v.clamp(c - eps, c + eps).clamp(0.0, 1.0);
    }
}

fn check_batch(model: &Model, batch: &Batch) -> Result<()> {
    let k = model.n_classes();
    if batch.x.shape()[0] != batch.y.len() || batch.indices.len() != batch.y.len() {
        return Err(shape_err(
            "attack",
            format!(
                "{} rows, {} labels, {} indices",
                batch.x.shape()[0],
                batch.y.len(),
                batch.indices.len()
            ),
        ));
    }
    if let Some(&label) = batch.y.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    Ok(())
}

/// `x + ξ·N(0, I)` projected into the ball and the data domain.
pub fn random_start(batch: &Batch, cfg: &AttackConfig, key: NoiseKey) -> Tensor {
    let mut xt = batch.x.clone();
    if cfg.random_start_scale > 0.0 {
        for (r, &idx) in batch.indices.iter().enumerate() {
            let mut rng = stream(&[TAG_START_NOISE, key.seed, key.epoch, idx as u64]);
            for v in xt.row_mut(r) {
                let z: f32 = StandardNormal.sample(&mut rng);
                *v += cfg.random_start_scale * z;
            }
        }
    }
    for r in 0..batch.len() {
        project_row(xt.row_mut(r), batch.x.row(r), cfg.eps);
    }
    xt
}

enum AttackTarget<'a> {
    Labels(&'a [usize]),
    CleanLogits(&'a Tensor),
}

/// Input gradient of the per-row attack loss, plus the logits at `xt`.
fn input_gradient(model: &Model, xt: &Tensor, target: AttackTarget<'_>) -> Result<(Vec<f32>, Tensor)> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let xv = g.variable(xt);
    let logits = model.forward(&mut g, &bound, xv)?;
    let loss = match target {
        AttackTarget::Labels(y) => cross_entropy_with(&mut g, logits, y, Reduction::Sum)?,
        AttackTarget::CleanLogits(clean) => {
            let c = g.constant(clean);
            kl_div_with(&mut g, c, logits, Reduction::Sum)?
        }
    };
    g.backward(loss)?;
    let grad = g.grad(xv).expect("input is differentiable").to_vec();
    Ok((grad, g.tensor(logits)))
}

fn ascend_row(xt: &mut [f32], grad: &[f32], x: &[f32], cfg: &AttackConfig) {
    match cfg.step_rule {
        StepRule::Sign => {
            for (v, &d) in xt.iter_mut().zip(grad) {
                // sign(0) = 0
                if d > 0.0 {
                    *v += cfg.step_size;
                } else if d < 0.0 {
                    *v -= cfg.step_size;
                }
            }
        }
        StepRule::Raw => {
            for (v, &d) in xt.iter_mut().zip(grad) {
                *v += cfg.step_size * d;
            }
        }
    }
    project_row(xt, x, cfg.eps);
}

/// Clean logits, needed only by the KL objective.
fn clean_logits_if_needed(model: &Model, batch: &Batch, cfg: &AttackConfig) -> Result<Option<Tensor>> {
    match cfg.loss_kind {
        AttackLoss::KlToClean => Ok(Some(model.logits(&batch.x)?)),
        AttackLoss::CrossEntropy => Ok(None),
    }
}

fn gradient_for_rows(
    model: &Model,
    xt: &Tensor,
    batch: &Batch,
    clean: Option<&Tensor>,
    rows: &[usize],
) -> Result<(Vec<f32>, Tensor)> {
    let sub = xt.select_rows(rows)?;
    match clean {
        Some(c) => {
            let c = c.select_rows(rows)?;
            input_gradient(model, &sub, AttackTarget::CleanLogits(&c))
        }
        None => {
            let y: Vec<usize> = rows.iter().map(|&r| batch.y[r]).collect();
            input_gradient(model, &sub, AttackTarget::Labels(&y))
        }
    }
}

/// Fixed-step PGD: random start, then exactly `max_steps` projected ascent
/// steps. The clean prediction is a constant of the maximization.
pub fn pgd(model: &Model, batch: &Batch, cfg: &AttackConfig, key: NoiseKey) -> Result<Tensor> {
    cfg.validate()?;
    check_batch(model, batch)?;
    let clean = clean_logits_if_needed(model, batch, cfg)?;
    let mut xt = random_start(batch, cfg, key);
    let all: Vec<usize> = (0..batch.len()).collect();
    let n = batch.x.row_len();
    for _ in 0..cfg.max_steps {
        let (grad, _) = gradient_for_rows(model, &xt, batch, clean.as_ref(), &all)?;
        for r in 0..batch.len() {
            ascend_row(xt.row_mut(r), &grad[r * n..(r + 1) * n], batch.x.row(r), cfg);
        }
    }
    Ok(xt)
}

/// Boundary examples for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryPair {
    /// Last iterate still classified correctly.
    pub x_clean_phi: Tensor,
    /// First misclassified iterate (or the final iterate if none was).
    pub x_adv_phi: Tensor,
    pub steps_used: usize,
    /// A misclassified iterate was reached within the step budget.
    pub success: bool,
}

/// Boundary examples for a batch, stored row-aligned with the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryBatch {
    pub x_clean_phi: Tensor,
    pub x_adv_phi: Tensor,
    pub steps_used: Vec<usize>,
    pub success: Vec<bool>,
}

impl BoundaryBatch {
    pub fn len(&self) -> usize {
        self.steps_used.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps_used.is_empty()
    }

    pub fn pair(&self, i: usize) -> BoundaryPair {
        let shape = self.x_clean_phi.shape()[1..].to_vec();
        let row = |t: &Tensor| Tensor::new(shape.clone(), t.row(i).to_vec()).expect("row shape");
        BoundaryPair {
            x_clean_phi: row(&self.x_clean_phi),
            x_adv_phi: row(&self.x_adv_phi),
            steps_used: self.steps_used[i],
            success: self.success[i],
        }
    }

    pub fn pairs(&self) -> Vec<BoundaryPair> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }

    /// Stacks per-sample pairs back into batch form.
    pub fn from_pairs(pairs: &[BoundaryPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| shape_err("boundary_batch", "no pairs"))?;
        let mut shape = vec![pairs.len()];
        shape.extend_from_slice(first.x_clean_phi.shape());
        let stack = |f: fn(&BoundaryPair) -> &Tensor| {
            Tensor::new(
                shape.clone(),
                pairs.iter().flat_map(|p| f(p).data().iter().copied()).collect(),
            )
        };
        Ok(Self {
            x_clean_phi: stack(|p| &p.x_clean_phi)?,
            x_adv_phi: stack(|p| &p.x_adv_phi)?,
            steps_used: pairs.iter().map(|p| p.steps_used).collect(),
            success: pairs.iter().map(|p| p.success).collect(),
        })
    }
}

/// Early-stopping PGD, applied independently to every row:
///
/// ```text
/// clean_phi ← x; adv_phi ← x; x̃ ← Π(x + ξ·N(0, I))
/// repeat up to max_steps:
///     if argmax f(x̃) ≠ y: stop (success)
///     clean_phi ← x̃
///     x̃ ← Π(x̃ + step · sign ∇ loss(x̃))
///     adv_phi ← x̃
/// ```
///
/// The trainers call it with [`AttackLoss::KlToClean`]. When the budget
/// runs out, the final iterate is classified once more so that `success`
/// also reports a flip produced by the last step.
pub fn boundary_search_batch(
    model: &Model,
    batch: &Batch,
    cfg: &AttackConfig,
    key: NoiseKey,
) -> Result<BoundaryBatch> {
    cfg.validate()?;
    check_batch(model, batch)?;
    let clean = clean_logits_if_needed(model, batch, cfg)?;
    let n = batch.x.row_len();
    let k = model.n_classes();
    let mut xt = random_start(batch, cfg, key);
    let mut clean_phi = batch.x.clone();
    let mut adv_phi = batch.x.clone();
    let mut steps = vec![0usize; batch.len()];
    let mut success = vec![false; batch.len()];
    let mut active: Vec<usize> = (0..batch.len()).collect();

    for _ in 0..cfg.max_steps {
        if active.is_empty() {
            break;
        }
        let (grad, logits) = gradient_for_rows(model, &xt, batch, clean.as_ref(), &active)?;
        let preds = predict_rows(logits.data(), k);
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            if preds[j] != batch.y[i] {
                success[i] = true;
                continue;
            }
            clean_phi.row_mut(i).copy_from_slice(xt.row(i));
            ascend_row(xt.row_mut(i), &grad[j * n..(j + 1) * n], batch.x.row(i), cfg);
            adv_phi.row_mut(i).copy_from_slice(xt.row(i));
            steps[i] += 1;
            still.push(i);
        }
        active = still;
    }
    if !active.is_empty() {
        let preds = model.predict(&xt.select_rows(&active)?)?;
        for (j, &i) in active.iter().enumerate() {
            if preds[j] != batch.y[i] {
                success[i] = true;
            }
        }
    }
    Ok(BoundaryBatch {
        x_clean_phi: clean_phi,
        x_adv_phi: adv_phi,
        steps_used: steps,
        success,
    })
}

fn single(x: &Tensor, y: usize, index: usize) -> Result<Batch> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(Batch {
        x: x.reshaped(shape)?,
        y: vec![y],
        indices: vec![index],
    })
}

/// [`boundary_search_batch`] for one sample `x` of the model's input shape.
pub fn boundary_search(
    model: &Model,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    key: NoiseKey,
    index: usize,
) -> Result<BoundaryPair> {
    Ok(boundary_search_batch(model, &single(x, y, index)?, cfg, key)?.pair(0))
}

/// Outcome of an early-stopping evaluation attack.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    pub clean_pred: Vec<usize>,
    /// Step at which each sample was first misclassified: `Some(0)` if the
    /// clean input or the random start already is, `None` if never.
    pub first_failure: Vec<Option<usize>>,
    /// Prediction at the first misclassified iterate, or the label.
    pub failure_pred: Vec<usize>,
    pub labels: Vec<usize>,
    pub max_steps: usize,
    /// Per-sample iterate at which the attack stopped.
    pub x_final: Tensor,
}

impl AttackTrace {
    /// Prediction after `step` attack steps: once misclassified, a sample
    /// keeps its first wrong prediction.
    pub fn prediction_at(&self, i: usize, step: usize) -> usize {
        match self.first_failure[i] {
            Some(t) if t <= step => self.failure_pred[i],
            _ => self.labels[i],
        }
    }

    /// Steps until the first misclassification, capped at `max_steps`.
    pub fn steps_to_failure(&self, i: usize) -> usize {
        self.first_failure[i].unwrap_or(self.max_steps)
    }

    pub fn robust(&self, i: usize) -> bool {
        self.first_failure[i].is_none()
    }
}

/// PGD that stops attacking a sample as soon as it is misclassified and
/// records when that happened. A clean misclassification counts as failure
/// at step 0.
pub fn attack_trace(model: &Model, batch: &Batch, cfg: &AttackConfig, key: NoiseKey) -> Result<AttackTrace> {
    cfg.validate()?;
    check_batch(model, batch)?;
    let clean_logits = model.logits(&batch.x)?;
    let k = model.n_classes();
    let clean_pred = predict_rows(clean_logits.data(), k);
    let clean = match cfg.loss_kind {
        AttackLoss::KlToClean => Some(&clean_logits),
        AttackLoss::CrossEntropy => None,
    };
    let n = batch.x.row_len();
    let mut first_failure = vec![None; batch.len()];
    let mut failure_pred = batch.y.clone();
    let mut active = Vec::with_capacity(batch.len());
    for i in 0..batch.len() {
        if clean_pred[i] != batch.y[i] {
            first_failure[i] = Some(0);
            failure_pred[i] = clean_pred[i];
        } else {
            active.push(i);
        }
    }
    let mut xt = random_start(batch, cfg, key);
    for i in 0..batch.len() {
        if first_failure[i].is_some() {
            xt.row_mut(i).copy_from_slice(batch.x.row(i));
        }
    }
    for step in 0..=cfg.max_steps {
        if active.is_empty() {
            break;
        }
        let last = step == cfg.max_steps;
        let (grad, logits) = if last {
            (Vec::new(), model.logits(&xt.select_rows(&active)?)?)
        } else {
            gradient_for_rows(model, &xt, batch, clean, &active)?
        };
        let preds = predict_rows(logits.data(), k);
        let mut still = Vec::with_capacity(active.len());
        for (j, &i) in active.iter().enumerate() {
            if preds[j] != batch.y[i] {
                first_failure[i] = Some(step);
                failure_pred[i] = preds[j];
            } else if !last {
                ascend_row(xt.row_mut(i), &grad[j * n..(j + 1) * n], batch.x.row(i), cfg);
                still.push(i);
            }
        }
        active = still;
    }
    Ok(AttackTrace {
        clean_pred,
        first_failure,
        failure_pred,
        labels: batch.y.clone(),
        max_steps: cfg.max_steps,
        x_final: xt,
    })
}

/// Attack steps needed to misclassify each row: 0 if already
/// misclassified, `max_steps` if never.
pub fn attack_step_counts(model: &Model, batch: &Batch, cfg: &AttackConfig, key: NoiseKey) -> Result<Vec<usize>> {
    let trace = attack_trace(model, batch, cfg, key)?;
    Ok((0..batch.len()).map(|i| trace.steps_to_failure(i)).collect())
}

pub fn attack_step_count(
    model: &Model,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    key: NoiseKey,
    index: usize,
) -> Result<usize> {
    Ok(attack_step_counts(model, &single(x, y, index)?, cfg, key)?[0])
}
