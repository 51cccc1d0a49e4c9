//! Adversarial-training losses and the epoch loop.
//!
//! | method | objective |
//! |---|---|
//! | `clean` | `CE(f(x), y)` |
//! | `pgd_at` | `CE(f(x_adv), y)`, `x_adv` from cross-entropy PGD |
//! | `trades` | `CE(f(x), y) + β·KL(f(x) ‖ f(x_adv))`, `x_adv` from KL PGD |
//! | `bat` | `CE(f(x̂_c), y) + β·KL(f(x) ‖ f(x̂_a)) + α·[KL(U ‖ f(x̂_c)) + KL(U ‖ f(x̂_a))]` |
//! | `bat_ablation_fixed_steps` | the `trades` source term plus the BAT target term |
//!
//! `x̂_c`, `x̂_a` are the boundary examples of [`boundary_search_batch`]:
//! the last correctly classified and the first misclassified PGD iterate.
//! The inner maximization holds `f(x)` fixed; the outer minimization
//! differentiates through both arguments of every KL term.

use serde::{Deserialize, Serialize};

use crate::analysis::{trace_dataset, ClassErrors, EvalOptions};
use crate::attack::{boundary_search_batch, pgd, AttackConfig, AttackLoss, BoundaryBatch, NoiseKey};
use crate::autograd::{Graph, Var};
use crate::data::{batches, Batch, Dataset};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, kl_div, kl_uniform};
use crate::model::{init_model, BoundParams, Model, ModelSpec};
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Clean,
    PgdAt,
    Trades,
    Bat,
    BatAblationFixedSteps,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Clean => "clean",
            Method::PgdAt => "pgd_at",
            Method::Trades => "trades",
            Method::Bat => "bat",
            Method::BatAblationFixedSteps => "bat_ablation_fixed_steps",
        }
    }

    /// Objective maximized by this method's inner attack.
    pub fn attack_loss(self) -> AttackLoss {
        match self {
            Method::Clean | Method::PgdAt => AttackLoss::CrossEntropy,
            _ => AttackLoss::KlToClean,
        }
    }
}

/// Inputs of the uniform-target term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOperands {
    /// No target term.
    None,
    CleanPhi,
    AdvPhi,
    /// The fixed-step PGD example.
    XAdv,
    #[default]
    Both,
}

impl TargetOperands {
    pub const ALL: [TargetOperands; 5] = [
        TargetOperands::None,
        TargetOperands::CleanPhi,
        TargetOperands::AdvPhi,
        TargetOperands::XAdv,
        TargetOperands::Both,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetOperands::None => "none",
            TargetOperands::CleanPhi => "clean_phi",
            TargetOperands::AdvPhi => "adv_phi",
            TargetOperands::XAdv => "x_adv",
            TargetOperands::Both => "both",
        }
    }
}

/// Default weight of the KL term in TRADES and the BAT source loss.
pub const DEFAULT_BETA: f32 = 6.0;
/// Default weight of the BAT target loss.
pub const DEFAULT_ALPHA: f32 = 1.0;

fn default_beta() -> f32 {
    DEFAULT_BETA
}

fn default_alpha() -> f32 {
    DEFAULT_ALPHA
}

fn default_eval_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    #[serde(default = "default_beta")]
    pub beta: f32,
    #[serde(default = "default_alpha")]
    pub alpha_target: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: SgdConfig,
    /// Inner attack; its `loss_kind` is replaced by the method's.
    pub attack: AttackConfig,
    /// Attack behind the robust accuracy recorded in the history.
    pub eval_attack: AttackConfig,
    #[serde(default)]
    pub target_operands: TargetOperands,
    /// Record clean/robust training accuracy every this many epochs (0: never).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Record per-class accuracies every this many epochs (0: never).
    #[serde(default)]
    pub snapshot_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, epochs: usize, batch_size: usize, attack: AttackConfig, seed: u64) -> Self {
        Self {
            method,
            beta: default_beta(),
            alpha_target: default_alpha(),
            epochs,
            batch_size,
            optimizer: SgdConfig::default(),
            attack,
            eval_attack: AttackConfig {
                random_start_scale: 0.0,
                loss_kind: AttackLoss::CrossEntropy,
                ..attack
            },
            target_operands: TargetOperands::Both,
            eval_every: default_eval_every(),
            snapshot_every: 0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.alpha_target >= 0.0 && self.alpha_target.is_finite()) {
            return Err(Error::Config(format!(
                "alpha_target must be non-negative, got {}",
                self.alpha_target
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()?;
        self.attack.validate()?;
        self.eval_attack.validate()
    }

    /// The inner attack with the method's objective.
    pub fn inner_attack(&self) -> AttackConfig {
        AttackConfig {
            loss_kind: self.method.attack_loss(),
            ..self.attack
        }
    }
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub total: f32,
    pub source: f32,
    /// Weighted target term `α·L_target`.
    pub target: f32,
}

struct LossVars {
    total: Var,
    source: Var,
    target: Option<Var>,
}

/// Forward pass on a fresh input node.
fn fwd(g: &mut Graph, model: &Model, bound: &BoundParams, x: &Tensor) -> Result<Var> {
    let xv = g.constant(x);
    model.forward(g, bound, xv)
}

fn source_term(
    g: &mut Graph,
    ce_logits: Var,
    clean_logits: Var,
    adv_logits: Var,
    y: &[usize],
    beta: f32,
) -> Result<Var> {
    let ce = cross_entropy(g, ce_logits, y)?;
    let kl = kl_div(g, clean_logits, adv_logits)?;
    let kl = g.scale(kl, beta);
    g.add(ce, kl)
}

fn target_term(g: &mut Graph, operands: &[Var]) -> Result<Option<Var>> {
    let mut acc = None;
    for &l in operands {
        let t = kl_uniform(g, l)?;
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc)
}

fn combine(g: &mut Graph, source: Var, target: Option<Var>, alpha: f32) -> Result<LossVars> {
    match target {
        None => Ok(LossVars {
            total: source,
            source,
            target: None,
        }),
        Some(t) => {
            let weighted = g.scale(t, alpha);
            Ok(LossVars {
                total: g.add(source, weighted)?,
                source,
                target: Some(weighted),
            })
        }
    }
}

/// Adversarial inputs a method needs for one batch.
struct Inputs {
    x_adv: Option<Tensor>,
    pairs: Option<BoundaryBatch>,
}

fn needs_boundary(cfg: &TrainConfig) -> bool {
    match cfg.method {
        Method::Bat => true,
        Method::BatAblationFixedSteps => matches!(
            cfg.target_operands,
            TargetOperands::CleanPhi | TargetOperands::AdvPhi | TargetOperands::Both
        ),
        _ => false,
    }
}

fn needs_fixed_steps(cfg: &TrainConfig) -> bool {
    match cfg.method {
        Method::PgdAt | Method::Trades | Method::BatAblationFixedSteps => true,
        Method::Bat => cfg.target_operands == TargetOperands::XAdv,
        Method::Clean => false,
    }
}

fn generate(model: &Model, batch: &Batch, cfg: &TrainConfig, key: NoiseKey) -> Result<Inputs> {
    let attack = cfg.inner_attack();
    let x_adv = if needs_fixed_steps(cfg) {
        Some(pgd(model, batch, &attack, key)?)
    } else {
        None
    };
    let pairs = if needs_boundary(cfg) {
        Some(boundary_search_batch(model, batch, &attack, key)?)
    } else {
        None
    };
    Ok(Inputs { x_adv, pairs })
}

fn build_loss(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    batch: &Batch,
    cfg: &TrainConfig,
    inputs: &Inputs,
) -> Result<LossVars> {
    let y = &batch.y;
    let (beta, alpha) = (cfg.beta, cfg.alpha_target);
    match cfg.method {
        Method::Clean => {
            let lx = fwd(g, model, bound, &batch.x)?;
            let ce = cross_entropy(g, lx, y)?;
            combine(g, ce, None, alpha)
        }
        Method::PgdAt => {
            let la = fwd(g, model, bound, inputs.x_adv.as_ref().expect("pgd input"))?;
            let ce = cross_entropy(g, la, y)?;
            combine(g, ce, None, alpha)
        }
        Method::Trades => {
            let lx = fwd(g, model, bound, &batch.x)?;
            let la = fwd(g, model, bound, inputs.x_adv.as_ref().expect("pgd input"))?;
            let source = source_term(g, lx, lx, la, y, beta)?;
            combine(g, source, None, alpha)
        }
        Method::Bat => {
            let pairs = inputs.pairs.as_ref().expect("boundary pairs");
            let lc = fwd(g, model, bound, &pairs.x_clean_phi)?;
            let la = fwd(g, model, bound, &pairs.x_adv_phi)?;
            let lx = fwd(g, model, bound, &batch.x)?;
            let source = source_term(g, lc, lx, la, y, beta)?;
            let ops = target_operands(g, model, bound, cfg.target_operands, Some(lc), Some(la), inputs)?;
            let target = target_term(g, &ops)?;
            combine(g, source, target, alpha)
        }
        Method::BatAblationFixedSteps => {
            let lx = fwd(g, model, bound, &batch.x)?;
            let lxa = fwd(g, model, bound, inputs.x_adv.as_ref().expect("pgd input"))?;
            let source = source_term(g, lx, lx, lxa, y, beta)?;
            let ops = target_operands(g, model, bound, cfg.target_operands, None, None, inputs)?;
            let target = target_term(g, &ops)?;
            combine(g, source, target, alpha)
        }
    }
}

/// Logits nodes feeding the target term; reuses nodes already built.
fn target_operands(
    g: &mut Graph,
    model: &Model,
    bound: &BoundParams,
    which: TargetOperands,
    lc: Option<Var>,
    la: Option<Var>,
    inputs: &Inputs,
) -> Result<Vec<Var>> {
    let clean_phi = |g: &mut Graph| -> Result<Var> {
        match lc {
            Some(v) => Ok(v),
            None => fwd(g, model, bound, &inputs.pairs.as_ref().expect("boundary pairs").x_clean_phi),
        }
    };
    Ok(match which {
        TargetOperands::None => vec![],
        TargetOperands::CleanPhi => vec![clean_phi(g)?],
        TargetOperands::AdvPhi => vec![adv_phi(g, model, bound, la, inputs)?],
        TargetOperands::XAdv => vec![fwd(g, model, bound, inputs.x_adv.as_ref().expect("pgd input"))?],
        TargetOperands::Both => {
            let c = clean_phi(g)?;
            vec![c, adv_phi(g, model, bound, la, inputs)?]
        }
    })
}

fn adv_phi(g: &mut Graph, model: &Model, bound: &BoundParams, la: Option<Var>, inputs: &Inputs) -> Result<Var> {
    match la {
        Some(v) => Ok(v),
        None => fwd(g, model, bound, &inputs.pairs.as_ref().expect("boundary pairs").x_adv_phi),
    }
}

fn values(g: &Graph, vars: &LossVars) -> LossValues {
    LossValues {
        total: g.scalar(vars.total),
        source: g.scalar(vars.source),
        target: vars.target.map_or(0.0, |t| g.scalar(t)),
    }
}

/// Loss of `cfg.method` on one batch, attacks included.
pub fn method_loss(model: &Model, batch: &Batch, cfg: &TrainConfig, key: NoiseKey) -> Result<LossValues> {
    cfg.validate()?;
    let inputs = generate(model, batch, cfg, key)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let vars = build_loss(&mut g, model, &bound, batch, cfg, &inputs)?;
    Ok(values(&g, &vars))
}

fn eval_scalar(model: &Model, f: impl FnOnce(&mut Graph, &BoundParams) -> Result<Var>) -> Result<f32> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let v = f(&mut g, &bound)?;
    Ok(g.scalar(v))
}

/// `CE(f(x_adv), y)` with `x_adv` from cross-entropy PGD.
pub fn loss_pgd_at(model: &Model, batch: &Batch, attack: &AttackConfig, key: NoiseKey) -> Result<f32> {
    let attack = AttackConfig {
        loss_kind: AttackLoss::CrossEntropy,
        ..*attack
    };
    let x_adv = pgd(model, batch, &attack, key)?;
    eval_scalar(model, |g, b| {
        let la = fwd(g, model, b, &x_adv)?;
        cross_entropy(g, la, &batch.y)
    })
}

/// `CE(f(x), y) + β·KL(f(x) ‖ f(x_adv))` with `x_adv` from KL PGD.
pub fn loss_trades(model: &Model, batch: &Batch, beta: f32, attack: &AttackConfig, key: NoiseKey) -> Result<f32> {
    let attack = AttackConfig {
        loss_kind: AttackLoss::KlToClean,
        ..*attack
    };
    let x_adv = pgd(model, batch, &attack, key)?;
    loss_trades_on(model, batch, &x_adv, beta)
}

/// The TRADES objective on given adversarial inputs.
pub fn loss_trades_on(model: &Model, batch: &Batch, x_adv: &Tensor, beta: f32) -> Result<f32> {
    eval_scalar(model, |g, b| {
        let lx = fwd(g, model, b, &batch.x)?;
        let la = fwd(g, model, b, x_adv)?;
        source_term(g, lx, lx, la, &batch.y, beta)
    })
}

/// `CE(f(x̂_c), y) + β·KL(f(x) ‖ f(x̂_a))`.
pub fn loss_source_class(model: &Model, batch: &Batch, pairs: &BoundaryBatch, beta: f32) -> Result<f32> {
    eval_scalar(model, |g, b| {
        let lc = fwd(g, model, b, &pairs.x_clean_phi)?;
        let la = fwd(g, model, b, &pairs.x_adv_phi)?;
        let lx = fwd(g, model, b, &batch.x)?;
        source_term(g, lc, lx, la, &batch.y, beta)
    })
}

/// `KL(U ‖ f(x̂_c)) + KL(U ‖ f(x̂_a))`.
pub fn loss_target_class(model: &Model, pairs: &BoundaryBatch) -> Result<f32> {
    eval_scalar(model, |g, b| {
        let lc = fwd(g, model, b, &pairs.x_clean_phi)?;
        let la = fwd(g, model, b, &pairs.x_adv_phi)?;
        Ok(target_term(g, &[lc, la])?.expect("two operands"))
    })
}

/// Source plus `α`-weighted target loss on one shared boundary search.
pub fn loss_bat_total(
    model: &Model,
    batch: &Batch,
    beta: f32,
    alpha: f32,
    attack: &AttackConfig,
    key: NoiseKey,
) -> Result<f32> {
    let mut cfg = TrainConfig::new(Method::Bat, 1, batch.len().max(1), *attack, key.seed);
    cfg.beta = beta;
    cfg.alpha_target = alpha;
    Ok(method_loss(model, batch, &cfg, key)?.total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSnapshot {
    pub clean_acc: Vec<f64>,
    pub robust_acc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub learning_rate: f32,
    /// Sample-weighted means over the epoch's batches.
    pub loss_total: f64,
    pub loss_source: f64,
    pub loss_target: f64,
    /// Accuracy on the training set after the epoch.
    pub clean_acc: Option<f64>,
    pub robust_acc: Option<f64>,
    pub per_class: Option<ClassSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

impl TrainHistory {
    /// Header `epoch,lr,loss_total,loss_source,loss_target,clean_acc,robust_acc`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,loss_total,loss_source,loss_target,clean_acc,robust_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.epoch,
                r.learning_rate,
                r.loss_total,
                r.loss_source,
                r.loss_target,
                opt_cell(r.clean_acc),
                opt_cell(r.robust_acc)
            ));
        }
        out
    }
}

fn check_dataset(spec: &ModelSpec, ds: &Dataset) -> Result<()> {
    if !ds.is_trainable() {
        return Err(Error::Config(format!(
            "training needs at least 2 classes, dataset has {}",
            ds.num_classes()
        )));
    }
    if spec.n_classes() != ds.num_classes() {
        return Err(Error::Config(format!(
            "model has {} classes but dataset has {}",
            spec.n_classes(),
            ds.num_classes()
        )));
    }
    if spec.input_shape() != ds.sample_shape() {
        return Err(Error::Config(format!(
            "model expects samples of shape {:?}, dataset has {:?}",
            spec.input_shape(),
            ds.sample_shape()
        )));
    }
    Ok(())
}

/// Initializes a model from `cfg.seed` and trains it.
pub fn train(cfg: &TrainConfig, spec: &ModelSpec, ds: &Dataset) -> Result<(Model, TrainHistory)> {
    let model = init_model(spec, cfg.seed)?;
    train_model(cfg, model, ds)
}

/// Runs `cfg.epochs` epochs of mini-batch SGD on the method's loss. Each
/// batch first generates its adversarial inputs with the current weights,
/// then takes one optimizer step.
pub fn train_model(cfg: &TrainConfig, mut model: Model, ds: &Dataset) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    check_dataset(model.spec(), ds)?;
    let mut state = OptimizerState::from_config(&cfg.optimizer)?;
    let mut history = TrainHistory::default();
    let n = ds.len() as f64;
    let eval_opts = EvalOptions::with_seed(cfg.seed);
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch, cfg.epochs);
        state.learning_rate = lr;
        let key = NoiseKey::new(cfg.seed, epoch as u64);
        let (mut total, mut source, mut target) = (0.0f64, 0.0f64, 0.0f64);
        for batch in batches(ds, cfg.batch_size, epoch as u64, cfg.seed)? {
            let inputs = generate(&model, &batch, cfg, key)?;
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let vars = build_loss(&mut g, &model, &bound, &batch, cfg, &inputs)?;
            let v = values(&g, &vars);
            if !(v.total.is_finite() && v.source.is_finite() && v.target.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch: epoch + 1 });
            }
            g.backward(vars.total)?;
            model.accumulate_grads(&g, &bound)?;
            sgd_step(model.params_mut(), &mut state)?;
            let w = batch.len() as f64 / n;
            total += w * v.total as f64;
            source += w * v.source as f64;
            target += w * v.target as f64;
        }
        let done = epoch + 1;
        let due = |every: usize| every > 0 && done % every == 0;
        let (mut clean_acc, mut robust_acc, mut per_class) = (None, None, None);
        if due(cfg.eval_every) || due(cfg.snapshot_every) {
            let trace = trace_dataset(&model, ds, &cfg.eval_attack, &eval_opts)?;
            if due(cfg.eval_every) {
                clean_acc = Some(trace.clean_accuracy());
                robust_acc = Some(trace.robust_accuracy());
            }
            if due(cfg.snapshot_every) {
                let e = ClassErrors::from_trace(&trace)?;
                per_class = Some(ClassSnapshot {
                    clean_acc: e.std_err.iter().map(|v| 1.0 - v).collect(),
                    robust_acc: e.rob_err.iter().map(|v| 1.0 - v).collect(),
                });
            }
        }
        history.records.push(EpochRecord {
            epoch: done,
            learning_rate: lr,
            loss_total: total,
            loss_source: source,
            loss_target: target,
            clean_acc,
            robust_acc,
            per_class,
        });
    }
    Ok((model, history))
}
