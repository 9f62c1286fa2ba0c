//! AdamW training of one stage, and the family builder that chains stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::budget::{self, FamilyPlan};
use crate::data::{Corpus, DataCursor};
use crate::error::{Error, Result};
use crate::eval;
use crate::expansion::{self, ExpansionMode};
use crate::nn::{self, init_params, GradSet, ModelConfig, ParamSet, TensorKind};

pub const DEFAULT_WARMUP_FRACTION: f64 = 0.01;
pub const DEFAULT_MIN_LR_RATIO: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub batch: usize,
    pub seq_len: usize,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Loss-trace sampling interval in steps.
    pub log_every: u64,
}

impl TrainConfig {
    pub fn new(max_lr: f64, total_steps: u64, batch: usize, seq_len: usize, seed: u64) -> Self {
        TrainConfig {
            max_lr,
            min_lr: DEFAULT_MIN_LR_RATIO * max_lr,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            total_steps,
            batch,
            seq_len,
            grad_clip_norm: 1.0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            seed,
            log_every: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.max_lr && self.max_lr.is_finite()) {
            return Err(Error::invalid(format!(
                "need 0 < min_lr <= max_lr, got {} and {}",
                self.min_lr, self.max_lr
            )));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction must be in [0, 1)"));
        }
        if self.total_steps == 0 || self.batch == 0 || self.seq_len == 0 || self.log_every == 0 {
            return Err(Error::invalid(
                "total_steps, batch, seq_len and log_every must be positive",
            ));
        }
        if !(self.grad_clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("grad_clip_norm must be positive and weight_decay >= 0"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam betas must be in [0, 1) and eps positive"));
        }
        if self.seed > MAX_SEED {
            return Err(Error::invalid(format!("seed must be at most {MAX_SEED}")));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.batch * self.seq_len) as u64
    }
}

pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    (warmup_fraction * total_steps as f64).round() as u64
}

/// Linear warmup to `max_lr` over `round(warmup_fraction * total_steps)`
/// steps, then cosine decay to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, warmup_fraction: f64, max_lr: f64, min_lr: f64) -> f64 {
    let w = warmup_steps(total_steps, warmup_fraction);
    if step < w {
        return max_lr * step as f64 / w as f64;
    }
    if total_steps <= w {
        return max_lr;
    }
    let progress = (step.min(total_steps) - w) as f64 / (total_steps - w) as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm over every tensor, accumulated in f64 in canonical order.
pub fn global_norm(grads: &GradSet) -> f64 {
    grads
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads(grads: &mut GradSet, max_norm: f64) -> Result<f64> {
    for t in grads.tensors() {
        if let Some(i) = t.data.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient {}[{i}]", t.name)));
        }
    }
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    Ok(norm)
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: GradSet,
    pub v: GradSet,
}

impl Moments {
    pub fn zeros(config: &ModelConfig) -> Self {
        Moments {
            m: ParamSet::zeros(config),
            v: ParamSet::zeros(config),
        }
    }
}

/// One AdamW update with bias correction at step `t` (1-based). Weight
/// decay is decoupled and applied to matrices only.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &GradSet,
    moments: &mut Moments,
    t: u64,
    tcfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if params.config != grads.config || params.config != moments.m.config {
        return Err(Error::invalid("adamw_step: parameter, gradient and moment shapes differ"));
    }
    if t == 0 {
        return Err(Error::invalid("adamw_step: t is 1-based"));
    }
    let (b1, b2) = (tcfg.beta1, tcfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let ps = params.tensors_mut();
    let gs = grads.tensors();
    let ms = moments.m.tensors_mut();
    let vs = moments.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        let wd = if p.kind == TensorKind::Matrix { tcfg.weight_decay } else { 0.0 };
        for i in 0..p.data.len() {
            let gi = g.data[i] as f64;
            let mi = b1 * m.data[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v.data[i] as f64 + (1.0 - b2) * gi * gi;
            let theta = p.data[i] as f64;
            let update = (mi / c1) / ((vi / c2).sqrt() + tcfg.adam_eps);
            let next = theta - lr * update - lr * wd * theta;
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("update of {}[{i}]", p.name)));
            }
            m.data[i] = mi as f32;
            v.data[i] = vi as f32;
            p.data[i] = next as f32;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: u64,
    pub tokens: u64,
    pub flops: u128,
    pub loss: f64,
}

/// Everything besides the parameters needed to continue a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub moments: Moments,
    pub cursor: DataCursor,
    pub rng: ChaCha8Rng,
    pub trace: Vec<TracePoint>,
}

impl TrainState {
    pub fn fresh(config: &ModelConfig, cursor: DataCursor, seed: u64) -> Self {
        TrainState {
            step: 0,
            moments: Moments::zeros(config),
            cursor,
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// A stage in progress.
pub struct Trainer<'c> {
    pub params: ParamSet,
    pub state: TrainState,
    pub tcfg: TrainConfig,
    corpus: &'c Corpus,
}

impl<'c> Trainer<'c> {
    pub fn new(init: ParamSet, tcfg: TrainConfig, corpus: &'c Corpus, cursor: DataCursor) -> Result<Self> {
        let state = TrainState::fresh(&init.config, cursor, tcfg.seed);
        Self::resume(init, state, tcfg, corpus)
    }

    pub fn resume(params: ParamSet, state: TrainState, tcfg: TrainConfig, corpus: &'c Corpus) -> Result<Self> {
        tcfg.validate()?;
        params.validate()?;
        if tcfg.seq_len > params.config.seq_len {
            return Err(Error::invalid(format!(
                "training windows of {} exceed the model context {}",
                tcfg.seq_len, params.config.seq_len
            )));
        }
        if state.moments.m.config != params.config || state.moments.v.config != params.config {
            return Err(Error::invalid("optimizer moments do not match the model"));
        }
        if state.step > tcfg.total_steps {
            return Err(Error::invalid(format!(
                "state step {} beyond total_steps {}",
                state.step, tcfg.total_steps
            )));
        }
        Ok(Trainer {
            params,
            state,
            tcfg,
            corpus,
        })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.tcfg.total_steps
    }

    pub fn tokens_consumed(&self) -> u64 {
        self.state.step * self.tcfg.tokens_per_step()
    }

    pub fn step(&mut self) -> Result<StepInfo> {
        if self.done() {
            return Err(Error::invalid("stage already finished"));
        }
        let mut cursor = self.state.cursor;
        let batch = cursor.next_batch(self.corpus, self.tcfg.batch, self.tcfg.seq_len)?;
        let (loss, mut grads) = nn::loss_and_grads(&self.params, &batch.inputs, &batch.targets, self.tcfg.seq_len)?;
        let next = self.state.step + 1;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: next,
                loss: loss as f32,
            });
        }
        let grad_norm = clip_grads(&mut grads, self.tcfg.grad_clip_norm)?;
        let clipped_norm = global_norm(&grads);
        let t = &self.tcfg;
        let lr = cosine_lr(next, t.total_steps, t.warmup_fraction, t.max_lr, t.min_lr);
        let mut params = self.params.clone();
        let mut moments = self.state.moments.clone();
        adamw_step(&mut params, &grads, &mut moments, next, t, lr)?;
        self.params = params;
        self.state.moments = moments;
        self.state.cursor = cursor;
        self.state.step = next;
        if next % t.log_every == 0 || next == t.total_steps || next == 1 {
            let tokens = self.tokens_consumed();
            self.state.trace.push(TracePoint {
                step: next,
                tokens,
                flops: budget::flops(self.params.config.count_params(), tokens)?,
                loss,
            });
        }
        Ok(StepInfo {
            step: next,
            loss,
            lr,
            grad_norm,
            clipped_norm,
        })
    }

    pub fn run_to(&mut self, step: u64) -> Result<()> {
        while self.state.step < step.min(self.tcfg.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self, val: &[Vec<u32>]) -> Result<StageResult> {
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(eval::mean_nll(&self.params, val)?)
        };
        Ok(StageResult {
            tokens_consumed: self.tokens_consumed(),
            loss_trace: self.state.trace.clone(),
            final_params: self.params,
            val_loss,
            state: self.state,
            train_config: self.tcfg,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub final_params: ParamSet,
    pub loss_trace: Vec<TracePoint>,
    pub val_loss: Option<f64>,
    pub tokens_consumed: u64,
    pub state: TrainState,
    pub train_config: TrainConfig,
}

/// Trains `init` for `tcfg.total_steps` updates with fresh optimizer state.
pub fn train_stage(
    init: ParamSet,
    tcfg: TrainConfig,
    corpus: &Corpus,
    cursor: DataCursor,
    val: &[Vec<u32>],
) -> Result<StageResult> {
    let mut trainer = Trainer::new(init, tcfg, corpus, cursor)?;
    trainer.run_to(u64::MAX)?;
    trainer.finish(val)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BuildMode {
    Independent,
    Progressive,
}

impl std::fmt::Display for BuildMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BuildMode::Independent => "independent",
            BuildMode::Progressive => "progressive",
        })
    }
}

impl std::str::FromStr for BuildMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" => Ok(BuildMode::Independent),
            "progressive" => Ok(BuildMode::Progressive),
            other => Err(Error::invalid(format!("unknown build mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOptions {
    pub mode: BuildMode,
    pub fixed_data: bool,
    pub expansion: ExpansionMode,
    pub seed: u64,
    pub warmup_fraction: f64,
    pub min_lr_ratio: f64,
    pub log_every: u64,
}

impl FamilyOptions {
    pub fn new(mode: BuildMode, seed: u64) -> Self {
        FamilyOptions {
            mode,
            fixed_data: false,
            expansion: ExpansionMode::Aki,
            seed,
            warmup_fraction: DEFAULT_WARMUP_FRACTION,
            min_lr_ratio: DEFAULT_MIN_LR_RATIO,
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub size: u64,
    pub config: ModelConfig,
    pub planned_tokens: u64,
    pub tokens_consumed: u64,
    pub steps: u64,
    pub batch: usize,
    pub max_lr: f64,
    pub flops: u128,
    /// FLOPs spent by earlier stages of the same run.
    pub flops_offset: u128,
    pub final_train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub cursor: DataCursor,
    pub loss_trace: Vec<TracePoint>,
}

/// Consumed FLOPs against the cost of the reference construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsAudit {
    pub consumed: u128,
    pub planned: u128,
    /// Largest-model scratch cost for progressive runs, the sum of scratch
    /// costs for independent ones.
    pub reference: u128,
    /// Allowed gap from whole-batch rounding: one batch per stage.
    pub slack: u128,
    pub within_slack: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataAccounting {
    pub unique_cap: Option<u64>,
    pub consumed: u64,
    pub distinct: u64,
    pub reused: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyReport {
    pub options: FamilyOptions,
    pub plan: FamilyPlan,
    pub stages: Vec<StageReport>,
    pub audit: FlopsAudit,
    pub data: DataAccounting,
}

#[derive(Debug, Clone)]
pub struct FamilyRun {
    pub stages: Vec<StageResult>,
    pub report: FamilyReport,
}

/// Largest seed a checkpoint manifest can store.
pub const MAX_SEED: u64 = i64::MAX as u64;

fn stage_seed(seed: u64, stage: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage as u64 + 1) & MAX_SEED
}

/// Checks that `configs` realize the plan's sizes and can be chained.
pub fn check_family(plan: &FamilyPlan, configs: &[ModelConfig], mode: BuildMode, expansion: ExpansionMode) -> Result<()> {
    plan.validate()?;
    if configs.len() != plan.n_stages() {
        return Err(Error::invalid(format!(
            "plan has {} stages but {} model configs",
            plan.n_stages(),
            configs.len()
        )));
    }
    for (i, (c, &size)) in configs.iter().zip(&plan.sizes).enumerate() {
        c.validate()?;
        if c.count_params() != size {
            return Err(Error::invalid(format!(
                "stage {i}: config has {} parameters, plan says {size}",
                c.count_params()
            )));
        }
        if (c.seq_len as u64) < plan.seq_len {
            return Err(Error::invalid(format!(
                "stage {i}: context {} shorter than plan seq_len {}",
                c.seq_len, plan.seq_len
            )));
        }
    }
    if mode == BuildMode::Progressive {
        for w in configs.windows(2) {
            let probe = ParamSet::zeros(&w[0]);
            expansion::expand(&probe, &w[1], expansion)?;
        }
    }
    Ok(())
}

/// Builds a family stage by stage. `on_stage` sees every finished stage
/// before the next one starts.
pub fn run_family(
    plan: &FamilyPlan,
    configs: &[ModelConfig],
    opts: &FamilyOptions,
    corpus: &Corpus,
    val: &[Vec<u32>],
    on_stage: &mut dyn FnMut(usize, &StageResult) -> Result<()>,
) -> Result<FamilyRun> {
    check_family(plan, configs, opts.mode, opts.expansion)?;
    let n = plan.n_stages();
    let cap = opts.fixed_data.then(|| plan.scratch_tokens[n - 1]);
    let budgets = match opts.mode {
        BuildMode::Independent => &plan.scratch_tokens,
        BuildMode::Progressive => &plan.prog_tokens,
    };
    let seq_len = plan.seq_len as usize;
    let mut cursor = DataCursor::new(cap);
    let mut stages: Vec<StageResult> = Vec::with_capacity(n);
    let mut reports = Vec::with_capacity(n);
    let mut flops_offset = 0u128;
    for i in 0..n {
        let init = match (opts.mode, stages.last()) {
            (BuildMode::Progressive, Some(prev)) => expansion::expand(&prev.final_params, &configs[i], opts.expansion)?,
            _ => init_params(&configs[i], stage_seed(opts.seed, i))?,
        };
        if opts.mode == BuildMode::Independent {
            cursor = DataCursor::new(cap);
        }
        let steps = plan.steps(i, budgets[i])?;
        let max_lr = plan.max_lrs[i];
        let tcfg = TrainConfig {
            min_lr: opts.min_lr_ratio * max_lr,
            warmup_fraction: opts.warmup_fraction,
            log_every: opts.log_every,
            ..TrainConfig::new(max_lr, steps, plan.batch_sizes[i] as usize, seq_len, stage_seed(opts.seed, i))
        };
        let result = train_stage(init, tcfg, corpus, cursor, val)?;
        on_stage(i, &result)?;
        cursor = result.state.cursor;
        let flops = budget::flops(plan.sizes[i], result.tokens_consumed)?;
        reports.push(StageReport {
            stage: i,
            size: plan.sizes[i],
            config: configs[i].clone(),
            planned_tokens: budgets[i],
            tokens_consumed: result.tokens_consumed,
            steps,
            batch: plan.batch_sizes[i] as usize,
            max_lr,
            flops,
            flops_offset,
            final_train_loss: result.loss_trace.last().map(|p| p.loss),
            val_loss: result.val_loss,
            cursor,
            loss_trace: result.loss_trace.clone(),
        });
        flops_offset += flops;
        stages.push(result);
    }

    let savings = budget::savings_report(plan)?;
    let (planned, reference) = match opts.mode {
        BuildMode::Independent => (savings.total_independent, savings.total_independent),
        BuildMode::Progressive => (savings.total_progressive, savings.per_stage_scratch_flops[n - 1]),
    };
    let mut slack = 0u128;
    for i in 0..n {
        let batch_tokens = plan.batch_sizes[i] * plan.seq_len;
        slack += budget::flops(plan.sizes[i], batch_tokens)?;
    }
    let audit = FlopsAudit {
        consumed: flops_offset,
        planned,
        reference,
        slack,
        within_slack: flops_offset.abs_diff(reference) <= slack,
    };
    let consumed: u64 = reports.iter().map(|r| r.tokens_consumed).sum();
    let distinct = match opts.mode {
        BuildMode::Progressive => cursor.distinct_served(),
        BuildMode::Independent => reports.iter().map(|r| r.cursor.distinct_served()).max().unwrap_or(0),
    };
    let report = FamilyReport {
        options: opts.clone(),
        plan: plan.clone(),
        stages: reports,
        audit,
        data: DataAccounting {
            unique_cap: cap,
            consumed,
            distinct,
            reused: consumed - distinct,
        },
    };
    Ok(FamilyRun { stages, report })
}
