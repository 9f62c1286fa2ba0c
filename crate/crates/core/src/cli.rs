//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 infeasible plan,
//! 3 training divergence.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::budget::{self, FamilyPlan, FlopsReport};
use crate::checkpoint::{self, Bundle};
use crate::data::{synthetic_documents, Corpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{self, KlReport, SpecDecodeRow};
use crate::expansion::{self, ExpansionMode};
use crate::nn::{init_params, ModelConfig};
use crate::trainer::{self, BuildMode, FamilyOptions, FamilyReport};

pub const THREADS_ENV: &str = "PROGFAM_THREADS";
pub const PLAN_FORMAT_VERSION: u32 = 1;
const RUN_MANIFEST: &str = checkpoint::RUN_RECORD;

#[derive(Debug, Parser)]
#[command(name = "progfam", version, about = "Build and evaluate progressively trained model families")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Token budgets and FLOPs of independent vs progressive construction.
    Plan(PlanArgs),
    /// Write a synthetic byte corpus and its document index.
    Corpus(CorpusArgs),
    /// Train every member of a family.
    Family(FamilyArgs),
    /// Write a freshly initialized checkpoint.
    Init(InitArgs),
    /// Grow a checkpoint into a larger configuration.
    Expand(ExpandArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Parameter counts, e.g. 1e9,2e9,4e9,8e9.
    #[arg(long, value_delimiter = ',', conflicts_with = "models")]
    pub sizes: Option<Vec<f64>>,
    /// Model list file; sizes are taken from its configs.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, conflicts_with = "scratch_tokens")]
    pub chinchilla_mult: Option<f64>,
    /// Explicit scratch token budgets, one per size.
    #[arg(long, value_delimiter = ',')]
    pub scratch_tokens: Option<Vec<f64>>,
    /// Per-stage max learning rates, `first:last`.
    #[arg(long, default_value = "1.5e-3:3e-4")]
    pub lr_ladder: String,
    /// Batch size per stage (one value is broadcast).
    #[arg(long, value_delimiter = ',', default_value = "960")]
    pub batch: Vec<u64>,
    #[arg(long, default_value_t = 1024)]
    pub seq_len: u64,
    /// Plan file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report to write.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// Byte file to write; the index goes to `<out>.idx`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10_000_000)]
    pub tokens: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Clone)]
pub struct CorpusSource {
    /// Corpus byte file; its index is read from `<corpus>.idx`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tokens held out at the end of the corpus for evaluation.
    #[arg(long, default_value_t = 0)]
    pub heldout_tokens: u64,
}

#[derive(Debug, Args)]
pub struct FamilyArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, default_value = "progressive")]
    pub mode: BuildMode,
    #[arg(long)]
    pub fixed_data: bool,
    /// Overrides the plan's max learning rates, `first:last`.
    #[arg(long)]
    pub lr_ladder: Option<String>,
    #[arg(long, default_value = "aki")]
    pub expansion: ExpansionMode,
    #[arg(long)]
    pub no_warmup: bool,
    #[command(flatten)]
    pub data: CorpusSource,
    /// Held-out examples used for validation loss.
    #[arg(long, default_value_t = 64)]
    pub val_examples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub log_every: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// Model config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExpandArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target model config file.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "fpi")]
    pub mode: ExpansionMode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct Dataset {
    #[command(flatten)]
    pub source: CorpusSource,
    #[arg(long, default_value_t = 64)]
    pub examples: usize,
    /// Tokens per example; defaults to the smallest model context.
    #[arg(long)]
    pub example_len: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Perplexity of each checkpoint.
    Ppl {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: Dataset,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// KL between adjacent checkpoints, smallest first.
    Kl {
        #[arg(required = true, num_args = 2..)]
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        data: Dataset,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Speculative decoding acceptance rate and timing.
    Specdec {
        #[arg(long, required = true)]
        draft: Vec<PathBuf>,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long, default_value_t = eval::DEFAULT_GAMMA)]
        gamma: usize,
        #[arg(long, default_value_t = 16)]
        prompts: usize,
        #[arg(long, default_value_t = 16)]
        prompt_len: usize,
        #[arg(long, default_value_t = 48)]
        max_new: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        source: CorpusSource,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Provenance record written next to every artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    pub config_hash: String,
    pub corpus_hash: Option<String>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub status: String,
}

/// Plan file: the plan plus a schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub plan: FamilyPlan,
}

/// Model list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelsFile {
    pub model: Vec<ModelConfig>,
}

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Stamp {
    command_line: Vec<String>,
    started: u64,
}

impl Stamp {
    fn manifest(&self, config: &impl Serialize, corpus: Option<&Corpus>, seed: Option<u64>, status: &str) -> RunManifest {
        RunManifest {
            command_line: self.command_line.clone(),
            config_hash: sha256_hex(&serde_json::to_vec(config).expect("config serializes")),
            corpus_hash: corpus.map(Corpus::sha256),
            seed,
            threads: thread_count(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: self.started,
            finished_unix: now_unix(),
            status: status.to_string(),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Decode(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

pub fn read_plan(path: &Path) -> Result<FamilyPlan> {
    let f: PlanFile = parse_toml(path)?;
    if f.format_version != PLAN_FORMAT_VERSION {
        return Err(Error::Decode(format!(
            "{}: plan format {} is not supported",
            path.display(),
            f.format_version
        )));
    }
    f.plan.validate()?;
    Ok(f.plan)
}

pub fn write_plan(path: &Path, plan: &FamilyPlan) -> Result<()> {
    let file = PlanFile {
        format_version: PLAN_FORMAT_VERSION,
        plan: plan.clone(),
    };
    write_text(path, &toml::to_string(&file).map_err(|e| Error::Decode(e.to_string()))?)
}

pub fn read_models(path: &Path) -> Result<Vec<ModelConfig>> {
    let f: ModelsFile = parse_toml(path)?;
    for c in &f.model {
        c.validate()?;
    }
    Ok(f.model)
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let c: ModelConfig = parse_toml(path)?;
    c.validate()?;
    Ok(c)
}

fn parse_ladder(spec: &str) -> Result<(f64, f64)> {
    let (a, b) = spec
        .split_once(':')
        .ok_or_else(|| Error::invalid(format!("learning-rate ladder {spec:?} is not first:last")))?;
    let parse = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("bad learning rate {s:?}")))
    };
    Ok((parse(a)?, parse(b)?))
}

fn as_count(x: f64, what: &str) -> Result<u64> {
    if !(x.is_finite() && x >= 0.0 && x.fract() == 0.0 && x < u64::MAX as f64) {
        return Err(Error::invalid(format!("{what} {x} is not a whole count")));
    }
    Ok(x as u64)
}

fn broadcast(values: &[u64], n: usize, what: &str) -> Result<Vec<u64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        len if len == n => Ok(values.to_vec()),
        len => Err(Error::invalid(format!("{len} {what} values for {n} stages"))),
    }
}

pub fn load_corpus(source: &CorpusSource) -> Result<(Corpus, Option<Corpus>)> {
    let mut idx = source.corpus.clone().into_os_string();
    idx.push(".idx");
    let corpus = Corpus::load(&source.corpus, Path::new(&idx))?;
    if source.heldout_tokens == 0 {
        return Ok((corpus, None));
    }
    let (train, held) = corpus.split_heldout(source.heldout_tokens)?;
    Ok((train, Some(held)))
}

fn tokens_cell(tokens: u64) -> String {
    if tokens >= 100_000_000 {
        budget::format_billions(tokens)
    } else {
        tokens.to_string()
    }
}

fn flops_cell(flops: u128) -> String {
    if flops >= 10u128.pow(18) {
        budget::format_zflops(flops)
    } else {
        format!("{:.3e}", flops as f64)
    }
}

fn plan_table(plan: &FamilyPlan, report: &FlopsReport) -> String {
    let mut out = format!(
        "{:>5}  {:>14}  {:>12}  {:>12}  {:>9}  {:>10}  {:>10}\n",
        "stage", "size", "scratch", "prog", "max_lr", "scratch_F", "prog_F"
    );
    for i in 0..plan.n_stages() {
        out += &format!(
            "{:>5}  {:>14}  {:>12}  {:>12}  {:>9.3e}  {:>10}  {:>10}\n",
            i + 1,
            plan.sizes[i],
            tokens_cell(plan.scratch_tokens[i]),
            tokens_cell(plan.prog_tokens[i]),
            plan.max_lrs[i],
            flops_cell(report.per_stage_scratch_flops[i]),
            flops_cell(report.per_stage_prog_flops[i]),
        );
    }
    out += &format!(
        "total FLOPs: independent {:.4e}, progressive {:.4e}, reduction {:.3}\n",
        report.total_independent as f64,
        report.total_progressive as f64,
        report.reduction_fraction
    );
    out
}

fn cmd_plan(a: &PlanArgs) -> Result<()> {
    let sizes: Vec<u64> = match (&a.sizes, &a.models) {
        (Some(s), None) => s.iter().map(|&x| as_count(x, "size")).collect::<Result<_>>()?,
        (None, Some(m)) => read_models(m)?.iter().map(ModelConfig::count_params).collect(),
        _ => return Err(Error::invalid("plan needs exactly one of --sizes or --models")),
    };
    let n = sizes.len();
    let (first, last) = parse_ladder(&a.lr_ladder)?;
    let lrs = budget::lr_ladder(n, first, last)?;
    let batch = broadcast(&a.batch, n, "batch")?;
    let plan = match (a.chinchilla_mult, &a.scratch_tokens) {
        (Some(mult), None) => FamilyPlan::chinchilla(sizes, mult, lrs, batch, a.seq_len)?,
        (None, Some(t)) => {
            let scratch = t.iter().map(|&x| as_count(x, "token budget")).collect::<Result<_>>()?;
            FamilyPlan::from_scratch(sizes, scratch, lrs, batch, a.seq_len, 0.0)?
        }
        _ => return Err(Error::invalid("plan needs exactly one of --chinchilla-mult or --scratch-tokens")),
    };
    let report = budget::savings_report(&plan)?;
    print!("{}", plan_table(&plan, &report));
    if let Some(out) = &a.out {
        write_plan(out, &plan)?;
    }
    if let Some(path) = &a.report {
        #[derive(Serialize)]
        struct PlanReport<'a> {
            plan: &'a FamilyPlan,
            flops: &'a FlopsReport,
        }
        write_json(path, &PlanReport { plan: &plan, flops: &report })?;
    }
    Ok(())
}

fn cmd_corpus(a: &CorpusArgs) -> Result<()> {
    let docs = synthetic_documents(&SyntheticSpec {
        seed: a.seed,
        min_tokens: a.tokens,
        ..SyntheticSpec::default()
    });
    let mut idx = a.out.clone().into_os_string();
    idx.push(".idx");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Corpus::write_documents(&docs, &a.out, Path::new(&idx))?;
    let corpus = Corpus::from_documents(&docs);
    println!(
        "wrote {} documents, {} tokens, sha256 {}",
        corpus.n_documents(),
        corpus.total_tokens(),
        corpus.sha256()
    );
    Ok(())
}

#[derive(Serialize)]
struct FamilyConfig<'a> {
    plan: &'a FamilyPlan,
    models: &'a [ModelConfig],
    options: &'a FamilyOptions,
    val_examples: usize,
    heldout_tokens: u64,
}

fn cmd_family(a: &FamilyArgs, stamp: &Stamp) -> Result<()> {
    let mut plan = read_plan(&a.plan)?;
    if let Some(spec) = &a.lr_ladder {
        let (first, last) = parse_ladder(spec)?;
        plan.max_lrs = budget::lr_ladder(plan.n_stages(), first, last)?;
    }
    let models = read_models(&a.models)?;
    let mut opts = FamilyOptions::new(a.mode, a.seed);
    opts.fixed_data = a.fixed_data;
    opts.expansion = a.expansion;
    opts.log_every = a.log_every;
    if a.no_warmup {
        opts.warmup_fraction = 0.0;
    }
    trainer::check_family(&plan, &models, opts.mode, opts.expansion)?;
    let (corpus, held) = load_corpus(&a.data)?;
    let val = match &held {
        Some(h) if a.val_examples > 0 => h.examples(a.val_examples, plan.seq_len as usize + 1)?,
        _ => Vec::new(),
    };
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_plan(&a.out.join("plan.toml"), &plan)?;
    let config = FamilyConfig {
        plan: &plan,
        models: &models,
        options: &opts,
        val_examples: a.val_examples,
        heldout_tokens: a.data.heldout_tokens,
    };
    let manifest = |status: &str| stamp.manifest(&config, Some(&corpus), Some(a.seed), status);
    write_json(&a.out.join(RUN_MANIFEST), &manifest("running"))?;

    let mut on_stage = |i: usize, r: &trainer::StageResult| -> Result<()> {
        let mut labels = BTreeMap::new();
        labels.insert("stage".to_string(), i.to_string());
        labels.insert("mode".to_string(), opts.mode.to_string());
        if opts.mode == BuildMode::Progressive {
            labels.insert("expansion".to_string(), opts.expansion.to_string());
        }
        let bundle = Bundle {
            params: r.final_params.clone(),
            train_config: Some(r.train_config.clone()),
            state: Some(r.state.clone()),
            labels,
        };
        checkpoint::save(&a.out.join(format!("stage-{i}")), &bundle)?;
        eprintln!(
            "stage {i}: {} tokens, final train loss {:.4}, val loss {}",
            r.tokens_consumed,
            r.loss_trace.last().map_or(f64::NAN, |p| p.loss),
            r.val_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
        Ok(())
    };
    let run = match trainer::run_family(&plan, &models, &opts, &corpus, &val, &mut on_stage) {
        Ok(run) => run,
        Err(e) => {
            write_json(&a.out.join(RUN_MANIFEST), &manifest(&format!("failed: {e}")))?;
            return Err(e);
        }
    };
    write_json(&a.out.join("report.json"), &run.report)?;
    print!("{}", family_table(&run.report));
    write_json(&a.out.join(RUN_MANIFEST), &manifest("ok"))
}

fn family_table(r: &FamilyReport) -> String {
    let mut out = format!(
        "{:>5}  {:>10}  {:>12}  {:>12}  {:>9}  {:>10}  {:>9}\n",
        "stage", "size", "planned", "consumed", "max_lr", "train_loss", "val_loss"
    );
    for s in &r.stages {
        out += &format!(
            "{:>5}  {:>10}  {:>12}  {:>12}  {:>9.3e}  {:>10.4}  {:>9}\n",
            s.stage + 1,
            s.size,
            s.planned_tokens,
            s.tokens_consumed,
            s.max_lr,
            s.final_train_loss.unwrap_or(f64::NAN),
            s.val_loss.map_or("-".to_string(), |v| format!("{v:.4}"))
        );
    }
    out += &format!(
        "FLOPs consumed {:.6e} vs reference {:.6e} (slack {:.3e}, within: {})\n",
        r.audit.consumed as f64, r.audit.reference as f64, r.audit.slack as f64, r.audit.within_slack
    );
    out += &format!(
        "tokens consumed {}, distinct {}, reused {}\n",
        r.data.consumed, r.data.distinct, r.data.reused
    );
    out
}

fn cmd_init(a: &InitArgs, stamp: &Stamp) -> Result<()> {
    let cfg = read_config(&a.config)?;
    let params = init_params(&cfg, a.seed)?;
    checkpoint::save(&a.out, &Bundle::params_only(params))?;
    write_json(&a.out.join(RUN_MANIFEST), &stamp.manifest(&cfg, None, Some(a.seed), "ok"))?;
    println!("{} parameters -> {}", cfg.count_params(), a.out.display());
    Ok(())
}

fn cmd_expand(a: &ExpandArgs, stamp: &Stamp) -> Result<()> {
    let src = checkpoint::load(&a.input)?;
    let target = read_config(&a.config)?;
    let params = expansion::expand(&src.params, &target, a.mode)?;
    let mut bundle = Bundle::params_only(params);
    bundle.labels.insert("expanded_from".into(), checkpoint::bundle_digest(&a.input)?);
    bundle.labels.insert("expansion".into(), a.mode.to_string());
    checkpoint::save(&a.out, &bundle)?;
    #[derive(Serialize)]
    struct ExpandConfig<'a> {
        target: &'a ModelConfig,
        mode: ExpansionMode,
    }
    let cfg = ExpandConfig { target: &target, mode: a.mode };
    write_json(&a.out.join(RUN_MANIFEST), &stamp.manifest(&cfg, None, None, "ok"))?;
    println!(
        "{} -> {} parameters ({}) -> {}",
        src.params.config.count_params(),
        target.count_params(),
        a.mode,
        a.out.display()
    );
    Ok(())
}

fn eval_examples(d: &Dataset, min_context: usize) -> Result<(Corpus, Vec<Vec<u32>>)> {
    let (train, held) = load_corpus(&d.source)?;
    let corpus = held.unwrap_or(train);
    let len = d.example_len.unwrap_or(min_context);
    let examples = corpus.examples(d.examples, len)?;
    Ok((corpus, examples))
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    manifest: RunManifest,
    result: &'a T,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PplRow {
    pub checkpoint: String,
    pub params: u64,
    pub mean_nll: f64,
    pub perplexity: f64,
}

fn cmd_eval(c: &EvalCommand, stamp: &Stamp) -> Result<()> {
    match c {
        EvalCommand::Ppl { checkpoints, data, json } => {
            let models = checkpoints.iter().map(|p| checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let ctx = models.iter().map(|b| b.params.config.seq_len + 1).min().unwrap();
            let (corpus, examples) = eval_examples(data, ctx)?;
            let mut rows = Vec::new();
            for (path, b) in checkpoints.iter().zip(&models) {
                let nll = eval::mean_nll(&b.params, &examples)?;
                rows.push(PplRow {
                    checkpoint: path.display().to_string(),
                    params: b.params.config.count_params(),
                    mean_nll: nll,
                    perplexity: nll.exp(),
                });
            }
            println!("{:>10}  {:>9}  {:>10}  checkpoint", "params", "nll", "ppl");
            for r in &rows {
                println!("{:>10}  {:>9.5}  {:>10.4}  {}", r.params, r.mean_nll, r.perplexity, r.checkpoint);
            }
            if let Some(path) = json {
                let cfg = (checkpoints, data.examples, data.example_len);
                let manifest = stamp.manifest(&cfg, Some(&corpus), None, "ok");
                write_json(path, &Stamped { manifest, result: &rows })?;
            }
        }
        EvalCommand::Kl { checkpoints, data, json } => {
            let models = checkpoints.iter().map(|p| checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
            let ctx = models.iter().map(|b| b.params.config.seq_len).min().unwrap();
            let (corpus, examples) = eval_examples(data, ctx)?;
            let refs: Vec<_> = models.iter().map(|b| &b.params).collect();
            let mut reports: Vec<KlReport> = eval::consistency_table(&refs, &examples)?;
            for r in &mut reports {
                r.per_example_kl = None;
            }
            print!("{}", eval::format_kl_table(&reports));
            if let Some(path) = json {
                let cfg = (checkpoints, data.examples, data.example_len);
                let manifest = stamp.manifest(&cfg, Some(&corpus), None, "ok");
                write_json(path, &Stamped { manifest, result: &reports })?;
            }
        }
        EvalCommand::Specdec {
            draft,
            gen,
            gamma,
            prompts,
            prompt_len,
            max_new,
            seed,
            source,
            json,
        } => {
            let generator = checkpoint::load(gen)?.params;
            let (train, held) = load_corpus(source)?;
            let corpus = held.unwrap_or(train);
            let prompt_set = corpus.examples(*prompts, *prompt_len)?;
            let mut rows = Vec::new();
            for d in draft {
                let dp = checkpoint::load(d)?.params;
                let mut total = eval::SpecDecodeStats {
                    drafted: 0,
                    accepted: 0,
                    acceptance_rate: 0.0,
                    tokens_generated: 0,
                    wall_time: 0.0,
                    gamma: *gamma,
                };
                for (i, p) in prompt_set.iter().enumerate() {
                    let (_, s) = eval::speculative_generate(&dp, &generator, p, *gamma, *max_new, seed.wrapping_add(i as u64))?;
                    total.drafted += s.drafted;
                    total.accepted += s.accepted;
                    total.tokens_generated += s.tokens_generated;
                    total.wall_time += s.wall_time;
                }
                total.acceptance_rate = total.accepted as f64 / total.drafted.max(1) as f64;
                rows.push(SpecDecodeRow {
                    label: d.display().to_string(),
                    stats: total,
                });
            }
            print!("{}", eval::format_specdec_table(&rows));
            if let Some(path) = json {
                let cfg = (draft, gen, gamma, prompts, prompt_len, max_new);
                let manifest = stamp.manifest(&cfg, Some(&corpus), Some(*seed), "ok");
                write_json(path, &Stamped { manifest, result: &rows })?;
            }
        }
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InfeasiblePlan { .. } => 2,
        Error::Divergence { .. } | Error::NonFinite(_) => 3,
        _ => 1,
    }
}

pub fn run(cli: &Cli, command_line: Vec<String>) -> Result<()> {
    let stamp = Stamp {
        command_line,
        started: now_unix(),
    };
    match &cli.command {
        Command::Plan(a) => cmd_plan(a),
        Command::Corpus(a) => cmd_corpus(a),
        Command::Family(a) => cmd_family(a, &stamp),
        Command::Init(a) => cmd_init(a, &stamp),
        Command::Expand(a) => cmd_expand(a, &stamp),
        Command::Eval(c) => cmd_eval(c, &stamp),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    // must precede the first matrix product
    std::env::set_var("MATMUL_NUM_THREADS", thread_count().to_string());
    let command_line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match run(&cli, command_line) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InfeasiblePlan { stage: 1, size: 2, residual: 0 }), 2);
        assert_eq!(exit_code(&Error::Divergence { step: 3, loss: f32::NAN }), 3);
        assert_eq!(exit_code(&Error::invalid("x")), 1);
        assert_eq!(main_with_args(["progfam", "no-such-command"]), 1);
        assert_eq!(main_with_args(["progfam", "--help"]), 0);
    }

    #[test]
    fn ladder_and_counts() {
        assert_eq!(parse_ladder("1.5e-3:3e-4").unwrap(), (1.5e-3, 3e-4));
        assert!(parse_ladder("1e-3").is_err());
        assert_eq!(as_count(1e9, "size").unwrap(), 1_000_000_000);
        assert!(as_count(1.5, "size").is_err());
        assert_eq!(broadcast(&[4], 3, "batch").unwrap(), vec![4, 4, 4]);
        assert!(broadcast(&[4, 5], 3, "batch").is_err());
    }

    #[test]
    fn plan_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("plan.toml");
        let plan = FamilyPlan::chinchilla(
            vec![1_000_000_000, 2_000_000_000],
            1.0,
            vec![1.5e-3, 3e-4],
            vec![960, 960],
            1024,
        )
        .unwrap();
        write_plan(&path, &plan).unwrap();
        assert_eq!(read_plan(&path).unwrap(), plan);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("format_version = 1"));
    }
}
