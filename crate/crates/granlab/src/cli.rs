//! Subcommands of the `granlab` binary.
//!
//! Exit codes: 0 when the run succeeded and its check passed, 1 when a
//! check failed, 2 for usage, configuration or IO errors.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use granlab_core::constructions::{assemble_theorem_moe, gaussian_routing, linear_experts, relu_experts, AssembleOptions};
use granlab_core::lemmas::{self, IncoherenceExperts, IncoherenceOptions, LemmaReport};
use granlab_core::matching::{entropy_gap_check, error_lower_bound_constant, CertificateOptions};
use granlab_core::moe::{count_params, make_config, Activation, Gating, MoeConfig, MoeLayer, ParamCount};
use granlab_core::rng::SeedStream;
use granlab_core::trainer::{
    granularity_cells, init_student, random_teacher, run_cell, train_with, SweepRow, TrainConfig, DESK_LRS,
    FULL_LRS,
};
use serde::Serialize;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Provenance};
use crate::config::{ConfigError, ExperimentConfig, SweepSpec, TeacherFields};
use crate::output::{summarize_dir, version, VERSION, write_json, write_sweep_csv, write_train_log_csv, Envelope};
use crate::parallel::{par_map, threads, Threaded};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] granlab_core::Error),
}

pub type CliResult<T> = Result<T, CliError>;

pub const LEMMA_IDS: [&str; 10] = [
    "routing-balance",
    "order-statistics",
    "chi2-tail",
    "tube-volume",
    "covariance-rank",
    "linear-separation",
    "relu-incoherence",
    "unique-count",
    "norm-upper",
    "entropy-gap",
];

#[derive(Debug, Parser)]
#[command(name = "granlab", version = VERSION, about = "Mixture-of-experts granularity laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a random construction, verify it, write checkpoint and report.
    Construct(RunArgs),
    /// Run one lemma verifier over a list of seeds.
    Verify(RunArgs),
    /// Lower-bound the error between two constant-activation checkpoints.
    Certify(RunArgs),
    /// Train one student against a teacher.
    Train(RunArgs),
    /// Train a grid of students at fixed active and total neurons.
    Sweep(RunArgs),
    /// Summarize the JSON reports in a directory.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long, value_parser = ["constant", "linear", "relu"])]
    pub activation: Option<String>,
    #[arg(long, value_parser = ["equal_hard", "softmax_top_k"])]
    pub gating: Option<String>,
    #[arg(long)]
    pub route_bias: bool,
    #[arg(long, value_parser = ["gaussian_iso", "unit_ball"])]
    pub dist: Option<String>,
    /// First seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Monte-Carlo samples or trials.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub lemma: Option<String>,
    #[arg(long)]
    pub x: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub t: Option<f64>,
    /// Extra lemma parameter `key=value` (repeatable).
    #[arg(long = "param")]
    pub params: Vec<String>,
    /// Checkpoint of the target layer.
    #[arg(long)]
    pub f: Option<PathBuf>,
    /// Checkpoint of the approximating layer.
    #[arg(long)]
    pub f_prime: Option<PathBuf>,
    #[arg(long)]
    pub c_prime: Option<f64>,
    #[arg(long)]
    pub teacher_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub teacher_m: Option<usize>,
    #[arg(long)]
    pub teacher_k: Option<usize>,
    #[arg(long)]
    pub teacher_w: Option<usize>,
    #[arg(long)]
    pub teacher_seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Comma-separated learning rates for `sweep`.
    #[arg(long)]
    pub lrs: Option<String>,
    /// Training samples.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long, value_parser = ["f32", "f64"])]
    pub precision: Option<String>,
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Seed of the data stream and student initialization.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Comma-separated student granularities (empty string for none).
    #[arg(long)]
    pub granularities: Option<String>,
    /// Active neurons `k'w'` of every sweep student.
    #[arg(long)]
    pub active: Option<usize>,
    /// Total neurons `m'w'` of every sweep student.
    #[arg(long)]
    pub total: Option<usize>,
    /// d = 256, 26M samples, teacher w = 32, students with 320 active neurons.
    #[arg(long)]
    pub full_scale: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
    /// Also write `summary.md` here.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn enum_from_str<T: serde::de::DeserializeOwned>(s: &str) -> CliResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|e| CliError::Usage(format!("invalid value `{s}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|_| CliError::Usage(format!("invalid {what} entry `{v}`"))))
        .collect()
}

/// Loads `--config` (if any) and writes the flags on top.
pub fn resolve(args: &RunArgs, command: &str) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(c) = &cfg.command {
        if c != command {
            return Err(CliError::Usage(format!("config is for `{c}`, not `{command}`")));
        }
    }
    cfg.command = Some(command.to_string());
    let moe = &mut cfg.moe;
    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src {
                $dst = Some(v);
            }
        };
    }
    set!(moe.m, args.m);
    set!(moe.k, args.k);
    set!(moe.w, args.w);
    set!(moe.d, args.d);
    if let Some(a) = &args.activation {
        moe.activation = Some(enum_from_str(a)?);
    }
    if let Some(g) = &args.gating {
        moe.gating = Some(enum_from_str(g)?);
    }
    if args.route_bias {
        moe.route_bias = Some(true);
    }
    if let Some(d) = &args.dist {
        cfg.dist = Some(enum_from_str(d)?);
    }
    if args.seed.is_some() || args.seeds.is_some() {
        let base = args.seed.unwrap_or(0);
        cfg.seeds = Some((base..base + args.seeds.unwrap_or(1)).collect());
    }
    set!(cfg.n_samples, args.n);
    set!(cfg.lemma, args.lemma.clone());
    for (key, v) in [("x", args.x), ("delta", args.delta), ("t", args.t)] {
        if let Some(v) = v {
            cfg.params.insert(key.to_string(), v);
        }
    }
    for kv in &args.params {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("--param expects key=value, got `{kv}`")))?;
        let v: f64 = v.trim().parse().map_err(|_| CliError::Usage(format!("--param {k}: not a number")))?;
        cfg.params.insert(k.trim().to_string(), v);
    }
    set!(cfg.f, args.f.clone());
    set!(cfg.f_prime, args.f_prime.clone());
    set!(cfg.c_prime, args.c_prime);
    set!(cfg.output_dir, args.output_dir.clone());
    if args.full_scale {
        cfg.full_scale = Some(true);
    }
    let teacher_flags = args.teacher_checkpoint.is_some()
        || args.teacher_m.is_some()
        || args.teacher_k.is_some()
        || args.teacher_w.is_some()
        || args.teacher_seed.is_some();
    if teacher_flags {
        let t = cfg.teacher.get_or_insert_with(TeacherFields::default);
        set!(t.checkpoint, args.teacher_checkpoint.clone());
        set!(t.m, args.teacher_m);
        set!(t.k, args.teacher_k);
        set!(t.w, args.teacher_w);
        set!(t.seed, args.teacher_seed);
    }
    let full = cfg.full_scale();
    let train_flags = args.lr.is_some()
        || args.samples.is_some()
        || args.batch_size.is_some()
        || args.momentum.is_some()
        || args.eval_every.is_some()
        || args.eval_samples.is_some()
        || args.precision.is_some()
        || args.init_scale.is_some()
        || args.train_seed.is_some();
    if train_flags {
        let t = cfg.train.get_or_insert_with(|| if full { TrainConfig::full() } else { TrainConfig::desk() });
        if let Some(v) = args.lr {
            t.lr0 = v;
        }
        if let Some(v) = args.samples {
            t.total_samples = v;
        }
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.momentum {
            t.momentum = v;
        }
        if let Some(v) = args.eval_every {
            t.eval_every = v;
        }
        if let Some(v) = args.eval_samples {
            t.eval_samples = v;
        }
        if let Some(p) = &args.precision {
            t.precision = enum_from_str(p)?;
        }
        if args.init_scale.is_some() {
            t.init_scale = args.init_scale;
        }
        if let Some(v) = args.train_seed {
            t.seed = v;
        }
    }
    let sweep_flags = args.granularities.is_some() || args.active.is_some() || args.total.is_some() || args.lrs.is_some();
    if sweep_flags {
        let s = cfg.sweep.get_or_insert_with(SweepSpec::default);
        if let Some(g) = &args.granularities {
            s.granularities = parse_list(g, "granularity")?;
        }
        set!(s.active, args.active);
        set!(s.total, args.total);
        if let Some(l) = &args.lrs {
            s.lrs = parse_list(l, "learning rate")?;
        }
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<bool> {
    match cli.command {
        Command::Construct(a) => cmd_construct(&resolve(&a, "construct")?),
        Command::Verify(a) => cmd_verify(&resolve(&a, "verify")?),
        Command::Certify(a) => cmd_certify(&resolve(&a, "certify")?),
        Command::Train(a) => cmd_train(&resolve(&a, "train")?),
        Command::Sweep(a) => cmd_sweep(&resolve(&a, "sweep")?),
        Command::Report(a) => cmd_report(&a.dir, a.output_dir.as_deref()),
    }
}

/// Maps a run outcome to the process exit code.
pub fn exit_code(result: &CliResult<bool>) -> i32 {
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(_) => 2,
    }
}

fn prepare_dir(cfg: &ExperimentConfig) -> CliResult<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn provenance(source: &str, seed: Option<u64>) -> Provenance {
    Provenance { source: source.to_string(), seed, version: version() }
}

// ---------------------------------------------------------------------------

pub fn cmd_construct(cfg: &ExperimentConfig) -> CliResult<bool> {
    let activation = cfg.moe.activation.ok_or(ConfigError::Missing("moe.activation"))?;
    let (m, k, d) = (cfg.moe.require_m()?, cfg.moe.require_k()?, cfg.moe.require_d()?);
    let w = cfg.moe.w.unwrap_or(1);
    make_config(m, k, w, d, activation, Gating::EqualHard, false)?;
    let dir = prepare_dir(cfg)?;
    let mut opts = AssembleOptions::new(d);
    opts.dist = cfg.dist(d);
    opts.n_mc = cfg.n_samples_or(opts.n_mc);
    let seeds = cfg.seeds();
    let built = par_map(&seeds, threads(), |_, &s| assemble_theorem_moe(activation, m, k, w, d, s, &opts));
    let mut all = true;
    for (seed, res) in seeds.iter().zip(built) {
        let (layer, report) = res?;
        let stem = format!("construct-{}-m{m}-k{k}-w{w}-d{d}-seed{seed}", activation.name());
        write_checkpoint(&dir.join(format!("{stem}.ckpt")), &layer, provenance("construct", Some(*seed)))?;
        let pass = report.overall_pass;
        all &= pass;
        write_json(&dir.join(format!("{stem}.json")), &Envelope::new("construction", cfg, vec![*seed], pass, report))?;
        println!("{stem}: {}", if pass { "pass" } else { "FAIL" });
    }
    Ok(all)
}

fn lemma_layer(cfg: &ExperimentConfig, seed: u64) -> CliResult<MoeLayer> {
    if let Some(p) = &cfg.f {
        return Ok(read_checkpoint(p)?.0);
    }
    let activation = cfg.moe.activation.unwrap_or(Activation::Relu);
    let (m, k, d) = (cfg.moe.require_m()?, cfg.moe.require_k()?, cfg.moe.require_d()?);
    let w = cfg.moe.w.unwrap_or(1);
    let mut opts = AssembleOptions::new(d);
    opts.dist = cfg.dist(d);
    opts.n_mc = 1000;
    opts.n_pairs = 100;
    Ok(assemble_theorem_moe(activation, m, k, w, d, seed, &opts)?.0)
}

/// Runs lemma `id` once.
pub fn run_lemma(cfg: &ExperimentConfig, id: &str, seed: u64) -> CliResult<LemmaReport> {
    let n = cfg.n_samples_or(100_000);
    let stream = SeedStream::new(seed);
    let report = match id {
        "routing-balance" => {
            let (m, k, d) = (cfg.moe.require_m()?, cfg.moe.require_k()?, cfg.moe.require_d()?);
            let mut layer = MoeLayer::zeros(make_config(m, k, 1, d, Activation::Constant, Gating::EqualHard, false)?)?;
            layer.routing = gaussian_routing(m, d, stream.fork_str("routing"));
            let census = lemmas::region_census(&layer, &cfg.dist(d), n, stream.fork_str("census").key());
            lemmas::check_routing_balance(&census, seed)
        }
        "order-statistics" => lemmas::order_stat_probability(
            cfg.moe.require_m()?,
            cfg.moe.require_k()?,
            cfg.param("delta", 0.0),
            n,
            seed,
        )?,
        "chi2-tail" => lemmas::chi2_tail_check(cfg.moe.require_d()?, cfg.require_param("x")?, n, seed),
        "tube-volume" => {
            let d = cfg.moe.require_d()?;
            let mut p = vec![0.0; d];
            p[0] = cfg.param("center", 0.0);
            let nc = cfg.param("n_constrained", 1.0) as usize;
            lemmas::tube_volume_estimate(&cfg.dist(d), &p, cfg.require_param("t")?, nc, n, seed)?
        }
        "covariance-rank" => {
            let d = cfg.moe.require_d()?;
            let cut = cfg.param("threshold", 0.0);
            lemmas::covariance_rank_check(&cfg.dist(d), |x: &[f64]| x[0] >= cut, cfg.param("kappa_constant", 10.0), n, seed)?
        }
        "linear-separation" => {
            let (m, k, d) = (cfg.moe.require_m()?, cfg.moe.require_k()?, cfg.moe.require_d()?);
            let w = cfg.moe.w.unwrap_or(1);
            let ex = linear_experts(m, k, w, d, stream.fork_str("experts"));
            let kappa = cfg.param("kappa", w as f64) as usize;
            let n_pairs = cfg.param("n_pairs", 20.0) as usize;
            lemmas::linear_separation_check(
                &ex.matrices(),
                k,
                cfg.param("epsilon", 0.5),
                kappa,
                n_pairs,
                cfg.param("c", 0.1),
                stream.fork_str("pairs").key(),
            )?
        }
        "relu-incoherence" => {
            let (m, k, d) = (cfg.moe.require_m()?, cfg.moe.require_k()?, cfg.moe.require_d()?);
            let w = cfg.moe.w.unwrap_or(2);
            let ex = relu_experts(m, k, w, d, stream.fork_str("experts"));
            let def = IncoherenceOptions::default();
            let opts = IncoherenceOptions {
                r: cfg.param("r", def.r as f64) as usize,
                n_tuples: cfg.param("n_tuples", def.n_tuples as f64) as usize,
                n_projections: cfg.param("n_projections", def.n_projections as f64) as usize,
                c: cfg.param("c", def.c),
            };
            lemmas::relu_incoherence_check(IncoherenceExperts::Diagonal(&ex), k, w, &opts, stream.fork_str("tuples").key())?
        }
        "unique-count" => {
            let d = cfg.moe.require_d()?;
            lemmas::unique_count_tail(cfg.param("draws", d as f64) as usize, d, n, seed)?
        }
        "norm-upper" => {
            let layer = lemma_layer(cfg, seed)?;
            let dist = cfg.dist(layer.config.d);
            lemmas::norm_upper_check(&layer, &dist, n, stream.fork_str("norm").key())
        }
        "entropy-gap" => {
            let (m, k) = (cfg.moe.require_m()? as u64, cfg.moe.require_k()? as u64);
            let mut r = entropy_gap_check(
                m,
                k,
                cfg.require_param("m_prime")? as u64,
                cfg.require_param("k_prime")? as u64,
                cfg.param("c", 1.0),
                cfg.param("c_prime", 0.5),
            );
            r.seed = seed;
            r
        }
        other => {
            return Err(CliError::Usage(format!("unknown lemma `{other}`; valid ids: {}", LEMMA_IDS.join(", "))))
        }
    };
    Ok(report)
}

#[derive(Debug, Serialize)]
struct VerifyResult {
    lemma_id: String,
    rule: String,
    reports: Vec<LemmaReport>,
}

/// Aggregate verdict over seeds: for routing balance the mean balance count
/// must reach the required count; every other lemma must pass on each seed.
pub fn aggregate_pass(id: &str, reports: &[LemmaReport]) -> (bool, String) {
    if id == "routing-balance" {
        let mean = reports.iter().filter_map(|r| r.get_stat("balance_count")).sum::<f64>() / reports.len() as f64;
        let need = reports.first().and_then(|r| r.thresholds.get("min_balance_count").copied()).unwrap_or(f64::INFINITY);
        (mean >= need, format!("mean balance_count {mean} >= {need}"))
    } else {
        (reports.iter().all(|r| r.pass), "every seed passes".to_string())
    }
}

pub fn cmd_verify(cfg: &ExperimentConfig) -> CliResult<bool> {
    let id = cfg.lemma.clone().ok_or(ConfigError::Missing("lemma"))?;
    if !LEMMA_IDS.contains(&id.as_str()) {
        return Err(CliError::Usage(format!("unknown lemma `{id}`; valid ids: {}", LEMMA_IDS.join(", "))));
    }
    let dir = prepare_dir(cfg)?;
    let seeds = cfg.seeds();
    let runs = par_map(&seeds, threads(), |_, &s| {
        let t0 = Instant::now();
        run_lemma(cfg, &id, s).map(|mut r| {
            r.runtime_ms = Some(t0.elapsed().as_secs_f64() * 1e3);
            r
        })
    });
    let reports = runs.into_iter().collect::<CliResult<Vec<_>>>()?;
    let (pass, rule) = aggregate_pass(&id, &reports);
    for r in &reports {
        println!("{} seed {}: {}", r.lemma_id, r.seed, if r.pass { "pass" } else { "FAIL" });
    }
    println!("{id}: aggregate {} ({rule})", if pass { "pass" } else { "FAIL" });
    let result = VerifyResult { lemma_id: id.clone(), rule, reports };
    write_json(&dir.join(format!("verify-{id}.json")), &Envelope::new("verify", cfg, seeds, pass, result))?;
    Ok(pass)
}

pub fn cmd_certify(cfg: &ExperimentConfig) -> CliResult<bool> {
    let f_path = cfg.f.as_ref().ok_or(ConfigError::Missing("f"))?;
    let g_path = cfg.f_prime.as_ref().ok_or(ConfigError::Missing("f_prime"))?;
    let (f, _) = read_checkpoint(f_path)?;
    let (g, _) = read_checkpoint(g_path)?;
    let dir = prepare_dir(cfg)?;
    let seed = cfg.seeds()[0];
    let opts = CertificateOptions { c_prime: cfg.c_prime.unwrap_or(CertificateOptions::default().c_prime) };
    let n = cfg.n_samples_or(200_000);
    let cert = match error_lower_bound_constant(&f, &g, &cfg.dist(f.config.d), n, seed, &opts) {
        Ok(c) => c,
        Err(granlab_core::Error::EmptyCertificate) => {
            println!("certificate: no configuration qualifies for the graph");
            write_json(&dir.join("certificate.json"), &Envelope::new("certificate", cfg, vec![seed], false, "empty"))?;
            return Ok(false);
        }
        Err(e) => return Err(e.into()),
    };
    println!(
        "certificate: mc_error {:.6e} ± {:.2e}, bound {:.6e}, floor {:.6e}: {}",
        cert.mc_error,
        cert.mc_stderr,
        cert.bound,
        cert.floor_bound,
        if cert.sound { "sound" } else { "UNSOUND" }
    );
    let pass = cert.sound;
    write_json(&dir.join("certificate.json"), &Envelope::new("certificate", cfg, vec![seed], pass, cert))?;
    Ok(pass)
}

// ---------------------------------------------------------------------------
// Training

/// Teacher shape: 16 experts, 8 active, `kw = d` (w = 8 at d = 64, 32 at d = 256).
pub fn teacher_layer(cfg: &ExperimentConfig, d: usize) -> CliResult<MoeLayer> {
    let t = cfg.teacher.clone().unwrap_or_default();
    if let Some(p) = &t.checkpoint {
        let layer = read_checkpoint(p)?.0;
        if layer.config.d != d {
            return Err(CliError::Usage(format!("teacher has d = {}, expected {d}", layer.config.d)));
        }
        return Ok(layer);
    }
    let k = t.k.unwrap_or(8);
    let config = make_config(
        t.m.unwrap_or(16),
        k,
        t.w.unwrap_or((d / k).max(1)),
        d,
        t.activation.unwrap_or(Activation::Relu),
        t.gating.unwrap_or(Gating::EqualHard),
        false,
    )?;
    Ok(random_teacher(config, t.seed.unwrap_or(1))?)
}

fn model_dim(cfg: &ExperimentConfig) -> usize {
    cfg.moe.d.unwrap_or(if cfg.full_scale() { 256 } else { 64 })
}

fn train_config(cfg: &ExperimentConfig) -> TrainConfig {
    cfg.train.clone().unwrap_or_else(|| if cfg.full_scale() { TrainConfig::full() } else { TrainConfig::desk() })
}

/// Default student active neurons: the teacher's plus 25%.
fn default_active(d: usize) -> usize {
    d + d / 4
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    student: MoeConfig,
    teacher: MoeConfig,
    student_params: ParamCount,
    teacher_params: ParamCount,
    final_eval_loss: f64,
    normalized_final_loss: f64,
    teacher_norm_sq: f64,
    diverged: bool,
    steps: usize,
    samples_seen: usize,
    runtime_s: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> CliResult<bool> {
    let d = model_dim(cfg);
    let teacher = teacher_layer(cfg, d)?;
    let tc = train_config(cfg);
    tc.validate()?;
    let k = cfg.moe.k.unwrap_or(8);
    let w = cfg.moe.w.unwrap_or((default_active(d) / k).max(1));
    let student_cfg = make_config(
        cfg.moe.m.unwrap_or(2 * k),
        k,
        w,
        d,
        cfg.moe.activation.unwrap_or(Activation::Relu),
        cfg.moe.gating.unwrap_or(Gating::SoftmaxTopK),
        cfg.moe.route_bias.unwrap_or(false),
    )?;
    let dir = prepare_dir(cfg)?;
    let student = init_student(student_cfg, tc.init_scale, granlab_core::trainer::cell_seed(&tc, 0))?;
    let t0 = Instant::now();
    let (student, log) = train_with(&teacher, student, &cfg.dist(d), &tc, &Threaded { threads: threads() })?;
    write_train_log_csv(&dir.join("train_log.csv"), &log)?;
    write_checkpoint(&dir.join("student.ckpt"), &student, provenance("train", Some(tc.seed)))?;
    let summary = TrainSummary {
        student: student_cfg,
        teacher: teacher.config,
        student_params: count_params(&student_cfg),
        teacher_params: count_params(&teacher.config),
        final_eval_loss: log.final_eval_loss,
        normalized_final_loss: log.normalized_final_loss(),
        teacher_norm_sq: log.teacher_norm_sq,
        diverged: log.diverged,
        steps: log.steps,
        samples_seen: log.samples_seen,
        runtime_s: t0.elapsed().as_secs_f64(),
    };
    println!(
        "{}: normalized final loss {:.4e}{}",
        student_cfg.label(),
        summary.normalized_final_loss,
        if log.diverged { " (diverged)" } else { "" }
    );
    let pass = !log.diverged;
    write_json(&dir.join("train_summary.json"), &Envelope::new("train", cfg, vec![tc.seed], pass, summary))?;
    Ok(pass)
}

pub fn cmd_sweep(cfg: &ExperimentConfig) -> CliResult<bool> {
    let d = model_dim(cfg);
    let teacher = teacher_layer(cfg, d)?;
    let tc = train_config(cfg);
    tc.validate()?;
    let spec = cfg.sweep.clone().unwrap_or(SweepSpec {
        granularities: vec![1, 2, 4, 8],
        active: None,
        total: None,
        lrs: Vec::new(),
    });
    let active = spec.active.unwrap_or(default_active(d));
    let total = spec.total.unwrap_or(2 * active);
    let lrs = match (spec.lrs.is_empty(), cfg.full_scale()) {
        (false, _) => spec.lrs.clone(),
        (true, false) => DESK_LRS.to_vec(),
        (true, true) => FULL_LRS.to_vec(),
    };
    let cells = granularity_cells(
        &spec.granularities,
        active,
        total,
        d,
        cfg.moe.activation.unwrap_or(Activation::Relu),
        cfg.moe.gating.unwrap_or(Gating::SoftmaxTopK),
        cfg.moe.route_bias.unwrap_or(false),
    )?;
    let dir = prepare_dir(cfg)?;
    let dist = cfg.dist(d);
    let n_threads = threads();
    let rows = par_map(&cells, n_threads, |i, c| {
        run_cell(c, i, &teacher, &dist, &tc, &lrs, &granlab_core::trainer::Serial)
    });
    let rows: Vec<SweepRow> = rows.into_iter().collect::<Result<_, _>>()?;
    write_sweep_csv(&dir.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("{}: lr {} normalized loss {:.4e}", r.label, r.lr, r.normalized_loss);
    }
    let pass = rows.iter().all(|r| !r.diverged);
    write_json(&dir.join("sweep.json"), &Envelope::new("sweep", cfg, vec![tc.seed], pass, &rows))?;
    Ok(pass)
}

pub fn cmd_report(dir: &Path, output_dir: Option<&Path>) -> CliResult<bool> {
    let summary = summarize_dir(dir)?;
    let md = summary.to_markdown();
    print!("{md}");
    if let Some(out) = output_dir {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("summary.md"), &md)?;
    }
    Ok(summary.unreadable.is_empty())
}
