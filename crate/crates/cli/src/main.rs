// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use sgva::checkpoint::Checkpoint;
use sgva::embank::{self, EmbeddingBank, SyntheticBankSpec, TextPath};
use sgva::episodes::{self, SamplingConfig, SamplingMode};
use sgva::error::{Result, SgvaError};
use sgva::harness::{self, AblationAxis, ExperimentConfig, RunOutput, TrainOptions};
use sgva::optim::{self, LossSelector};
use sgva::rng::Purpose;

#[derive(Parser)]
#[command(name = "sgva", version, about = "Few-shot classification with semantic-guided visual adapting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create, inspect or validate embedding banks.
    #[command(subcommand)]
    Bank(BankCommand),
    /// Train per the config's scenario, then evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or freshly initialized parameters.
    Eval(EvalArgs),
    /// Run ablation sweeps and write table artifacts.
    Ablate(AblateArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Subcommand)]
enum BankCommand {
    /// Generate a synthetic bank.
    Gen {
        /// TOML file with synthetic bank parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Override a spec field, e.g. `--set noise_sigma=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Print a bank's metadata and digests.
    Inspect { bank: PathBuf },
    /// Load and validate a bank.
    Validate { bank: PathBuf },
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set loss.tau2=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Bank path; takes precedence over the config's `bank`.
    #[arg(long)]
    bank: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for report, checkpoint and timing.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs; the checkpoint can be resumed.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Also write per-query predictions as JSON lines.
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long)]
    predictions: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Named sweep; repeatable, each writes its own table.
    #[arg(long)]
    preset: Vec<String>,
    /// Custom axis `key=v1,v2,...`; repeated axes are crossed into one table.
    #[arg(long)]
    axis: Vec<String>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// One of i2t, i2i, kd_implicit, kd_direct, total, all.
    #[arg(long, default_value = "all")]
    loss: String,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 200)]
    coords: usize,
    #[arg(long, default_value_t = 1)]
    episodes: u64,
    /// Maximum accepted relative error.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

fn overrides(raw: &[String]) -> Result<Vec<(String, String)>> {
    raw.iter().map(|s| harness::parse_override(s)).collect()
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(p) => read_text(p)?,
        None => String::new(),
    };
    let mut cfg = ExperimentConfig::parse(&text, &overrides(&args.set)?)?;
    if let Some(b) = &args.bank {
        cfg.bank = Some(b.clone());
    }
    Ok(cfg)
}

fn load_config_and_bank(args: &ConfigArgs) -> Result<(ExperimentConfig, EmbeddingBank)> {
    let cfg = load_config(args)?;
    let path = cfg
        .bank
        .clone()
        .ok_or_else(|| SgvaError::Config("no bank given; pass --bank or set `bank` in the config".into()))?;
    let bank = embank::load_bank(&path)?;
    Ok((cfg, bank))
}

fn print_json(v: &Value) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn bank_summary(path: &Path, bank: &EmbeddingBank) -> Value {
    let mut splits: BTreeMap<String, usize> = BTreeMap::new();
    for c in bank.classes() {
        if let Some(s) = c.split {
            *splits.entry(serde_json::to_value(s).unwrap().as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    let mut partition: BTreeMap<String, usize> = BTreeMap::new();
    for s in bank.samples() {
        if let Some(p) = s.partition {
            *partition.entry(serde_json::to_value(p).unwrap().as_str().unwrap().to_string()).or_default() += 1;
        }
    }
    let text = match bank.text() {
        TextPath::Stub(stub) => json!({"kind": "stub", "seed": stub.seed(), "prompt_len": stub.shape().prompt_len}),
        TextPath::Precomputed { prompt, .. } => json!({"kind": "precomputed", "prompt": prompt}),
    };
    let digests: BTreeMap<String, String> = bank.frozen_tensor_digests().into_iter().collect();
    json!({
        "path": path,
        "format_version": embank::BANK_FORMAT_VERSION,
        "dims": bank.dims(),
        "tau1": bank.tau1(),
        "classes": bank.classes().len(),
        "samples": bank.len(),
        "splits": if splits.is_empty() { Value::Null } else { json!(splits) },
        "partition": if partition.is_empty() { Value::Null } else { json!(partition) },
        "text": text,
        "frozen_digest": bank.frozen_digest(),
        "tensor_digests": digests,
    })
}

fn bank_command(cmd: BankCommand) -> Result<()> {
    match cmd {
        BankCommand::Gen { spec, set, out } => {
            let mut table: toml::Table = match spec {
                Some(p) => toml::from_str(&read_text(&p)?).map_err(|e| SgvaError::Config(e.message().to_string()))?,
                None => toml::Table::new(),
            };
            for (k, v) in overrides(&set)? {
                harness::set_dotted(&mut table, &k, &v)?;
            }
            let spec: SyntheticBankSpec = toml::Value::Table(table)
                .try_into()
                .map_err(|e: toml::de::Error| SgvaError::Config(e.message().to_string()))?;
            let bank = embank::generate_synthetic_bank(&spec)?;
            embank::save_bank(&bank, &out)?;
            print_json(&bank_summary(&out, &bank));
        }
        BankCommand::Inspect { bank } => {
            let b = embank::load_bank(&bank)?;
            print_json(&bank_summary(&bank, &b));
        }
        BankCommand::Validate { bank } => {
            let b = embank::load_bank(&bank)?;
            print_json(&json!({"valid": true, "path": bank, "frozen_digest": b.frozen_digest()}));
        }
    }
    Ok(())
}

fn write_run(out_dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.json"), out.report.to_json())?;
    fs::write(
        out_dir.join("timing.json"),
        serde_json::to_string_pretty(&out.timing).expect("timing serializes"),
    )?;
    if let Some(ck) = &out.checkpoint {
        ck.save(&out_dir.join("checkpoint.sgvp"))?;
    }
    if !out.predictions.is_empty() {
        let mut w = std::io::BufWriter::new(fs::File::create(out_dir.join("predictions.jsonl"))?);
        for r in &out.predictions {
            serde_json::to_writer(&mut w, r).expect("record serializes");
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let e = &out.report.evaluation;
    print_json(&json!({
        "out": out_dir,
        "content_hash": out.report.content_hash,
        "episodes": e.episodes,
        "mode": e.mode,
        "accuracy": e.accuracy(),
        "mean": e.mean,
        "ci95": e.ci95,
    }));
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let (cfg, bank) = load_config_and_bank(&args.config)?;
    fs::create_dir_all(&args.out)?;
    let opts = TrainOptions {
        resume: args.resume.as_deref().map(Checkpoint::load).transpose()?,
        failure_dump: Some(args.out.join("failure.sgvp")),
        keep_predictions: args.predictions,
        stop_after: args.stop_after,
    };
    let out = harness::run_train(&cfg, &bank, &opts)?;
    write_run(&args.out, &out)
}

fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, bank) = load_config_and_bank(&args.config)?;
    let ck = args.checkpoint.as_deref().map(Checkpoint::load).transpose()?;
    let out = harness::run_eval(ck.as_ref(), &cfg, &bank, args.predictions)?;
    write_run(&args.out, &out)
}

fn ablate(args: AblateArgs) -> Result<()> {
    let (cfg, bank) = load_config_and_bank(&args.config)?;
    let names: Vec<&str> = args.preset.iter().map(String::as_str).collect();
    let mut tables = Vec::new();
    for (table, files) in harness::run_presets(&cfg, &names, &bank, &args.out)? {
        tables.push(json!({"name": table.name, "rows": table.rows.len(), "files": files}));
    }
    if !args.axis.is_empty() || names.is_empty() {
        let axes = args.axis.iter().map(|a| AblationAxis::parse(a)).collect::<Result<Vec<_>>>()?;
        let name = if axes.is_empty() { "base" } else { "sweep" };
        let table = harness::run_ablation_suite(name, &cfg, &axes, &bank)?;
        let files = table.write_artifacts(&args.out)?;
        tables.push(json!({"name": name, "rows": table.rows.len(), "files": files}));
    }
    print_json(&json!({"out": args.out, "tables": tables}));
    Ok(())
}

fn selectors(name: &str) -> Result<Vec<LossSelector>> {
    Ok(match name {
        "all" => LossSelector::ALL.to_vec(),
        "i2t" => vec![LossSelector::I2t],
        "i2i" => vec![LossSelector::I2i],
        "kd_implicit" => vec![LossSelector::KdImplicit],
        "kd_direct" => vec![LossSelector::KdDirect],
        "total" => vec![LossSelector::Total],
        other => return Err(SgvaError::Config(format!("unknown loss selector `{other}`"))),
    })
}

fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let (cfg, bank) = load_config_and_bank(&args.config)?;
    let params = harness::init_params(&cfg, &bank)?;
    let mode = if bank.has_split() {
        SamplingMode::MetaTrainBase
    } else {
        SamplingMode::MetaTestNovel
    };
    let sampling = SamplingConfig {
        mode,
        n_way: cfg.sampling.n_way,
        k_shot: cfg.sampling.k_shot,
        queries_per_class: cfg.sampling.queries_per_class,
        episode_count: args.episodes.max(1) as usize,
        seed: cfg.seed,
    };
    let mut reports = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..args.episodes.max(1) {
        let ep = episodes::nth_episode(&bank, &sampling, Purpose::Audit, i)?;
        for sel in selectors(&args.loss)? {
            let r = optim::finite_diff_audit(&params, &bank, &ep, sel, cfg.loss.tau2, args.epsilon, args.coords, cfg.seed + i)?;
            worst = worst.max(r.max_rel_error());
            reports.push(json!({"episode": i, "report": r}));
        }
    }
    let pass = worst < args.tolerance;
    print_json(&json!({"max_rel_error": worst, "tolerance": args.tolerance, "pass": pass, "audits": reports}));
    if pass {
        Ok(())
    } else {
        Err(SgvaError::Numerics(format!(
            "gradient audit failed: max relative error {worst:e} >= {:e}",
            args.tolerance
        )))
    }
}

fn error_json(e: &SgvaError) -> Value {
    let mut v = json!({"error": e.kind(), "message": e.to_string()});
    if let SgvaError::Validation { field, .. } = e {
        v["field"] = json!(field);
    }
    v
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let v = json!({"error": "UsageError", "message": e.render().to_string().trim()});
            eprintln!("{v}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Bank(c) => bank_command(c),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
