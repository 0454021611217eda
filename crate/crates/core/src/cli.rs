//! Command-line surface. Exit codes: 0 success, 1 check or run failure,
//! 2 usage error, 3 configuration error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adapters::{apply_adapter, AdapterSpec, Method, ParamReport};
use crate::analysis::{builtin_configs, count_params, estimate_flops, find_config, load_config_overrides, ArchConfig};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig, SEED_ENV};
use crate::model::MambaModel;
use crate::tasks::write_jsonl;
use crate::theory::run_all;
use crate::trainer::{fit, RunMetrics, TaskData};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    #[default]
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "ssm-peft", version, about = "State-space model fine-tuning toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct MethodArgs {
    /// Architecture name from the registry.
    #[arg(long)]
    pub arch: String,
    /// Methods to tabulate; all of them when omitted.
    #[arg(long = "method", value_parser = parse_method)]
    pub methods: Vec<Method>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub virtual_tokens: Option<usize>,
    #[arg(long)]
    pub extra_states: Option<usize>,
    /// JSON file of extra or replacement architecture records.
    #[arg(long)]
    pub configs: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the randomized equivalence and separation checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trainable-parameter table.
    CountParams(MethodArgs),
    /// Multiply-accumulate table.
    Flops {
        #[command(flatten)]
        methods: MethodArgs,
        #[arg(long = "seq", default_value_t = 128)]
        seq_len: usize,
    },
    /// Run an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Aggregate run metrics into a comparison table.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
    },
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub method: String,
    pub trainable: usize,
    pub total: usize,
    pub params_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub arch: String,
    pub rows: Vec<ParamRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopRow {
    pub method: String,
    pub base_macs: u64,
    pub extra_macs: u64,
    pub base_gmacs: f64,
    pub relative_overhead: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopTable {
    pub arch: String,
    pub seq_len: usize,
    pub rows: Vec<FlopRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub runs: usize,
    pub trainable: usize,
    pub params_percent: f64,
    pub mean_best_val_accuracy: f64,
    pub best_val_accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Lookup { .. } => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s
}

fn registry(path: Option<&Path>) -> Result<Vec<ArchConfig>> {
    match path {
        Some(p) => load_config_overrides(&fs::read_to_string(p)?),
        None => Ok(builtin_configs()),
    }
}

fn specs_for(args: &MethodArgs) -> Result<Vec<AdapterSpec>> {
    let methods = if args.methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        args.methods.clone()
    };
    methods
        .into_iter()
        .map(|m| {
            let mut s = AdapterSpec::default_for(m);
            if s.rank_r.is_some() {
                s.rank_r = args.rank.or(s.rank_r);
            }
            if s.virtual_tokens_v.is_some() {
                s.virtual_tokens_v = args.virtual_tokens.or(s.virtual_tokens_v);
            }
            if s.extra_states.is_some() {
                s.extra_states = args.extra_states.or(s.extra_states);
            }
            s.validate()?;
            Ok(s)
        })
        .collect()
}

fn csv<I: IntoIterator<Item = Vec<String>>>(header: &str, rows: I) -> String {
    let mut out = format!("{header}\n");
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

pub fn param_table(arch: &ArchConfig, specs: &[AdapterSpec]) -> Result<ParamTable> {
    let mut rows = specs
        .iter()
        .map(|s| {
            let ParamReport { trainable, total, percent } = count_params(arch, s)?;
            Ok(ParamRow {
                method: s.method.to_string(),
                trainable,
                total,
                params_percent: percent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.params_percent.total_cmp(&b.params_percent));
    Ok(ParamTable {
        arch: arch.name.clone(),
        rows,
    })
}

pub fn flop_table(arch: &ArchConfig, specs: &[AdapterSpec], seq_len: usize) -> Result<FlopTable> {
    let rows = specs
        .iter()
        .map(|s| {
            let f = estimate_flops(arch, s, seq_len)?;
            Ok(FlopRow {
                method: s.method.to_string(),
                base_macs: f.base_macs,
                extra_macs: f.adapter_extra_macs,
                base_gmacs: f.base_macs as f64 / 1e9,
                relative_overhead: f.relative_overhead,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlopTable {
        arch: arch.name.clone(),
        seq_len,
        rows,
    })
}

/// Groups runs by method; rows ordered by params%.
pub fn report_table(runs: &[RunMetrics]) -> ReportTable {
    let mut groups: IndexMap<&str, Vec<&RunMetrics>> = IndexMap::new();
    for r in runs {
        groups.entry(r.method.as_str()).or_default().push(r);
    }
    let mut rows: Vec<ReportRow> = groups
        .into_iter()
        .map(|(method, rs)| {
            let accs: Vec<f64> = rs.iter().map(|r| r.best_val_accuracy).collect();
            ReportRow {
                method: method.to_string(),
                runs: rs.len(),
                trainable: rs[0].trainable,
                params_percent: ParamReport::new(rs[0].trainable, rs[0].total).percent,
                mean_best_val_accuracy: accs.iter().sum::<f64>() / accs.len() as f64,
                best_val_accuracies: accs,
            }
        })
        .collect();
    rows.sort_by(|a, b| a.params_percent.total_cmp(&b.params_percent));
    ReportTable { rows }
}

/// Runs a validated experiment and writes `metrics.json`, `epochs.jsonl`,
/// `val.jsonl` and `model.ckpt` under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunMetrics> {
    let arch = cfg.arch.resolve(&builtin_configs())?;
    let base = match &cfg.init_checkpoint {
        Some(p) => {
            let m = load_checkpoint(p)?.into_model()?;
            if m.arch != arch {
                return Err(Error::Config {
                    path: "/init_checkpoint".into(),
                    message: format!("checkpoint architecture '{}' differs from '{}'", m.arch.name, arch.name),
                });
            }
            m
        }
        None => MambaModel::init(&arch, cfg.train.seed)?,
    };
    let t = &cfg.task;
    if t.spec.vocab > arch.vocab {
        return Err(Error::Config {
            path: "/task/spec/vocab".into(),
            message: format!("task vocabulary {} exceeds model vocabulary {}", t.spec.vocab, arch.vocab),
        });
    }
    let data = TaskData {
        train: t.spec.dataset(t.data_seed, t.train_size)?,
        val: t.spec.dataset(t.data_seed + t.train_size as u64, t.val_size)?,
    };
    let factory = || apply_adapter(&base, &cfg.adapter, cfg.train.seed);
    let (model, metrics) = fit(factory, &cfg.adapter, &data, &cfg.train)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let dir = &cfg.output_dir;
    fs::write(dir.join("metrics.json"), json(&metrics))?;
    let mut lines = Vec::new();
    for e in &metrics.epochs {
        serde_json::to_writer(&mut lines, e)?;
        lines.push(b'\n');
    }
    fs::write(dir.join("epochs.jsonl"), lines)?;
    let mut val = Vec::new();
    write_jsonl(&mut val, &data.val)?;
    fs::write(dir.join("val.jsonl"), val)?;
    save_checkpoint(dir.join("model.ckpt"), &Checkpoint::from_model(&model))?;
    log::info!("trained {} in {:.1}s", metrics.method, metrics.wall_time_secs);
    Ok(metrics)
}

fn execute(cli: Cli, out: &mut dyn Write, env_seed: Option<&str>) -> Result<i32> {
    match cli.command {
        Command::Verify { seed } => {
            let v = run_all(seed)?;
            write!(out, "{}", json(&v))?;
            Ok(if v.passed { EXIT_OK } else { EXIT_FAILED })
        }
        Command::CountParams(args) => {
            let arch = find_config(&registry(args.configs.as_deref())?, &args.arch)?;
            let t = param_table(&arch, &specs_for(&args)?)?;
            let text = match args.format {
                Format::Json => json(&t),
                Format::Csv => csv(
                    "method,trainable,total,params_percent",
                    t.rows.iter().map(|r| {
                        vec![r.method.clone(), r.trainable.to_string(), r.total.to_string(), r.params_percent.to_string()]
                    }),
                ),
            };
            write!(out, "{text}")?;
            Ok(EXIT_OK)
        }
        Command::Flops { methods: args, seq_len } => {
            let arch = find_config(&registry(args.configs.as_deref())?, &args.arch)?;
            let t = flop_table(&arch, &specs_for(&args)?, seq_len)?;
            let text = match args.format {
                Format::Json => json(&t),
                Format::Csv => csv(
                    "method,seq_len,base_macs,extra_macs,base_gmacs,relative_overhead",
                    t.rows.iter().map(|r| {
                        vec![
                            r.method.clone(),
                            seq_len.to_string(),
                            r.base_macs.to_string(),
                            r.extra_macs.to_string(),
                            r.base_gmacs.to_string(),
                            r.relative_overhead.to_string(),
                        ]
                    }),
                ),
            };
            write!(out, "{text}")?;
            Ok(EXIT_OK)
        }
        Command::Train {
            config,
            seed,
            lr,
            epochs,
            output_dir,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_seed_env(env_seed)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            cfg.validate()?;
            let metrics = run_experiment(&cfg)?;
            write!(out, "{}", json(&metrics))?;
            Ok(EXIT_OK)
        }
        Command::Report { metrics, format } => {
            let runs = metrics
                .iter()
                .map(|p| Ok(serde_json::from_str::<RunMetrics>(&fs::read_to_string(p)?)?))
                .collect::<Result<Vec<_>>>()?;
            let t = report_table(&runs);
            let text = match format {
                Format::Json => json(&t),
                Format::Csv => csv(
                    "method,runs,trainable,params_percent,mean_best_val_accuracy",
                    t.rows.iter().map(|r| {
                        vec![
                            r.method.clone(),
                            r.runs.to_string(),
                            r.trainable.to_string(),
                            r.params_percent.to_string(),
                            r.mean_best_val_accuracy.to_string(),
                        ]
                    }),
                ),
            };
            write!(out, "{text}")?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Output goes to `out`, diagnostics to `err`.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let env_seed = std::env::var(SEED_ENV).ok();
    match execute(cli, out, env_seed.as_deref()) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn cli_dispatch() -> i32 {
    run(std::env::args_os(), &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
