//! `thattn`: verification suites, cost tables, toy training and projection
//! export.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or config error,
//! 3 runtime abort.

pub mod export;
pub mod oracle;
pub mod overrides;
pub mod verify;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use thattn_core::attention::{AttentionDims, GeneratorSet, Variant};
use thattn_core::cost::{emit_cost_table, presets, CostQuery};
use thattn_core::lm::{load_checkpoint, save_checkpoint, train, Corpus, ExperimentConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "thattn", version, about = "Talking-heads attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the property suites and report the worst error of each property.
    Verify {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Fault injection for testing the gradient suite.
        #[arg(long, hide = true, env = "THATTN_CORRUPT_PL_ADJOINT")]
        corrupt_pl_adjoint: Option<f64>,
    },
    /// Emit a parameter / multiply table.
    Cost(CostArgs),
    /// Train the toy masked language model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for config.json, log.csv and checkpoint.txt.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Dotted-path override, e.g. `--set train.steps=10`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Export a layer's head projections and conditioning diagnostics.
    ExportProj {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct CostArgs {
    /// One of table1, table2, table3, table6, table7.
    #[arg(long, conflicts_with = "variant")]
    preset: Option<String>,
    /// multi-head, talking-heads, logits-only, weights-only, dynamic[:Xl,Ml,Xw,Mw] or gbma.
    #[arg(long, required_unless_present = "preset")]
    variant: Option<Variant>,
    /// Defaults to --h.
    #[arg(long)]
    hk: Option<usize>,
    #[arg(long)]
    h: Option<usize>,
    /// Defaults to --h.
    #[arg(long)]
    hv: Option<usize>,
    #[arg(long)]
    dk: Option<usize>,
    #[arg(long)]
    dv: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    dmodel: Option<usize>,
    /// Generators for the dynamic variant, e.g. `Xl,Mw`.
    #[arg(long)]
    generators: Option<GeneratorSet>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        error: error.into(),
    }
}

fn runtime(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        error: error.into(),
    }
}

/// Parses `args` (program name first), runs the command writing its report
/// to `out`, and returns the exit code. Errors go to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match command {
        Command::Verify {
            filter,
            corrupt_pl_adjoint,
        } => cmd_verify(
            &verify::VerifyOptions {
                filter,
                corrupt_pl_adjoint,
            },
            out,
        ),
        Command::Cost(args) => cmd_cost(&args, out).map(|_| EXIT_OK),
        Command::Train {
            config,
            seed,
            out: dir,
            overrides,
        } => cmd_train(&config, seed, &overrides, &dir, out).map(|_| EXIT_OK),
        Command::ExportProj {
            checkpoint,
            layer,
            out: dir,
        } => cmd_export_proj(&checkpoint, layer, &dir, out).map(|_| EXIT_OK),
    }
}

fn cmd_verify(opts: &verify::VerifyOptions, out: &mut dyn Write) -> Result<i32, Failure> {
    let suites = verify::selected(opts.filter.as_deref());
    if suites.is_empty() {
        return Err(usage(anyhow!(
            "filter {:?} matches no suite; suites are {}",
            opts.filter.as_deref().unwrap_or(""),
            verify::SUITES.join(", ")
        )));
    }
    let checks = verify::run(opts);
    let failed = checks.iter().filter(|c| !c.passed()).count();
    for c in &checks {
        writeln!(out, "{c}").map_err(runtime)?;
    }
    writeln!(
        out,
        "{} of {} checks passed ({})",
        checks.len() - failed,
        checks.len(),
        suites.join(", ")
    )
    .map_err(runtime)?;
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn cost_queries(args: &CostArgs) -> anyhow::Result<Vec<CostQuery>> {
    if let Some(name) = &args.preset {
        return presets::get(name).ok_or_else(|| {
            anyhow!(
                "unknown preset `{name}`; presets are {}",
                presets::NAMES.join(", ")
            )
        });
    }
    let mut variant = args
        .variant
        .expect("clap requires --variant without --preset");
    if let Some(g) = args.generators {
        match variant {
            Variant::Dynamic(_) => variant = Variant::Dynamic(g),
            _ => anyhow::bail!("--generators only applies to the dynamic variant"),
        }
    }
    let need = |v: Option<usize>, flag: &str| {
        v.ok_or_else(|| anyhow!("--{flag} is required with --variant"))
    };
    let h = need(args.h, "h")?;
    let dims = AttentionDims::with_width(
        need(args.n, "n")?,
        need(args.m, "m")?,
        need(args.dmodel, "dmodel")?,
        need(args.dk, "dk")?,
        need(args.dv, "dv")?,
        args.hk.unwrap_or(h),
        h,
        args.hv.unwrap_or(h),
    );
    dims.validate(variant)?;
    Ok(vec![CostQuery::new(variant, dims)])
}

fn cmd_cost(args: &CostArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let queries = cost_queries(args).map_err(usage)?;
    let mut table = Vec::new();
    emit_cost_table(&queries, &mut table).map_err(runtime)?;
    match &args.out {
        Some(path) => std::fs::write(path, &table)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(runtime),
        None => out.write_all(&table).map_err(runtime),
    }
}

/// Reads the config, applies `--set` and `--seed` (overrides beat the file),
/// and resolves a relative corpus path against the config's directory.
pub fn resolve_config(
    path: &Path,
    seed: Option<u64>,
    overrides: &[String],
) -> anyhow::Result<ExperimentConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for o in overrides {
        overrides::apply(&mut doc, o)?;
    }
    if let Some(seed) = seed {
        overrides::apply(&mut doc, &format!("train.seed={seed}"))?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(doc)
        .with_context(|| format!("invalid config {}", path.display()))?;
    if let Some(p) = &cfg.corpus.path {
        if p.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.corpus.path = Some(base.join(p));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    config: &Path,
    seed: Option<u64>,
    overrides: &[String],
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let cfg = resolve_config(config, seed, overrides).map_err(usage)?;
    let resolved = serde_json::to_string_pretty(&cfg).expect("config serializes");
    writeln!(out, "{resolved}").map_err(runtime)?;
    let corpus = Corpus::open(&cfg.corpus).map_err(usage)?;

    let mut model = cfg.init_model().map_err(usage)?;
    let started = std::time::Instant::now();
    let log = train(&mut model, &corpus, &cfg.train).map_err(runtime)?;
    let elapsed = started.elapsed();

    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(runtime)?;
    let write = |name: &str, body: &str| {
        let p = dir.join(name);
        std::fs::write(&p, body).with_context(|| format!("writing {}", p.display()))
    };
    write("config.json", &format!("{resolved}\n")).map_err(runtime)?;
    write("log.csv", &log.to_csv()).map_err(runtime)?;
    save_checkpoint(&model, &dir.join("checkpoint.txt")).map_err(runtime)?;

    if let (Some(first), Some(last)) = (log.initial_loss(), log.final_loss()) {
        writeln!(
            out,
            "loss {first:.6} -> {last:.6} over {} steps",
            log.steps.len()
        )
        .map_err(runtime)?;
    }
    writeln!(out, "final log-perplexity {:.6}", log.final_log_perplexity).map_err(runtime)?;
    writeln!(
        out,
        "wrote {} in {:.2}s",
        dir.display(),
        elapsed.as_secs_f64()
    )
    .map_err(runtime)?;
    Ok(())
}

fn cmd_export_proj(
    checkpoint: &Path,
    layer: usize,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), Failure> {
    let model = load_checkpoint(checkpoint).map_err(usage)?;
    export::projections(&model, layer).map_err(usage)?;
    let diags = export::export_projections(&model, layer, dir).map_err(runtime)?;
    out.write_all(export::diagnostics_csv(&diags).as_bytes())
        .map_err(runtime)?;
    writeln!(out, "wrote {}", dir.display()).map_err(runtime)?;
    Ok(())
}
