//! Command-line surface: train, eval, radiomap, gradcheck and baseline
//! subcommands over JSON run configurations and binary checkpoints.
//!
//! Exit codes: 0 success, 1 usage/configuration problems, 2 numeric
//! failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::{Resolved, RunConfig};
use crate::error::Error;
use crate::eval::{
    self, emit_radio_maps, evaluate_rmse, train_baseline, BaselineKind, EvalReport, LabeledRssMap,
};
use crate::geometry::Position;
use crate::training::{train_loop, TrainSetup};

#[derive(Parser)]
#[command(
    name = "vqc",
    about = "Active-sensing localization with learned beamforming codebooks",
    version
)]
struct Cli {
    /// Worker threads for episode simulation (default: VQC_THREADS or
    /// the number of CPUs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Force single-threaded execution for bit reproducibility.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config; writes checkpoints and a
    /// metrics stream into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: RMSE and an optional per-T sweep.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluate under a different config (shapes must agree).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        n_eval: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated pilot lengths, e.g. "1,3,6".
        #[arg(long)]
        sweep_t: Option<String>,
        /// Write the report as JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump both codebooks as CSV next to the report.
        #[arg(long)]
        dump_codebooks: bool,
    },
    /// Render per-frame radio maps for one UE position.
    Radiomap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// UE position "x,y,z" in meters.
        #[arg(long)]
        ue: String,
        #[arg(long, default_value = "radiomaps")]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suite on the built-in tiny
    /// configuration.
    Gradcheck,
    /// Train and evaluate a comparison scheme.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineArg,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BaselineArg {
    /// Codewords drawn uniformly at random each frame.
    Random,
    /// Fixed learned sensing vectors (non-adaptive).
    Fixed,
    /// Quantization bypassed entirely.
    CodebookFree,
}

fn thread_count(cli_threads: Option<usize>, deterministic: bool) -> usize {
    if deterministic {
        return 1;
    }
    if let Some(t) = cli_threads {
        return t.max(1);
    }
    if let Ok(v) = std::env::var("VQC_THREADS") {
        if let Ok(t) = v.parse::<usize>() {
            return t.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version through the same error path
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { 0 } else { 1 };
        }
    };
    let threads = thread_count(cli.threads, cli.deterministic);
    match dispatch(cli.cmd, threads) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Cmd, threads: usize) -> Result<(), Error> {
    match cmd {
        Cmd::Train { config, out } => cmd_train(&config, out.as_deref(), threads),
        Cmd::Eval {
            checkpoint,
            config,
            n_eval,
            seed,
            sweep_t,
            out,
            dump_codebooks,
        } => cmd_eval(
            &checkpoint,
            config.as_deref(),
            n_eval,
            seed,
            sweep_t.as_deref(),
            out.as_deref(),
            dump_codebooks,
            threads,
        ),
        Cmd::Radiomap { checkpoint, ue, out } => cmd_radiomap(&checkpoint, &ue, &out),
        Cmd::Gradcheck => cmd_gradcheck(),
        Cmd::Baseline { kind, config, out } => cmd_baseline(kind, &config, out.as_deref(), threads),
    }
}

pub fn cmd_train(config_path: &Path, out: Option<&Path>, threads: usize) -> Result<(), Error> {
    let run_config = RunConfig::from_path(config_path)?;
    let resolved = run_config.resolve()?;
    let out_dir = out
        .map(|p| p.to_path_buf())
        .unwrap_or_else(|| PathBuf::from(&resolved.output_dir));
    std::fs::create_dir_all(&out_dir)?;

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let setup = TrainSetup {
        layout: &resolved.layout,
        model_cfg: &resolved.model,
        train_cfg: &resolved.train,
        pilot: resolved.pilot,
    };
    let ckpt_dir = out_dir.clone();
    let cfg_for_ckpt = run_config.clone();
    let outcome = train_loop(
        &setup,
        threads,
        Some(&mut metrics_file),
        move |epoch, params, _val| {
            let path = ckpt_dir.join(format!("checkpoint_epoch{epoch}.vqc"));
            checkpoint::save(&path, &cfg_for_ckpt, params, cfg_for_ckpt.train.seed, epoch)
        },
    )?;
    let final_path = out_dir.join("checkpoint_final.vqc");
    checkpoint::save(
        &final_path,
        &run_config,
        &outcome.params,
        run_config.train.seed,
        outcome.steps,
    )?;
    println!(
        "trained {} steps; final validation RMSE {:.4} m; checkpoint {}",
        outcome.steps,
        outcome.final_val_rmse,
        final_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint_path: &Path,
    config_override: Option<&Path>,
    n_eval: Option<usize>,
    seed: Option<u64>,
    sweep_t: Option<&str>,
    out: Option<&Path>,
    dump_codebooks: bool,
    threads: usize,
) -> Result<(), Error> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let run_config = match config_override {
        Some(path) => {
            let cfg = RunConfig::from_path(path)?;
            // The checkpoint's tensors must fit the overriding config.
            let a = cfg.resolve()?;
            let b = ckpt.manifest.config.resolve()?;
            if a.model.n != b.model.n
                || a.model.m != b.model.m
                || a.model.k != b.model.k
                || a.model.v != b.model.v
                || a.model.b != b.model.b
                || a.model.hidden != b.model.hidden
            {
                return Err(Error::Checkpoint(format!(
                    "checkpoint dimensions (n={}, m={}, k={}, v={}, b={}, hidden={}) do not \
                     match the supplied config (n={}, m={}, k={}, v={}, b={}, hidden={})",
                    b.model.n,
                    b.model.m,
                    b.model.k,
                    b.model.v,
                    b.model.b,
                    b.model.hidden,
                    a.model.n,
                    a.model.m,
                    a.model.k,
                    a.model.v,
                    a.model.b,
                    a.model.hidden
                )));
            }
            cfg
        }
        None => ckpt.manifest.config.clone(),
    };
    let resolved = run_config.resolve()?;
    let n = n_eval.unwrap_or(resolved.eval.n_eval);
    let s = seed.unwrap_or(resolved.eval.seed);

    let rmse = evaluate_rmse(&ckpt.params, &resolved, n, s, threads > 1)?;
    let sweep: Vec<usize> = match sweep_t {
        Some(text) => text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad sweep entry {p:?}")))
            })
            .collect::<Result<_, _>>()?,
        None => resolved.eval.sweep_t.clone(),
    };
    let mut per_t = Vec::new();
    for t in sweep {
        let mut r = resolved.clone();
        r.model.t = t;
        per_t.push((t, evaluate_rmse(&ckpt.params, &r, n, s, threads > 1)?));
    }

    let report = EvalReport {
        rmse,
        per_t,
        episodes: n,
        seed: s,
        config: run_config,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    if dump_codebooks {
        let base = out
            .and_then(|p| p.parent().map(|d| d.to_path_buf()))
            .unwrap_or_else(|| PathBuf::from("."));
        let mut f = std::fs::File::create(base.join("codebook_ris.csv"))?;
        ckpt.params.ris_codebook.write_csv(&mut f)?;
        let mut f = std::fs::File::create(base.join("codebook_bs.csv"))?;
        ckpt.params.bs_codebook.write_csv(&mut f)?;
    }
    Ok(())
}

fn parse_ue(text: &str) -> Result<Position, Error> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "UE position must be \"x,y,z\", got {text:?}"
        )));
    }
    let coords: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad coordinate {p:?}")))
        })
        .collect::<Result<_, _>>()?;
    Ok(Position::new(coords[0], coords[1], coords[2]))
}

/// One map per CSV file: a header row naming the grid, a values row,
/// then the RSS matrix (rows = x cells, columns = y cells).
pub fn write_map_csv(map: &LabeledRssMap, out: &mut dyn Write) -> std::io::Result<()> {
    let nx = map.map.values.nrows();
    let ny = map.map.values.ncols();
    writeln!(out, "x_min,x_max,y_min,y_max,resolution_m,frame,ris_subset")?;
    writeln!(
        out,
        "{},{},{},{},{},{},{}",
        map.map.x_min,
        map.map.x_min + nx as f64 * map.map.resolution,
        map.map.y_min,
        map.map.y_min + ny as f64 * map.map.resolution,
        map.map.resolution,
        map.frame,
        map.subset
    )?;
    for i in 0..nx {
        let row: Vec<String> = (0..ny).map(|j| format!("{}", map.map.values[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn cmd_radiomap(checkpoint_path: &Path, ue_text: &str, out_dir: &Path) -> Result<(), Error> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let resolved = ckpt.manifest.config.resolve()?;
    let ue = parse_ue(ue_text)?;
    if !resolved.layout.service_area.contains(&ue) {
        eprintln!(
            "warning: UE ({}, {}, {}) lies outside the service area",
            ue.x, ue.y, ue.z
        );
    }
    let maps = emit_radio_maps(&ckpt.params, &resolved, &ue)?;
    std::fs::create_dir_all(out_dir)?;
    for map in &maps {
        let path = out_dir.join(format!("radiomap_f{}_{}.csv", map.frame, map.subset));
        let mut file = std::fs::File::create(&path)?;
        write_map_csv(map, &mut file)?;
    }
    println!("wrote {} radio maps to {}", maps.len(), out_dir.display());
    Ok(())
}

pub fn cmd_gradcheck() -> Result<(), Error> {
    let report = crate::gradcheck::run_gradcheck()?;
    println!(
        "per-op and episode coordinates checked: {} (skipped {} selection flips)",
        report.episode_coords_checked, report.episode_coords_skipped
    );
    println!("episode max relative error: {:.3e}", report.episode_max_rel);
    println!(
        "gradient isolation: {}",
        if report.isolation_ok { "ok" } else { "FAILED" }
    );
    println!(
        "mutation self-test: {}",
        if report.mutation_detected {
            "detected"
        } else {
            "NOT DETECTED"
        }
    );
    for f in &report.op_failures {
        println!("failure: {f}");
    }
    if report.passed() {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        Err(Error::Numeric("gradient check failed".into()))
    }
}

pub fn cmd_baseline(
    kind: BaselineArg,
    config_path: &Path,
    out: Option<&Path>,
    threads: usize,
) -> Result<(), Error> {
    let run_config = RunConfig::from_path(config_path)?;
    let resolved: Resolved = run_config.resolve()?;
    let (label, rmse) = match kind {
        BaselineArg::Random => (
            "random-sensing",
            train_baseline(BaselineKind::RandomSensing, &resolved, threads)?.rmse,
        ),
        BaselineArg::Fixed => (
            "learned-nonadaptive",
            train_baseline(BaselineKind::LearnedNonadaptive, &resolved, threads)?.rmse,
        ),
        BaselineArg::CodebookFree => {
            let mut cfg = run_config.clone();
            cfg.train.codebook_free = true;
            let r = cfg.resolve()?;
            let setup = TrainSetup {
                layout: &r.layout,
                model_cfg: &r.model,
                train_cfg: &r.train,
                pilot: r.pilot,
            };
            let outcome = train_loop(&setup, threads, None, |_, _, _| Ok(()))?;
            let rmse = evaluate_rmse(&outcome.params, &r, r.eval.n_eval, r.eval.seed, threads > 1)?;
            ("codebook-free", rmse)
        }
    };
    let report = EvalReport {
        rmse,
        per_t: Vec::new(),
        episodes: resolved.eval.n_eval,
        seed: resolved.eval.seed,
        config: run_config,
    };
    let json = serde_json::to_string_pretty(&report)?;
    println!("baseline {label}: RMSE {rmse:.4} m");
    println!("{json}");
    if let Some(path) = out {
        std::fs::write(path, &json)?;
    }
    let _ = eval::centroid_rmse(&resolved.layout);
    Ok(())
}
