use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use aeml_core::adjoint::FwiProblem;
use aeml_core::bench::{compare, heatmap_svg, line_plot_svg, write_csv, RunReport, SweepWeights};
use aeml_core::config::{Backend, Problem, RunConfig};
use aeml_core::datagen::{generate, load_training_set, shard_paths};
use aeml_core::dias::{solve_dias, DiasResult};
use aeml_core::linalg::rel_l2;
use aeml_core::mlp::{train, MlpCodec};
use aeml_core::newton::{load_field, save_field, solve_map, write_history_csv, NewtonResult};
use aeml_core::store::StoreFactory;
use aeml_core::wave::forward_solve;
use aeml_core::{selftest, Error};

#[derive(Parser)]
#[command(name = "aeml", version, about = "Full-waveform inversion with swappable forward-trajectory storage")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML). The built-in desk setup is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory name under the output root.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate codec training data from prior draws.
    SynthData(Common),
    /// Train the autoencoder on generated data.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory of dataset shards.
        #[arg(long)]
        data: PathBuf,
    },
    /// Solve for the MAP point with one storage backend.
    Invert {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: String,
        /// Quantizer tolerance.
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        codec_file: Option<PathBuf>,
    },
    /// MAP point followed by the active-subspace refinement.
    Dias {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        store: Option<String>,
        #[arg(long)]
        codec_file: Option<PathBuf>,
    },
    /// Tabulate and plot finished inversion runs.
    Compare {
        /// Comma-separated run ids or directories.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<String>,
        /// Reference run id; defaults to the first checkpoint run.
        #[arg(long)]
        reference: Option<String>,
        /// Output directory; defaults to `<root>/compare`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in numerical checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Serialize, Deserialize)]
struct RunRecord {
    run_id: String,
    command: String,
    seed: u64,
    config: RunConfig,
    report: RunReport,
    converged: bool,
    stagnated: bool,
    rel_err_truth_pct: f64,
}

fn output_root() -> PathBuf {
    std::env::var_os("AEML_RUN_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

fn load_config(common: &Common) -> aeml_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    cfg.data.seed = common.seed;
    cfg.training.seed = common.seed;
    cfg.datagen.seed = common.seed;
    cfg.dias.seed = common.seed;
    Ok(cfg)
}

fn run_dir(common: &Common, default_id: String) -> aeml_core::Result<(String, PathBuf)> {
    let id = common.run_id.clone().unwrap_or(default_id);
    let dir = output_root().join(&id);
    std::fs::create_dir_all(&dir)?;
    log::info!("run {id} writes to {}", dir.display());
    Ok((id, dir))
}

fn write_json(path: &Path, value: &impl Serialize) -> aeml_core::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn load_codec(cfg: &RunConfig, flag: Option<&PathBuf>) -> aeml_core::Result<Option<Arc<MlpCodec>>> {
    match flag.or(cfg.store.codec_file.as_ref()) {
        Some(p) => Ok(Some(Arc::new(MlpCodec::load(p)?))),
        None => Ok(None),
    }
}

fn synth_data(common: &Common) -> aeml_core::Result<()> {
    let cfg = load_config(common)?;
    let problem = cfg.build()?;
    let (_, dir) = run_dir(common, format!("data-s{}", common.seed))?;
    let t = Instant::now();
    let shards = generate(&problem.prior, &problem.forward, cfg.store.scheme()?, &cfg.datagen, &dir)?;
    let records: usize = shards.iter().map(|s| s.records).sum();
    let skipped = shards.iter().filter(|s| s.skipped).count();
    println!("wrote {records} records in {} shards to {} ({skipped} draws skipped, {:.1} s)", shards.len() - skipped, dir.display(), t.elapsed().as_secs_f64());
    Ok(())
}

fn train_cmd(common: &Common, data: &Path) -> aeml_core::Result<()> {
    let cfg = load_config(common)?;
    let grid = cfg.build_grid()?;
    let arch = cfg.architecture(&grid)?;
    let set = load_training_set(&shard_paths(data)?)?;
    let (_, dir) = run_dir(common, format!("codec-s{}", common.seed))?;
    let t = Instant::now();
    let (codec, report) = train(&set, arch, &cfg.training)?;
    codec.save(&dir.join("codec.aemw"))?;
    let mut log = String::from("epoch,finetune,lr,train_loss,val_loss\n");
    for e in &report.epochs {
        log += &format!("{},{},{:e},{:e},{:e}\n", e.epoch, e.finetune, e.lr, e.train_loss, e.val_loss);
    }
    std::fs::write(dir.join("training.csv"), log)?;
    let losses: Vec<f64> = report.epochs.iter().map(|e| e.val_loss).collect();
    std::fs::write(dir.join("training.svg"), line_plot_svg("validation loss", &[("val".into(), losses)], true))?;
    let median = report.median_validation_error().unwrap_or(f64::NAN);
    println!(
        "trained on {} records ({} held out) in {:.1} s; median validation relative error {:.2}%; codec at {}",
        report.train_records,
        report.validation_records,
        t.elapsed().as_secs_f64(),
        100.0 * median,
        dir.join("codec.aemw").display()
    );
    Ok(())
}

fn persist_run(
    dir: &Path,
    id: &str,
    command: &str,
    seed: u64,
    cfg: &RunConfig,
    problem: &Problem,
    factory: &StoreFactory,
    result: &NewtonResult,
    wall_s: f64,
) -> aeml_core::Result<RunRecord> {
    let mut store = factory.build(problem.grid(), problem.forward.time.num_steps)?;
    forward_solve(&result.u, &problem.forward, store.as_mut())?;
    let report = RunReport::from_result(id, factory.label(), problem.grid().node_count(), result, store.stats(), wall_s);
    let dims = problem.grid().cells().to_vec();
    save_field(&dir.join("u.aefd"), &dims, &result.u)?;
    write_history_csv(BufWriter::new(File::create(dir.join("history.csv"))?), &result.history)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
    let record = RunRecord {
        run_id: id.into(),
        command: command.into(),
        seed,
        config: cfg.clone(),
        report,
        converged: result.converged,
        stagnated: result.stagnated,
        rel_err_truth_pct: 100.0 * rel_l2(&result.u, &problem.truth),
    };
    write_json(&dir.join("run.json"), &record)?;
    if problem.grid().dim() == 2 {
        std::fs::write(dir.join("u.svg"), heatmap_svg(id, problem.grid().shape2(), &result.u)?)?;
    }
    Ok(record)
}

fn invert(common: &Common, store: &str, eta: Option<f64>, codec_file: Option<&PathBuf>) -> aeml_core::Result<()> {
    let mut cfg = load_config(common)?;
    cfg.store.backend = store.parse()?;
    if let Some(eta) = eta {
        cfg.store.eta = eta;
    }
    if let Some(p) = codec_file {
        cfg.store.codec_file = Some(p.clone());
    }
    let codec = if cfg.store.backend == Backend::Ae { load_codec(&cfg, codec_file)? } else { None };
    let factory = cfg.store.factory(codec)?;
    log::info!("store backend {}", factory.label());
    let problem = cfg.build()?;
    let default_id = match cfg.store.backend {
        Backend::Quant => format!("invert-quant-{:e}-s{}", cfg.store.eta, common.seed),
        _ => format!("invert-{store}-s{}", common.seed),
    };
    let (id, dir) = run_dir(common, default_id)?;
    let t = Instant::now();
    let model = FwiProblem { objective: problem.objective.clone(), store: factory.clone() };
    let result = solve_map(&model, &problem.prior, &problem.initial_guess(), &cfg.newton)?;
    let wall = t.elapsed().as_secs_f64();
    let rec = persist_run(&dir, &id, "invert", common.seed, &cfg, &problem, &factory, &result, wall)?;
    println!(
        "{id}: objective {:.6e} after {} iterations, {:.3}% from truth, ratio {:.2}, {:.1} s -> {}",
        result.objective,
        result.history.len(),
        rec.rel_err_truth_pct,
        rec.report.ratio_paper,
        wall,
        dir.display()
    );
    Ok(())
}

fn dias(common: &Common, store: Option<&str>, codec_file: Option<&PathBuf>) -> aeml_core::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(s) = store {
        cfg.store.backend = s.parse()?;
    }
    let codec = if cfg.store.backend == Backend::Ae { load_codec(&cfg, codec_file)? } else { None };
    let factory = cfg.store.factory(codec)?;
    let problem = cfg.build()?;
    let (id, dir) = run_dir(common, format!("dias-{}-s{}", factory.label(), common.seed))?;
    let t = Instant::now();
    let model = FwiProblem { objective: problem.objective.clone(), store: factory.clone() };
    let prior = Arc::new(problem.prior.clone());
    let res: DiasResult =
        solve_dias(&model, prior, &problem.prior, problem.prior.mean(), &problem.initial_guess(), &cfg.newton, &cfg.dias)?;
    let wall = t.elapsed().as_secs_f64();
    let rec = persist_run(&dir, &id, "dias", common.seed, &cfg, &problem, &factory, &res.map, wall)?;
    let dims = problem.grid().cells().to_vec();
    save_field(&dir.join("u_dias.aefd"), &dims, res.u_dias())?;
    res.basis.save(&dir.join("basis.aeas"))?;
    write_history_csv(BufWriter::new(File::create(dir.join("history_dias.csv"))?), &res.dias.history)?;
    let err_dias = 100.0 * rel_l2(res.u_dias(), &problem.truth);
    write_json(
        &dir.join("dias.json"),
        &serde_json::json!({
            "rel_err_truth_pct_map": rec.rel_err_truth_pct,
            "rel_err_truth_pct_dias": err_dias,
            "eigenvalues": res.basis.eigenvalues,
            "samples": res.basis.samples,
            "sampling_counter": res.sampling_counter,
        }),
    )?;
    println!("{id}: relative error vs truth {:.4}% (MAP), {:.4}% (refined), {:.1} s", rec.rel_err_truth_pct, err_dias, wall);
    Ok(())
}

fn resolve_run(name: &str) -> PathBuf {
    let p = PathBuf::from(name);
    if p.join("run.json").exists() {
        p
    } else {
        output_root().join(name)
    }
}

fn compare_cmd(runs: &[String], reference: Option<&str>, out: Option<&PathBuf>) -> aeml_core::Result<()> {
    let mut records = Vec::new();
    let mut fields = Vec::new();
    let mut histories = Vec::new();
    for name in runs {
        let dir = resolve_run(name);
        let text = std::fs::read_to_string(dir.join("run.json"))
            .map_err(|e| Error::Config(format!("cannot read run '{name}': {e}")))?;
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        fields.push(load_field(&dir.join("u.aefd"))?);
        histories.push(read_grad_norms(&dir.join("history.csv"))?);
        records.push(rec);
    }
    let reference = match reference {
        Some(r) => records.iter().position(|x| x.run_id == r).ok_or_else(|| Error::Config(format!("reference run '{r}' not among --runs")))?,
        None => records.iter().position(|x| x.report.backend == "checkpoint").unwrap_or(0),
    };
    let mut reports: Vec<RunReport> = records.iter().map(|r| r.report.clone()).collect();
    let values: Vec<Vec<f64>> = fields.iter().map(|(_, v)| v.clone()).collect();
    compare(&mut reports, &values, reference, &SweepWeights::default())?;
    let out = out.cloned().unwrap_or_else(|| output_root().join("compare"));
    std::fs::create_dir_all(&out)?;
    write_csv(BufWriter::new(File::create(out.join("report.csv"))?), &reports)?;
    write_csv(std::io::stdout().lock(), &reports)?;
    let series: Vec<(String, Vec<f64>)> = records.iter().zip(histories).map(|(r, h)| (r.run_id.clone(), h)).collect();
    std::fs::write(out.join("convergence.svg"), line_plot_svg("gradient norm per Newton iteration", &series, true))?;
    for (rec, (dims, u)) in records.iter().zip(&fields) {
        if dims.len() == 2 {
            std::fs::write(out.join(format!("{}.svg", rec.run_id)), heatmap_svg(&rec.run_id, [dims[0], dims[1]], u)?)?;
            let diff: Vec<f64> = u.iter().zip(&values[reference]).map(|(a, b)| a - b).collect();
            std::fs::write(out.join(format!("{}_diff.svg", rec.run_id)), heatmap_svg(&format!("{} minus reference", rec.run_id), [dims[0], dims[1]], &diff)?)?;
        }
    }
    Ok(())
}

fn read_grad_norms(path: &Path) -> aeml_core::Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = header.iter().position(|h| *h == "grad_norm").ok_or_else(|| Error::Format("history lacks grad_norm".into()))?;
    lines
        .map(|l| l.split(',').nth(col).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format("bad history row".into())))
        .collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Divergence { .. } | Error::Solver(_) | Error::Linalg(_) | Error::InvalidMedium(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SynthData(c) => synth_data(c),
        Command::Train { common, data } => train_cmd(common, data),
        Command::Invert { common, store, eta, codec_file } => invert(common, store, *eta, codec_file.as_ref()),
        Command::Dias { common, store, codec_file } => dias(common, store.as_deref(), codec_file.as_ref()),
        Command::Compare { runs, reference, out } => compare_cmd(runs, reference.as_deref(), out.as_ref()),
        Command::Selftest { seed } => {
            let checks = selftest::run(*seed);
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                Err(Error::Solver("self-check failed".into()))
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
