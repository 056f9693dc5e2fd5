use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stmoe::ablation::{measure_inference, run_ablation, AblationSpec};
use stmoe::adjacency::format_edge_list;
use stmoe::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stmoe::config::{load_config, render_config};
use stmoe::data::{load_dataset, load_readings, write_readings};
use stmoe::expert::ExpertSet;
use stmoe::gating::FusionMode;
use stmoe::metrics::{metrics, persistence_baseline};
use stmoe::synthetic::{generate_synthetic, Regime, SyntheticParams};
use stmoe::train::{build_model, evaluate, predict_windows, train, PreparedData};
use stmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "stmoe", version, about = "Mixture-of-experts traffic forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic ring-road dataset (readings, edges, regime labels).
    Generate(GenerateArgs),
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset, or score a predictions file.
    Eval(EvalArgs),
    /// Train and score a grid of expert subsets.
    Ablate(AblateArgs),
    /// Show a checkpoint's configuration and routing behaviour.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    nodes: usize,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    incident_rate: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    coupling: Option<f64>,
}

#[derive(Args)]
struct RunConfig {
    /// Flat TOML file with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set lr=0.01 --set experts=Id+Ad`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    readings: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[command(flatten)]
    run: RunConfig,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Per-epoch records as JSON lines.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, requires = "readings", conflicts_with_all = ["predictions", "truth"])]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    readings: Option<PathBuf>,
    #[arg(long)]
    fusion: Option<FusionMode>,
    /// Which split to score: train, val, test or all.
    #[arg(long, default_value = "test")]
    split: String,
    /// Forecast readings file, scored against --truth.
    #[arg(long, requires = "truth")]
    predictions: Option<PathBuf>,
    #[arg(long, requires = "predictions")]
    truth: Option<PathBuf>,
    /// Also report the persistence baseline.
    #[arg(long)]
    baseline: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    readings: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[command(flatten)]
    run: RunConfig,
    /// Comma-separated subsets such as `Id,Ad+SS`; defaults to the 14-row grid.
    #[arg(long)]
    subsets: Option<String>,
    /// Parallel training cells; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Write the machine-readable table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Summarise routing weights over this dataset's test windows.
    #[arg(long)]
    readings: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    windows: usize,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display(), e))
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut p = SyntheticParams { nodes: a.nodes, steps: a.steps, seed: a.seed, ..Default::default() };
    if let Some(v) = a.incident_rate {
        p.incident_rate = v;
    }
    if let Some(v) = a.noise_std {
        p.noise_std = v;
    }
    if let Some(v) = a.coupling {
        p.coupling = v;
    }
    let d = generate_synthetic(&p)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(a.out_dir.display(), e))?;
    write_readings(&a.out_dir.join("readings.csv"), &d.series)?;
    write_file(&a.out_dir.join("edges.csv"), &format_edge_list(&d.graph))?;
    let mut labels = String::from("timestamp,regime\n");
    for (t, r) in d.series.timestamps().iter().zip(&d.regimes) {
        labels.push_str(&format!("{t},{}\n", if *r == Regime::Incident { "incident" } else { "clear" }));
    }
    write_file(&a.out_dir.join("regimes.csv"), &labels)?;
    let incidents = d.regimes.iter().filter(|r| **r == Regime::Incident).count();
    println!(
        "wrote {} steps x {} nodes to {} ({} incident steps)",
        d.series.steps(),
        d.series.nodes(),
        a.out_dir.display(),
        incidents
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = load_config(a.run.config.as_deref(), &a.run.overrides)?;
    let (series, graph) = load_dataset(&a.readings, &a.edges)?;
    let data = PreparedData::new(&series, cfg.history, cfg.horizon)?;
    let model = build_model(&cfg, &data, Some(&graph))?;
    eprintln!("training {} ({} parameters)", cfg.experts, model.params().num_scalars());
    let mut log = match &a.history {
        Some(p) => Some(fs::File::create(p).map_err(|e| Error::io(p.display(), e))?),
        None => None,
    };
    let mut log_err = None;
    let out = train(model, &data, &cfg, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val mae {:.4}  rmse {:.4}  mape {:.2}%  {:.1}s",
            r.epoch, r.train_loss, r.val_mae, r.val_rmse, r.val_mape, r.seconds
        );
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(r).expect("record serialises");
            if let Err(e) = writeln!(f, "{line}") {
                log_err.get_or_insert(e);
            }
        }
    })?;
    if let (Some(e), Some(p)) = (log_err, &a.history) {
        return Err(Error::io(p.display(), e));
    }
    let test = evaluate(&out.model, &data, &data.test_starts(), cfg.fusion, cfg.batch_size)?;
    let ckp = Checkpoint { model: out.model, stats: data.stats.clone(), train: Some(cfg) };
    save_checkpoint(&ckp, &a.checkpoint)?;
    println!(
        "best epoch {}; test mae {:.4} rmse {:.4} mape {:.2}%; saved {}",
        out.best_epoch,
        test.mae,
        test.rmse,
        test.mape,
        a.checkpoint.display()
    );
    Ok(())
}

fn split_starts(data: &PreparedData, split: &str) -> Result<Vec<usize>> {
    Ok(match split {
        "train" => data.train_starts(1),
        "val" => data.val_starts(),
        "test" => data.test_starts(),
        "all" => {
            let mut v = data.train_starts(1);
            v.extend(data.val_starts());
            v.extend(data.test_starts());
            v
        }
        other => return Err(Error::Config(format!("unknown split {other:?} (train, val, test or all)"))),
    })
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serialises"));
}

fn run_eval(a: EvalArgs) -> Result<()> {
    if let (Some(p), Some(t)) = (&a.predictions, &a.truth) {
        let pred = load_readings(p)?;
        let truth = load_readings(t)?;
        print_json(&metrics(pred.values(), truth.values())?);
        return Ok(());
    }
    let (Some(ckp_path), Some(readings)) = (&a.checkpoint, &a.readings) else {
        return Err(Error::Config("eval needs --checkpoint and --readings, or --predictions and --truth".into()));
    };
    let ckp = load_checkpoint(ckp_path)?;
    let series = load_readings(readings)?;
    let c = ckp.model.config();
    if series.nodes() != c.nodes || series.channels() != c.channels {
        return Err(Error::Input(format!(
            "dataset has {} nodes x {} channels, checkpoint expects {} x {}",
            series.nodes(),
            series.channels(),
            c.nodes,
            c.channels
        )));
    }
    let data = PreparedData::with_stats(&series, c.history, c.horizon, ckp.stats.clone())?;
    let starts = split_starts(&data, &a.split)?;
    if starts.is_empty() {
        return Err(Error::Input(format!("split {} has no complete windows", a.split)));
    }
    let fusion = a.fusion.or(ckp.train.as_ref().map(|t| t.fusion)).unwrap_or_default();
    let batch = ckp.train.as_ref().map_or(64, |t| t.batch_size);
    let mut report = evaluate(&ckp.model, &data, &starts, fusion, batch)?;
    report.inference_seconds = Some(measure_inference(&ckp.model, &data, &starts, batch)?);
    if a.baseline {
        let base = persistence_baseline(&data.raw_history(&starts)?, c.horizon)?;
        let pm = metrics(&base, &data.raw_target(&starts)?)?;
        print_json(&serde_json::json!({ "model": report, "persistence": pm }));
    } else {
        print_json(&report);
    }
    Ok(())
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(a.run.config.as_deref(), &a.run.overrides)?;
    let (series, graph) = load_dataset(&a.readings, &a.edges)?;
    let data = PreparedData::new(&series, cfg.history, cfg.horizon)?;
    let mut spec = AblationSpec::new(cfg);
    spec.workers = a.workers;
    if let Some(list) = &a.subsets {
        spec.subsets = list
            .split(',')
            .map(|s| s.trim().parse::<ExpertSet>())
            .collect::<Result<Vec<_>>>()?;
    }
    let table = run_ablation(&spec, &data, Some(&graph), |row| {
        eprintln!("finished {} (best epoch {})", row.experts, row.best_epoch);
    })?;
    print!("{}", table.to_text());
    if let Some(p) = &a.csv {
        write_file(p, &table.to_csv())?;
    }
    Ok(())
}

fn run_inspect(a: InspectArgs) -> Result<()> {
    let ckp = load_checkpoint(&a.checkpoint)?;
    let c = ckp.model.config();
    println!("experts: {}", c.experts.iter().map(|k| k.abbrev()).collect::<Vec<_>>().join("+"));
    println!("parameters: {}", ckp.model.params().num_scalars());
    println!("model: {}", serde_json::to_string(c).expect("config serialises"));
    if let Some(t) = &ckp.train {
        println!("training config:\n{}", render_config(t));
    }
    if let Some(readings) = &a.readings {
        let series = load_readings(readings)?;
        let data = PreparedData::with_stats(&series, c.history, c.horizon, ckp.stats.clone())?;
        let starts: Vec<usize> = data.test_starts().into_iter().take(a.windows.max(1)).collect();
        if starts.is_empty() {
            return Err(Error::Input("no complete test windows to inspect".into()));
        }
        let (_, alpha) = predict_windows(&ckp.model, &data, &starts, FusionMode::Weighted, 64)?;
        let m = c.experts.len();
        let mut mean = vec![0.0; m];
        let mut wins = vec![0usize; m];
        for row in alpha.data().chunks(m) {
            for (s, v) in mean.iter_mut().zip(row) {
                *s += v / starts.len() as f64;
            }
            wins[stmoe::gating::argmax(row)] += 1;
        }
        println!("routing over {} test windows:", starts.len());
        for (i, k) in c.experts.iter().enumerate() {
            println!("  {:<3} mean weight {:.4}  top choice {:>5.1}%", k.abbrev(), mean[i], 100.0 * wins[i] as f64 / starts.len() as f64);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Inspect(a) => run_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
