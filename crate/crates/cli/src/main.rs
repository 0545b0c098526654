use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use dicl_core::eval::{self, EvalConfig, EvalResult, NullModel};
use dicl_core::experiment::{run_table, ExperimentData, TableReport, MASKED_PIXEL_FRACTION};
use dicl_core::synth::{make_masked_testset, read_annotations, synthesize_dataset, write_dataset, SynthConfig};
use dicl_core::trainer::{
    load_model, manifest_fingerprint, read_metrics, train, MetricRecord, MetricsLog, TrainConfig, TrainState,
    CHECKPOINT_FILE, TABLES,
};

mod plot;

#[derive(Parser)]
#[command(name = "dicl", version, about = "Intra-image contrastive person search on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/checkpoint.safetensors` when present.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        gallery_size: Option<usize>,
        /// Use the 20%-pixel-masked test set.
        #[arg(long)]
        masked: bool,
        /// Also evaluate these gallery sizes (comma separated).
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
        /// Random-embedding trials for the null model.
        #[arg(long, default_value_t = 20)]
        null_trials: usize,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configurations of one ablation table over several seeds.
    Ablate {
        #[arg(long, value_parser = parse_table)]
        table: u32,
        /// Base training config; defaults to the desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Plot a metrics log, an ablation table or a gallery sweep.
    Plot {
        /// `metrics.jsonl`, `table<N>.json` or `gallery_sweep.csv`.
        #[arg(long)]
        metrics: PathBuf,
        /// `.png` draws a chart, `.csv` writes the plotted series.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_table(s: &str) -> std::result::Result<u32, String> {
    let t: u32 = s.parse().map_err(|_| format!("{s:?} is not a table number"))?;
    if TABLES.contains(&t) {
        Ok(t)
    } else {
        Err(format!("table must be one of {TABLES:?}"))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(config: &Path, out: &Path) -> Result<()> {
    let cfg = SynthConfig::load(config)?;
    let ds = synthesize_dataset(&cfg)?;
    let (train, test) = write_dataset(&ds, out)?;
    fs::write(out.join("synth.toml"), cfg.to_toml_string())?;
    println!(
        "wrote {} train and {} test scenes ({} queries) to {} and {}",
        ds.train.samples.len(),
        ds.test.samples.len(),
        ds.test.query_list.len(),
        train.display(),
        test.display()
    );
    Ok(())
}

fn train_cmd(config: &Path, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let mut cfg = TrainConfig::load(config)?;
    cfg.apply_env()?;
    cfg.validate()?;
    let manifest = read_annotations(&data.join("train.json"))?;
    fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics = out.join("metrics.jsonl");
    let mut state = if resume && ckpt.exists() {
        let state = TrainState::load(&ckpt)?;
        if state.config.hash() != cfg.hash() {
            bail!("{} was trained with a different config", ckpt.display());
        }
        if state.data_fingerprint != manifest_fingerprint(&manifest) {
            bail!("{} was trained on different data", ckpt.display());
        }
        info!("resuming at epoch {}", state.epoch);
        state
    } else {
        if metrics.exists() {
            fs::remove_file(&metrics)?;
        }
        TrainState::new(cfg.clone(), &manifest)?
    };
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let mut log = MetricsLog::to_file(&metrics)?;
    train(&mut state, &manifest, &mut log, |st, s| {
        st.save(&ckpt)?;
        println!(
            "epoch {:>3}  l_all {:.4}  l_det {:.4}  l_c {:.4}  clusters {}",
            s.epoch,
            s.mean.l_all,
            s.mean.l_det,
            s.mean.l_c,
            s.clusters.map_or("-".to_string(), |c| c.clusters.to_string())
        );
        Ok(())
    })?;
    state
        .bank
        .dump(&out.join("bank.json"), &out.join("bank_clusters.csv"))?;
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport<'a> {
    checkpoint: String,
    masked: bool,
    result: &'a EvalResult,
    null_model: &'a NullModel,
    null_band: f64,
    above_null: bool,
}

fn queries_csv(result: &EvalResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scene_id", "box_index", "identity", "ap", "top1", "fallback", "num_gt", "num_candidates"])?;
    for q in &result.queries {
        w.write_record([
            q.scene_id.to_string(),
            q.box_index.to_string(),
            q.identity.to_string(),
            format!("{:.6}", q.ap),
            q.top1.to_string(),
            q.fallback.to_string(),
            q.num_gt.to_string(),
            q.num_candidates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn eval_cmd(
    ckpt: &Path,
    data: &Path,
    gallery_size: Option<usize>,
    masked: bool,
    sweep: &[usize],
    null_trials: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (model, info) = load_model(ckpt)?;
    let mut test = read_annotations(&data.join("test.json"))?;
    let ecfg = EvalConfig {
        gallery_size,
        proposals: info.config.proposals.clone(),
        image_size: Some(info.config.image_size),
        ..EvalConfig::default()
    };
    if masked {
        test = make_masked_testset(&test, MASKED_PIXEL_FRACTION, ecfg.seed)?;
    }
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&out)?;
    let prepared = eval::prepare(&model, &test, &ecfg)?;
    let result = eval::evaluate_prepared(&prepared, &ecfg)?;
    let null = eval::null_model(&prepared, &ecfg, null_trials)?;
    let tag = if masked { "eval_masked" } else { "eval" };
    write_json(
        &out.join(format!("{tag}.json")),
        &EvalReport {
            checkpoint: ckpt.display().to_string(),
            masked,
            result: &result,
            null_model: &null,
            null_band: null.band(),
            above_null: result.map > null.band(),
        },
    )?;
    queries_csv(&result, &out.join(format!("{tag}_queries.csv")))?;
    println!(
        "mAP {:.4}  top-1 {:.4}  gallery {}  queries {}  fallback {}",
        result.map,
        result.top1,
        result.gallery_size,
        result.queries.len(),
        result.num_fallback
    );
    println!(
        "null model mAP {:.4} +- {:.4} over {} trials (3-sigma band {:.4})",
        null.mean,
        null.std,
        null.trials,
        null.band()
    );
    if !sweep.is_empty() {
        let results = eval::sweep_prepared(&prepared, sweep, &ecfg)?;
        let path = out.join(format!("{tag}_gallery_sweep.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["gallery_size", "map", "top1"])?;
        for r in &results {
            w.write_record([r.gallery_size.to_string(), format!("{:.6}", r.map), format!("{:.6}", r.top1)])?;
            println!("gallery {:>5}  mAP {:.4}  top-1 {:.4}", r.gallery_size, r.map, r.top1);
        }
        w.flush()?;
    }
    Ok(())
}

fn ablate(table: u32, config: Option<&Path>, data: &Path, out: &Path, seeds: &[u64]) -> Result<()> {
    let base = match config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let train = read_annotations(&data.join("train.json"))?;
    let test = read_annotations(&data.join("test.json"))?;
    let ecfg = EvalConfig {
        proposals: base.proposals.clone(),
        ..EvalConfig::default()
    };
    let exp = ExperimentData::new(&train, &test, &ecfg)?;
    let report = run_table(&base, table, seeds, &exp, &ecfg, out)?;
    print!("{report}");
    println!("report: {}", out.join(format!("table{table}.json")).display());
    Ok(())
}

fn plot_cmd(input: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let ext = out.extension().and_then(|e| e.to_str()).unwrap_or("");
    if !matches!(ext, "png" | "csv") {
        bail!("--out must end in .png or .csv");
    }
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    let chart = if let Ok(report) = serde_json::from_str::<TableReport>(&text) {
        plot::Chart::Table(report)
    } else if text.starts_with("gallery_size") {
        plot::Chart::Sweep(plot::read_sweep(input)?)
    } else {
        let records = read_metrics(input)?;
        if !records.iter().any(|r| matches!(r, MetricRecord::Step(_))) {
            bail!("{} has no step records", input.display());
        }
        plot::Chart::Losses(records)
    };
    if ext == "csv" {
        fs::write(out, chart.to_csv()?)?;
    } else {
        chart.draw_png(out)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth { config, out } => synth(&config, &out),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => train_cmd(&config, &data, &out, resume),
        Command::Eval {
            ckpt,
            data,
            gallery_size,
            masked,
            sweep,
            null_trials,
            out,
        } => eval_cmd(&ckpt, &data, gallery_size, masked, &sweep, null_trials, out.as_deref()),
        Command::Ablate {
            table,
            config,
            data,
            out,
            seeds,
        } => ablate(table, config.as_deref(), &data, &out, &seeds),
        Command::Plot { metrics, out } => plot_cmd(&metrics, &out),
    }
}
