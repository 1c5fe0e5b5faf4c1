use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use inpformer::checkpoint::Checkpoint;
use inpformer::config::{Mode, RunConfig};
use inpformer::dataset::{ingest_dataset, DatasetIndex};
use inpformer::decoder::cost_report;
use inpformer::encoder::FeatureExtractor;
use inpformer::error::{Error, Result};
use inpformer::evaluate::{evaluate, evaluate_checkpoint, evaluation_index, EvalOptions, Evaluation, MapSource};
use inpformer::imaging::{save_gray16, ImageTensor};
use inpformer::model::Encoded;
use inpformer::synthdata::{generate, SynthSpec};
use inpformer::synthesis::TextureSource;
use inpformer::train::{train, training_index, write_run, StepRecord};

#[derive(Parser)]
#[command(version, about = "Prototype-guided feature reconstruction for visual anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a dataset tree and write checkpoint, log and config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Evaluate after training and store the metrics in the checkpoint.
        #[arg(long)]
        eval: bool,
    },
    /// Evaluate a checkpoint and print a flat metric report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report, anomaly maps and diagnostics here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        diagnostics: bool,
        /// Score with reconstruction error only, ignoring the head.
        #[arg(long)]
        recon_only: bool,
    },
    /// Generate the bundled textured-surface dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Write pseudo-anomaly samples (image, mask, json) made from one image.
    SynthAnomalies {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        textures: Option<PathBuf>,
    },
    /// Attention cost of full self-attention versus prototype attention.
    CostReport {
        #[arg(long, default_value_t = 784)]
        n: u64,
        #[arg(long, default_value_t = 6)]
        m: u64,
        #[arg(long, default_value_t = 768)]
        c: u64,
    },
    /// Prototype distance map of one image.
    ZeroShot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// 16-bit PNG of the map.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a config file with every field set.
    InitConfig {
        /// Small settings for the bundled dataset and toy encoder.
        #[arg(long)]
        desk: bool,
    },
}

fn progress(total_hint: &str) -> impl FnMut(&StepRecord) + '_ {
    let start = Instant::now();
    move |r| {
        if r.step % 50 == 0 {
            let f = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "[{total_hint}] step {:>5}  L_npm {}  L_seg {}  {:.1}s",
                r.step,
                f(r.npm),
                f(r.seg),
                start.elapsed().as_secs_f64()
            );
        }
    }
}

fn print_eval(ev: &Evaluation) {
    print!("{}", ev.to_text());
}

fn run_train(cfg: &RunConfig, data: &Path, out: &Path, eval: bool) -> Result<()> {
    let index = ingest_dataset(data)?;
    eprint!("{}", index.summary());
    let extractor = cfg.extractor.build()?;
    let tidx = training_index(cfg, &index)?;
    let units: Vec<(PathBuf, DatasetIndex)> = if cfg.mode == Mode::SingleClass {
        tidx.categories
            .iter()
            .map(|c| (out.join(&c.name), DatasetIndex { root: tidx.root.clone(), categories: vec![c.clone()] }))
            .collect()
    } else {
        vec![(out.to_path_buf(), tidx)]
    };
    for (dir, idx) in units {
        let label = idx.categories.iter().map(|c| c.name.as_str()).collect::<Vec<_>>().join(",");
        let mut ck = train(cfg, &idx, extractor.as_ref(), progress(&label))?;
        if eval {
            let ev = evaluate_checkpoint(&ck, &index, &EvalOptions::default())?;
            print_eval(&ev);
            ck.metrics.push(ev.flat());
        }
        write_run(&dir, &ck)?;
        eprintln!("wrote {}", dir.display());
    }
    Ok(())
}

fn run_eval(checkpoint: &Path, data: &Path, out: Option<PathBuf>, diagnostics: bool, recon_only: bool) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let index = ingest_dataset(data)?;
    let opts = EvalOptions { export: out.clone(), diagnostics };
    let ev = if recon_only {
        let model = ck.model()?;
        let extractor = ck.extractor()?;
        let idx = evaluation_index(&ck.config, &ck.categories, &index)?;
        let src = MapSource::Detector { use_head: false };
        evaluate(&model, extractor.as_ref(), &ck.config, &idx, src, &opts)?
    } else {
        evaluate_checkpoint(&ck, &index, &opts)?
    };
    print_eval(&ev);
    if let Some(dir) = out {
        let p = dir.join("report.txt");
        fs::write(&p, ev.to_text()).map_err(|source| Error::Io { path: p, source })?;
    }
    Ok(())
}

fn run_zero_shot(checkpoint: &Path, image: &Path, out: Option<PathBuf>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model()?;
    let extractor: Box<dyn FeatureExtractor> = ck.extractor()?;
    let cfg = &ck.config;
    let img = ImageTensor::load(image)?.resize_center_crop(cfg.resize, cfg.crop);
    let enc = Encoded::from_stack(&extractor.extract(&img)?, &cfg.groups)?;
    let (map, score) = model.zero_shot(&enc, (cfg.crop, cfg.crop), cfg.coherence)?;
    println!("score = {score:?}");
    println!("map_max = {:?}", map.max());
    println!("map_mean = {:?}", map.mean());
    if let Some(p) = out {
        save_gray16(&p, map.height(), map.width(), map.values(), map.max())?;
    }
    Ok(())
}

fn run_synth_anomalies(image: &Path, out: &Path, count: usize, seed: u64, textures: Option<PathBuf>) -> Result<()> {
    let normal = ImageTensor::load(image)?;
    let textures = match textures {
        Some(d) => TextureSource::from_dir(&d)?,
        None => TextureSource::Procedural,
    };
    let recipe = RunConfig::default().residual.synthesis;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let s = recipe.generate(&normal, &textures, rand::Rng::random(&mut rng))?;
        s.dump(out, &format!("{i:03}"))?;
    }
    eprintln!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, data, out, seed, eval } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            run_train(&cfg, &data, &out, eval)
        }
        Command::Eval { checkpoint, data, out, diagnostics, recon_only } => {
            run_eval(&checkpoint, &data, out, diagnostics, recon_only)
        }
        Command::SynthData { out, seed, size } => {
            let m = generate(&out, &SynthSpec { seed, size, ..SynthSpec::default() })?;
            println!("{}", serde_json::to_string_pretty(&m.categories).expect("manifest serializes"));
            Ok(())
        }
        Command::SynthAnomalies { image, out, count, seed, textures } => {
            run_synth_anomalies(&image, &out, count, seed, textures)
        }
        Command::CostReport { n, m, c } => {
            print!("{}", cost_report(n, m, c));
            Ok(())
        }
        Command::ZeroShot { checkpoint, image, out } => run_zero_shot(&checkpoint, &image, out),
        Command::InitConfig { desk } => {
            print!("{}", if desk { RunConfig::desk() } else { RunConfig::default() }.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
