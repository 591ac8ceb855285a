use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use spine_command::{parse_via_llm, Grammar, LlmClientConfig};
use spine_core::fixtures::{self, PhantomConfig};
use spine_core::preprocess::{self, Plane, PreprocessConfig, Split, SplitUnit, WindowConfig};
use spine_core::trainer::{Sample, TrainConfig, Trainer};
use spine_core::{ModelConfig, SegModel};
use spine_service::evaluation::evaluate_samples;
use spine_service::images::write_phantom_slices;
use spine_service::{api, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "spineseg", about = "Interactive spinal CT segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write synthetic phantom volumes and 2-D phantom slices.
    MakeFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        volumes: usize,
        #[arg(long, default_value_t = 32)]
        depth: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Window, slice, filter, split and export CT volumes.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "bone")]
        window: String,
        #[arg(long, default_value = "sag,cor,ax")]
        planes: String,
        #[arg(long, default_value_t = 0.01)]
        min_area_frac: f64,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value_t = false)]
        per_slice: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interactive training on a preprocessed split or the built-in phantoms.
    Train {
        /// Preprocessed directory; the phantom fixture set when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON training config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulated interactive evaluation with overlap and surface metrics.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parse one command into a structured op.
    Parse {
        #[arg(long)]
        text: String,
        #[arg(long)]
        llm_endpoint: Option<String>,
        #[arg(long, default_value_t = 2000)]
        llm_timeout_ms: u64,
    },
    /// Serve the HTTP session API.
    Serve {
        /// Checkpoint; a fresh toy model when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        image_dir: Option<String>,
        #[arg(long, default_value_t = false)]
        free_clicks: bool,
        #[arg(long)]
        llm_endpoint: Option<String>,
    },
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_samples(data: Option<&PathBuf>, split: Option<Split>) -> AnyResult<Vec<Sample>> {
    Ok(match data {
        Some(dir) => preprocess::load_split(dir, split)?,
        None => fixtures::training_set(&PhantomConfig::default()),
    })
}

fn run(cmd: Cmd) -> AnyResult<()> {
    match cmd {
        Cmd::MakeFixtures { out, volumes, depth, seed } => {
            let cfg = PhantomConfig { seed, ..PhantomConfig::default() };
            let ids = fixtures::write_volumes(&cfg, volumes, depth, &out.join("volumes"))?;
            let slices = write_phantom_slices(&cfg, &out.join("phantoms"))?;
            println!("{} volumes in {}", ids.len(), out.join("volumes").display());
            println!("{} slices in {}", slices.len(), out.join("phantoms").display());
        }
        Cmd::Preprocess { input, window, planes, min_area_frac, split, per_slice, seed, size, out } => {
            let planes = planes.split(',').map(|p| Plane::parse(p.trim())).collect::<Result<Vec<_>, _>>()?;
            let cfg = PreprocessConfig {
                window: WindowConfig::parse(&window)?,
                planes,
                min_area_frac,
                split_ratio: split,
                split_unit: if per_slice { SplitUnit::Slice } else { SplitUnit::Volume },
                seed,
                size,
                ..PreprocessConfig::default()
            };
            let m = preprocess::run(&cfg, &input, &out)?;
            println!(
                "kept {} (train {}, test {}), dropped {} by aspect and {} by area; manifest {}",
                m.kept, m.train, m.test, m.dropped_aspect, m.dropped_area, m.hash
            );
        }
        Cmd::Train { data, config, epochs, lr, seed, out } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => TrainConfig::default(),
            };
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            let samples = load_samples(data.as_ref(), Some(Split::Train))?;
            let mut model = SegModel::new(ModelConfig::toy(), seed)?;
            let mut trainer = Trainer::new(cfg)?;
            let report = trainer.train(&mut model, &samples)?;
            let mut meta = BTreeMap::new();
            meta.insert("epochs".to_string(), report.epochs_run.to_string());
            meta.insert("final_dice".to_string(), format!("{:.6}", report.final_eval.final_dice));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            model.save(&out, &meta)?;
            println!(
                "trained {} epochs on {} slices; per-round Dice {:?}; saved {}",
                report.epochs_run,
                samples.len(),
                report.final_eval.round_dice,
                out.display()
            );
        }
        Cmd::Evaluate { model, data, split, rounds, seed } => {
            let model = SegModel::load(&model)?;
            let split = match split.as_str() {
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                "all" => None,
                other => return Err(format!("split must be train, test or all, got `{other}`").into()),
            };
            let samples = load_samples(data.as_ref(), split)?;
            let summary = evaluate_samples(&model, &samples, rounds, seed)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Parse { text, llm_endpoint, llm_timeout_ms } => {
            let grammar = Grammar::load_default();
            let value = match llm_endpoint {
                Some(url) => {
                    let cfg = LlmClientConfig { timeout_ms: llm_timeout_ms, ..LlmClientConfig::new(url) };
                    let out = parse_via_llm(&text, &cfg, grammar)?;
                    if let Some(w) = &out.warning {
                        eprintln!("warning: {w}");
                    }
                    serde_json::json!({ "op": out.op, "fallback": out.fallback })
                }
                None => serde_json::to_value(grammar.parse(&text)?)?,
            };
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        Cmd::Serve { model, port, data, image_dir, free_clicks, llm_endpoint } => {
            let model = match model {
                Some(p) => SegModel::load(p)?,
                None => SegModel::new(ModelConfig::toy(), 0)?,
            };
            let image_dir = image_dir.or_else(|| data.join("images").is_dir().then(|| "images".to_string()));
            let cfg = ServiceConfig { image_dir, free_clicks, ..ServiceConfig::default() };
            let mut svc = Service::new(model, data, cfg);
            if let Some(url) = llm_endpoint {
                svc = svc.with_llm(LlmClientConfig::new(url));
            }
            let addr = SocketAddr::from(([127, 0, 0, 1], port));
            tokio::runtime::Runtime::new()?.block_on(api::serve(Arc::new(svc), addr))?;
        }
    }
    Ok(())
}
