use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use splitcnn::data::{read_pgm, IMAGE_SIDE};
use splitcnn::experiment::{
    distortion_metrics, emit_metrics, format_metrics, prepare, run_arm, write_distortion_dumps, Arm, ExperimentConfig,
    MetricsFormat, MetricsRecord, SplitClient, SplitServer, TransportKind,
};
use splitcnn::nn::{load_checkpoint, save_checkpoint, standard_checks};
use splitcnn::transport::{connect, Endpoint, Server};
use splitcnn::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "splitcnn", version, about = "Split-learning CNN trainer for binary image classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat JSON experiment config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// central | split-equal | split-setup | split-imbalanced
    #[arg(long)]
    arm: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(arm) = &self.arm {
            cfg.arm = arm.parse::<Arm>()?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(epochs) = self.epochs {
            cfg.epochs = epochs;
        }
        Ok(cfg)
    }
}

#[derive(Args, Clone, Default)]
struct Output {
    /// Metrics file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// csv | jsonl
    #[arg(long)]
    format: Option<String>,
}

impl Output {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(out) = &self.out {
            cfg.out = Some(out.clone());
        }
        if let Some(f) = &self.format {
            cfg.format = f.parse::<MetricsFormat>()?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one arm end to end and write per-epoch metrics
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        /// loopback | tcp (split arms only)
        #[arg(long)]
        transport: Option<String>,
        /// Listen address when --transport tcp
        #[arg(long)]
        listen: Option<String>,
        /// Save the trained model here
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the split-learning server over TCP
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        output: Output,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run one split-learning client over TCP
    Client {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        connect: Option<String>,
        #[arg(long)]
        client_id: u32,
    },
    /// Compare analytic gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Measure how much of an input image survives in the client feature map
    Featuremap {
        #[command(flatten)]
        common: Common,
        /// Trained model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// 64x64 P5 PGM to analyse (default: first flame image of the test split)
        #[arg(long)]
        image: Option<PathBuf>,
        /// Directory for PGM dumps and report.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Print train/test and per-client partition sizes without training
    Partition {
        #[command(flatten)]
        common: Common,
    },
}

fn write_records(cfg: &ExperimentConfig, records: &[MetricsRecord]) -> Result<()> {
    match &cfg.out {
        Some(path) => emit_metrics(records, path, cfg.format),
        None => {
            print!("{}", format_metrics(records, cfg.format));
            Ok(())
        }
    }
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { common, output, transport, listen, checkpoint } => {
            let mut cfg = common.load()?;
            output.apply(&mut cfg)?;
            if let Some(t) = transport {
                cfg.transport = match t.as_str() {
                    "loopback" => TransportKind::Loopback,
                    "tcp" => TransportKind::Tcp,
                    other => return Err(Error::config("transport", format!("unknown transport `{other}`"))),
                };
            }
            if let Some(addr) = listen {
                cfg.listen = addr;
            }
            let run = run_arm(&cfg)?;
            write_records(&cfg, &run.records)?;
            if let Some(path) = checkpoint {
                save_checkpoint(&run.model, &path)?;
            }
            Ok(())
        }
        Command::Serve { common, output, listen, checkpoint } => {
            let mut cfg = common.load()?;
            output.apply(&mut cfg)?;
            if let Some(addr) = listen {
                cfg.listen = addr;
            }
            if !cfg.arm.is_split() {
                return Err(Error::config("arm", "serve needs a split arm"));
            }
            let data = prepare(&cfg)?;
            let server = Server::bind(&Endpoint::Tcp(cfg.listen.clone()))?;
            if let Some(addr) = server.local_addr() {
                println!("listening on {addr}");
                std::io::stdout().flush().ok();
            }
            let mut handler = SplitServer::new(&cfg, &data)?;
            server.serve(data.parts.len(), &mut handler, &cfg.timeouts())?;
            if let Some(path) = checkpoint {
                save_checkpoint(&handler.model()?, &path)?;
            }
            let records = handler.into_records();
            match &cfg.out {
                Some(path) => emit_metrics(&records, path, cfg.format),
                None => {
                    print!("{}", format_metrics(&records, cfg.format));
                    Ok(())
                }
            }
        }
        Command::Client { common, connect: addr, client_id } => {
            let mut cfg = common.load()?;
            if let Some(addr) = addr {
                cfg.connect = addr;
            }
            let data = prepare(&cfg)?;
            let mut worker = SplitClient::new(&cfg, &data, client_id)?;
            let report = connect(&Endpoint::Tcp(cfg.connect.clone()), client_id, &mut worker, &cfg.timeouts())?;
            eprintln!("client {client_id}: {} rounds, {} with samples", report.rounds, report.participated);
            Ok(())
        }
        Command::Gradcheck { seed, eps } => {
            let mut worst = 0.0f64;
            for (name, r) in standard_checks(seed, eps)? {
                println!("{name}: max_rel_error={:.3e} checked={}", r.max_rel_error, r.checked);
                worst = worst.max(r.max_rel_error);
            }
            if worst >= 1e-4 {
                return Err(Error::Numeric {
                    op: "gradcheck",
                    detail: format!("max relative error {worst:.3e} exceeds 1e-4"),
                });
            }
            Ok(())
        }
        Command::Featuremap { common, checkpoint, image, out } => {
            let cfg = common.load()?;
            let model = load_checkpoint(&checkpoint)?;
            let (front, _) = model.split_at(cfg.cut)?;
            let original: Tensor = match image {
                Some(path) => {
                    let pgm = read_pgm(&path)?;
                    if (pgm.width, pgm.height) != (IMAGE_SIDE, IMAGE_SIDE) {
                        return Err(Error::Data { path, detail: format!("image is {}x{}, expected 64x64", pgm.width, pgm.height) });
                    }
                    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], pgm.pixels.iter().map(|&p| p as f32 / 255.0).collect())?
                }
                None => {
                    let data = prepare(&cfg)?;
                    let idx = data
                        .test
                        .iter()
                        .copied()
                        .find(|&i| data.dataset.label(i) == 1)
                        .unwrap_or(data.test[0]);
                    Tensor::new(vec![1, IMAGE_SIDE, IMAGE_SIDE], data.dataset.image(idx).to_vec())?
                }
            };
            let batch = original.clone().reshape(vec![1, 1, IMAGE_SIDE, IMAGE_SIDE])?;
            let map = front.predict(&batch)?;
            let per_sample = map.shape()[1..].to_vec();
            let map = map.reshape(per_sample)?;
            let report = distortion_metrics(&original, &map)?;
            write_distortion_dumps(&out, &original, &map, &report)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::Partition { common } => {
            let cfg = common.load()?;
            let data = prepare(&cfg)?;
            let (neg, pos) = data.dataset.class_counts();
            println!("samples {} (positive {pos}, negative {neg})", data.dataset.len());
            println!("train {} test {}", data.train.len(), data.test.len());
            let ratios: Vec<String> = cfg.ratios().iter().map(|r| r.to_string()).collect();
            println!("ratios {}", ratios.join(":"));
            for (id, p) in data.parts.iter().enumerate() {
                println!("client {id}: {}", p.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
