//! Experiment configuration, the training arms, and their drivers.
//!
//! `central` trains the whole model on the server. The split arms run the
//! client/server round loop, over a transport in [`run_arm`] or in-process
//! (and in either precision) in [`simulate`]. Every arm walks the same
//! train/test split, the same per-client sample order and the same round
//! quotas, so with the same seed the arms differ only in where the
//! arithmetic happens.

mod distortion;
mod metrics;
mod session;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::data::{load_image_dir, partition, synth_dataset, train_test_split, ClientFeed, Dataset, PartitionPlan, SynthParams};
use crate::error::{Error, Result};
use crate::nn::{small_vgg, Model, TrainConfig, INPUT_SHAPE};
use crate::split::{cut_model, round_quotas, ClientBatch, SplitTrainer};
use crate::tensor::{concat, Scalar};
use crate::transport::{Endpoint, LoopbackHub, Server, Timeouts};

pub use distortion::{distortion_metrics, write_distortion_dumps, ChannelDistortion, DistortionReport, PSNR_CAP_DB};
pub use metrics::{emit_metrics, format_g, format_metrics, MetricsFormat, MetricsRecord};
pub use session::{flatten_params, unflatten_params, SplitClient, SplitServer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Central,
    SplitEqual,
    /// 7:2:1.
    SplitSetup,
    /// 8:1:1.
    SplitImbalanced,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Central, Arm::SplitEqual, Arm::SplitSetup, Arm::SplitImbalanced];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Central => "central",
            Arm::SplitEqual => "split-equal",
            Arm::SplitSetup => "split-setup",
            Arm::SplitImbalanced => "split-imbalanced",
        }
    }

    pub fn is_split(self) -> bool {
        self != Arm::Central
    }

    /// Default client ratios. The central arm batches like the equal split.
    pub fn default_ratios(self) -> Vec<f64> {
        match self {
            Arm::Central | Arm::SplitEqual => vec![1.0, 1.0, 1.0],
            Arm::SplitSetup => vec![7.0, 2.0, 1.0],
            Arm::SplitImbalanced => vec![8.0, 1.0, 1.0],
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("arm", format!("unknown arm `{s}` (expected central, split-equal, split-setup or split-imbalanced)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Images,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Loopback,
    Tcp,
}

/// Flat JSON configuration; every field is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arm: Arm,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Overrides the arm's client ratios.
    pub ratios: Option<Vec<f64>>,
    /// Must equal the number of ratios when given.
    pub clients: Option<usize>,
    /// Layer index where the client front ends.
    pub cut: usize,
    pub dataset: DataSource,
    pub synth_n: usize,
    pub class_balance: f64,
    /// `relative_path,label` manifest for `dataset = "images"`.
    pub manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub transport: TransportKind,
    pub listen: String,
    pub connect: String,
    pub out: Option<PathBuf>,
    pub format: MetricsFormat,
    /// Record wall-clock time per epoch; off by default so that metrics
    /// files are reproducible byte for byte.
    pub timing: bool,
    pub handshake_timeout_ms: u64,
    pub round_timeout_ms: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            arm: Arm::Central,
            seed: train.seed,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            ratios: None,
            clients: None,
            cut: crate::nn::DEFAULT_CUT,
            dataset: DataSource::Synthetic,
            synth_n: 600,
            class_balance: 0.4,
            manifest: None,
            test_fraction: 0.2,
            transport: TransportKind::Loopback,
            listen: "127.0.0.1:7878".into(),
            connect: "127.0.0.1:7878".into(),
            out: None,
            format: MetricsFormat::Csv,
            timing: false,
            handshake_timeout_ms: 10_000,
            round_timeout_ms: 60_000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
        }
    }

    pub fn ratios(&self) -> Vec<f64> {
        self.ratios.clone().unwrap_or_else(|| self.arm.default_ratios())
    }

    pub fn plan(&self) -> Result<PartitionPlan> {
        PartitionPlan::new(self.ratios(), self.seed)
    }

    pub fn timeouts(&self) -> Timeouts {
        Timeouts {
            handshake: Duration::from_millis(self.handshake_timeout_ms),
            round: Duration::from_millis(self.round_timeout_ms),
            ..Timeouts::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        let plan = self.plan()?;
        if let Some(n) = self.clients {
            if n != plan.clients() {
                return Err(Error::config("clients", format!("{n} clients but {} ratios", plan.clients())));
            }
        }
        let layers = small_vgg().len();
        if self.cut == 0 || self.cut >= layers {
            return Err(Error::config("cut", format!("must be in 1..{layers}")));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("test_fraction", "must be in (0, 1)"));
        }
        match self.dataset {
            DataSource::Synthetic => {
                if self.synth_n < 2 {
                    return Err(Error::config("synth_n", "must be >= 2"));
                }
                if !(0.0..=1.0).contains(&self.class_balance) {
                    return Err(Error::config("class_balance", "must be in [0, 1]"));
                }
            }
            DataSource::Images => {
                if self.manifest.is_none() {
                    return Err(Error::config("manifest", "required when dataset is \"images\""));
                }
            }
        }
        if self.handshake_timeout_ms == 0 || self.round_timeout_ms == 0 {
            return Err(Error::config("timeouts", "must be positive"));
        }
        Ok(())
    }
}

/// Everything derived from the config before training starts.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dataset: Arc<Dataset>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Training indices held by each client.
    pub parts: Vec<Vec<usize>>,
}

impl RunData {
    pub fn partition_sizes(&self) -> Vec<usize> {
        self.parts.iter().map(|p| p.len()).collect()
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<RunData> {
    cfg.validate()?;
    let dataset = match cfg.dataset {
        DataSource::Synthetic => synth_dataset(&SynthParams {
            n: cfg.synth_n,
            class_balance: cfg.class_balance,
            seed: cfg.seed,
        })?,
        DataSource::Images => load_image_dir(cfg.manifest.as_deref().expect("validated"))?,
    };
    let (train, test) = train_test_split(&dataset, cfg.test_fraction, cfg.seed)?;
    if test.is_empty() {
        return Err(Error::config("test_fraction", "leaves no test samples"));
    }
    let parts = partition(&train, &cfg.plan()?)?;
    Ok(RunData {
        dataset: Arc::new(dataset),
        train,
        test,
        parts,
    })
}

/// Initial full model for a config.
pub fn initial_model<T: Scalar>(cfg: &ExperimentConfig) -> Result<Model<T>> {
    Model::build(&small_vgg(), &INPUT_SHAPE, cfg.seed)
}

/// One round of the epoch schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedRound {
    pub quotas: Vec<usize>,
    /// 1-based.
    pub epoch: usize,
    pub epoch_end: bool,
}

/// Walks the round schedule: each epoch drains every client's partition in
/// rounds of at most `batch` samples split by [`round_quotas`].
#[derive(Debug, Clone)]
pub struct RoundPlanner {
    sizes: Vec<usize>,
    remaining: Vec<usize>,
    batch: usize,
    epochs: usize,
    epoch: usize,
}

impl RoundPlanner {
    pub fn new(sizes: Vec<usize>, batch: usize, epochs: usize) -> Result<Self> {
        if sizes.iter().sum::<usize>() == 0 {
            return Err(Error::Invalid("no training samples".into()));
        }
        Ok(RoundPlanner {
            remaining: vec![0; sizes.len()],
            sizes,
            batch,
            epochs,
            epoch: 0,
        })
    }

    /// `ceil(total / batch)`.
    pub fn rounds_per_epoch(&self) -> usize {
        self.sizes.iter().sum::<usize>().div_ceil(self.batch)
    }
}

impl Iterator for RoundPlanner {
    type Item = PlannedRound;

    fn next(&mut self) -> Option<PlannedRound> {
        if self.remaining.iter().all(|&r| r == 0) {
            if self.epoch == self.epochs {
                return None;
            }
            self.epoch += 1;
            self.remaining.clone_from(&self.sizes);
        }
        let quotas = round_quotas(&self.remaining, self.batch);
        for (r, q) in self.remaining.iter_mut().zip(&quotas) {
            *r -= q;
        }
        Some(PlannedRound {
            quotas,
            epoch: self.epoch,
            epoch_end: self.remaining.iter().all(|&r| r == 0),
        })
    }
}

/// Sample-weighted running mean of round losses within an epoch.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LossMeter {
    sum: f64,
    n: usize,
}

impl LossMeter {
    pub(crate) fn add(&mut self, loss: f64, samples: usize) {
        self.sum += loss * samples as f64;
        self.n += samples;
    }

    pub(crate) fn take(&mut self) -> f64 {
        let mean = if self.n == 0 { 0.0 } else { self.sum / self.n as f64 };
        *self = LossMeter::default();
        mean
    }
}

/// Test-set accuracy, predicting in chunks.
pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset, indices: &[usize]) -> Result<f64> {
    let mut correct = 0usize;
    for chunk in indices.chunks(64) {
        let (x, y) = dataset.batch::<T>(chunk)?;
        let p = model.predict(&x)?;
        correct += p
            .data()
            .iter()
            .zip(y.data())
            .filter(|(p, y)| (p.as_f64() >= 0.5) == (y.as_f64() >= 0.5))
            .count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Epoch-end bookkeeping shared by every driver.
pub(crate) struct EpochLog {
    arm: Arm,
    seed: u64,
    timing: bool,
    started: Instant,
    pub(crate) records: Vec<MetricsRecord>,
}

impl EpochLog {
    pub(crate) fn new(cfg: &ExperimentConfig) -> Self {
        EpochLog {
            arm: cfg.arm,
            seed: cfg.seed,
            timing: cfg.timing,
            started: Instant::now(),
            records: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, epoch: usize, train_loss: f64, test_accuracy: f64) -> MetricsRecord {
        let rec = MetricsRecord {
            arm: self.arm.name().to_string(),
            seed: self.seed,
            epoch,
            train_loss,
            test_accuracy,
            wall_ms: if self.timing { self.started.elapsed().as_millis() as u64 } else { 0 },
        };
        self.records.push(rec.clone());
        rec
    }
}

/// Result of [`simulate`].
#[derive(Debug, Clone)]
pub struct Simulation<T: Scalar> {
    pub records: Vec<MetricsRecord>,
    pub model: Model<T>,
}

/// Trains an arm in-process in precision `T`. `on_epoch` sees the full model
/// after every epoch. Split arms keep one front per client and check after
/// each round that the fronts agree.
pub fn simulate<T: Scalar>(
    cfg: &ExperimentConfig,
    data: &RunData,
    mut on_epoch: impl FnMut(usize, &Model<T>),
) -> Result<Simulation<T>> {
    let lr = T::from_f64(cfg.learning_rate);
    let mut feeds: Vec<ClientFeed> = data
        .parts
        .iter()
        .enumerate()
        .map(|(id, p)| ClientFeed::new(p.clone(), cfg.seed, id as u32))
        .collect();
    let planner = RoundPlanner::new(data.partition_sizes(), cfg.batch_size, cfg.epochs)?;
    let mut log = EpochLog::new(cfg);
    let mut meter = LossMeter::default();

    enum Trainer<T: Scalar> {
        Central(Model<T>),
        Split(SplitTrainer<T>),
    }
    let model = initial_model::<T>(cfg)?;
    let mut trainer = if cfg.arm.is_split() {
        Trainer::Split(SplitTrainer::new(cut_model(model, cfg.cut)?, feeds.len(), lr)?)
    } else {
        Trainer::Central(model)
    };

    for (round, plan) in planner.enumerate() {
        let mut batches: Vec<ClientBatch<T>> = Vec::with_capacity(feeds.len());
        for (feed, &q) in feeds.iter_mut().zip(&plan.quotas) {
            let idx = feed.take(q)?;
            batches.push(if idx.is_empty() { None } else { Some(data.dataset.batch::<T>(&idx)?) });
        }
        let samples: usize = plan.quotas.iter().sum();
        let loss = match &mut trainer {
            Trainer::Central(m) => {
                let xs: Vec<_> = batches.iter().flatten().map(|(x, _)| x).collect();
                let ys: Vec<_> = batches.iter().flatten().map(|(_, y)| y).collect();
                m.train_step(&concat(&xs, 0)?, &concat(&ys, 0)?, lr)?
            }
            Trainer::Split(s) => {
                let out = s.round(round as u32, &batches)?;
                if !s.fronts_identical() {
                    return Err(Error::Corrupt {
                        op: "simulate",
                        detail: format!("client fronts diverged in round {round}"),
                    });
                }
                out.loss
            }
        };
        meter.add(loss, samples);
        if plan.epoch_end {
            let model = match &trainer {
                Trainer::Central(m) => m.clone(),
                Trainer::Split(s) => s.model()?,
            };
            let acc = evaluate(&model, &data.dataset, &data.test)?;
            log.push(plan.epoch, meter.take(), acc);
            on_epoch(plan.epoch, &model);
        }
    }
    let model = match trainer {
        Trainer::Central(m) => m,
        Trainer::Split(s) => s.model()?,
    };
    Ok(Simulation { records: log.records, model })
}

/// Final outcome of [`run_arm`].
#[derive(Debug, Clone)]
pub struct ArmRun {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
}

/// Runs one arm in 32-bit precision. The central arm trains in-process;
/// split arms run server and clients over the configured transport (threads
/// in this process either way).
pub fn run_arm(cfg: &ExperimentConfig) -> Result<ArmRun> {
    let data = prepare(cfg)?;
    if !cfg.arm.is_split() {
        let sim = simulate::<f32>(cfg, &data, |_, _| {})?;
        return Ok(ArmRun {
            records: sim.records,
            model: sim.model,
        });
    }
    let (endpoint, server) = match cfg.transport {
        TransportKind::Loopback => {
            let ep = Endpoint::Loopback(LoopbackHub::new());
            let server = Server::bind(&ep)?;
            (ep, server)
        }
        TransportKind::Tcp => {
            let server = Server::bind(&Endpoint::Tcp(cfg.listen.clone()))?;
            let addr = server
                .local_addr()
                .ok_or_else(|| Error::Transport("listener has no address".into()))?;
            (Endpoint::Tcp(addr.to_string()), server)
        }
    };
    let timeouts = cfg.timeouts();
    let clients: Vec<_> = (0..data.parts.len() as u32)
        .map(|id| {
            let mut worker = SplitClient::new(cfg, &data, id)?;
            let ep = endpoint.clone();
            Ok(std::thread::spawn(move || crate::transport::connect(&ep, id, &mut worker, &timeouts)))
        })
        .collect::<Result<_>>()?;
    let mut handler = SplitServer::new(cfg, &data)?;
    let served = server.serve(data.parts.len(), &mut handler, &timeouts);
    let mut client_err = None;
    for c in clients {
        let r = c.join().map_err(|_| Error::Transport("client thread panicked".into()))?;
        if let Err(e) = r {
            client_err.get_or_insert(e);
        }
    }
    served?;
    if let Some(e) = client_err {
        return Err(e);
    }
    let model = handler.model()?;
    Ok(ArmRun {
        records: handler.into_records(),
        model,
    })
}
