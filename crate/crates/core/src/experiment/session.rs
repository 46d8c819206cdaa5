//! The split-training server and client that plug into the transport loops.

use std::sync::Arc;

use super::{evaluate, initial_model, EpochLog, ExperimentConfig, LossMeter, MetricsRecord, PlannedRound, RoundPlanner, RunData};
use crate::data::{ClientFeed, Dataset};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::split::{
    client_backward, client_forward, cut_model, local_mean_gradient, server_round, sync_front_weights, ClientCache,
    Contribution,
};
use crate::tensor::Tensor;
use crate::transport::{ClientWorker, RoundHandler};

/// Concatenates parameter tensors into one rank-1 tensor.
pub fn flatten_params(params: &[Tensor]) -> Result<Tensor> {
    let data: Vec<f32> = params.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(vec![data.len()], data)
}

/// Inverse of [`flatten_params`] for the given shapes.
pub fn unflatten_params(flat: &Tensor, shapes: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    let need: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if flat.ndim() != 1 || flat.len() != need {
        return Err(Error::Protocol(format!(
            "flattened gradient {:?} does not hold {need} front parameters",
            flat.shape()
        )));
    }
    let mut offset = 0;
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), flat.data()[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}

/// Server side: owns the back, a reference copy of the front, the round
/// schedule and the test set.
pub struct SplitServer {
    front: Model,
    back: Model,
    learning_rate: f32,
    expected_sizes: Vec<usize>,
    batch: usize,
    epochs: usize,
    planner: Option<RoundPlanner>,
    current: Option<PlannedRound>,
    meter: LossMeter,
    log: EpochLog,
    dataset: Arc<Dataset>,
    test: Vec<usize>,
}

impl SplitServer {
    pub fn new(cfg: &ExperimentConfig, data: &RunData) -> Result<Self> {
        let split = cut_model(initial_model::<f32>(cfg)?, cfg.cut)?;
        Ok(SplitServer {
            front: split.front,
            back: split.back,
            learning_rate: cfg.learning_rate as f32,
            expected_sizes: data.partition_sizes(),
            batch: cfg.batch_size,
            epochs: cfg.epochs,
            planner: None,
            current: None,
            meter: LossMeter::default(),
            log: EpochLog::new(cfg),
            dataset: Arc::clone(&data.dataset),
            test: data.test.clone(),
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::join(self.front.clone(), self.back.clone())
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.log.records
    }

    pub fn into_records(self) -> Vec<MetricsRecord> {
        self.log.records
    }

    fn quota(&self, client: u32) -> usize {
        self.current.as_ref().map_or(0, |p| p.quotas[client as usize])
    }
}

impl RoundHandler for SplitServer {
    fn begin(&mut self, partition_sizes: &[u32]) -> Result<()> {
        for (id, (&got, &want)) in partition_sizes.iter().zip(&self.expected_sizes).enumerate() {
            if got as usize != want {
                return Err(Error::Protocol(format!(
                    "client {id} announced {got} samples but the configuration gives it {want}"
                )));
            }
        }
        self.planner = Some(RoundPlanner::new(self.expected_sizes.clone(), self.batch, self.epochs)?);
        Ok(())
    }

    fn next_quotas(&mut self) -> Result<Option<Vec<u32>>> {
        let planner = self.planner.as_mut().ok_or_else(|| Error::Invalid("session not started".into()))?;
        self.current = planner.next();
        Ok(self
            .current
            .as_ref()
            .map(|p| p.quotas.iter().map(|&q| q as u32).collect()))
    }

    fn on_activations(&mut self, _round: u32, uploads: Vec<Contribution>) -> Result<Vec<Tensor>> {
        let result = server_round(&self.back, &uploads)?;
        self.back.apply_gradients(&result.back_grads, self.learning_rate)?;
        self.meter.add(result.loss, result.total_batch());
        Ok(result.cut_grads)
    }

    fn on_front_gradients(&mut self, _round: u32, grads: Vec<(u32, Tensor)>) -> Result<Vec<Tensor>> {
        let shapes = self.front.param_shapes();
        let mut per_client = Vec::with_capacity(grads.len());
        let mut sizes = Vec::with_capacity(grads.len());
        for (id, flat) in &grads {
            per_client.push(unflatten_params(flat, &shapes)?);
            sizes.push(self.quota(*id));
        }
        sync_front_weights(&mut self.front, &per_client, &sizes, self.learning_rate)?;
        Ok(self.front.params().into_iter().cloned().collect())
    }

    fn after_round(&mut self, _round: u32) -> Result<Option<(f64, f64)>> {
        let Some(plan) = self.current.as_ref().filter(|p| p.epoch_end) else {
            return Ok(None);
        };
        let epoch = plan.epoch;
        let acc = evaluate(&self.model()?, &self.dataset, &self.test)?;
        let rec = self.log.push(epoch, self.meter.take(), acc);
        Ok(Some((rec.train_loss, rec.test_accuracy)))
    }
}

/// Client side: a front replica plus this client's slice of the training set.
pub struct SplitClient {
    front: Model,
    feed: ClientFeed,
    dataset: Arc<Dataset>,
    cache: Option<ClientCache>,
    metrics: Vec<(u32, f64, f64)>,
}

impl SplitClient {
    pub fn new(cfg: &ExperimentConfig, data: &RunData, client_id: u32) -> Result<Self> {
        let part = data
            .parts
            .get(client_id as usize)
            .ok_or_else(|| Error::config("client_id", format!("{client_id} is out of range for {} clients", data.parts.len())))?;
        let split = cut_model(initial_model::<f32>(cfg)?, cfg.cut)?;
        Ok(SplitClient {
            front: split.front,
            feed: ClientFeed::new(part.clone(), cfg.seed, client_id),
            dataset: Arc::clone(&data.dataset),
            cache: None,
            metrics: Vec::new(),
        })
    }

    pub fn front(&self) -> &Model {
        &self.front
    }

    /// `(round, train_loss, test_accuracy)` as announced by the server.
    pub fn metrics(&self) -> &[(u32, f64, f64)] {
        &self.metrics
    }
}

impl ClientWorker for SplitClient {
    fn partition_size(&self) -> u32 {
        self.feed.partition_size() as u32
    }

    fn forward(&mut self, round: u32, quota: usize) -> Result<(Tensor, Tensor)> {
        let idx = self.feed.take(quota)?;
        let (x, y) = self.dataset.batch::<f32>(&idx)?;
        let (map, cache) = client_forward(&self.front, &x, round)?;
        self.cache = Some(cache);
        Ok((map, y))
    }

    fn backward(&mut self, round: u32, cut_grad: &Tensor, round_total: usize) -> Result<Tensor> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("cut gradient for round {round} without a cached forward")))?;
        let grads = client_backward(&self.front, cache, round, cut_grad)?;
        let n = cache.batch_size();
        self.cache = None;
        flatten_params(&local_mean_gradient(&grads, n, round_total))
    }

    fn sync(&mut self, _round: u32, params: Vec<Tensor>) -> Result<()> {
        self.front.set_params(params)
    }

    fn metrics(&mut self, round: u32, loss: f64, accuracy: f64) {
        self.metrics.push((round, loss, accuracy));
    }
}
