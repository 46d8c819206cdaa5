//! Client/server division of a [`Model`] and the arithmetic of one training
//! round: client forward to the cut, server forward/backward on the
//! concatenated batch, gradient scatter, client backward and front sync.
//!
//! Everything here is transport-agnostic; [`SplitTrainer`] wires the pieces
//! together in-process and the transport layer does the same over frames.

use crate::error::{Error, Result};
use crate::nn::{bce_loss, ForwardCache, Model};
use crate::tensor::{concat, split_axis, Scalar, Tensor};

/// A model cut into a client-side front and a server-side back.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel<T: Scalar = f32> {
    pub front: Model<T>,
    pub back: Model<T>,
    cut_index: usize,
}

impl<T: Scalar> SplitModel<T> {
    pub fn cut_index(&self) -> usize {
        self.cut_index
    }

    /// Reassembles the uncut model.
    pub fn merge(self) -> Result<Model<T>> {
        Model::join(self.front, self.back)
    }
}

/// Moves layers `[0, cut)` into the front and the rest into the back.
pub fn cut_model<T: Scalar>(model: Model<T>, cut_index: usize) -> Result<SplitModel<T>> {
    let (front, back) = model.split_at(cut_index)?;
    Ok(SplitModel { front, back, cut_index })
}

/// Client-side state kept between sending activations and receiving the
/// cut gradient.
#[derive(Debug, Clone)]
pub struct ClientCache<T: Scalar = f32> {
    round: u32,
    cache: ForwardCache<T>,
}

impl<T: Scalar> ClientCache<T> {
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn batch_size(&self) -> usize {
        self.cache.batch_size()
    }
}

/// Runs the front on a local batch. A client with nothing to contribute in a
/// round simply does not call this.
pub fn client_forward<T: Scalar>(front: &Model<T>, batch: &Tensor<T>, round: u32) -> Result<(Tensor<T>, ClientCache<T>)> {
    let (map, cache) = front.forward(batch)?;
    Ok((map, ClientCache { round, cache }))
}

/// Backpropagates the cut gradient through the front. Returns the gradients
/// without applying them; the cache is left untouched on error.
pub fn client_backward<T: Scalar>(
    front: &Model<T>,
    cache: &ClientCache<T>,
    round: u32,
    cut_grad: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    if cache.round != round {
        return Err(Error::Protocol(format!(
            "cut gradient for round {round} but the cached forward is from round {}",
            cache.round
        )));
    }
    if cut_grad.shape().first() != Some(&cache.batch_size()) {
        return Err(Error::Protocol(format!(
            "cut gradient {:?} does not match cached batch of {}",
            cut_grad.shape(),
            cache.batch_size()
        )));
    }
    Ok(front.backward(&cache.cache, cut_grad, false)?.params)
}

/// One client's upload for a round.
#[derive(Debug, Clone)]
pub struct Contribution<T: Scalar = f32> {
    pub client_id: u32,
    pub feature_map: Tensor<T>,
    pub labels: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct RoundResult<T: Scalar = f32> {
    /// Mean BCE over the concatenated batch.
    pub loss: f64,
    /// Participating client ids, ascending.
    pub client_ids: Vec<u32>,
    pub batch_sizes: Vec<usize>,
    /// Cut-layer gradient slice for each participant, same order as `client_ids`.
    pub cut_grads: Vec<Tensor<T>>,
    pub back_grads: Vec<Tensor<T>>,
}

impl<T: Scalar> RoundResult<T> {
    pub fn total_batch(&self) -> usize {
        self.batch_sizes.iter().sum()
    }
}

/// Server half of a round. Contributions are ordered by client id before
/// concatenation, so arrival order never matters. The back is not updated.
pub fn server_round<T: Scalar>(back: &Model<T>, contributions: &[Contribution<T>]) -> Result<RoundResult<T>> {
    if contributions.is_empty() {
        return Err(Error::Invalid("round has no participating clients".into()));
    }
    let mut order: Vec<&Contribution<T>> = contributions.iter().collect();
    order.sort_by_key(|c| c.client_id);
    for pair in order.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::Protocol(format!("client {} contributed twice", pair[0].client_id)));
        }
    }
    for c in &order {
        let n = c.feature_map.shape()[0];
        if c.labels.shape() != [n, 1] {
            return Err(Error::Protocol(format!(
                "client {} sent {n} feature maps with labels {:?}",
                c.client_id,
                c.labels.shape()
            )));
        }
    }
    let batch_sizes: Vec<usize> = order.iter().map(|c| c.feature_map.shape()[0]).collect();
    let maps: Vec<&Tensor<T>> = order.iter().map(|c| &c.feature_map).collect();
    let labels: Vec<&Tensor<T>> = order.iter().map(|c| &c.labels).collect();
    let x = concat(&maps, 0).map_err(|e| Error::Protocol(format!("feature maps disagree: {e}")))?;
    let y = concat(&labels, 0)?;

    let (pred, cache) = back.forward(&x)?;
    let (loss, grad) = bce_loss(&pred, &y)?;
    let grads = back.backward(&cache, &grad, true)?;
    let cut = grads.input.expect("input gradient requested");
    Ok(RoundResult {
        loss,
        client_ids: order.iter().map(|c| c.client_id).collect(),
        cut_grads: split_axis(&cut, 0, &batch_sizes)?,
        batch_sizes,
        back_grads: grads.params,
    })
}

/// Rescales a client's share of the global-mean gradient to the mean over
/// its own samples: `g_i = G_i · total / n_i`.
pub fn local_mean_gradient<T: Scalar>(grads: &[Tensor<T>], batch: usize, total: usize) -> Vec<Tensor<T>> {
    let scale = T::from_f64(total as f64 / batch as f64);
    grads.iter().map(|g| g.map(|v| v * scale)).collect()
}

/// `Σ_i (n_i / Σn) · g_i` over per-client local-mean gradients.
pub fn aggregate_front_gradients<T: Scalar>(per_client: &[Vec<Tensor<T>>], batch_sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if per_client.is_empty() || per_client.len() != batch_sizes.len() {
        return Err(Error::dim(
            "aggregate_front_gradients",
            format!("{} gradient sets for {} batch sizes", per_client.len(), batch_sizes.len()),
        ));
    }
    let total: usize = batch_sizes.iter().sum();
    let reference = &per_client[0];
    let mut acc: Vec<Vec<T>> = reference.iter().map(|t| vec![T::zero(); t.len()]).collect();
    for (i, (grads, &n)) in per_client.iter().zip(batch_sizes).enumerate() {
        let same = grads.len() == reference.len() && grads.iter().zip(reference).all(|(a, b)| a.shape() == b.shape());
        if !same {
            return Err(Error::dim(
                "aggregate_front_gradients",
                format!("client {i} gradient shapes differ from client 0"),
            ));
        }
        let w = T::from_f64(n as f64 / total as f64);
        for (dst, g) in acc.iter_mut().zip(grads) {
            for (d, &v) in dst.iter_mut().zip(g.data()) {
                *d += w * v;
            }
        }
    }
    acc.into_iter()
        .zip(reference)
        .map(|(data, r)| Tensor::new(r.shape().to_vec(), data))
        .collect()
}

/// Aggregates the client gradients and applies one SGD step to `front`.
/// The caller broadcasts the result so every client ends the round with the
/// same parameters.
pub fn sync_front_weights<T: Scalar>(
    front: &mut Model<T>,
    per_client: &[Vec<Tensor<T>>],
    batch_sizes: &[usize],
    learning_rate: T,
) -> Result<()> {
    let agg = aggregate_front_gradients(per_client, batch_sizes)?;
    front.apply_gradients(&agg, learning_rate)
}

/// Splits a global batch across clients for one round.
///
/// The batch is `min(global, Σ remaining)`, divided by largest remainder in
/// proportion to what each client still has this epoch, with at least one
/// sample for every client that is not exhausted. Ties go to the lower index.
pub fn round_quotas(remaining: &[usize], global_batch: usize) -> Vec<usize> {
    let total: usize = remaining.iter().sum();
    let batch = global_batch.min(total);
    if batch == 0 {
        return vec![0; remaining.len()];
    }
    let weights: Vec<f64> = remaining.iter().map(|&r| r as f64).collect();
    let mut quotas = crate::data::largest_remainder(batch, &weights);
    // guarantee a slot for every active client, taking from the largest quota
    while let Some(starved) = (0..quotas.len()).find(|&i| remaining[i] > 0 && quotas[i] == 0) {
        let donor = (0..quotas.len())
            .filter(|&i| quotas[i] > 1)
            .max_by(|&a, &b| quotas[a].cmp(&quotas[b]).then(b.cmp(&a)));
        match donor {
            Some(d) => {
                quotas[d] -= 1;
                quotas[starved] += 1;
            }
            None => break,
        }
    }
    for (q, &r) in quotas.iter_mut().zip(remaining) {
        debug_assert!(*q <= r);
        *q = (*q).min(r);
    }
    quotas
}

/// Supplies each client's batch for a round; `None` means the client sits
/// the round out.
pub type ClientBatch<T> = Option<(Tensor<T>, Tensor<T>)>;

/// In-process split training: one front per client plus the server back.
#[derive(Debug, Clone)]
pub struct SplitTrainer<T: Scalar = f32> {
    fronts: Vec<Model<T>>,
    back: Model<T>,
    learning_rate: T,
}

/// Outcome of [`SplitTrainer::round`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOutcome {
    pub loss: f64,
    pub samples: usize,
}

impl<T: Scalar> SplitTrainer<T> {
    /// Every client starts from the same front.
    pub fn new(model: SplitModel<T>, clients: usize, learning_rate: T) -> Result<Self> {
        if clients == 0 {
            return Err(Error::Invalid("at least one client is required".into()));
        }
        Ok(SplitTrainer {
            fronts: vec![model.front; clients],
            back: model.back,
            learning_rate,
        })
    }

    pub fn clients(&self) -> usize {
        self.fronts.len()
    }

    pub fn front(&self, client: usize) -> &Model<T> {
        &self.fronts[client]
    }

    pub fn back(&self) -> &Model<T> {
        &self.back
    }

    /// The merged model as seen from client 0.
    pub fn model(&self) -> Result<Model<T>> {
        Model::join(self.fronts[0].clone(), self.back.clone())
    }

    /// One synchronous round. `batches[i]` is client `i`'s local batch.
    pub fn round(&mut self, round: u32, batches: &[ClientBatch<T>]) -> Result<RoundOutcome> {
        if batches.len() != self.fronts.len() {
            return Err(Error::Invalid(format!(
                "{} batches for {} clients",
                batches.len(),
                self.fronts.len()
            )));
        }
        let mut caches = Vec::new();
        let mut uploads = Vec::new();
        for (id, batch) in batches.iter().enumerate() {
            if let Some((x, y)) = batch {
                let (map, cache) = client_forward(&self.fronts[id], x, round)?;
                caches.push((id, cache));
                uploads.push(Contribution {
                    client_id: id as u32,
                    feature_map: map,
                    labels: y.clone(),
                });
            }
        }
        let result = server_round(&self.back, &uploads)?;
        self.back.apply_gradients(&result.back_grads, self.learning_rate)?;

        let total = result.total_batch();
        let mut per_client = Vec::with_capacity(caches.len());
        for ((id, cache), cut) in caches.iter().zip(&result.cut_grads) {
            let g = client_backward(&self.fronts[*id], cache, round, cut)?;
            per_client.push(local_mean_gradient(&g, cache.batch_size(), total));
        }
        let mut synced = self.fronts[0].clone();
        sync_front_weights(&mut synced, &per_client, &result.batch_sizes, self.learning_rate)?;
        for f in &mut self.fronts {
            f.clone_from(&synced);
        }
        Ok(RoundOutcome {
            loss: result.loss,
            samples: total,
        })
    }

    /// True when every client holds bit-identical front parameters.
    pub fn fronts_identical(&self) -> bool {
        let d = self.fronts[0].digest();
        self.fronts.iter().all(|f| f.digest() == d)
    }
}
