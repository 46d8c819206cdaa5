//! Finite-difference verification of the hand-written backward passes.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::Rng;

use super::{bce_loss, squared_error_loss, Model};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, TAG_GRADCHECK};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    /// Mean squared error against the labels; for heads without a sigmoid.
    SquaredError,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Minimum number of parameters to probe; every tensor gets a share.
    pub min_samples: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            min_samples: 200,
            seed: 0,
            loss: LossKind::Bce,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (tensor index, flat index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    /// L2 norm of the full analytic gradient.
    pub grad_norm: f64,
}

/// Relative error with a floor on the denominator so that entries whose true
/// gradient is ~0 are judged by absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Max relative error between analytic and central-difference gradients over
/// a seeded sample of at least 200 parameters.
pub fn grad_check(model: &Model<f64>, batch: &Tensor<f64>, labels: &Tensor<f64>, eps: f64) -> Result<f64> {
    let opts = GradCheckOptions { eps, ..Default::default() };
    Ok(grad_check_with(model, batch, labels, &opts)?.max_rel_error)
}

pub fn grad_check_with(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    labels: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let loss_of = |m: &Model<f64>| -> Result<(f64, Tensor<f64>, super::ForwardCache<f64>)> {
        let (pred, cache) = m.forward(batch)?;
        let (loss, grad) = match opts.loss {
            LossKind::Bce => bce_loss(&pred, labels)?,
            LossKind::SquaredError => squared_error_loss(&pred, labels)?,
        };
        if !loss.is_finite() {
            return Err(Error::Numeric {
                op: "grad_check",
                detail: "loss is not finite".into(),
            });
        }
        Ok((loss, grad, cache))
    };

    let (_, grad_pred, cache) = loss_of(model)?;
    let analytic = model.backward(&cache, &grad_pred, false)?.params;
    let grad_norm = analytic
        .iter()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();

    let sizes: Vec<usize> = analytic.iter().map(|t| t.len()).collect();
    let probes = choose_probes(&sizes, opts.min_samples, derive_seed(opts.seed, &[TAG_GRADCHECK]));

    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        checked: probes.len(),
        grad_norm,
    };
    for &(t, i) in &probes {
        let original = work.params()[t].data()[i];
        let mut eval_at = |v: f64| -> Result<f64> {
            work.params_mut().nth(t).expect("tensor index").data_mut()[i] = v;
            Ok(loss_of(&work)?.0)
        };
        let plus = eval_at(original + opts.eps)?;
        let minus = eval_at(original - opts.eps)?;
        eval_at(original)?;
        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[t].data()[i];
        let rel = relative_error(a, numeric);
        report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (t, i);
        }
    }
    Ok(report)
}

/// Runs the gradient check over one small network per layer kind and over
/// the full [`small_vgg`](super::small_vgg) classifier, all in f64.
pub fn standard_checks(seed: u64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    use super::{small_vgg, Init, LayerSpec, INPUT_SHAPE};
    use crate::tensor::ConvGeometry;

    let mut rng = seeded(derive_seed(seed, &[TAG_GRADCHECK, 1]));
    let mut uniform = |shape: &[usize], lo: f64, hi: f64| -> Result<Tensor<f64>> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect())
    };
    let binary = |n: usize| Tensor::new(vec![n, 1], (0..n).map(|i| (i % 2) as f64).collect());

    let conv = ConvGeometry { stride: 2, padding: 1, ..ConvGeometry::simple(2, 3, 3) };
    let suites: Vec<(&'static str, Vec<LayerSpec>, Vec<usize>, LossKind)> = vec![
        (
            "conv(stride 2, pad 1) + dense + sigmoid",
            vec![
                LayerSpec::Conv(conv),
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 48, outputs: 1 },
                LayerSpec::Sigmoid,
            ],
            vec![2, 7, 7],
            LossKind::Bce,
        ),
        (
            "conv + relu + pad-to-even + maxpool + dense",
            vec![
                LayerSpec::Conv(ConvGeometry::simple(1, 2, 2)),
                LayerSpec::Relu,
                LayerSpec::PadToEven,
                LayerSpec::MaxPool2,
                LayerSpec::Flatten,
                LayerSpec::Dense { inputs: 18, outputs: 4 },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 4, outputs: 1 },
                LayerSpec::Sigmoid,
            ],
            vec![1, 6, 6],
            LossKind::Bce,
        ),
        (
            "dense (squared error)",
            vec![LayerSpec::Flatten, LayerSpec::Dense { inputs: 12, outputs: 1 }],
            vec![3, 4],
            LossKind::SquaredError,
        ),
        ("small_vgg", small_vgg(), INPUT_SHAPE.to_vec(), LossKind::Bce),
    ];
    let mut out = Vec::with_capacity(suites.len());
    for (k, (name, specs, shape, loss)) in suites.into_iter().enumerate() {
        let mut model = Model::build_with(&specs, &shape, seed.wrapping_add(k as u64), Init::HeUniform)?;
        // random biases keep pre-activations off the ReLU kink at exactly 0
        let params = model
            .params()
            .into_iter()
            .map(|p| if p.ndim() == 1 { uniform(p.shape(), -0.1, 0.1) } else { Ok(p.clone()) })
            .collect::<Result<Vec<_>>>()?;
        model.set_params(params)?;
        let n = if name == "small_vgg" { 2 } else { 3 };
        let mut batch_shape = vec![n];
        batch_shape.extend(&shape);
        let x = uniform(&batch_shape, 0.0, 1.0)?;
        let y = match loss {
            LossKind::Bce => binary(n)?,
            LossKind::SquaredError => uniform(&[n, 1], -1.0, 1.0)?,
        };
        let opts = GradCheckOptions { eps, seed, loss, ..Default::default() };
        out.push((name, grad_check_with(&model, &x, &y, &opts)?));
    }
    Ok(out)
}

/// Picks (tensor, index) pairs: an even share from every tensor, topped up
/// uniformly until `min_total` (or every parameter) is covered.
fn choose_probes(sizes: &[usize], min_total: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seeded(seed);
    let total: usize = sizes.iter().sum();
    let target = min_total.min(total);
    let share = min_total.div_ceil(sizes.len().max(1));
    let mut chosen = BTreeSet::new();
    for (t, &len) in sizes.iter().enumerate() {
        for i in sample(&mut rng, len, share.min(len)).into_iter() {
            chosen.insert((t, i));
        }
    }
    while chosen.len() < target {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        chosen.insert((t, flat));
    }
    chosen.into_iter().collect()
}
