use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn sigmoid<T: Scalar>(x: T) -> T {
    // branch on sign so exp never overflows
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    input.ensure_finite("activation")?;
    Ok(match kind {
        Activation::Relu => input.map(|x| if x > T::zero() { x } else { T::zero() }),
        Activation::Sigmoid => input.map(sigmoid),
    })
}

/// Gradient through an activation. ReLU uses the forward input (relu'(0) = 0);
/// sigmoid uses the forward output `s` via `s(1 - s)`.
pub fn activation_backward<T: Scalar>(
    kind: Activation,
    forward_input: &Tensor<T>,
    forward_output: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.shape() != forward_input.shape() || forward_output.shape() != forward_input.shape() {
        return Err(Error::dim(
            "activation_backward",
            format!(
                "grad {:?} vs forward {:?}",
                grad_out.shape(),
                forward_input.shape()
            ),
        ));
    }
    grad_out.ensure_finite("activation_backward")?;
    let g = grad_out.data();
    let data: Vec<T> = match kind {
        Activation::Relu => forward_input
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
            .collect(),
        Activation::Sigmoid => forward_output
            .data()
            .iter()
            .zip(g)
            .map(|(&s, &gv)| gv * s * (T::one() - s))
            .collect(),
    };
    Ok(Tensor::from_parts(grad_out.shape().to_vec(), data))
}
