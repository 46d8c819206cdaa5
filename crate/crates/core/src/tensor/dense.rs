use super::{expect_rank, inner, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn validate<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    expect_rank(input, 2, op)?;
    expect_rank(weights, 2, op)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (wd, k) = (weights.shape()[0], weights.shape()[1]);
    if d != wd {
        return Err(Error::dim(
            op,
            format!("input {:?} cannot multiply weights {:?}", input.shape(), weights.shape()),
        ));
    }
    Ok((n, d, k))
}

/// `input · weights + bias` with the bias broadcast over rows.
pub fn dense_forward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _, k) = validate(input, weights, "dense_forward")?;
    if bias.shape() != [k] {
        return Err(Error::dim(
            "dense_forward",
            format!("bias {:?} != [{k}]", bias.shape()),
        ));
    }
    input.ensure_finite("dense_forward")?;
    let w = weights.data();
    let mut out = Vec::with_capacity(n * k);
    for ni in 0..n {
        let mut row = bias.data().to_vec();
        for (di, &x) in input.outer(ni).iter().enumerate() {
            for (o, &wv) in row.iter_mut().zip(&w[di * k..(di + 1) * k]) {
                *o += x * wv;
            }
        }
        out.extend_from_slice(&row);
    }
    Ok(Tensor::from_parts(vec![n, k], out))
}

pub fn dense_backward<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, grad_out: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (gi, gw, gb) = dense_backward_impl(input, weights, grad_out, true)?;
    Ok(DenseGrads {
        input: gi.expect("input gradient requested"),
        weights: gw,
        bias: gb,
    })
}

pub(crate) fn dense_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<super::BackwardParts<T>> {
    let (n, d, k) = validate(input, weights, "dense_backward")?;
    if grad_out.shape() != [n, k] {
        return Err(Error::dim(
            "dense_backward",
            format!("grad_out {:?} != [{n}, {k}]", grad_out.shape()),
        ));
    }
    grad_out.ensure_finite("dense_backward")?;
    let w = weights.data();
    let mut gw = vec![T::zero(); d * k];
    let mut gb = vec![T::zero(); k];
    let mut gi = if want_input { Vec::with_capacity(n * d) } else { Vec::new() };
    for ni in 0..n {
        let g = grad_out.outer(ni);
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv;
        }
        for (di, &x) in input.outer(ni).iter().enumerate() {
            for (dst, &gv) in gw[di * k..(di + 1) * k].iter_mut().zip(g) {
                *dst += x * gv;
            }
        }
        if want_input {
            for di in 0..d {
                gi.push(inner(&w[di * k..(di + 1) * k], g));
            }
        }
    }
    let gi = want_input.then(|| Tensor::from_parts(vec![n, d], gi));
    Ok((gi, Tensor::from_parts(vec![d, k], gw), Tensor::from_parts(vec![k], gb)))
}
