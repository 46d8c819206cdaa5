use super::conv::dims4;
use super::{expect_rank, Scalar, Tensor};
use crate::error::{Error, Result};

/// Winning position (0..4, row-major within the 2×2 window) of each pooled output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub(crate) input_shape: [usize; 4],
    pub(crate) positions: Vec<u8>,
}

impl PoolIndices {
    pub fn positions(&self) -> &[u8] {
        &self.positions
    }
}

/// Non-overlapping 2×2 max pooling. Ties go to the lowest row-major position.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    expect_rank(input, 4, "maxpool2")?;
    let [n, c, h, w] = dims4(input);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(
            "maxpool2",
            format!("spatial dims of {:?} must be even", input.shape()),
        ));
    }
    input.ensure_finite("maxpool2_forward")?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut positions = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * w + 2 * ox;
                let window = [x[top], x[top + 1], x[top + w], x[top + w + 1]];
                let mut best = 0u8;
                for k in 1..4u8 {
                    if window[k as usize] > window[best as usize] {
                        best = k;
                    }
                }
                out.push(window[best as usize]);
                positions.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![n, c, oh, ow], out),
        PoolIndices {
            input_shape: [n, c, h, w],
            positions,
        },
    ))
}

/// Routes each upstream gradient to the recorded window position.
pub fn maxpool2_backward<T: Scalar>(grad_out: &Tensor<T>, indices: &PoolIndices) -> Result<Tensor<T>> {
    let [n, c, h, w] = indices.input_shape;
    let expected = [n, c, h / 2, w / 2];
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "maxpool2_backward",
            format!("grad_out {:?} != pooled shape {expected:?}", grad_out.shape()),
        ));
    }
    if indices.positions.len() != grad_out.len() {
        return Err(Error::Corrupt {
            op: "maxpool2_backward",
            detail: format!(
                "{} recorded positions for {} outputs",
                indices.positions.len(),
                grad_out.len()
            ),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut gi = vec![T::zero(); n * c * h * w];
    let g = grad_out.data();
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                let pos = indices.positions[o] as usize;
                if pos > 3 {
                    return Err(Error::Corrupt {
                        op: "maxpool2_backward",
                        detail: format!("window position {pos} out of range at output {o}"),
                    });
                }
                let target = plane * h * w + (2 * oy + pos / 2) * w + 2 * ox + pos % 2;
                gi[target] = g[o];
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], gi))
}

/// Zero-pads the bottom row and/or right column so both spatial dims are even.
pub fn pad_to_even<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 4, "pad_to_even")?;
    let [n, c, h, w] = dims4(input);
    let (ph, pw) = (h + h % 2, w + w % 2);
    if (ph, pw) == (h, w) {
        return Ok(input.clone());
    }
    let mut out = vec![T::zero(); n * c * ph * pw];
    let x = input.data();
    for plane in 0..n * c {
        for y in 0..h {
            let src = &x[(plane * h + y) * w..(plane * h + y + 1) * w];
            out[(plane * ph + y) * pw..(plane * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, ph, pw], out))
}

/// Crops a padded gradient back to the original `[.., h, w]` extent.
pub fn pad_to_even_backward<T: Scalar>(grad_out: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    expect_rank(grad_out, 4, "pad_to_even_backward")?;
    let [n, c, ph, pw] = dims4(grad_out);
    if ph != h + h % 2 || pw != w + w % 2 {
        return Err(Error::dim(
            "pad_to_even_backward",
            format!("grad {:?} is not the even padding of {h}x{w}", grad_out.shape()),
        ));
    }
    if (ph, pw) == (h, w) {
        return Ok(grad_out.clone());
    }
    let g = grad_out.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            out.extend_from_slice(&g[(plane * ph + y) * pw..(plane * ph + y) * pw + w]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    #[test]
    fn single_window() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, idx) = maxpool2_forward(&x).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx.positions(), &[3]);
    }

    #[test]
    fn constant_input_ties_to_first() {
        let x = Tensor::full(&[2, 3, 4, 6], 0.75f32);
        let (out, idx) = maxpool2_forward(&x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.75));
        assert!(idx.positions().iter().all(|&p| p == 0));
    }

    #[test]
    fn odd_dims_rejected() {
        assert!(maxpool2_forward(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn matches_window_scan() {
        let x = random::<f32>(&[1, 2, 6, 6], 3);
        let (out, idx) = maxpool2_forward(&x).unwrap();
        for c in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_pos = 0;
                    for (pos, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                        let v = x.data()[c * 36 + (2 * oy + dy) * 6 + 2 * ox + dx];
                        if v > best {
                            best = v;
                            best_pos = pos as u8;
                        }
                    }
                    let o = c * 9 + oy * 3 + ox;
                    assert_eq!(out.data()[o], best);
                    assert_eq!(idx.positions()[o], best_pos);
                }
            }
        }
    }

    #[test]
    fn backward_routes_to_argmax() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, idx) = maxpool2_forward(&x).unwrap();
        let g = maxpool2_backward(&Tensor::full(&[1, 1, 1, 1], 1.0f32), &idx).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 0.0, 1.0]);
        let z = maxpool2_backward(&Tensor::<f32>::zeros(&[1, 1, 1, 1]), &idx).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_conserves_mass() {
        for seed in 0..20 {
            let x = random::<f32>(&[2, 3, 6, 8], seed);
            let (out, idx) = maxpool2_forward(&x).unwrap();
            let g = random::<f32>(out.shape(), seed + 50);
            let gi = maxpool2_backward(&g, &idx).unwrap();
            // every upstream value lands in exactly one slot, so the multisets match
            let mut a: Vec<u32> = g.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = gi.data().iter().filter(|v| **v != 0.0).map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
            let total = |t: &Tensor<f32>| t.data().iter().map(|&v| v as f64).sum::<f64>();
            assert_eq!(total(&g), total(&gi));
        }
    }

    #[test]
    fn corrupt_index_rejected() {
        let x = random::<f32>(&[1, 1, 2, 2], 1);
        let (_, mut idx) = maxpool2_forward(&x).unwrap();
        idx.positions[0] = 7;
        let err = maxpool2_backward(&Tensor::<f32>::zeros(&[1, 1, 1, 1]), &idx).unwrap_err();
        assert!(matches!(err, Error::Corrupt { .. }));
    }

    #[test]
    fn pad_to_even_and_crop() {
        let x = random::<f64>(&[2, 2, 3, 5], 4);
        let p = pad_to_even(&x).unwrap();
        assert_eq!(p.shape(), &[2, 2, 4, 6]);
        assert_eq!(p.sum(), x.sum());
        let back = pad_to_even_backward(&p, 3, 5).unwrap();
        assert_eq!(back, x);
        let even = random::<f64>(&[1, 1, 4, 4], 5);
        assert_eq!(pad_to_even(&even).unwrap(), even);
    }
}
