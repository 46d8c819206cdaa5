use serde::{Deserialize, Serialize};

use super::{expect_rank, inner, Scalar, Tensor};
use crate::error::{Error, Result};

/// Geometry of a 2-D convolution with square stride and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Stride 1, no padding.
    pub fn simple(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvGeometry {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    /// Output spatial size `(h', w')` for an `h × w` input. Fails unless the
    /// stride divides the padded extent exactly.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 {
            return Err(Error::dim("conv2d", "stride must be >= 1"));
        }
        let axis = |extent: usize, k: usize, name: &str| -> Result<usize> {
            let padded = extent + 2 * self.padding;
            if padded < k || !(padded - k).is_multiple_of(self.stride) {
                return Err(Error::dim(
                    "conv2d",
                    format!(
                        "{name}: ({extent} + 2*{} - {k}) is not a non-negative multiple of stride {}",
                        self.padding, self.stride
                    ),
                ));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((axis(h, self.kernel_h, "height")?, axis(w, self.kernel_w, "width")?))
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

fn validate<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<(usize, usize)> {
    expect_rank(input, 4, "conv2d")?;
    expect_rank(kernels, 4, "conv2d")?;
    if kernels.shape() != geom.kernel_shape() {
        return Err(Error::dim(
            "conv2d",
            format!(
                "kernel shape {:?} does not match geometry {:?}",
                kernels.shape(),
                geom.kernel_shape()
            ),
        ));
    }
    if input.shape()[1] != geom.in_channels {
        return Err(Error::dim(
            "conv2d",
            format!(
                "input {:?} has {} channels but kernels {:?} expect {}",
                input.shape(),
                input.shape()[1],
                kernels.shape(),
                geom.in_channels
            ),
        ));
    }
    geom.output_hw(input.shape()[2], input.shape()[3])
}

/// Zero-pads one `h × w` plane by `p` on every side.
fn pad_plane<T: Scalar>(plane: &[T], h: usize, w: usize, p: usize) -> Vec<T> {
    let wp = w + 2 * p;
    let mut out = vec![T::zero(); (h + 2 * p) * wp];
    for y in 0..h {
        out[(y + p) * wp + p..(y + p) * wp + p + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
    }
    out
}

/// Returns each channel plane of sample `n`, padded if the geometry asks for it.
fn padded_planes<'a, T: Scalar>(
    input: &'a Tensor<T>,
    n: usize,
    p: usize,
) -> Vec<std::borrow::Cow<'a, [T]>> {
    let [_, c, h, w] = dims4(input);
    let sample = input.outer(n);
    (0..c)
        .map(|ci| {
            let plane = &sample[ci * h * w..(ci + 1) * h * w];
            if p == 0 {
                std::borrow::Cow::Borrowed(plane)
            } else {
                std::borrow::Cow::Owned(pad_plane(plane, h, w, p))
            }
        })
        .collect()
}

pub(crate) fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Cross-correlation (no kernel flip) plus per-filter bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (oh, ow) = validate(input, kernels, geom)?;
    if bias.shape() != [geom.out_channels] {
        return Err(Error::dim(
            "conv2d",
            format!("bias shape {:?} != [{}]", bias.shape(), geom.out_channels),
        ));
    }
    input.ensure_finite("conv2d_forward")?;
    let [n, c, _, w] = dims4(input);
    let (kh, kw, s, p) = (geom.kernel_h, geom.kernel_w, geom.stride, geom.padding);
    let wp = w + 2 * p;
    let f_count = geom.out_channels;
    let plane = oh * ow;
    let kdata = kernels.data();
    let mut out = vec![T::zero(); n * f_count * plane];

    for ni in 0..n {
        let planes = padded_planes(input, ni, p);
        for f in 0..f_count {
            let out_plane = &mut out[(ni * f_count + f) * plane..(ni * f_count + f + 1) * plane];
            out_plane.fill(bias.data()[f]);
            for (ci, src) in planes.iter().enumerate() {
                let kbase = ((f * c) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kdata[kbase + ky * kw + kx];
                        for oy in 0..oh {
                            let row = (oy * s + ky) * wp + kx;
                            let dst = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                for (d, &x) in dst.iter_mut().zip(&src[row..row + ow]) {
                                    *d += wgt * x;
                                }
                            } else {
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d += wgt * src[row + ox * s];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, f_count, oh, ow], out))
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<ConvGrads<T>> {
    let (gi, gk, gb) = conv2d_backward_impl(input, kernels, grad_out, geom, true)?;
    Ok(ConvGrads {
        input: gi.expect("input gradient requested"),
        kernels: gk,
        bias: gb,
    })
}

/// As [`conv2d_backward`], optionally skipping the input gradient (first layer).
pub(crate) fn conv2d_backward_impl<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: &ConvGeometry,
    want_input: bool,
) -> Result<super::BackwardParts<T>> {
    let (oh, ow) = validate(input, kernels, geom)?;
    let [n, c, h, w] = dims4(input);
    let f_count = geom.out_channels;
    let expected = [n, f_count, oh, ow];
    if grad_out.shape() != expected {
        return Err(Error::dim(
            "conv2d_backward",
            format!(
                "grad_out shape {:?} != forward output shape {expected:?}",
                grad_out.shape()
            ),
        ));
    }
    grad_out.ensure_finite("conv2d_backward")?;
    let (kh, kw, s, p) = (geom.kernel_h, geom.kernel_w, geom.stride, geom.padding);
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let plane = oh * ow;
    let kdata = kernels.data();
    let gdata = grad_out.data();

    let mut gk = vec![T::zero(); kernels.len()];
    let mut gb = vec![T::zero(); f_count];
    let mut gi = if want_input {
        vec![T::zero(); input.len()]
    } else {
        Vec::new()
    };
    let mut gpad = vec![T::zero(); hp * wp];

    for ni in 0..n {
        let planes = padded_planes(input, ni, p);
        for f in 0..f_count {
            let g = &gdata[(ni * f_count + f) * plane..(ni * f_count + f + 1) * plane];
            gb[f] += g.iter().fold(T::zero(), |a, &x| a + x);
            for (ci, src) in planes.iter().enumerate() {
                let kbase = ((f * c) + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let mut acc = T::zero();
                        for oy in 0..oh {
                            let row = (oy * s + ky) * wp + kx;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                acc += inner(grow, &src[row..row + ow]);
                            } else {
                                for (ox, &gv) in grow.iter().enumerate() {
                                    acc += gv * src[row + ox * s];
                                }
                            }
                        }
                        gk[kbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
        if want_input {
            for ci in 0..c {
                gpad.fill(T::zero());
                for f in 0..f_count {
                    let g = &gdata[(ni * f_count + f) * plane..(ni * f_count + f + 1) * plane];
                    let kbase = ((f * c) + ci) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = kdata[kbase + ky * kw + kx];
                            for oy in 0..oh {
                                let row = (oy * s + ky) * wp + kx;
                                let grow = &g[oy * ow..(oy + 1) * ow];
                                if s == 1 {
                                    for (d, &gv) in gpad[row..row + ow].iter_mut().zip(grow) {
                                        *d += wgt * gv;
                                    }
                                } else {
                                    for (ox, &gv) in grow.iter().enumerate() {
                                        gpad[row + ox * s] += wgt * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                let dst = &mut gi[((ni * c) + ci) * h * w..((ni * c) + ci + 1) * h * w];
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&gpad[(y + p) * wp + p..(y + p) * wp + p + w]);
                }
            }
        }
    }

    let gi = want_input.then(|| Tensor::from_parts(input.shape().to_vec(), gi));
    Ok((
        gi,
        Tensor::from_parts(kernels.shape().to_vec(), gk),
        Tensor::from_parts(vec![f_count], gb),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::*;

    /// Direct six-loop convolution, independent of the row-slice kernel above.
    fn naive_conv(input: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, g: &ConvGeometry) -> Tensor<f64> {
        let [n, c, h, w] = dims4(input);
        let (oh, ow) = g.output_hw(h, w).unwrap();
        let f = g.out_channels;
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data()[fi];
                        for ci in 0..c {
                            for ky in 0..g.kernel_h {
                                for kx in 0..g.kernel_w {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = input.data()[((ni * c + ci) * h + iy as usize) * w + ix as usize];
                                    let kv = k.data()[((fi * c + ci) * g.kernel_h + ky) * g.kernel_w + kx];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, f, oh, ow], out).unwrap()
    }

    #[test]
    fn sum_of_all_elements() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::full(&[1, 1, 2, 2], 1.0f32);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&x, &k, &b, &ConvGeometry::simple(1, 1, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = random::<f32>(&[2, 1, 5, 7], 1);
        let k = Tensor::full(&[1, 1, 1, 1], 1.0f32);
        let out = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), &ConvGeometry::simple(1, 1, 1)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn matches_naive_oracle() {
        let x = random::<f32>(&[2, 3, 8, 8], 7);
        let k = random::<f32>(&[4, 3, 3, 3], 8);
        let b = random::<f32>(&[4], 9);
        let g = ConvGeometry::simple(3, 4, 3);
        let fast = conv2d_forward(&x, &k, &b, &g).unwrap();
        let slow = naive_conv(&x.cast(), &k.cast(), &b.cast(), &g);
        assert!(fast.cast::<f64>().max_abs_diff(&slow).unwrap() < 1e-6);
    }

    #[test]
    fn matches_naive_oracle_with_stride_and_padding() {
        for (seed, (s, p, h)) in [(1, 0, 7), (2, 1, 7), (2, 0, 7), (3, 1, 7), (1, 2, 5)].into_iter().enumerate()
            .map(|(i, t)| (i as u64, t))
        {
            let g = ConvGeometry { in_channels: 2, out_channels: 3, kernel_h: 3, kernel_w: 3, stride: s, padding: p };
            let x = random::<f64>(&[2, 2, h, h], 100 + seed);
            let k = random::<f64>(&[3, 2, 3, 3], 200 + seed);
            let b = random::<f64>(&[3], 300 + seed);
            let fast = conv2d_forward(&x, &k, &b, &g).unwrap();
            let slow = naive_conv(&x, &k, &b, &g);
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-12, "s={s} p={p} h={h}");
        }
    }

    #[test]
    fn rejects_channel_mismatch_naming_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), &ConvGeometry::simple(3, 1, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn rejects_inexact_stride() {
        let g = ConvGeometry { stride: 2, ..ConvGeometry::simple(1, 1, 3) };
        assert!(g.output_hw(6, 6).is_err());
        assert_eq!(g.output_hw(7, 7).unwrap(), (3, 3));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let x = random::<f32>(&[2, 2, 5, 5], 3);
        let k = random::<f32>(&[3, 2, 3, 3], 4);
        let g = ConvGeometry::simple(2, 3, 3);
        let grads = conv2d_backward(&x, &k, &Tensor::zeros(&[2, 3, 3, 3]), &g).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernels.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_kernel_grad_is_channel_sum() {
        let x = random::<f64>(&[3, 2, 4, 4], 5);
        let k = random::<f64>(&[1, 2, 1, 1], 6);
        let g = ConvGeometry::simple(2, 1, 1);
        let grads = conv2d_backward(&x, &k, &Tensor::full(&[3, 1, 4, 4], 1.0), &g).unwrap();
        for c in 0..2 {
            let expected: f64 = (0..3).map(|n| x.outer(n)[c * 16..(c + 1) * 16].iter().sum::<f64>()).sum();
            assert!((grads.kernels.data()[c] - expected).abs() < 1e-12);
        }
        assert!((grads.bias.data()[0] - 48.0).abs() < 1e-12);
    }

    #[test]
    fn grad_out_shape_checked() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv2d_backward(&x, &k, &Tensor::zeros(&[1, 1, 3, 3]), &ConvGeometry::simple(1, 1, 3)).is_err());
    }

    fn check_fd(seed: u64, geom: ConvGeometry, n: usize, h: usize, w: usize) -> f64 {
        let x = random::<f64>(&[n, geom.in_channels, h, w], seed);
        let k = random::<f64>(&geom.kernel_shape(), seed + 1);
        let b = random::<f64>(&[geom.out_channels], seed + 2);
        let out = conv2d_forward(&x, &k, &b, &geom).unwrap();
        let wts = random::<f64>(out.shape(), seed + 3);
        let grads = conv2d_backward(&x, &k, &wts, &geom).unwrap();
        let eps = 1e-5;
        let nx = numeric_grad(&x, eps, |xx| dot(&conv2d_forward(xx, &k, &b, &geom).unwrap(), &wts));
        let nk = numeric_grad(&k, eps, |kk| dot(&conv2d_forward(&x, kk, &b, &geom).unwrap(), &wts));
        let nb = numeric_grad(&b, eps, |bb| dot(&conv2d_forward(&x, &k, bb, &geom).unwrap(), &wts));
        max_rel_err(grads.input.data(), &nx)
            .max(max_rel_err(grads.kernels.data(), &nk))
            .max(max_rel_err(grads.bias.data(), &nb))
    }

    #[test]
    fn finite_difference_seed_11() {
        let err = check_fd(11, ConvGeometry::simple(2, 3, 3), 2, 5, 6);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn finite_difference_randomized_geometries() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(2024);
        for trial in 0..100u64 {
            let k = rng.gen_range(1..=3);
            let s = rng.gen_range(1..=2);
            let p = rng.gen_range(0..=1);
            let mut h = rng.gen_range(k.max(2)..=6);
            while (h + 2 * p - k) % s != 0 {
                h += 1;
            }
            let geom = ConvGeometry {
                in_channels: rng.gen_range(1..=2),
                out_channels: rng.gen_range(1..=2),
                kernel_h: k,
                kernel_w: k,
                stride: s,
                padding: p,
            };
            let err = check_fd(500 + trial * 7, geom, rng.gen_range(1..=2), h, h);
            assert!(err < 1e-4, "trial {trial} {geom:?}: {err}");
        }
    }

    #[test]
    fn deterministic() {
        let x = random::<f32>(&[2, 3, 8, 8], 1);
        let k = random::<f32>(&[4, 3, 3, 3], 2);
        let b = random::<f32>(&[4], 3);
        let g = ConvGeometry::simple(3, 4, 3);
        let a = conv2d_forward(&x, &k, &b, &g).unwrap();
        let c = conv2d_forward(&x, &k, &b, &g).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
