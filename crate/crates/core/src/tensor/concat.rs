use std::borrow::Borrow;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// (outer, axis, inner) extents of `shape` around `axis`.
fn extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Stacks `parts` along `axis` in the given order.
pub fn concat<T: Scalar, P: Borrow<Tensor<T>>>(parts: &[P], axis: usize) -> Result<Tensor<T>> {
    let parts: Vec<&Tensor<T>> = parts.iter().map(|p| p.borrow()).collect();
    let first = *parts
        .first()
        .ok_or_else(|| Error::dim("concat", "at least one part is required"))?;
    if axis >= first.ndim() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    for (i, p) in parts.iter().enumerate().skip(1) {
        let compatible = p.ndim() == first.ndim()
            && p
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(d, (a, b))| d == axis || a == b);
        if !compatible {
            return Err(Error::dim(
                "concat",
                format!(
                    "part {i} has shape {:?}, incompatible with part 0 {:?} along axis {axis}",
                    p.shape(),
                    first.shape()
                ),
            ));
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = extents(first.shape(), axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in &parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Inverse of [`concat`]: cuts `t` along `axis` into pieces of the given sizes.
pub fn split_axis<T: Scalar>(t: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= t.ndim() {
        return Err(Error::dim(
            "split_axis",
            format!("axis {axis} out of range for shape {:?}", t.shape()),
        ));
    }
    let total: usize = sizes.iter().sum();
    if total != t.shape()[axis] || sizes.contains(&0) {
        return Err(Error::dim(
            "split_axis",
            format!(
                "sizes {sizes:?} must be positive and sum to axis {axis} length {}",
                t.shape()[axis]
            ),
        ));
    }
    let (outer, len, inner) = extents(t.shape(), axis);
    let mut datas: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
    for o in 0..outer {
        let mut offset = o * len * inner;
        for (d, &s) in datas.iter_mut().zip(sizes) {
            d.extend_from_slice(&t.data()[offset..offset + s * inner]);
            offset += s * inner;
        }
    }
    Ok(datas
        .into_iter()
        .zip(sizes)
        .map(|(d, &s)| {
            let mut shape = t.shape().to_vec();
            shape[axis] = s;
            Tensor::from_parts(shape, d)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::testutil::random;

    #[test]
    fn batch_axis_shapes() {
        let parts = [
            Tensor::<f32>::zeros(&[2, 8, 62, 62]),
            Tensor::zeros(&[3, 8, 62, 62]),
            Tensor::zeros(&[1, 8, 62, 62]),
        ];
        assert_eq!(concat(&parts, 0).unwrap().shape(), &[6, 8, 62, 62]);
        let back = split_axis(&concat(&parts, 0).unwrap(), 0, &[2, 3, 1]).unwrap();
        assert_eq!(back.iter().map(|t| t.shape()[0]).collect::<Vec<_>>(), vec![2, 3, 1]);
    }

    #[test]
    fn single_part_identity() {
        let t = random::<f32>(&[2, 3], 1);
        assert_eq!(concat(std::slice::from_ref(&t), 1).unwrap(), t);
        assert_eq!(split_axis(&t, 1, &[3]).unwrap(), vec![t]);
    }

    #[test]
    fn incompatible_part_named() {
        let err = concat(&[Tensor::<f32>::zeros(&[1, 2]), Tensor::zeros(&[1, 2]), Tensor::zeros(&[1, 3])], 0)
            .unwrap_err();
        assert!(err.to_string().contains("part 2"), "{err}");
        assert!(concat::<f32, Tensor<f32>>(&[], 0).is_err());
    }

    #[test]
    fn split_size_mismatch() {
        let t = Tensor::<f32>::zeros(&[5, 2]);
        assert!(split_axis(&t, 0, &[2, 2]).is_err());
        assert!(split_axis(&t, 0, &[5, 0]).is_err());
    }

    #[test]
    fn middle_axis_order() {
        let a = Tensor::<f32>::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f32>::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(concat(&[a, b], 1).unwrap().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn concat_split_round_trip(
            dims in prop::collection::vec(1usize..4, 1..4),
            axis_pick in 0usize..4,
            sizes in prop::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
        ) {
            let axis = axis_pick % dims.len();
            let mut shape = dims.clone();
            shape[axis] = sizes.iter().sum();
            let t = random::<f32>(&shape, seed);
            let parts = split_axis(&t, axis, &sizes).unwrap();
            let joined = concat(&parts, axis).unwrap();
            prop_assert_eq!(joined.shape(), t.shape());
            let bits = |x: &Tensor<f32>| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&joined), bits(&t));
        }
    }
}
