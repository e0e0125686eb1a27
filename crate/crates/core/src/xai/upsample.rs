//! Trilinear upsampling of layer-grid maps onto the input grid
//! (corner-aligned).

use crate::tensor::{Scalar, Tensor};

/// Resize a `(D, H, W)` tensor to `out_dims` with corner-aligned trilinear
/// interpolation.
pub fn trilinear_upsample<T: Scalar>(values: &Tensor<T>, out_dims: [usize; 3]) -> Tensor<T> {
    let shape = values.shape();
    assert_eq!(shape.len(), 3, "expected a (D,H,W) map");
    let in_dims = [shape[0], shape[1], shape[2]];
    if in_dims == out_dims {
        return values.clone();
    }
    let data = values.data();
    let src_coord = |o: usize, out_e: usize, in_e: usize| -> f64 {
        if out_e <= 1 || in_e <= 1 {
            0.0
        } else {
            o as f64 * (in_e as f64 - 1.0) / (out_e as f64 - 1.0)
        }
    };
    let at = |z: usize, y: usize, x: usize| -> f64 {
        data[(z * in_dims[1] + y) * in_dims[2] + x].as_f64()
    };
    let mut out = Vec::with_capacity(out_dims.iter().product());
    for oz in 0..out_dims[0] {
        let fz = src_coord(oz, out_dims[0], in_dims[0]);
        let z0 = fz.floor() as usize;
        let z1 = (z0 + 1).min(in_dims[0] - 1);
        let tz = fz - z0 as f64;
        for oy in 0..out_dims[1] {
            let fy = src_coord(oy, out_dims[1], in_dims[1]);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(in_dims[1] - 1);
            let ty = fy - y0 as f64;
            for ox in 0..out_dims[2] {
                let fx = src_coord(ox, out_dims[2], in_dims[2]);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(in_dims[2] - 1);
                let tx = fx - x0 as f64;
                let v = at(z0, y0, x0) * (1.0 - tz) * (1.0 - ty) * (1.0 - tx)
                    + at(z1, y0, x0) * tz * (1.0 - ty) * (1.0 - tx)
                    + at(z0, y1, x0) * (1.0 - tz) * ty * (1.0 - tx)
                    + at(z0, y0, x1) * (1.0 - tz) * (1.0 - ty) * tx
                    + at(z1, y1, x0) * tz * ty * (1.0 - tx)
                    + at(z1, y0, x1) * tz * (1.0 - ty) * tx
                    + at(z0, y1, x1) * (1.0 - tz) * ty * tx
                    + at(z1, y1, x1) * tz * ty * tx;
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::from_vec(out_dims.to_vec(), out).expect("shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_when_same_size() {
        let t = Tensor::<f64>::from_fn(vec![2, 3, 4], |i| i as f64);
        let u = trilinear_upsample(&t, [2, 3, 4]);
        assert_eq!(u.data(), t.data());
    }

    #[test]
    fn corners_align() {
        let t = Tensor::<f64>::from_vec(
            vec![2, 2, 2],
            vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0],
        )
        .unwrap();
        let u = trilinear_upsample(&t, [4, 4, 4]);
        assert_eq!(u.data()[0], 0.0);
        assert_eq!(u.data()[63], 7.0);
        // center is the mean of all corners for a linear field
        let center: f64 = (0..8).map(|i| i as f64).sum::<f64>() / 8.0;
        let mid =
            (u.data()[21] + u.data()[22] + u.data()[25] + u.data()[26] + u.data()[37]
                + u.data()[38] + u.data()[41] + u.data()[42])
                / 8.0;
        assert!((mid - center).abs() < 1e-12);
    }

    #[test]
    fn constant_stays_constant() {
        let t = Tensor::<f64>::full(vec![2, 2, 2], 3.5);
        let u = trilinear_upsample(&t, [5, 7, 3]);
        assert!(u.data().iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }
}
