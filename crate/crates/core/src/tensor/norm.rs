use ndarray::{ArrayD, Axis};

use super::{Float, Var};

/// Per-sample, per-channel standardization over all trailing (spatial) axes.
///
/// Uses the biased variance and adds `eps` under the square root. There is no
/// affine part; callers apply their own scale and shift.
pub fn instance_norm<'t, T: Float>(x: Var<'t, T>, eps: f64) -> Var<'t, T> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    assert!(shape.len() >= 3, "instance_norm expects [n, c, spatial..], got {shape:?}");
    let rows = shape[0] * shape[1];
    let per = xv.len() / rows.max(1);
    let flat = xv
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows, per))
        .expect("contiguous");
    let eps = T::of(eps);
    let n = T::of(per as f64);

    let mut y = flat.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for mut row in y.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    let out = y.clone().into_shape_with_order(ndarray::IxDyn(&shape)).expect("same size").into_dyn();

    x.tape().push_op(out, &[x], move |g, _| {
        let g2 = g
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((rows, per))
            .expect("contiguous");
        let mut dx = g2.clone();
        for ((mut d, yr), &inv) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(&inv_std) {
            let mean_g = d.sum() / n;
            let mean_gy = d.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
            for (dv, &yv) in d.iter_mut().zip(yr.iter()) {
                *dv = inv * (*dv - mean_g - yv * mean_gy);
            }
        }
        vec![Some(ArrayD::from_shape_vec(shape.clone(), dx.into_raw_vec_and_offset().0).expect("shape"))]
    })
}
