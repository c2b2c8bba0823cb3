use std::ops::Range;

use ndarray::{Array2, ArrayD, Axis, Ix2, IxDyn, Slice, Zip};

use super::{Float, Var};

/// Sums a broadcast gradient back down to `shape`.
pub(crate) fn sum_to<T: Float>(g: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut g = g.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(da == db || da == 1 || db == 1, "cannot broadcast {a:?} with {b:?}");
            da.max(db)
        })
        .collect()
}

fn zip_broadcast<T: Float>(a: &ArrayD<T>, b: &ArrayD<T>, f: impl Fn(T, T) -> T) -> ArrayD<T> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcastable");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcastable");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl<'t, T: Float> Var<'t, T> {
    pub fn add(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x + y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(out, &[self, rhs], move |g, needs| {
            vec![needs[0].then(|| sum_to(g, &sa)), needs[1].then(|| sum_to(g, &sb))]
        })
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x - y);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.tape.push_op(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| sum_to(g, &sa)),
                needs[1].then(|| sum_to(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = zip_broadcast(&a, &b, |x, y| x * y);
        self.tape.push_op(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| sum_to(&zip_broadcast(g, &b, |x, y| x * y), a.shape())),
                needs[1].then(|| sum_to(&zip_broadcast(g, &a, |x, y| x * y), b.shape())),
            ]
        })
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let k = T::of(factor);
        let out = self.value().mapv(|v| v * k);
        self.tape.push_op(out, &[self], move |g, _| vec![Some(g.mapv(|v| v * k))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of(c);
        let out = self.value().mapv(|v| v + c);
        self.tape.push_op(out, &[self], move |g, _| vec![Some(g.clone())])
    }

    pub fn relu(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*a).for_each(|d, &x| {
                if x <= T::zero() {
                    *d = T::zero()
                }
            });
            vec![Some(d)]
        })
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let out = self.value().mapv(|v| T::one() / (T::one() + (-v).exp()));
        let y = out.clone();
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&y).for_each(|d, &y| *d = *d * y * (T::one() - y));
            vec![Some(d)]
        })
    }

    pub fn abs(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.mapv(|v| v.abs());
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            Zip::from(&mut d).and(&*a).for_each(|d, &x| {
                *d = if x > T::zero() {
                    *d
                } else if x < T::zero() {
                    -*d
                } else {
                    T::zero()
                }
            });
            vec![Some(d)]
        })
    }

    pub fn square(self) -> Var<'t, T> {
        let a = self.value();
        let out = a.mapv(|v| v * v);
        self.tape.push_op(out, &[self], move |g, _| {
            let two = T::of(2.0);
            let mut d = g.clone();
            Zip::from(&mut d).and(&*a).for_each(|d, &x| *d = *d * two * x);
            vec![Some(d)]
        })
    }

    pub fn sum(self) -> Var<'t, T> {
        let a = self.value();
        let out = ArrayD::from_elem(IxDyn(&[]), a.sum());
        let dim = a.raw_dim();
        self.tape
            .push_op(out, &[self], move |g, _| vec![Some(ArrayD::from_elem(dim.clone(), g[IxDyn(&[])]))])
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Var<'t, T> {
        let a = self.value();
        let out = a.sum_axis(Axis(axis));
        let dim = a.raw_dim();
        self.tape.push_op(out, &[self], move |g, _| {
            let expanded = g.clone().insert_axis(Axis(axis));
            vec![Some(expanded.broadcast(dim.clone()).expect("broadcast back").to_owned())]
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let a = self.value();
        let old = a.shape().to_vec();
        let out = a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {old:?} -> {shape:?}: {e}"));
        self.tape.push_op(out, &[self], move |g, _| {
            let g = g.as_standard_layout().into_owned();
            vec![Some(g.into_shape_with_order(IxDyn(&old)).expect("reshape back"))]
        })
    }

    /// 2-D matrix product.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs must be 2-D");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs must be 2-D");
        let out = a2.dot(&b2).into_dyn();
        self.tape.push_op(out, &[self, rhs], move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
            let a2 = a.view().into_dimensionality::<Ix2>().expect("2-D");
            let b2 = b.view().into_dimensionality::<Ix2>().expect("2-D");
            vec![
                needs[0].then(|| g2.dot(&b2.t()).into_dyn()),
                needs[1].then(|| a2.t().dot(&g2).into_dyn()),
            ]
        })
    }

    /// Softmax over the last axis. Entries equal to `-inf` receive zero mass.
    pub fn softmax(self) -> Var<'t, T> {
        let a = self.value();
        let last = a.ndim() - 1;
        let mut out = a.as_ref().clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            lane.mapv_inplace(|v| (v - max).exp());
            let total = lane.sum();
            lane.mapv_inplace(|v| v / total);
        }
        let y = out.clone();
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = g.clone();
            for (mut dl, yl) in d.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                let dot: T = dl.iter().zip(yl.iter()).map(|(&g, &y)| g * y).sum();
                Zip::from(&mut dl).and(&yl).for_each(|d, &y| *d = y * (*d - dot));
            }
            vec![Some(d)]
        })
    }

    /// Contiguous range along one axis.
    pub fn slice_axis(self, axis: usize, range: Range<usize>) -> Var<'t, T> {
        let a = self.value();
        let dim = a.raw_dim();
        let out = a
            .slice_axis(Axis(axis), Slice::from(range.start as isize..range.end as isize))
            .to_owned();
        self.tape.push_op(out, &[self], move |g, _| {
            let mut d = ArrayD::zeros(dim.clone());
            d.slice_axis_mut(Axis(axis), Slice::from(range.start as isize..range.end as isize))
                .assign(g);
            vec![Some(d)]
        })
    }

    /// Row lookup: `self` is a `[rows, width]` table, output is `[ids.len(), width]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'t, T> {
        let table = self.value();
        let t2 = table.view().into_dimensionality::<Ix2>().expect("table must be 2-D");
        let width = t2.ncols();
        let mut out = Array2::zeros((ids.len(), width));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(id));
        }
        let ids = ids.to_vec();
        let rows = t2.nrows();
        self.tape.push_op(out.into_dyn(), &[self], move |g, _| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("2-D grad");
            let mut d = Array2::<T>::zeros((rows, width));
            for (r, &id) in ids.iter().enumerate() {
                let mut row = d.row_mut(id);
                row += &g2.row(r);
            }
            vec![Some(d.into_dyn())]
        })
    }
}

/// Concatenates along `axis`.
pub fn concat<'t, T: Float>(parts: &[Var<'t, T>], axis: usize) -> Var<'t, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
    let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    parts[0].tape.push_op(out, parts, move |g, needs| {
        let mut start = 0;
        sizes
            .iter()
            .zip(needs)
            .map(|(&len, &need)| {
                let piece = need.then(|| {
                    g.slice_axis(Axis(axis), Slice::from(start as isize..(start + len) as isize))
                        .to_owned()
                });
                start += len;
                piece
            })
            .collect()
    })
}
