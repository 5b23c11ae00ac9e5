//! Differentiable operations recorded on the tape.
//!
//! Binary ops broadcast numpy-style (right-aligned). Each op validates
//! shapes up front so failures carry the op name rather than an index
//! panic from deep inside a kernel.

use super::graph::{GradSink, Graph, Var};
use super::{Result, Scalar, Tensor, TensorError};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("cannot broadcast {a:?} with {b:?}"),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Per-dimension element strides into `shape` aligned to `out`, with 0 for
/// broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let offset = nd - shape.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// out[i] = f(a[map(i)], b[map(i)]) over the broadcast iteration space.
fn zip_broadcast<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let ad = a.data();
    let bd = b.data();
    let nd = out_shape.len();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(ad[ia], bd[ib]));
        for d in (0..nd).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum `grad` (shaped `out_shape`) down to `target` by collapsing broadcast
/// dimensions.
fn reduce_to<T: Scalar>(grad: &[T], out_shape: &[usize], target: &[usize]) -> Tensor<T> {
    if out_shape == target {
        return Tensor::from_vec(grad.to_vec(), target).expect("same shape");
    }
    let n: usize = out_shape.iter().product();
    let st = broadcast_strides(target, out_shape);
    let tn: usize = target.iter().product();
    let mut acc = vec![T::zero(); tn];
    let nd = out_shape.len();
    let mut coords = vec![0usize; nd];
    let mut it = 0usize;
    for g in grad.iter().take(n) {
        acc[it] += *g;
        for d in (0..nd).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * out_shape[d];
        }
    }
    Tensor::from_vec(acc, target).expect("reduced shape")
}

fn permute_axes_of(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    axes.iter().map(|&a| shape[a]).collect()
}

fn permute_data<T: Scalar>(t: &Tensor<T>, axes: &[usize]) -> Vec<T> {
    let shape = t.shape();
    let nd = shape.len();
    let out_shape = permute_axes_of(shape, axes);
    let mut in_strides = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        in_strides[d] = acc;
        acc *= shape[d];
    }
    // Stride of output dimension d in the input buffer.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = t.numel();
    let data = t.data();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; nd];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(data[src]);
        for d in (0..nd).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= strides[d] * out_shape[d];
        }
    }
    out
}

/// C[m,n] += A[m,k] @ B[k,n], all row-major contiguous.
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    beta: T,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A[m,k] @ B^T where B is [n,k] row-major.
fn gemm_bt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b_t: &[T], c: &mut [T], beta: T) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b_t.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] += A^T @ B where A is [k,m] row-major and B is [k,n].
fn gemm_at<T: Scalar>(m: usize, k: usize, n: usize, a_t: &[T], b: &[T], c: &mut [T], beta: T) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a_t.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<T: Scalar> Graph<T> {
    fn binary_op(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: fn(T, T) -> T,
        // (grad, a_val, b_val) -> (da_full, db_full) over the broadcast space
        dfa: fn(T, T, T) -> T,
        dfb: fn(T, T, T) -> T,
    ) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out_shape = broadcast_shape(op, av.shape(), bv.shape())?;
        let data = zip_broadcast(&av, &bv, &out_shape, f);
        let value = Tensor::from_vec(data, &out_shape)?;
        let rg = self.any_requires_grad(&[a, b]);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let back = if rg {
            let os = out_shape.clone();
            Some(Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                if rga {
                    let full = zip_broadcast(&av, &bv, &os, |x, y| dfa(T::one(), x, y));
                    let prod: Vec<T> = full
                        .iter()
                        .zip(grad.data())
                        .map(|(d, g)| *d * *g)
                        .collect();
                    sink.add(a, reduce_to(&prod, &os, av.shape()));
                }
                if rgb {
                    let full = zip_broadcast(&av, &bv, &os, |x, y| dfb(T::one(), x, y));
                    let prod: Vec<T> = full
                        .iter()
                        .zip(grad.data())
                        .map(|(d, g)| *d * *g)
                        .collect();
                    sink.add(b, reduce_to(&prod, &os, bv.shape()));
                }
            }) as super::graph::BackFn<T>)
        } else {
            None
        };
        self.push(op, value, rg, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("add", a, b, |x, y| x + y, |g, _, _| g, |g, _, _| g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("sub", a, b, |x, y| x - y, |g, _, _| g, |g, _, _| -g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_op("mul", a, b, |x, y| x * y, |g, _, y| g * y, |g, x, _| g * x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x * cv);
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                sink.add(a, grad.map(|g| g * cv));
            }) as super::graph::BackFn<T>
        });
        self.push("scale", value, rg, back)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let cv = T::from_f64(c);
        let value = self.value(a).map(|x| x + cv);
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                sink.add(a, grad.clone());
            }) as super::graph::BackFn<T>
        });
        self.push("add_scalar", value, rg, back)
    }

    fn unary_op(
        &mut self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        // local derivative as a function of the input value
        df: impl Fn(T) -> T + 'static,
    ) -> Result<Var> {
        let av = self.value(a).clone();
        let value = av.map(&f);
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let data: Vec<T> = av
                    .data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&x, &g)| g * df(x))
                    .collect();
                sink.add(a, Tensor::from_vec(data, av.shape()).expect("unary grad"));
            }) as super::graph::BackFn<T>
        });
        self.push(op, value, rg, back)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary_op(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary_op(
            "abs",
            a,
            |x| x.abs(),
            |x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary_op("sigmoid", a, sigmoid_val, |x| {
            let s = sigmoid_val(x);
            s * (T::one() - s)
        })
    }

    /// softplus(x) = ln(1 + e^x), evaluated in overflow-safe form.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary_op(
            "softplus",
            a,
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            sigmoid_val,
        )
    }

    /// Tanh-form GELU used on the transformer paths.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary_op("gelu", a, gelu_val, gelu_grad)
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (asp, bsp) = (av.shape(), bv.shape());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{asp:?} @ {bsp:?}"),
            });
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        self.count("matmul", (m * k * n) as u64);
        let mut c = vec![T::zero(); m * n];
        gemm_acc(m, k, n, av.data(), bv.data(), &mut c, T::zero());
        let value = Tensor::from_vec(c, &[m, n])?;
        let rg = self.any_requires_grad(&[a, b]);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                if rga {
                    // dA = dC @ B^T
                    let mut da = vec![T::zero(); m * k];
                    gemm_bt(m, n, k, grad.data(), bv.data(), &mut da, T::zero());
                    sink.add(a, Tensor::from_vec(da, &[m, k]).expect("dA"));
                }
                if rgb {
                    // dB = A^T @ dC
                    let mut db = vec![T::zero(); k * n];
                    gemm_at(k, m, n, av.data(), grad.data(), &mut db, T::zero());
                    sink.add(b, Tensor::from_vec(db, &[k, n]).expect("dB"));
                }
            }) as super::graph::BackFn<T>
        });
        self.push("matmul", value, rg, back)
    }

    /// Batched matrix product `[B,m,k] @ [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a).clone(), self.value(b).clone());
        let (asp, bsp) = (av.shape(), bv.shape());
        if asp.len() != 3 || bsp.len() != 3 || asp[0] != bsp[0] || asp[2] != bsp[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                detail: format!("{asp:?} @ {bsp:?}"),
            });
        }
        let (bt, m, k, n) = (asp[0], asp[1], asp[2], bsp[2]);
        self.count("bmm", (bt * m * k * n) as u64);
        let mut c = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            gemm_acc(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let value = Tensor::from_vec(c, &[bt, m, n])?;
        let rg = self.any_requires_grad(&[a, b]);
        let (rga, rgb) = (self.requires_grad(a), self.requires_grad(b));
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                if rga {
                    let mut da = vec![T::zero(); bt * m * k];
                    for i in 0..bt {
                        gemm_bt(
                            m,
                            n,
                            k,
                            &grad.data()[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    sink.add(a, Tensor::from_vec(da, &[bt, m, k]).expect("dA"));
                }
                if rgb {
                    let mut db = vec![T::zero(); bt * k * n];
                    for i in 0..bt {
                        gemm_at(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &grad.data()[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            T::zero(),
                        );
                    }
                    sink.add(b, Tensor::from_vec(db, &[bt, k, n]).expect("dB"));
                }
            }) as super::graph::BackFn<T>
        });
        self.push("bmm", value, rg, back)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a).clone();
        let value = av.reshaped(shape)?;
        let rg = self.requires_grad(a);
        let in_shape = av.shape().to_vec();
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                sink.add(a, grad.reshaped(&in_shape).expect("reshape grad"));
            }) as super::graph::BackFn<T>
        });
        self.push("reshape", value, rg, back)
    }

    /// Reorder axes; the backward pass applies the inverse permutation.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let av = self.value(a).clone();
        let nd = av.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&x| x >= nd || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                detail: format!("axes {axes:?} invalid for rank {nd}"),
            });
        }
        let out_shape = permute_axes_of(av.shape(), axes);
        let data = permute_data(&av, axes);
        let value = Tensor::from_vec(data, &out_shape)?;
        let rg = self.requires_grad(a);
        let mut inverse = vec![0usize; nd];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let g = permute_data(grad, &inverse);
                let shape = permute_axes_of(grad.shape(), &inverse);
                sink.add(a, Tensor::from_vec(g, &shape).expect("permute grad"));
            }) as super::graph::BackFn<T>
        });
        self.push("permute", value, rg, back)
    }

    /// Swap the last two axes of a rank >= 2 tensor.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let nd = self.shape(a).len();
        if nd < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("rank {nd} < 2"),
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let first = self.value(parts[0]).shape().to_vec();
        let nd = first.len();
        if axis >= nd {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                detail: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        let mut axis_total = 0usize;
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != nd
                || s.iter()
                    .enumerate()
                    .any(|(d, &v)| d != axis && v != first[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{s:?} vs {first:?} on axis {axis}"),
                });
            }
            sizes.push(s[axis]);
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        let mut offset = 0usize;
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        for (v, &sz) in values.iter().zip(&sizes) {
            let block = sz * inner;
            for o in 0..outer {
                let dst = o * axis_total * inner + offset * inner;
                data[dst..dst + block].copy_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
            offset += sz;
        }
        let value = Tensor::from_vec(data, &out_shape)?;
        let rg = self.any_requires_grad(parts);
        let part_vars = parts.to_vec();
        let need: Vec<bool> = parts.iter().map(|&p| self.requires_grad(p)).collect();
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let mut offset = 0usize;
                for ((&p, &sz), &needs) in part_vars.iter().zip(&sizes).zip(&need) {
                    if needs {
                        let block = sz * inner;
                        let mut g = vec![T::zero(); outer * block];
                        for o in 0..outer {
                            let src = o * axis_total * inner + offset * inner;
                            g[o * block..(o + 1) * block]
                                .copy_from_slice(&grad.data()[src..src + block]);
                        }
                        let mut shape = first.clone();
                        shape[axis] = sz;
                        sink.add(p, Tensor::from_vec(g, &shape).expect("concat grad"));
                    }
                    offset += sz;
                }
            }) as super::graph::BackFn<T>
        });
        self.push("concat", value, rg, back)
    }

    /// Numerically stabilized softmax along `axis`; slices sum to one.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a).clone();
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {axis} out of range for {shape:?}"),
            });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::zero(); av.numel()];
        let src = av.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = T::neg_infinity();
                for s in 0..axis_len {
                    mx = mx.max(src[base + s * inner]);
                }
                let mut total = T::zero();
                for s in 0..axis_len {
                    let e = (src[base + s * inner] - mx).exp();
                    data[base + s * inner] = e;
                    total += e;
                }
                for s in 0..axis_len {
                    data[base + s * inner] /= total;
                }
            }
        }
        let value = Tensor::from_vec(data, &shape)?;
        let out = value.clone();
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                // ds_i = s_i * (g_i - sum_j g_j s_j) per slice
                let s = out.data();
                let g = grad.data();
                let mut dx = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dot += g[idx] * s[idx];
                        }
                        for k in 0..axis_len {
                            let idx = base + k * inner;
                            dx[idx] = s[idx] * (g[idx] - dot);
                        }
                    }
                }
                sink.add(a, Tensor::from_vec(dx, out.shape()).expect("softmax grad"));
            }) as super::graph::BackFn<T>
        });
        self.push("softmax", value, rg, back)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine
    /// part). Layer and group normalization are built on top of this.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a).clone();
        let shape = av.shape().to_vec();
        let d = *shape.last().ok_or(TensorError::ShapeMismatch {
            op: "normalize_rows",
            detail: "rank 0".into(),
        })?;
        let rows = av.numel() / d;
        let epsv = T::from_f64(eps);
        let src = av.data();
        let mut data = vec![T::zero(); av.numel()];
        let mut inv_std = vec![T::zero(); rows];
        let dn = T::from_f64(d as f64);
        for r in 0..rows {
            let s = &src[r * d..(r + 1) * d];
            let mut mean = T::zero();
            for &x in s {
                mean += x;
            }
            mean /= dn;
            let mut var = T::zero();
            for &x in s {
                let c = x - mean;
                var += c * c;
            }
            var /= dn;
            let istd = (var + epsv).sqrt().recip();
            inv_std[r] = istd;
            for (j, &x) in s.iter().enumerate() {
                data[r * d + j] = (x - mean) * istd;
            }
        }
        let value = Tensor::from_vec(data, &shape)?;
        let out = value.clone();
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                // dx = istd * (g - mean(g) - y * mean(g * y)) per row
                let y = out.data();
                let g = grad.data();
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let base = r * d;
                    let mut gm = T::zero();
                    let mut gym = T::zero();
                    for j in 0..d {
                        gm += g[base + j];
                        gym += g[base + j] * y[base + j];
                    }
                    gm /= dn;
                    gym /= dn;
                    for j in 0..d {
                        dx[base + j] = inv_std[r] * (g[base + j] - gm - y[base + j] * gym);
                    }
                }
                sink.add(a, Tensor::from_vec(dx, out.shape()).expect("norm grad"));
            }) as super::graph::BackFn<T>
        });
        self.push("normalize_rows", value, rg, back)
    }

    /// Pre-norm building block: normalize the last axis then apply a learned
    /// per-element scale and shift (`gamma`/`beta` shaped like that axis).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(a).last().unwrap_or(&0);
        let gs = self.shape(gamma);
        let bs = self.shape(beta);
        if gs != [d] || bs != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gamma {gs:?} / beta {bs:?} vs last dim {d}"),
            });
        }
        let normed = self.normalize_rows(a, eps)?;
        let scaled = self.mul(normed, gamma)?;
        self.add(scaled, beta)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let mut total = T::zero();
        for &x in av.data() {
            total += x;
        }
        let rg = self.requires_grad(a);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let g = grad.data()[0];
                sink.add(a, Tensor::full(av.shape(), g));
            }) as super::graph::BackFn<T>
        });
        self.push("sum", Tensor::scalar(total), rg, back)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Group a `[P, C]` token map over an `(h, w)` grid into non-overlapping
    /// `(wh, ww)` windows: output `[n_windows, wh*ww, C]`.
    pub fn window_partition(
        &mut self,
        tokens: Var,
        grid: (usize, usize),
        win: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = grid;
        let (wh, ww) = win;
        let shape = self.shape(tokens).to_vec();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(TensorError::ShapeMismatch {
                op: "window_partition",
                detail: format!("tokens {shape:?} vs grid {grid:?}"),
            });
        }
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(TensorError::InvalidGeometry {
                op: "window_partition",
                detail: format!("window {win:?} does not tile grid {grid:?}"),
            });
        }
        let c = shape[1];
        let (nh, nw) = (h / wh, w / ww);
        let x = self.reshape(tokens, &[nh, wh, nw, ww, c])?;
        let x = self.permute(x, &[0, 2, 1, 3, 4])?;
        self.reshape(x, &[nh * nw, wh * ww, c])
    }

    /// Exact inverse of [`Graph::window_partition`].
    pub fn window_merge(
        &mut self,
        windows: Var,
        grid: (usize, usize),
        win: (usize, usize),
    ) -> Result<Var> {
        let (h, w) = grid;
        let (wh, ww) = win;
        let shape = self.shape(windows).to_vec();
        if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 {
            return Err(TensorError::InvalidGeometry {
                op: "window_merge",
                detail: format!("window {win:?} does not tile grid {grid:?}"),
            });
        }
        let (nh, nw) = (h / wh, w / ww);
        if shape.len() != 3 || shape[0] != nh * nw || shape[1] != wh * ww {
            return Err(TensorError::ShapeMismatch {
                op: "window_merge",
                detail: format!("windows {shape:?} vs grid {grid:?} win {win:?}"),
            });
        }
        let c = shape[2];
        let x = self.reshape(windows, &[nh, nw, wh, ww, c])?;
        let x = self.permute(x, &[0, 2, 1, 3, 4])?;
        self.reshape(x, &[h * w, c])
    }
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(std::f64::consts::FRAC_2_PI.sqrt());
    let k = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(std::f64::consts::FRAC_2_PI.sqrt());
    let k = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::super::graph::Graph;
    use super::super::Tensor;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g: Graph<f64> = Graph::new();
        let eye = g.constant(t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]));
        let a = g.constant(t64(&[3.0, -1.0, 2.5, 7.0], &[2, 2]));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c).data(), g.value(a).data());
    }

    #[test]
    fn matmul_column_vector() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = g.constant(t64(&[0.0, 1.0], &[2, 1]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[0.0, 0.0, 0.0], &[3]));
        let s = g.softmax(x, 0).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let y = g.constant(t64(&[1.0, 0.0], &[2]));
        let s = g.softmax(y, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.value(s).data()[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((g.value(s).data()[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1000.0, 0.0], &[2]));
        let s = g.softmax(x, 0).unwrap();
        let out = g.value(s).data();
        assert!(out[0] > 1.0 - 1e-9 && out[1] < 1e-9);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one_along_axis() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[0.3, -2.0, 5.0, 1.0, 1.0, -7.0], &[2, 3]));
        let s = g.softmax(x, 1).unwrap();
        let d = g.value(s).data();
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn broadcast_add_and_reduce_grad() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]), true);
        let b = g.leaf(t64(&[10.0, 20.0], &[2]), true);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = g.sum_all(c).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
        // broadcast dim sums back
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn permute_round_trip_is_exact() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let x = g.constant(Tensor::from_vec(data.clone(), &[2, 3, 4]).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
    }

    #[test]
    fn concat_axis1_layout() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]));
        let b = g.constant(t64(&[9.0, 8.0], &[2, 1]));
        let c = g.concat(1, &[a, b]).unwrap();
        assert_eq!(g.shape(c), &[2, 3]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn window_partition_merge_identity() {
        let mut g: Graph<f64> = Graph::new();
        let data: Vec<f64> = (0..8 * 6 * 3).map(|v| v as f64).collect();
        let x = g.constant(Tensor::from_vec(data.clone(), &[48, 3]).unwrap());
        let w = g.window_partition(x, (8, 6), (4, 3)).unwrap();
        assert_eq!(g.shape(w), &[4, 12, 3]);
        let back = g.window_merge(w, (8, 6), (4, 3)).unwrap();
        assert_eq!(g.value(back).data(), data.as_slice());
    }

    #[test]
    fn window_partition_rejects_non_divisible() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::zeros(&[48, 3]));
        assert!(g.window_partition(x, (8, 6), (5, 3)).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t64(&[1.0e308], &[1]));
        let y = g.constant(t64(&[1.0e308], &[1]));
        let m = g.mul(x, y);
        assert!(matches!(
            m,
            Err(super::super::TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn mac_counter_is_deterministic() {
        let run = || {
            let mut g: Graph<f32> = Graph::new();
            let a = g.constant(Tensor::ones(&[8, 16]));
            let b = g.constant(Tensor::ones(&[16, 4]));
            let c = g.matmul(a, b).unwrap();
            let d = g.constant(Tensor::ones(&[3, 4, 5]));
            let e = g.constant(Tensor::ones(&[3, 5, 2]));
            let _ = g.bmm(d, e).unwrap();
            let _ = c;
            g.counter().clone()
        };
        let c1 = run();
        let c2 = run();
        assert_eq!(c1, c2);
        assert_eq!(c1.get("matmul"), 8 * 16 * 4);
        assert_eq!(c1.get("bmm"), 3 * 4 * 5 * 2);
    }
}
