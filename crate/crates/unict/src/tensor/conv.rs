//! Spatial ops on channels-first `[C, H, W]` maps: convolution, transposed
//! convolution done as the adjoint scatter, and channel-wise pooling.
//!
//! Convolutions run as im2col + GEMM. The column buffer is rebuilt on the
//! backward pass instead of being cached, trading a little compute for a
//! much smaller live set during training.

use super::graph::{GradSink, Graph, Var};
use super::ops::gemm_acc;
use super::{Result, Scalar, Tensor, TensorError};

/// Output spatial size of a convolution, or an error when the kernel does
/// not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(TensorError::InvalidGeometry {
            op: "conv2d",
            detail: format!("kernel {kernel} stride {stride}"),
        });
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(TensorError::InvalidGeometry {
            op: "conv2d",
            detail: format!("input {input} + 2*{pad} smaller than kernel {kernel}"),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Output spatial size of a transposed convolution.
pub fn deconv_out_dim(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || output_pad >= stride {
        return Err(TensorError::InvalidGeometry {
            op: "deconv2d",
            detail: format!("kernel {kernel} stride {stride} output_pad {output_pad}"),
        });
    }
    let grown = (input - 1) * stride + kernel + output_pad;
    if grown < 2 * pad + 1 {
        return Err(TensorError::InvalidGeometry {
            op: "deconv2d",
            detail: format!("input {input} too small for pad {pad}"),
        });
    }
    Ok(grown - 2 * pad)
}

struct Geometry {
    channels: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// cols[(c*kh+ki)*kw+kj, oy*ow+ox] = img[c, oy*s-p+ki, ox*s-p+kj] (0 outside).
fn im2col<T: Scalar>(img: &[T], g: &Geometry) -> Vec<T> {
    let k = g.channels * g.kh * g.kw;
    let cols_n = g.oh * g.ow;
    let mut cols = vec![T::zero(); k * cols_n];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.ih as isize {
                        continue;
                    }
                    let src_row = (c * g.ih + iy as usize) * g.iw;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.iw as isize {
                            dst[oy * g.ow + ox] = img[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image buffer.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry) -> Vec<T> {
    let cols_n = g.oh * g.ow;
    let mut img = vec![T::zero(); g.channels * g.ih * g.iw];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.ih as isize {
                        continue;
                    }
                    let dst_row = (c * g.ih + iy as usize) * g.iw;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.iw as isize {
                            img[dst_row + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
    img
}

impl<T: Scalar> Graph<T> {
    /// 2-D convolution: `x [C_in,H,W]`, `w [C_out,C_in,kh,kw]`, bias handled
    /// by the layer on top.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {xs:?} w {ws:?}"),
            });
        }
        let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_dim(h, kh, stride, pad)?;
        let ow = conv_out_dim(wdt, kw, stride, pad)?;
        let geo = Geometry {
            channels: c_in,
            ih: h,
            iw: wdt,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let k = c_in * kh * kw;
        let cols = im2col(xv.data(), &geo);
        let mut out = vec![T::zero(); c_out * oh * ow];
        gemm_acc(c_out, k, oh * ow, wv.data(), &cols, &mut out, T::zero());
        drop(cols);
        self.count("conv2d", (c_out * k * oh * ow) as u64);
        let value = Tensor::from_vec(out, &[c_out, oh, ow])?;
        let rg = self.any_requires_grad(&[x, w]);
        let (rgx, rgw) = (self.requires_grad(x), self.requires_grad(w));
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let geo = Geometry {
                    channels: c_in,
                    ih: h,
                    iw: wdt,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                };
                if rgw {
                    // dW[C_out,K] = dOut[C_out,OHOW] @ cols^T
                    let cols = im2col(xv.data(), &geo);
                    let mut dw = vec![T::zero(); c_out * k];
                    unsafe {
                        T::gemm(
                            c_out,
                            oh * ow,
                            k,
                            T::one(),
                            grad.data().as_ptr(),
                            (oh * ow) as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            (oh * ow) as isize,
                            T::zero(),
                            dw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    sink.add(w, Tensor::from_vec(dw, &[c_out, c_in, kh, kw]).expect("dW"));
                }
                if rgx {
                    // dcols[K,OHOW] = W^T @ dOut, then scatter back
                    let mut dcols = vec![T::zero(); k * oh * ow];
                    unsafe {
                        T::gemm(
                            k,
                            c_out,
                            oh * ow,
                            T::one(),
                            wv.data().as_ptr(),
                            1,
                            k as isize,
                            grad.data().as_ptr(),
                            (oh * ow) as isize,
                            1,
                            T::zero(),
                            dcols.as_mut_ptr(),
                            (oh * ow) as isize,
                            1,
                        );
                    }
                    let dx = col2im(&dcols, &geo);
                    sink.add(x, Tensor::from_vec(dx, &[c_in, h, wdt]).expect("dX"));
                }
            }) as super::graph::BackFn<T>
        });
        self.push("conv2d", value, rg, back)
    }

    /// Transposed convolution: `x [C_in,H,W]`, `w [C_in,C_out,kh,kw]`.
    ///
    /// With stride 2, kernel 3, pad 1, output_pad 1 the spatial size exactly
    /// doubles, which is how every decoder stage uses it.
    pub fn deconv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Result<Var> {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(TensorError::ShapeMismatch {
                op: "deconv2d",
                detail: format!("x {xs:?} w {ws:?}"),
            });
        }
        let (c_in, h, wdt) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = deconv_out_dim(h, kh, stride, pad, output_pad)?;
        let ow = deconv_out_dim(wdt, kw, stride, pad, output_pad)?;
        // The adjoint view: a conv with these parameters maps [C_out,oh,ow]
        // onto the [h,w] position grid, so forward here is its col2im side.
        let geo = Geometry {
            channels: c_out,
            ih: oh,
            iw: ow,
            kh,
            kw,
            stride,
            pad,
            oh: h,
            ow: wdt,
        };
        let k = c_out * kh * kw;
        let mut dcols = vec![T::zero(); k * h * wdt];
        unsafe {
            T::gemm(
                k,
                c_in,
                h * wdt,
                T::one(),
                wv.data().as_ptr(),
                1,
                k as isize,
                xv.data().as_ptr(),
                (h * wdt) as isize,
                1,
                T::zero(),
                dcols.as_mut_ptr(),
                (h * wdt) as isize,
                1,
            );
        }
        let out = col2im(&dcols, &geo);
        drop(dcols);
        self.count("deconv2d", (c_in * k * h * wdt) as u64);
        let value = Tensor::from_vec(out, &[c_out, oh, ow])?;
        let rg = self.any_requires_grad(&[x, w]);
        let (rgx, rgw) = (self.requires_grad(x), self.requires_grad(w));
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let geo = Geometry {
                    channels: c_out,
                    ih: oh,
                    iw: ow,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh: h,
                    ow: wdt,
                };
                let cols_g = im2col(grad.data(), &geo);
                if rgx {
                    // dX[C_in,HW] = W[C_in,K] @ cols_g[K,HW]
                    let mut dx = vec![T::zero(); c_in * h * wdt];
                    gemm_acc(c_in, k, h * wdt, wv.data(), &cols_g, &mut dx, T::zero());
                    sink.add(x, Tensor::from_vec(dx, &[c_in, h, wdt]).expect("dX"));
                }
                if rgw {
                    // dW[C_in,K] = X[C_in,HW] @ cols_g^T
                    let mut dw = vec![T::zero(); c_in * k];
                    unsafe {
                        T::gemm(
                            c_in,
                            h * wdt,
                            k,
                            T::one(),
                            xv.data().as_ptr(),
                            (h * wdt) as isize,
                            1,
                            cols_g.as_ptr(),
                            1,
                            (h * wdt) as isize,
                            T::zero(),
                            dw.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    sink.add(w, Tensor::from_vec(dw, &[c_in, c_out, kh, kw]).expect("dW"));
                }
            }) as super::graph::BackFn<T>
        });
        self.push("deconv2d", value, rg, back)
    }

    /// Per-pixel maximum across channels: `[C,H,W] -> [1,H,W]`.
    pub fn pool_channel_max(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let xs = xv.shape().to_vec();
        if xs.len() != 3 || xs[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "pool_channel_max",
                detail: format!("{xs:?}"),
            });
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let src = xv.data();
        let mut out = vec![T::neg_infinity(); hw];
        let mut argmax = vec![0u32; hw];
        for ch in 0..c {
            for p in 0..hw {
                let v = src[ch * hw + p];
                if v > out[p] {
                    out[p] = v;
                    argmax[p] = ch as u32;
                }
            }
        }
        let value = Tensor::from_vec(out, &[1, xs[1], xs[2]])?;
        let rg = self.requires_grad(x);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let mut dx = vec![T::zero(); c * hw];
                for p in 0..hw {
                    dx[argmax[p] as usize * hw + p] = grad.data()[p];
                }
                sink.add(x, Tensor::from_vec(dx, &[c, xs[1], xs[2]]).expect("dmax"));
            }) as super::graph::BackFn<T>
        });
        self.push("pool_channel_max", value, rg, back)
    }

    /// Per-pixel mean across channels: `[C,H,W] -> [1,H,W]`.
    pub fn pool_channel_avg(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x).clone();
        let xs = xv.shape().to_vec();
        if xs.len() != 3 || xs[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "pool_channel_avg",
                detail: format!("{xs:?}"),
            });
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let inv_c = T::from_f64(1.0 / c as f64);
        let src = xv.data();
        let mut out = vec![T::zero(); hw];
        for ch in 0..c {
            for p in 0..hw {
                out[p] += src[ch * hw + p];
            }
        }
        for v in &mut out {
            *v *= inv_c;
        }
        let value = Tensor::from_vec(out, &[1, xs[1], xs[2]])?;
        let rg = self.requires_grad(x);
        let back = rg.then(|| {
            Box::new(move |grad: &Tensor<T>, sink: &mut GradSink<T>| {
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    for p in 0..hw {
                        dx[ch * hw + p] = grad.data()[p] * inv_c;
                    }
                }
                sink.add(x, Tensor::from_vec(dx, &[c, xs[1], xs[2]]).expect("davg"));
            }) as super::graph::BackFn<T>
        });
        self.push("pool_channel_avg", value, rg, back)
    }
}

#[cfg(test)]
mod tests {
    use super::super::graph::Graph;
    use super::super::Tensor;
    use super::*;

    #[test]
    fn conv_shape_formula_matches_without_running() {
        assert_eq!(conv_out_dim(224, 3, 2, 1).unwrap(), 112);
        assert_eq!(conv_out_dim(4, 3, 1, 1).unwrap(), 4);
        assert_eq!(conv_out_dim(7, 3, 2, 1).unwrap(), 4);
        assert!(conv_out_dim(2, 5, 1, 0).is_err());
        assert!(conv_out_dim(4, 3, 0, 1).is_err());
    }

    #[test]
    fn deconv_doubles_with_standard_geometry() {
        assert_eq!(deconv_out_dim(7, 3, 2, 1, 1).unwrap(), 14);
        assert_eq!(deconv_out_dim(112, 3, 2, 1, 1).unwrap(), 224);
        assert!(deconv_out_dim(7, 3, 2, 1, 2).is_err());
    }

    #[test]
    fn all_ones_kernel_counts_overlap() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 4, 4]));
        let w = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        let d = g.value(y).data();
        // interior pixels see the full 3x3 support, corners a 2x2 corner
        assert_eq!(d[4 * 1 + 1], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[3], 4.0);
        assert_eq!(d[12], 4.0);
        assert_eq!(d[15], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_halves_224() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.constant(Tensor::ones(&[2, 224, 224]));
        let w = g.constant(Tensor::ones(&[1, 2, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 112, 112]);
    }

    /// Direct-summation reference: every input pixel stamps the kernel into
    /// the output at its strided location.
    fn deconv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: usize,
        pad: usize,
        output_pad: usize,
    ) -> Tensor<f64> {
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (c_out, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = deconv_out_dim(h, kh, stride, pad, output_pad).unwrap();
        let ow = deconv_out_dim(wd, kw, stride, pad, output_pad).unwrap();
        let mut out = vec![0.0; c_out * oh * ow];
        for ci in 0..c_in {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[(ci * h + y) * wd + xx];
                    for co in 0..c_out {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oy = (y * stride + ki) as isize - pad as isize;
                                let ox = (xx * stride + kj) as isize - pad as isize;
                                if oy >= 0 && oy < oh as isize && ox >= 0 && ox < ow as isize {
                                    let wv = w.data()[((ci * c_out + co) * kh + ki) * kw + kj];
                                    out[(co * oh + oy as usize) * ow + ox as usize] += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(out, &[c_out, oh, ow]).unwrap()
    }

    #[test]
    fn deconv_delta_reproduces_kernel_stamp() {
        let mut g: Graph<f64> = Graph::new();
        let mut xd = vec![0.0; 3 * 3];
        xd[4] = 1.0; // delta at the center
        let x = g.constant(Tensor::from_vec(xd, &[1, 3, 3]).unwrap());
        let wd: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = g.constant(Tensor::from_vec(wd, &[1, 1, 3, 3]).unwrap());
        let y = g.deconv2d(x, w, 2, 1, 1).unwrap();
        let expect = deconv_reference(g.value(x), g.value(w), 2, 1, 1);
        assert_eq!(g.shape(y), &[1, 6, 6]);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn deconv_matches_direct_summation_on_random_input() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_vec(
            (0..2 * 5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[2, 5, 4],
        )
        .unwrap();
        let w = Tensor::from_vec(
            (0..2 * 3 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            &[2, 3, 3, 3],
        )
        .unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.deconv2d(xv, wv, 2, 1, 1).unwrap();
        let expect = deconv_reference(&x, &w, 2, 1, 1);
        assert_eq!(g.shape(y), &[3, 10, 8]);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn channel_pools_match_brute_force() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(
            (0..8 * 5 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            &[8, 5, 5],
        )
        .unwrap();
        let mut g: Graph<f64> = Graph::new();
        let xv = g.constant(x.clone());
        let mx = g.pool_channel_max(xv).unwrap();
        let av = g.pool_channel_avg(xv).unwrap();
        for p in 0..25 {
            let col: Vec<f64> = (0..8).map(|c| x.data()[c * 25 + p]).collect();
            let bf_max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bf_avg = col.iter().sum::<f64>() / 8.0;
            assert_eq!(g.value(mx).data()[p], bf_max);
            assert!((g.value(av).data()[p] - bf_avg).abs() < 1e-6);
        }
    }

    #[test]
    fn single_channel_pool_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(
            Tensor::from_vec(vec![1.0, -2.0, 3.0, 0.5], &[1, 2, 2]).unwrap(),
        );
        let mx = g.pool_channel_max(x).unwrap();
        let av = g.pool_channel_avg(x).unwrap();
        assert_eq!(g.value(mx).data(), g.value(x).data());
        assert_eq!(g.value(av).data(), g.value(x).data());
    }

    #[test]
    fn pool_values_example() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 3.0], &[2, 1, 1]).unwrap());
        let mx = g.pool_channel_max(x).unwrap();
        let av = g.pool_channel_avg(x).unwrap();
        assert_eq!(g.value(mx).data()[0], 3.0);
        assert_eq!(g.value(av).data()[0], 2.0);
    }
}
