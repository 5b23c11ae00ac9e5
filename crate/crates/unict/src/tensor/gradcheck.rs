//! Central finite-difference verification of analytic gradients.
//!
//! Always runs in 64-bit. The relative error uses a scale-aware floor so
//! that finite-difference noise on near-zero gradient entries does not
//! drown out real defects on the significant ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::{Result, Tensor, TensorError};

/// Per-parameter outcome of a check.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub epsilon: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err() < tolerance
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare analytic gradients of a scalar-valued graph against central
/// differences.
///
/// `build` reconstructs the graph from leaf values; it runs once for the
/// analytic pass and twice per checked element. `samples_per_param` caps
/// how many elements of each parameter are perturbed (all of them when
/// `None` or when the parameter is smaller than the cap); the subset is
/// drawn deterministically.
pub fn grad_check<F>(
    build: F,
    params: &[(&str, Tensor<f64>)],
    epsilon: f64,
    samples_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        let shape = g.shape(out);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar {
                op: "grad_check",
                shape: shape.to_vec(),
            });
        }
        Ok(g.value(out).data()[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.shape(out);
    if shape.iter().product::<usize>() != 1 {
        return Err(TensorError::NotScalar {
            op: "grad_check",
            shape: shape.to_vec(),
        });
    }
    let grads = g.backward(out)?;

    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tensor.shape()));
        if !analytic.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        let n = tensor.numel();
        let indices: Vec<usize> = match samples_per_param {
            Some(cap) if cap < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x6472_6164 ^ pi as u64);
                rand::seq::index::sample(&mut rng, n, cap).into_vec()
            }
            _ => (0..n).collect(),
        };
        // Scale-aware floor: 1% of the largest gradient entry of this
        // parameter, never below 1e-8.
        let gmax = analytic.max_abs();
        let floor = (0.01 * gmax).max(1e-8);
        let mut max_rel = 0.0f64;
        for &idx in &indices {
            let mut plus = base.clone();
            {
                let t = &mut plus[pi];
                t.data_mut()[idx] += epsilon;
            }
            let fp = eval(&plus)?;
            let mut minus = base.clone();
            {
                let t = &mut minus[pi];
                t.data_mut()[idx] -= epsilon;
            }
            let fm = eval(&minus)?;
            let numeric = (fp - fm) / (2.0 * epsilon);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite { op: "grad_check" });
            }
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            max_rel = max_rel.max(rel);
        }
        report.push(ParamCheck {
            name: name.to_string(),
            max_rel_err: max_rel,
            checked_elements: indices.len(),
        });
    }
    Ok(GradCheckReport {
        params: report,
        epsilon,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;
    use rand::Rng;

    fn randt(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = randt(&[12], 1, -2.0, 2.0);
        let report = grad_check(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                g.sum_all(sq)
            },
            &[("x", x)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-9,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn matmul_5x7_7x3_gradient() {
        let a = randt(&[5, 7], 2, -1.0, 1.0);
        let b = randt(&[7, 3], 3, -1.0, 1.0);
        let report = grad_check(
            |g, vars| {
                let c = g.matmul(vars[0], vars[1])?;
                g.sum_all(c)
            },
            &[("a", a), ("b", b)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-5,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn conv2d_gradient_on_2x5x5() {
        let x = randt(&[2, 5, 5], 4, -1.0, 1.0);
        let w = randt(&[3, 2, 3, 3], 5, -0.5, 0.5);
        let report = grad_check(
            |g, vars| {
                let y = g.conv2d(vars[0], vars[1], 1, 1)?;
                // nonlinearity so dW depends on x nontrivially
                let y = g.gelu(y)?;
                g.sum_all(y)
            },
            &[("x", x), ("w", w)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn deconv2d_gradient() {
        let x = randt(&[2, 4, 3], 6, -1.0, 1.0);
        let w = randt(&[2, 3, 3, 3], 7, -0.5, 0.5);
        let report = grad_check(
            |g, vars| {
                let y = g.deconv2d(vars[0], vars[1], 2, 1, 1)?;
                let y = g.sigmoid(y)?;
                g.sum_all(y)
            },
            &[("x", x), ("w", w)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn softmax_normalize_and_activations_chain() {
        let x = randt(&[4, 6], 8, -2.0, 2.0);
        let gamma = randt(&[6], 9, 0.5, 1.5);
        let beta = randt(&[6], 10, -0.5, 0.5);
        let report = grad_check(
            |g, vars| {
                let ln = g.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let sm = g.softmax(ln, 1)?;
                let act = g.gelu(sm)?;
                let sp = g.softplus(act)?;
                let ab = g.abs(sp)?;
                g.mean_all(ab)
            },
            &[("x", x), ("gamma", gamma), ("beta", beta)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn bmm_permute_concat_pool_chain() {
        let a = randt(&[3, 2, 4], 11, -1.0, 1.0);
        let b = randt(&[3, 4, 2], 12, -1.0, 1.0);
        let c = randt(&[2, 3, 4], 13, -1.0, 1.0);
        let report = grad_check(
            |g, vars| {
                let p = g.bmm(vars[0], vars[1])?; // [3,2,2]
                let p = g.permute(p, &[1, 0, 2])?; // [2,3,2]
                let q = g.concat(2, &[p, vars[2]])?; // [2,3,6]
                let q = g.reshape(q, &[2, 3, 6])?;
                let m = g.pool_channel_avg(q)?;
                let mx = g.pool_channel_max(q)?;
                let s = g.add(m, mx)?;
                g.sum_all(s)
            },
            &[("a", a), ("b", b), ("c", c)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-4,
            "rel err {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn broadcast_mul_gradients() {
        let x = randt(&[5, 3], 14, -1.0, 1.0);
        let gate = randt(&[5, 1], 15, 0.1, 0.9);
        let report = grad_check(
            |g, vars| {
                let y = g.mul(vars[0], vars[1])?;
                g.sum_all(y)
            },
            &[("x", x), ("gate", gate)],
            1e-5,
            None,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn sampling_caps_checked_elements() {
        let x = randt(&[100], 16, -1.0, 1.0);
        let report = grad_check(
            |g, vars| {
                let sq = g.mul(vars[0], vars[0])?;
                g.sum_all(sq)
            },
            &[("x", x)],
            1e-5,
            Some(10),
        )
        .unwrap();
        assert_eq!(report.params[0].checked_elements, 10);
        assert!(report.max_rel_err() < 1e-8);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = randt(&[4], 17, -1.0, 1.0);
        let err = grad_check(|g, vars| g.relu(vars[0]), &[("x", x)], 1e-5, None);
        assert!(matches!(err, Err(TensorError::NotScalar { .. })));
    }
}
