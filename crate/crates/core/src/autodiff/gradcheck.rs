use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
pub const MAX_COORDS_PER_TENSOR: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub compared: usize,
    /// Coordinates whose ±ε perturbation crossed a ReLU or max-pool kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub comparisons: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self
            .params
            .iter()
            .map(|p| p.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        writeln!(
            f,
            "{:<width$}  {:>8}  {:>7}  {:>12}",
            "name", "compared", "skipped", "max_rel_err"
        )?;
        for p in &self.params {
            writeln!(
                f,
                "{:<width$}  {:>8}  {:>7}  {:>12.3e}",
                p.name, p.compared, p.skipped, p.max_rel_error
            )?;
        }
        write!(
            f,
            "comparisons={} max_rel_error={:.3e} threshold={:.1e} {}",
            self.comparisons,
            self.max_rel_error,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares tape gradients against central differences in binary64.
///
/// `fragment` receives a fresh tape with `inputs` registered as leaves (in
/// order) and must return a scalar loss. Every input is checked; coordinates
/// where either perturbed evaluation takes a different ReLU/max-pool branch
/// than the unperturbed one are excluded.
pub fn grad_check<F>(
    inputs: &[(String, Tensor<f64>)],
    fragment: F,
    epsilon: f64,
    threshold: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&epsilon) {
        return Err(Error::PreconditionViolation(format!(
            "finite-difference epsilon {epsilon} outside [1e-6, 1e-3]"
        )));
    }
    #[allow(clippy::type_complexity)]
    let eval = |values: &[Tensor<f64>]| -> Result<(f64, u64, Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = fragment(&mut tape, &vars)?;
        let value = tape.value(loss);
        if value.len() != 1 {
            return Err(Error::NotScalarLoss(value.shape()));
        }
        Ok((value.data()[0], tape.kink_signature(), tape, loss, vars))
    };

    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (_, base_sig, tape, loss, vars) = eval(&values)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(inputs.len());
    for (ti, (name, tensor)) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if tensor.len() <= MAX_COORDS_PER_TENSOR {
            (0..tensor.len()).collect()
        } else {
            let mut c = index::sample(&mut rng, tensor.len(), MAX_COORDS_PER_TENSOR).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            compared: 0,
            skipped: 0,
        };
        for i in coords {
            let orig = values[ti].data()[i];
            values[ti].data_mut()[i] = orig + epsilon;
            let (plus, sig_plus, ..) = eval(&values)?;
            values[ti].data_mut()[i] = orig - epsilon;
            let (minus, sig_minus, ..) = eval(&values)?;
            values[ti].data_mut()[i] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = relative_error(analytic[ti].data()[i], numeric);
            check.max_rel_error = check.max_rel_error.max(err);
            check.compared += 1;
        }
        params.push(check);
    }
    let comparisons = params.iter().map(|p| p.compared).sum();
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        comparisons,
        max_rel_error,
        threshold,
        passed: max_rel_error < threshold,
    })
}

/// A differentiable sub-graph over named binary64 inputs. `build` returns a
/// tensor output; [`check_fragment`] projects it onto a random direction to
/// obtain a scalar.
pub struct Fragment {
    pub name: &'static str,
    pub inputs: Vec<(String, Tensor<f64>)>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>,
}

impl std::fmt::Debug for Fragment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fragment")
            .field("name", &self.name)
            .finish()
    }
}

pub fn random_tensor(
    shape: crate::tensor::Shape,
    lo: f64,
    hi: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Values in `±[0.1, 1]`, away from the ReLU kink.
pub fn kink_free_tensor(shape: crate::tensor::Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    use rand::Rng;
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Grad-checks `fragment` under the loss `⟨r, output⟩` for a seeded random `r`.
pub fn check_fragment(
    fragment: &Fragment,
    epsilon: f64,
    threshold: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut probe = Tape::new();
    let vars: Vec<Var> = fragment
        .inputs
        .iter()
        .map(|(_, t)| probe.leaf(t.clone()))
        .collect();
    let out = (fragment.build)(&mut probe, &vars)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let coeffs = random_tensor(probe.value(out).shape(), -1.0, 1.0, &mut rng);
    grad_check(
        &fragment.inputs,
        |tape, vars| {
            let y = (fragment.build)(tape, vars)?;
            tape.weighted_sum(y, coeffs.clone())
        },
        epsilon,
        threshold,
        seed,
    )
}

/// One small fragment per primitive operator.
pub fn primitive_fragments(seed: u64) -> Vec<Fragment> {
    use crate::nnops::{ConvGeometry, PoolGeometry};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape| random_tensor(shape, -1.0, 1.0, &mut rng);
    let named = |pairs: Vec<(&str, Tensor<f64>)>| -> Vec<(String, Tensor<f64>)> {
        pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
    };
    let mut kink_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let relu_input = kink_free_tensor([2, 3, 3, 3], &mut kink_rng);
    let positive_var = Tensor::from_fn([3, 1, 1, 1], |c, _, _, _| 0.5 + c as f64 * 0.25);

    vec![
        Fragment {
            name: "conv2d",
            inputs: named(vec![("x", r([2, 4, 5, 5])), ("weight", r([6, 2, 3, 3]))]),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeometry::new(2, 1, 2))),
        },
        Fragment {
            name: "conv2d_1x1",
            inputs: named(vec![("x", r([2, 3, 4, 4])), ("weight", r([5, 3, 1, 1]))]),
            build: Box::new(|t, v| t.conv2d(v[0], v[1], ConvGeometry::new(1, 0, 1))),
        },
        Fragment {
            name: "batch_norm_train",
            inputs: named(vec![
                ("x", r([3, 3, 3, 3])),
                ("gamma", r([3, 1, 1, 1])),
                ("beta", r([3, 1, 1, 1])),
            ]),
            build: Box::new(|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5)),
        },
        Fragment {
            name: "batch_norm_eval",
            inputs: named(vec![
                ("x", r([2, 3, 3, 3])),
                ("gamma", r([3, 1, 1, 1])),
                ("beta", r([3, 1, 1, 1])),
            ]),
            build: Box::new(move |t, v| {
                let mean = t.leaf(Tensor::from_fn([3, 1, 1, 1], |c, _, _, _| c as f64 * 0.1));
                let var = t.leaf(positive_var.clone());
                t.batch_norm_eval(v[0], v[1], v[2], mean, var, 1e-5)
            }),
        },
        Fragment {
            name: "relu",
            inputs: named(vec![("x", relu_input)]),
            build: Box::new(|t, v| Ok(t.relu(v[0]))),
        },
        Fragment {
            name: "sigmoid",
            inputs: named(vec![("x", r([2, 3, 2, 2]))]),
            build: Box::new(|t, v| Ok(t.sigmoid(v[0]))),
        },
        Fragment {
            name: "add",
            inputs: named(vec![("a", r([2, 2, 3, 3])), ("b", r([2, 2, 3, 3]))]),
            build: Box::new(|t, v| t.add(v[0], v[1])),
        },
        Fragment {
            name: "split_concat",
            inputs: named(vec![("x", r([2, 6, 2, 2]))]),
            build: Box::new(|t, v| {
                let mut parts = t.split_channels(v[0], 3)?;
                parts.reverse();
                t.concat_channels(&parts)
            }),
        },
        Fragment {
            name: "global_avg_pool",
            inputs: named(vec![("x", r([2, 3, 3, 4]))]),
            build: Box::new(|t, v| t.global_avg_pool(v[0])),
        },
        Fragment {
            name: "avg_pool2d",
            inputs: named(vec![("x", r([2, 2, 5, 5]))]),
            build: Box::new(|t, v| t.avg_pool2d(v[0], PoolGeometry::new(3, 2, 1))),
        },
        Fragment {
            name: "max_pool2d",
            inputs: named(vec![("x", r([2, 2, 5, 5]))]),
            build: Box::new(|t, v| t.max_pool2d(v[0], PoolGeometry::new(3, 2, 1))),
        },
        Fragment {
            name: "fully_connected",
            inputs: named(vec![
                ("x", r([3, 4, 1, 1])),
                ("weight", r([5, 4, 1, 1])),
                ("bias", r([5, 1, 1, 1])),
            ]),
            build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
        },
        Fragment {
            name: "channel_scale",
            inputs: named(vec![("x", r([2, 3, 3, 3])), ("scale", r([2, 3, 1, 1]))]),
            build: Box::new(|t, v| t.channel_scale(v[0], v[1])),
        },
        Fragment {
            name: "sum",
            inputs: named(vec![("x", r([2, 2, 2, 2]))]),
            build: Box::new(|t, v| Ok(t.sum(v[0]))),
        },
        Fragment {
            name: "softmax_cross_entropy",
            inputs: named(vec![("logits", r([4, 5, 1, 1]))]),
            build: Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 3, 4, 1])),
        },
    ]
}
