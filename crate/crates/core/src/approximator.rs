//! Small feedforward networks with exact reverse-mode gradients.
//!
//! A network is a stack of affine layers with `tanh` between them and a
//! linear output. The same type backs the policy (outputs are logits, read
//! through a log-softmax) and the critics (a single scalar output).
//!
//! Parameters live in one flat vector. Layer `l` occupies
//! `fan_out * fan_in` weights stored row-major (one row per output unit)
//! followed by `fan_out` biases.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproximatorParams {
    layer_sizes: Vec<usize>,
    weights: Vec<f64>,
    seed: u64,
}

/// Everything a forward pass saw, enough to replay it backwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    layer_sizes: Vec<usize>,
    /// `activations[0]` is the input; `activations[l]` for `l >= 1` is the
    /// `tanh` output of hidden layer `l`.
    activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardRecord {
    /// Raw network outputs (logits for a policy, a length-1 vector for a critic).
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn activations(&self) -> &[Vec<f64>] {
        &self.activations
    }
}

/// Number of parameters for a layout, biases included.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

fn validate_layout(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::Config(format!(
            "a network needs at least an input and an output layer, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::Config(format!(
            "layer sizes must be positive, got {layer_sizes:?}"
        )));
    }
    Ok(())
}

impl ApproximatorParams {
    /// Uniform `±1/sqrt(fan_in)` weights and zero biases, deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_layout(layer_sizes)?;
        let mut rng = seed::rng(seed, &[]);
        let mut weights = Vec::with_capacity(param_count(layer_sizes));
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                weights.push(rng.random_range(-bound..bound));
            }
            weights.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            seed,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_layout(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights: vec![0.0; param_count(layer_sizes)],
            seed: 0,
        })
    }

    pub fn from_weights(layer_sizes: &[usize], weights: Vec<f64>, seed: u64) -> Result<Self> {
        validate_layout(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if weights.len() != expected {
            return Err(Error::Shape {
                context: "parameter vector",
                expected,
                actual: weights.len(),
            });
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite(format!("weight {i} is {}", weights[i])));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable access for perturbation probes; callers keep entries finite.
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated layout")
    }

    /// `(offset, fan_in, fan_out)` for each affine layer.
    fn layers(&self) -> std::vec::IntoIter<(usize, usize, usize)> {
        let mut offsets = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut offset = 0;
        for w in self.layer_sizes.windows(2) {
            offsets.push((offset, w[0], w[1]));
            offset += (w[0] + 1) * w[1];
        }
        offsets.into_iter()
    }

    /// Raw forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<ForwardRecord> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        let n_layers = self.layer_sizes.len() - 1;
        let mut activations = Vec::with_capacity(n_layers);
        activations.push(input.to_vec());
        let mut output = Vec::new();
        for (l, (offset, fan_in, fan_out)) in self.layers().enumerate() {
            let x = activations.last().expect("input pushed");
            let w = &self.weights[offset..offset + fan_in * fan_out];
            let b = &self.weights[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
            let mut z: Vec<f64> = w
                .chunks_exact(fan_in)
                .zip(b)
                .map(|(row, &bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
                .collect();
            if l + 1 < n_layers {
                z.iter_mut().for_each(|v| *v = v.tanh());
                activations.push(z);
            } else {
                output = z;
            }
        }
        Ok(ForwardRecord {
            layer_sizes: self.layer_sizes.clone(),
            activations,
            output,
        })
    }

    /// Categorical policy head: log-softmax over the outputs.
    pub fn policy_forward(&self, state: &[f64]) -> Result<(Vec<f64>, ForwardRecord)> {
        let record = self.forward(state)?;
        let log_probs = log_softmax(&record.output);
        Ok((log_probs, record))
    }

    /// Scalar critic head.
    pub fn value_forward(&self, state: &[f64]) -> Result<f64> {
        self.value_forward_record(state).map(|(v, _)| v)
    }

    pub fn value_forward_record(&self, state: &[f64]) -> Result<(f64, ForwardRecord)> {
        if self.output_dim() != 1 {
            return Err(Error::Shape {
                context: "value head width",
                expected: 1,
                actual: self.output_dim(),
            });
        }
        let record = self.forward(state)?;
        Ok((record.output[0], record))
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn backward(&self, record: &ForwardRecord, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.len()];
        self.backward_accumulate(record, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Like [`backward`](Self::backward) but adds into an existing buffer.
    pub fn backward_accumulate(
        &self,
        record: &ForwardRecord,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if record.layer_sizes != self.layer_sizes
            || record.activations.len() + 1 != self.layer_sizes.len()
        {
            return Err(Error::Contract(format!(
                "forward record for layout {:?} replayed against layout {:?}",
                record.layer_sizes, self.layer_sizes
            )));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Shape {
                context: "upstream gradient",
                expected: self.output_dim(),
                actual: upstream.len(),
            });
        }
        if grad.len() != self.len() {
            return Err(Error::Shape {
                context: "gradient buffer",
                expected: self.len(),
                actual: grad.len(),
            });
        }

        let mut delta = upstream.to_vec();
        for (l, (offset, fan_in, fan_out)) in self.layers().enumerate().rev() {
            let x = &record.activations[l];
            let bias_at = offset + fan_in * fan_out;
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[offset + j * fan_in..offset + (j + 1) * fan_in];
                row.iter_mut().zip(x).for_each(|(g, &a)| *g += d * a);
                grad[bias_at + j] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[offset..bias_at];
            let mut prev = vec![0.0; fan_in];
            for (row, &d) in w.chunks_exact(fan_in).zip(&delta) {
                if d == 0.0 {
                    continue;
                }
                prev.iter_mut().zip(row).for_each(|(p, &wv)| *p += wv * d);
            }
            // x is a tanh output here, so the local slope is 1 - x^2.
            prev.iter_mut()
                .zip(x)
                .for_each(|(p, &a)| *p *= 1.0 - a * a);
            delta = prev;
        }
        Ok(())
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - log_z).collect()
}

/// Pulls a gradient on log-probabilities back to the logits of a log-softmax.
pub fn log_softmax_backward(log_probs: &[f64], grad_log_probs: &[f64]) -> Vec<f64> {
    let total: f64 = grad_log_probs.iter().sum();
    log_probs
        .iter()
        .zip(grad_log_probs)
        .map(|(&lp, &g)| g - lp.exp() * total)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Adam constants; the conventional values.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Stateful first-order optimizer bound to one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, n_params: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => n_params,
        };
        Ok(Self {
            kind,
            learning_rate,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moves `params` against `grad`. Fails without touching anything if the
    /// gradient has a non-finite entry.
    pub fn step(&mut self, params: &mut ApproximatorParams, grad: &[f64]) -> Result<()> {
        check_gradient(params, grad)?;
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let lr = self.learning_rate;
                params
                    .weights
                    .iter_mut()
                    .zip(grad)
                    .for_each(|(w, g)| *w -= lr * g);
            }
            OptimizerKind::Adam => {
                if self.first_moment.len() != grad.len() {
                    return Err(Error::Shape {
                        context: "optimizer state",
                        expected: self.first_moment.len(),
                        actual: grad.len(),
                    });
                }
                let t = self.steps as i32;
                let bias1 = 1.0 - ADAM_BETA1.powi(t);
                let bias2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, &g), m), v) in params
                    .weights
                    .iter_mut()
                    .zip(grad)
                    .zip(self.first_moment.iter_mut())
                    .zip(self.second_moment.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *w -= self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                }
            }
        }
        Ok(())
    }
}

fn check_gradient(params: &ApproximatorParams, grad: &[f64]) -> Result<()> {
    if grad.len() != params.len() {
        return Err(Error::Shape {
            context: "gradient",
            expected: params.len(),
            actual: grad.len(),
        });
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient entry {i} is {}; aborting update",
            grad[i]
        )));
    }
    Ok(())
}

/// One plain gradient-descent step, returning the updated parameters.
pub fn sgd_step(
    params: &ApproximatorParams,
    grad: &[f64],
    learning_rate: f64,
) -> Result<ApproximatorParams> {
    let mut next = params.clone();
    Optimizer::new(OptimizerKind::Sgd, learning_rate, params.len())?.step(&mut next, grad)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_vec(rng: &mut seed::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    // Independent evaluator: explicit index arithmetic, no shared helpers.
    fn naive_forward(params: &ApproximatorParams, x: &[f64]) -> Vec<f64> {
        let sizes = params.layer_sizes();
        let w = params.weights();
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let mut z = vec![0.0; n_out];
            for j in 0..n_out {
                let mut s = w[off + n_in * n_out + j];
                for i in 0..n_in {
                    s += w[off + j * n_in + i] * a[i];
                }
                z[j] = if l + 2 < sizes.len() { s.tanh() } else { s };
            }
            off += (n_in + 1) * n_out;
            a = z;
        }
        a
    }

    #[test]
    fn init_layout_length() {
        let p = ApproximatorParams::init(&[4, 8, 3], 42).unwrap();
        assert_eq!(p.len(), 67);
        assert_eq!(param_count(&[4, 8, 3]), (4 + 1) * 8 + (8 + 1) * 3);
    }

    #[test]
    fn init_is_deterministic() {
        let a = ApproximatorParams::init(&[4, 8, 3], 42).unwrap();
        let b = ApproximatorParams::init(&[4, 8, 3], 42).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = ApproximatorParams::init(&[4, 8, 3], 43).unwrap();
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn init_scale_and_zero_biases() {
        let p = ApproximatorParams::init(&[16, 4, 2], 3).unwrap();
        let w = p.weights();
        assert!(w[..64].iter().all(|v| v.abs() <= 0.25));
        assert!(w[64..68].iter().all(|&v| v == 0.0));
        assert!(w[68..76].iter().all(|v| v.abs() <= 0.5));
        assert!(w[76..78].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bad_layouts_rejected() {
        assert!(matches!(ApproximatorParams::init(&[4], 1), Err(Error::Config(_))));
        assert!(matches!(ApproximatorParams::init(&[], 1), Err(Error::Config(_))));
        assert!(matches!(ApproximatorParams::init(&[4, 0, 2], 1), Err(Error::Config(_))));
    }

    #[test]
    fn zero_policy_is_uniform() {
        let p = ApproximatorParams::zeros(&[5, 7, 4]).unwrap();
        let (lp, _) = p.policy_forward(&[0.3, -1.0, 2.0, 0.0, 1.0]).unwrap();
        for v in lp {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn policy_normalization_random() {
        let mut rng = seed::rng(11, &[]);
        for case in 0..100 {
            let p = ApproximatorParams::init(&[6, 9, 5], case).unwrap();
            let x = random_vec(&mut rng, 6);
            let (lp, _) = p.policy_forward(&x).unwrap();
            let total: f64 = lp.iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-9);
            assert!(lp.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn output_weight_probe_moves_only_its_action() {
        // Raising the output bias of action 2 raises p(2) and scales the
        // others down by a common factor.
        let p = ApproximatorParams::init(&[3, 4, 3], 5).unwrap();
        let x = [0.2, -0.7, 1.1];
        let (lp0, _) = p.policy_forward(&x).unwrap();
        let mut q = p.clone();
        let bias2 = param_count(&[3, 4]) + 4 * 3 + 2;
        q.weights_mut()[bias2] += 0.1;
        let (lp1, _) = q.policy_forward(&x).unwrap();
        assert!(lp1[2] > lp0[2]);
        let shift0 = lp1[0] - lp0[0];
        let shift1 = lp1[1] - lp0[1];
        assert!(shift0 < 0.0);
        assert!((shift0 - shift1).abs() < 1e-12);
        // Logit differences between untouched actions are preserved.
        assert!(((lp1[0] - lp1[1]) - (lp0[0] - lp0[1])).abs() < 1e-12);
    }

    #[test]
    fn value_forward_basics() {
        let z = ApproximatorParams::zeros(&[3, 5, 1]).unwrap();
        assert_eq!(z.value_forward(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let p = ApproximatorParams::init(&[3, 5, 1], 9).unwrap();
        let x = [0.5, 0.5, -0.5];
        assert_eq!(p.value_forward(&x).unwrap(), p.value_forward(&x).unwrap());
        assert!(matches!(p.value_forward(&[1.0]), Err(Error::Shape { .. })));
        let wide = ApproximatorParams::init(&[3, 2], 1).unwrap();
        assert!(wide.value_forward(&x).is_err());
    }

    #[test]
    fn value_forward_matches_naive_evaluator() {
        let mut rng = seed::rng(21, &[]);
        for case in 0..20 {
            let sizes = [4, 1 + case % 7, 1 + case % 3, 1];
            let p = ApproximatorParams::init(&sizes, case as u64).unwrap();
            let x = random_vec(&mut rng, 4);
            let fast = p.value_forward(&x).unwrap();
            let slow = naive_forward(&p, &x)[0];
            assert!((fast - slow).abs() < 1e-12, "case {case}: {fast} vs {slow}");
        }
    }

    #[test]
    fn policy_shape_error() {
        let p = ApproximatorParams::init(&[3, 2], 1).unwrap();
        assert!(matches!(
            p.policy_forward(&[1.0, 2.0]),
            Err(Error::Shape { expected: 3, actual: 2, .. })
        ));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = ApproximatorParams::init(&[3, 4, 2], 2).unwrap();
        let rec = p.forward(&[0.1, 0.2, 0.3]).unwrap();
        let g = p.backward(&rec, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(g.len(), p.len());
    }

    #[test]
    fn value_output_bias_gradient_is_one() {
        let p = ApproximatorParams::init(&[3, 4, 1], 2).unwrap();
        let (_, rec) = p.value_forward_record(&[0.1, 0.2, 0.3]).unwrap();
        let g = p.backward(&rec, &[1.0]).unwrap();
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn mismatched_record_rejected() {
        let p = ApproximatorParams::init(&[3, 4, 1], 2).unwrap();
        let q = ApproximatorParams::init(&[3, 5, 1], 2).unwrap();
        let rec = q.forward(&[0.0; 3]).unwrap();
        assert!(matches!(p.backward(&rec, &[1.0]), Err(Error::Contract(_))));
        let rec = p.forward(&[0.0; 3]).unwrap();
        assert!(matches!(p.backward(&rec, &[1.0, 2.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seed::rng(31, &[]);
        let p = ApproximatorParams::init(&[5, 7, 6, 3], 4).unwrap();
        let x = random_vec(&mut rng, 5);
        let up = random_vec(&mut rng, 3);
        let f = |q: &ApproximatorParams| -> f64 {
            q.forward(&x).unwrap().output.iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let rec = p.forward(&x).unwrap();
        let g = p.backward(&rec, &up).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.weights_mut()[i] += h;
            let mut minus = p.clone();
            minus.weights_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / denom < 1e-4 || (fd - g[i]).abs() < 1e-9, "coord {i}");
        }
    }

    #[test]
    fn log_softmax_backward_matches_fd() {
        let z = [0.3, -1.2, 2.0, 0.0];
        let up = [0.5, -1.0, 0.25, 2.0];
        let f = |z: &[f64]| -> f64 { log_softmax(z).iter().zip(&up).map(|(a, b)| a * b).sum() };
        let g = log_softmax_backward(&log_softmax(&z), &up);
        for i in 0..4 {
            let mut zp = z;
            zp[i] += 1e-6;
            let mut zm = z;
            zm[i] -= 1e-6;
            let fd = (f(&zp) - f(&zm)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn sgd_identities() {
        let p = ApproximatorParams::init(&[2, 3, 1], 1).unwrap();
        let same = sgd_step(&p, &vec![0.0; p.len()], 0.5).unwrap();
        assert_eq!(same, p);

        let z = ApproximatorParams::zeros(&[2, 3, 1]).unwrap();
        let g: Vec<f64> = (0..z.len()).map(|i| i as f64 * 0.1 - 0.4).collect();
        let next = sgd_step(&z, &g, 1.0).unwrap();
        for (w, gv) in next.weights().iter().zip(&g) {
            assert_eq!(*w, -gv);
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = ApproximatorParams::init(&[2, 1], 1).unwrap();
        let before = p.clone();
        let mut g = vec![0.0; p.len()];
        g[1] = f64::NAN;
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, p.len()).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::NonFinite(_))));
        assert_eq!(p, before);
        assert!(sgd_step(&p, &g, 0.1).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, 3).is_err());
    }

    #[test]
    fn sgd_decreases_convex_quadratic() {
        // Least squares on a linear model: L(w) = mean (w·x - y)^2 is convex.
        let mut p = ApproximatorParams::init(&[3, 1], 8).unwrap();
        let data = [
            ([1.0, 0.0, 0.5], 1.0),
            ([0.0, 1.0, -0.5], -2.0),
            ([1.0, 1.0, 1.0], 0.5),
            ([-1.0, 0.5, 0.0], 0.0),
        ];
        let loss_and_grad = |q: &ApproximatorParams| {
            let mut g = vec![0.0; q.len()];
            let mut loss = 0.0;
            for (x, y) in &data {
                let (v, rec) = q.value_forward_record(x).unwrap();
                loss += (v - y).powi(2) / data.len() as f64;
                q.backward_accumulate(&rec, &[2.0 * (v - y) / data.len() as f64], &mut g)
                    .unwrap();
            }
            (loss, g)
        };
        let mut prev = f64::INFINITY;
        for _ in 0..10 {
            let (loss, g) = loss_and_grad(&p);
            assert!(loss < prev);
            prev = loss;
            p = sgd_step(&p, &g, 0.1).unwrap();
        }
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = ApproximatorParams::zeros(&[1, 1]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, p.len()).unwrap();
        for _ in 0..500 {
            let (v, rec) = p.value_forward_record(&[1.0]).unwrap();
            let g = p.backward(&rec, &[2.0 * (v - 3.0)]).unwrap();
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.value_forward(&[1.0]).unwrap() - 3.0).abs() < 1e-3);
    }
}
