//! Minimal differentiable Q-network runtime.
//!
//! Architecture: one LSTM-style recurrent layer unrolled over the feature
//! window, whose final hidden state is concatenated with the action
//! window and pushed through tanh dense layers into a linear two-output
//! head. Backward passes produce exact gradients for every parameter and
//! every input slot; input gradients are what perturbation crafting needs.
//!
//! Everything here is pure: forward and backward never mutate their
//! arguments, and identical inputs give bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Number of Q outputs (flag / don't flag).
pub const ACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Window length `n` (feature rows and action bits).
    pub window: usize,
    /// Per-message feature dimension `d`.
    pub feature_dim: usize,
    /// Recurrent hidden width.
    pub lstm_hidden: usize,
    /// Hidden dense widths between the recurrent layer and the output.
    pub dense: Vec<usize>,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.feature_dim == 0 || self.lstm_hidden == 0 {
            return Err(Error::InvalidConfig(
                "window, feature_dim and lstm_hidden must be positive".into(),
            ));
        }
        if self.dense.contains(&0) {
            return Err(Error::InvalidConfig("dense widths must be positive".into()));
        }
        Ok(())
    }

    /// Length of the flat input encoding: `window * feature_dim` feature
    /// slots followed by `window` action slots.
    pub fn input_len(&self) -> usize {
        self.window * self.feature_dim + self.window
    }

    fn head_in(&self) -> usize {
        self.lstm_hidden + self.window
    }

    pub fn param_count(&self) -> usize {
        layout(self).total
    }
}

struct Layout {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
    dense: Vec<(usize, usize, usize, usize)>, // (w_off, b_off, in, out)
    out_w: usize,
    out_b: usize,
    total: usize,
}

fn layout(spec: &NetworkSpec) -> Layout {
    let h = spec.lstm_hidden;
    let d = spec.feature_dim;
    let mut off = 0;
    let w_ih = off;
    off += 4 * h * d;
    let w_hh = off;
    off += 4 * h * h;
    let bias = off;
    off += 4 * h;
    let mut dense = Vec::with_capacity(spec.dense.len());
    let mut prev = spec.head_in();
    for &width in &spec.dense {
        let w_off = off;
        off += width * prev;
        let b_off = off;
        off += width;
        dense.push((w_off, b_off, prev, width));
        prev = width;
    }
    let out_w = off;
    off += ACTIONS * prev;
    let out_b = off;
    off += ACTIONS;
    Layout {
        w_ih,
        w_hh,
        bias,
        dense,
        out_w,
        out_b,
        total: off,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub weights: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.param_count();
        Ok(NetworkParams {
            spec,
            weights: vec![0.0; n],
        })
    }

    /// Uniform init in +-1/sqrt(fan_in), per layer.
    pub fn init<R: Rng>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let lay = layout(&spec);
        let mut weights = vec![0.0; lay.total];
        let h = spec.lstm_hidden;
        let d = spec.feature_dim;
        let lstm_scale = 1.0 / math::sqrt((d + h) as f64);
        for w in weights[lay.w_ih..lay.bias + 4 * h].iter_mut() {
            *w = rng.random_range(-lstm_scale..lstm_scale);
        }
        for &(w_off, b_off, fan_in, width) in &lay.dense {
            let scale = 1.0 / math::sqrt(fan_in as f64);
            for w in weights[w_off..b_off + width].iter_mut() {
                *w = rng.random_range(-scale..scale);
            }
        }
        let last = spec.dense.last().copied().unwrap_or(spec.head_in());
        let scale = 1.0 / math::sqrt(last as f64);
        for w in weights[lay.out_w..lay.out_b + ACTIONS].iter_mut() {
            *w = rng.random_range(-scale..scale);
        }
        Ok(NetworkParams { spec, weights })
    }

    fn check(&self) -> Result<()> {
        let expected = self.spec.param_count();
        if self.weights.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "network weights",
                expected,
                got: self.weights.len(),
            });
        }
        Ok(())
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        out[r] = acc;
    }
}

/// dx += W^T dy
fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, dy: &[f64], dx: &mut [f64]) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let s = dy[r];
        if s == 0.0 {
            continue;
        }
        for (gx, a) in dx.iter_mut().zip(row) {
            *gx += s * a;
        }
    }
}

/// gw += dy (outer) x
fn outer_acc(gw: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, s) in dy.iter().enumerate() {
        if *s == 0.0 {
            continue;
        }
        let row = &mut gw[r * cols..(r + 1) * cols];
        for (g, v) in row.iter_mut().zip(x) {
            *g += s * v;
        }
    }
}

struct LstmStep {
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tc: Vec<f64>,
    h: Vec<f64>,
}

/// Cached forward pass.
pub struct Activations {
    input: Vec<f64>,
    steps: Vec<LstmStep>,
    dense_outs: Vec<Vec<f64>>,
    head_in: Vec<f64>,
    pub q: Vec<f64>,
}

pub fn forward(p: &NetworkParams, input: &[f64]) -> Result<Activations> {
    p.check()?;
    let spec = &p.spec;
    if input.len() != spec.input_len() {
        return Err(Error::ShapeMismatch {
            context: "network input",
            expected: spec.input_len(),
            got: input.len(),
        });
    }
    let lay = layout(spec);
    let h = spec.lstm_hidden;
    let d = spec.feature_dim;
    let n = spec.window;
    let w = &p.weights;

    let mut steps = Vec::with_capacity(n);
    let mut h_prev = vec![0.0; h];
    let mut c_prev = vec![0.0; h];
    let mut z = vec![0.0; 4 * h];
    let mut z_rec = vec![0.0; 4 * h];
    for t in 0..n {
        let x = &input[t * d..(t + 1) * d];
        matvec(&w[lay.w_ih..lay.w_hh], 4 * h, d, x, &mut z);
        matvec(&w[lay.w_hh..lay.bias], 4 * h, h, &h_prev, &mut z_rec);
        for k in 0..4 * h {
            z[k] += z_rec[k] + w[lay.bias + k];
        }
        let mut step = LstmStep {
            i: vec![0.0; h],
            f: vec![0.0; h],
            g: vec![0.0; h],
            o: vec![0.0; h],
            c: vec![0.0; h],
            tc: vec![0.0; h],
            h: vec![0.0; h],
        };
        for k in 0..h {
            step.i[k] = math::sigmoid(z[k]);
            step.f[k] = math::sigmoid(z[h + k]);
            step.g[k] = math::tanh(z[2 * h + k]);
            step.o[k] = math::sigmoid(z[3 * h + k]);
            step.c[k] = step.f[k] * c_prev[k] + step.i[k] * step.g[k];
            step.tc[k] = math::tanh(step.c[k]);
            step.h[k] = step.o[k] * step.tc[k];
        }
        h_prev.copy_from_slice(&step.h);
        c_prev.copy_from_slice(&step.c);
        steps.push(step);
    }

    let mut head_in = Vec::with_capacity(spec.head_in());
    head_in.extend_from_slice(&h_prev);
    head_in.extend_from_slice(&input[n * d..]);

    let mut dense_outs: Vec<Vec<f64>> = Vec::with_capacity(spec.dense.len());
    let mut cur = head_in.clone();
    for &(w_off, b_off, fan_in, width) in &lay.dense {
        let mut next = vec![0.0; width];
        matvec(&w[w_off..b_off], width, fan_in, &cur, &mut next);
        for (k, v) in next.iter_mut().enumerate() {
            *v = math::tanh(*v + w[b_off + k]);
        }
        dense_outs.push(next.clone());
        cur = next;
    }

    let mut q = vec![0.0; ACTIONS];
    let last = spec.dense.last().copied().unwrap_or(spec.head_in());
    matvec(&w[lay.out_w..lay.out_b], ACTIONS, last, &cur, &mut q);
    for (k, v) in q.iter_mut().enumerate() {
        *v += w[lay.out_b + k];
    }

    Ok(Activations {
        input: input.to_vec(),
        steps,
        dense_outs,
        head_in,
        q,
    })
}

/// Convenience: Q values only.
pub fn q_values(p: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward(p, input)?.q)
}

/// Greedy action with ties resolved to 0.
pub fn argmax_q(q: &[f64]) -> usize {
    usize::from(q[1] > q[0])
}

/// Gradients of a scalar loss with respect to every parameter and every
/// input slot, plus the loss value itself.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
    pub loss: f64,
}

/// Backprop from an arbitrary output gradient `dq`.
pub fn backward_from(p: &NetworkParams, acts: &Activations, dq: &[f64]) -> Result<GradientBundle> {
    p.check()?;
    if dq.len() != ACTIONS {
        return Err(Error::ShapeMismatch {
            context: "output gradient",
            expected: ACTIONS,
            got: dq.len(),
        });
    }
    let spec = &p.spec;
    let lay = layout(spec);
    let h = spec.lstm_hidden;
    let d = spec.feature_dim;
    let n = spec.window;
    let w = &p.weights;

    let mut gp = vec![0.0; lay.total];
    let mut gi = vec![0.0; spec.input_len()];

    // Output layer.
    let last_out = spec
        .dense
        .len()
        .checked_sub(1)
        .map(|i| &acts.dense_outs[i])
        .unwrap_or(&acts.head_in);
    let last = last_out.len();
    outer_acc(&mut gp[lay.out_w..lay.out_b], dq, last_out);
    for k in 0..ACTIONS {
        gp[lay.out_b + k] += dq[k];
    }
    let mut dcur = vec![0.0; last];
    matvec_t_acc(&w[lay.out_w..lay.out_b], ACTIONS, last, dq, &mut dcur);

    // Dense layers, newest first.
    for (li, &(w_off, b_off, fan_in, width)) in lay.dense.iter().enumerate().rev() {
        let out = &acts.dense_outs[li];
        let mut da = vec![0.0; width];
        for k in 0..width {
            da[k] = dcur[k] * (1.0 - out[k] * out[k]);
        }
        let input = if li == 0 {
            &acts.head_in
        } else {
            &acts.dense_outs[li - 1]
        };
        outer_acc(&mut gp[w_off..b_off], &da, input);
        for k in 0..width {
            gp[b_off + k] += da[k];
        }
        let mut din = vec![0.0; fan_in];
        matvec_t_acc(&w[w_off..b_off], width, fan_in, &da, &mut din);
        dcur = din;
    }

    // Split head gradient into recurrent state and action slots.
    let mut dh = dcur[..h].to_vec();
    gi[n * d..].copy_from_slice(&dcur[h..]);

    // Backprop through time.
    let mut dc = vec![0.0; h];
    let mut dz = vec![0.0; 4 * h];
    for t in (0..n).rev() {
        let step = &acts.steps[t];
        let (h_prev, c_prev): (&[f64], &[f64]) = if t == 0 {
            (&[], &[])
        } else {
            (&acts.steps[t - 1].h, &acts.steps[t - 1].c)
        };
        for k in 0..h {
            let do_ = dh[k] * step.tc[k];
            dc[k] += dh[k] * step.o[k] * (1.0 - step.tc[k] * step.tc[k]);
            let di = dc[k] * step.g[k];
            let df = dc[k] * if t == 0 { 0.0 } else { c_prev[k] };
            let dg = dc[k] * step.i[k];
            dz[k] = di * step.i[k] * (1.0 - step.i[k]);
            dz[h + k] = df * step.f[k] * (1.0 - step.f[k]);
            dz[2 * h + k] = dg * (1.0 - step.g[k] * step.g[k]);
            dz[3 * h + k] = do_ * step.o[k] * (1.0 - step.o[k]);
        }
        let x = &acts.input[t * d..(t + 1) * d];
        outer_acc(&mut gp[lay.w_ih..lay.w_hh], &dz, x);
        if t > 0 {
            outer_acc(&mut gp[lay.w_hh..lay.bias], &dz, h_prev);
        }
        for k in 0..4 * h {
            gp[lay.bias + k] += dz[k];
        }
        matvec_t_acc(&w[lay.w_ih..lay.w_hh], 4 * h, d, &dz, &mut gi[t * d..(t + 1) * d]);
        let mut dh_prev = vec![0.0; h];
        if t > 0 {
            matvec_t_acc(&w[lay.w_hh..lay.bias], 4 * h, h, &dz, &mut dh_prev);
        }
        for k in 0..h {
            dc[k] *= step.f[k];
        }
        dh = dh_prev;
    }

    Ok(GradientBundle {
        params: gp,
        input: gi,
        loss: 0.0,
    })
}

/// Gradients of the half-squared TD error on one action slot.
pub fn backward(
    p: &NetworkParams,
    acts: &Activations,
    action: usize,
    target: f64,
) -> Result<GradientBundle> {
    let err = acts.q[action] - target;
    let mut dq = [0.0; ACTIONS];
    dq[action] = err;
    let mut bundle = backward_from(p, acts, &dq)?;
    bundle.loss = 0.5 * err * err;
    Ok(bundle)
}

fn loss_of(p: &NetworkParams, input: &[f64], action: usize, target: f64) -> Result<f64> {
    let acts = forward(p, input)?;
    let err = acts.q[action] - target;
    Ok(0.5 * err * err)
}

/// Central-difference gradients over all parameters and input slots.
pub fn fd_gradients(
    p: &NetworkParams,
    input: &[f64],
    action: usize,
    target: f64,
    step: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidConfig("fd step must be positive".into()));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fd input"));
    }
    let mut pw = p.clone();
    let mut gp = vec![0.0; p.weights.len()];
    for k in 0..p.weights.len() {
        let orig = pw.weights[k];
        pw.weights[k] = orig + step;
        let up = loss_of(&pw, input, action, target)?;
        pw.weights[k] = orig - step;
        let dn = loss_of(&pw, input, action, target)?;
        pw.weights[k] = orig;
        gp[k] = (up - dn) / (2.0 * step);
    }
    let mut xs = input.to_vec();
    let mut gi = vec![0.0; input.len()];
    for k in 0..input.len() {
        let orig = xs[k];
        xs[k] = orig + step;
        let up = loss_of(p, &xs, action, target)?;
        xs[k] = orig - step;
        let dn = loss_of(p, &xs, action, target)?;
        xs[k] = orig;
        gi[k] = (up - dn) / (2.0 * step);
    }
    Ok((gp, gi))
}

/// Worst slot-wise relative error, floored so near-zero pairs don't blow up.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = math::abs(*n).max(1e-6);
        let rel = math::abs(a - n) / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}

/// Compare analytic gradients against central differences; returns the
/// worst relative error over all parameters and input slots.
pub fn grad_check(
    p: &NetworkParams,
    input: &[f64],
    action: usize,
    target: f64,
    step: f64,
) -> Result<f64> {
    let acts = forward(p, input)?;
    let analytic = backward(p, &acts, action, target)?;
    let (fd_p, fd_i) = fd_gradients(p, input, action, target, step)?;
    let e1 = max_rel_error(&analytic.params, &fd_p);
    let e2 = max_rel_error(&analytic.input, &fd_i);
    Ok(e1.max(e2))
}

/// One SGD step with global-norm gradient clipping.
pub fn sgd_step(p: &mut NetworkParams, grad: &[f64], lr: f64, clip: f64) {
    debug_assert_eq!(grad.len(), p.weights.len());
    let mut sq = 0.0;
    for g in grad {
        sq += g * g;
    }
    let norm = math::sqrt(sq);
    let scale = if clip > 0.0 && norm > clip {
        clip / norm
    } else {
        1.0
    };
    for (w, g) in p.weights.iter_mut().zip(grad) {
        *w -= lr * scale * g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            window: 3,
            feature_dim: 3,
            lstm_hidden: 6,
            dense: vec![5],
        }
    }

    fn random_input<R: Rng>(len: usize, rng: &mut R) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn zero_params_give_zero_q() {
        let p = NetworkParams::zeros(small_spec()).unwrap();
        let input = vec![0.7; p.spec.input_len()];
        let q = q_values(&p, &input).unwrap();
        assert_eq!(q, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let mut rng = seeding::stream(3, "net-test", 0);
        let p = NetworkParams::init(small_spec(), &mut rng).unwrap();
        let snapshot = p.clone();
        let input = random_input(p.spec.input_len(), &mut rng);
        let a = q_values(&p, &input).unwrap();
        let b = q_values(&p, &input).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, snapshot);
    }

    #[test]
    fn input_shape_is_checked() {
        let p = NetworkParams::zeros(small_spec()).unwrap();
        assert!(forward(&p, &[0.0; 3]).is_err());
    }

    #[test]
    fn gradient_zero_when_on_target() {
        let mut rng = seeding::stream(3, "net-test", 1);
        let p = NetworkParams::init(small_spec(), &mut rng).unwrap();
        let input = random_input(p.spec.input_len(), &mut rng);
        let acts = forward(&p, &input).unwrap();
        let y = acts.q[1];
        let b = backward(&p, &acts, 1, y).unwrap();
        assert_eq!(b.loss, 0.0);
        assert!(b.params.iter().all(|&g| g == 0.0));
        assert!(b.input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_path_gradient_matches_hand_value() {
        // Zeroing the recurrent stack and its output column leaves
        // q[a] = w_a * action_input + b_a: a plain linear model.
        let spec = NetworkSpec {
            window: 1,
            feature_dim: 1,
            lstm_hidden: 1,
            dense: vec![],
        };
        let mut p = NetworkParams::zeros(spec).unwrap();
        let lay = layout(&p.spec);
        // out weights: rows [h, action]; set action weight of q0 to 3.
        p.weights[lay.out_w + 1] = 3.0;
        let input = vec![0.5, 2.0]; // one feature slot, action slot 2.0
        let acts = forward(&p, &input).unwrap();
        assert_eq!(acts.q[0], 6.0);
        let b = backward(&p, &acts, 0, 1.0).unwrap();
        // dL/dw = (q - y) * x = 5 * 2 = 10
        assert!((b.params[lay.out_w + 1] - 10.0).abs() < 1e-12);
        // dL/d(action input) = (q - y) * w = 15
        assert!((b.input[1] - 15.0).abs() < 1e-12);
        let err = grad_check(&p, &input, 0, 1.0, 1e-5).unwrap();
        assert!(err < 1e-8, "linear-path grad check error {err}");
    }

    #[test]
    fn grad_check_passes_on_random_nets() {
        for s in 0..3u64 {
            let mut rng = seeding::stream(s, "net-gc", 0);
            let p = NetworkParams::init(small_spec(), &mut rng).unwrap();
            let input = random_input(p.spec.input_len(), &mut rng);
            let err = grad_check(&p, &input, (s % 2) as usize, 0.3, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {s}: grad check error {err}");
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut rng = seeding::stream(9, "net-gc", 1);
        let p = NetworkParams::init(small_spec(), &mut rng).unwrap();
        let input = random_input(p.spec.input_len(), &mut rng);
        let acts = forward(&p, &input).unwrap();
        let mut analytic = backward(&p, &acts, 0, 0.9).unwrap();
        let lay = layout(&p.spec);
        // Output bias gradient is q - y, guaranteed non-zero here.
        analytic.params[lay.out_b] *= 2.0;
        let (fd_p, _) = fd_gradients(&p, &input, 0, 0.9, 1e-5).unwrap();
        assert!(max_rel_error(&analytic.params, &fd_p) > 0.5);
    }

    #[test]
    fn sgd_clips_global_norm() {
        let spec = NetworkSpec {
            window: 1,
            feature_dim: 1,
            lstm_hidden: 1,
            dense: vec![],
        };
        let mut p = NetworkParams::zeros(spec).unwrap();
        let n = p.weights.len();
        let grad = vec![10.0; n];
        sgd_step(&mut p, &grad, 0.1, 5.0);
        let norm = math::sqrt(10.0 * 10.0 * n as f64);
        let expected = -0.1 * 10.0 * (5.0 / norm);
        for w in &p.weights {
            assert!((w - expected).abs() < 1e-12);
        }
    }
}
