//! Fully connected autoencoder trained jointly with a latent SINDy model.
//!
//! Each network is evaluated on value/tangent pairs so that the chain-rule
//! terms `ż = ∇φ(x)·ẋ` and `∇ψ(z)·θ(z; μ)Ξ` come out of the same sweep as the
//! outputs. Gradients of the joint loss are obtained by a hand-written
//! reverse sweep through those paired layers.
//!
//! Loss per batch (sums over the batch rows, no averaging):
//!
//! ```text
//! Σ ‖x − ψ(φ(x))‖² + λ₁ Σ ‖ż − θ(z; μ)Ξ‖² + λ₃ Σ ‖ẋ − ∇ψ(z)·θ(z; μ)Ξ‖² + λ₂ ‖Ξ‖₁
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numkit::{Matrix, Rng};
use crate::sindy::{Library, LibrarySpec};

/// Weights `W_l` (`dims[l+1] × dims[l]`) and biases of an MLP. Hidden layers
/// use ELU; the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    #[serde(with = "crate::formats::b64_nested")]
    biases: Vec<Vec<f64>>,
}

impl MlpParams {
    pub fn from_parts(weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(invalid("an MLP needs matching, nonempty weight and bias lists"));
        }
        let mut dims = vec![weights[0].cols()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.cols() != *dims.last().expect("nonempty") || b.len() != w.rows() {
                return Err(invalid("inconsistent layer shapes"));
            }
            if !w.is_finite() || b.iter().any(|v| !v.is_finite()) {
                return Err(invalid("network parameters must be finite"));
            }
            dims.push(w.rows());
        }
        Ok(Self { dims, weights, biases })
    }

    fn zeros_like(dims: &[usize]) -> Self {
        Self {
            dims: dims.to_vec(),
            weights: dims.windows(2).map(|w| Matrix::zeros(w[1], w[0])).collect(),
            biases: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("nonempty")
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Every parameter tensor as a flat slice, weights then bias per layer.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }
}

/// Xavier-uniform weights (`|w| ≤ √(6/(fan_in + fan_out))`), zero biases.
pub fn init_mlp(layer_dims: &[usize], rng: &mut Rng) -> Result<MlpParams> {
    if layer_dims.len() < 2 || layer_dims.contains(&0) {
        return Err(invalid(format!("invalid layer dims {layer_dims:?}")));
    }
    let mut p = MlpParams::zeros_like(layer_dims);
    for (l, w) in p.weights.iter_mut().enumerate() {
        let bound = (6.0 / (layer_dims[l] + layer_dims[l + 1]) as f64).sqrt();
        for v in w.as_mut_slice() {
            *v = rng.uniform_range(-bound, bound);
        }
    }
    Ok(p)
}

#[inline]
fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// First and second derivative of ELU.
#[inline]
fn elu_d(x: f64) -> (f64, f64) {
    if x >= 0.0 {
        (1.0, 0.0)
    } else {
        let e = x.exp();
        (e, e)
    }
}

/// Values and tangents of every layer for one sample.
#[derive(Debug, Clone)]
struct Tape {
    act: Vec<Vec<f64>>,
    act_t: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pre_t: Vec<Vec<f64>>,
    with_tangent: bool,
}

impl Tape {
    fn new(dims: &[usize]) -> Self {
        Self {
            act: dims.iter().map(|&d| vec![0.0; d]).collect(),
            act_t: dims.iter().map(|&d| vec![0.0; d]).collect(),
            pre: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            pre_t: dims[1..].iter().map(|&d| vec![0.0; d]).collect(),
            with_tangent: false,
        }
    }

    fn output(&self) -> &[f64] {
        self.act.last().expect("nonempty")
    }

    fn output_tangent(&self) -> &[f64] {
        self.act_t.last().expect("nonempty")
    }
}

fn forward_tape(p: &MlpParams, x: &[f64], v: Option<&[f64]>, tape: &mut Tape) {
    let last = p.n_layers() - 1;
    tape.act[0].copy_from_slice(x);
    tape.with_tangent = v.is_some();
    if let Some(v) = v {
        tape.act_t[0].copy_from_slice(v);
    }
    for l in 0..p.n_layers() {
        let w = &p.weights[l];
        let (lo, hi) = tape.act.split_at_mut(l + 1);
        let (a_in, a_out) = (&lo[l], &mut hi[0]);
        let (tlo, thi) = tape.act_t.split_at_mut(l + 1);
        let (t_in, t_out) = (&tlo[l], &mut thi[0]);
        for i in 0..w.rows() {
            let row = w.row(i);
            let h = p.biases[l][i] + row.iter().zip(a_in).map(|(a, b)| a * b).sum::<f64>();
            tape.pre[l][i] = h;
            if l == last {
                a_out[i] = h;
            } else {
                a_out[i] = elu(h);
            }
            if tape.with_tangent {
                let ht: f64 = row.iter().zip(t_in.iter()).map(|(a, b)| a * b).sum();
                tape.pre_t[l][i] = ht;
                t_out[i] = if l == last { ht } else { elu_d(h).0 * ht };
            }
        }
    }
}

/// Scratch buffers for the reverse sweep.
#[derive(Debug, Clone)]
struct BackScratch {
    bar: Vec<f64>,
    bar_t: Vec<f64>,
    hbar: Vec<f64>,
    hbar_t: Vec<f64>,
}

impl BackScratch {
    fn new(dims: &[usize]) -> Self {
        let m = dims.iter().copied().max().unwrap_or(0);
        Self {
            bar: vec![0.0; m],
            bar_t: vec![0.0; m],
            hbar: vec![0.0; m],
            hbar_t: vec![0.0; m],
        }
    }
}

/// Reverse sweep through the paired layers recorded on `tape`.
///
/// `out_bar` / `out_bar_t` are the adjoints of the output value and tangent.
/// Gradients are accumulated into `grads`; if `in_bar` is given, the input
/// adjoints (value, tangent) are written there.
fn backward_tape(
    p: &MlpParams,
    tape: &Tape,
    out_bar: &[f64],
    out_bar_t: Option<&[f64]>,
    grads: &mut MlpParams,
    s: &mut BackScratch,
    in_bar: Option<(&mut [f64], &mut [f64])>,
) {
    let n_layers = p.n_layers();
    let last = n_layers - 1;
    let with_t = tape.with_tangent && out_bar_t.is_some();
    let d_out = p.output_dim();
    s.bar[..d_out].copy_from_slice(out_bar);
    match out_bar_t {
        Some(t) if with_t => s.bar_t[..d_out].copy_from_slice(t),
        _ => s.bar_t[..d_out].fill(0.0),
    }
    let mut in_bar = in_bar;
    for l in (0..n_layers).rev() {
        let (n_out, n_in) = (p.dims[l + 1], p.dims[l]);
        for i in 0..n_out {
            let (d1, d2) = if l == last { (1.0, 0.0) } else { elu_d(tape.pre[l][i]) };
            let mut hb = s.bar[i] * d1;
            let mut hbt = 0.0;
            if with_t {
                hb += s.bar_t[i] * d2 * tape.pre_t[l][i];
                hbt = s.bar_t[i] * d1;
            }
            s.hbar[i] = hb;
            s.hbar_t[i] = hbt;
        }
        let a = &tape.act[l];
        let at = &tape.act_t[l];
        let gw = grads.weights[l].as_mut_slice();
        for i in 0..n_out {
            let (hb, hbt) = (s.hbar[i], s.hbar_t[i]);
            grads.biases[l][i] += hb;
            let row = &mut gw[i * n_in..(i + 1) * n_in];
            if with_t && hbt != 0.0 {
                for j in 0..n_in {
                    row[j] += hb * a[j] + hbt * at[j];
                }
            } else {
                for j in 0..n_in {
                    row[j] += hb * a[j];
                }
            }
        }
        if l == 0 && in_bar.is_none() {
            break;
        }
        let w = p.weights[l].as_slice();
        s.bar[..n_in].fill(0.0);
        s.bar_t[..n_in].fill(0.0);
        for i in 0..n_out {
            let (hb, hbt) = (s.hbar[i], s.hbar_t[i]);
            let row = &w[i * n_in..(i + 1) * n_in];
            for j in 0..n_in {
                s.bar[j] += row[j] * hb;
            }
            if with_t {
                for j in 0..n_in {
                    s.bar_t[j] += row[j] * hbt;
                }
            }
        }
    }
    if let Some((xb, xbt)) = in_bar.as_mut() {
        let n_in = p.input_dim();
        xb.copy_from_slice(&s.bar[..n_in]);
        xbt.copy_from_slice(&s.bar_t[..n_in]);
    }
}

/// Network output for every row of `x`.
pub fn forward(params: &MlpParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.input_dim() {
        return Err(invalid(format!(
            "input has width {} but the network expects {}",
            x.cols(),
            params.input_dim()
        )));
    }
    let mut tape = Tape::new(&params.dims);
    let mut out = Matrix::zeros(x.rows(), params.output_dim());
    for i in 0..x.rows() {
        forward_tape(params, x.row(i), None, &mut tape);
        out.row_mut(i).copy_from_slice(tape.output());
    }
    Ok(out)
}

/// Single-sample evaluation.
pub fn forward_one(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() {
        return Err(invalid("input width does not match the network"));
    }
    let mut tape = Tape::new(&params.dims);
    forward_tape(params, x, None, &mut tape);
    Ok(tape.output().to_vec())
}

/// Output and Jacobian-vector product `∇f(x)·v`.
pub fn jvp(params: &MlpParams, x: &[f64], v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != params.input_dim() || v.len() != params.input_dim() {
        return Err(invalid("jvp input and direction must match the network input width"));
    }
    let mut tape = Tape::new(&params.dims);
    forward_tape(params, x, Some(v), &mut tape);
    Ok((tape.output().to_vec(), tape.output_tangent().to_vec()))
}

/// Gradient of `wᵀ f(x)` with respect to `x` (reverse mode).
pub fn vjp(params: &MlpParams, x: &[f64], w: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim() || w.len() != params.output_dim() {
        return Err(invalid("vjp shapes do not match the network"));
    }
    let mut tape = Tape::new(&params.dims);
    forward_tape(params, x, None, &mut tape);
    let mut grads = MlpParams::zeros_like(&params.dims);
    let mut s = BackScratch::new(&params.dims);
    let mut xb = vec![0.0; x.len()];
    let mut xbt = vec![0.0; x.len()];
    backward_tape(params, &tape, w, None, &mut grads, &mut s, Some((&mut xb, &mut xbt)));
    Ok(xb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("loss weights must be nonnegative"));
        }
        Ok(())
    }
}

/// Individual loss terms, already multiplied by their weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub sparse_regression: f64,
    pub l1: f64,
    pub consistency: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.reconstruction + self.sparse_regression + self.l1 + self.consistency
    }

    fn check(&self) -> Result<()> {
        for (name, v) in [
            ("reconstruction", self.reconstruction),
            ("sparse regression", self.sparse_regression),
            ("l1", self.l1),
            ("consistency", self.consistency),
        ] {
            if !v.is_finite() {
                return Err(Error::NumericalFailure(format!("{name} loss term is not finite")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub xi: Matrix,
}

/// Reusable buffers for [`JointLoss::eval`].
#[derive(Debug, Clone)]
struct Workspace {
    enc_tape: Tape,
    dec_tape: Tape,
    enc_s: BackScratch,
    dec_s: BackScratch,
    theta: Vec<f64>,
    jac: Vec<f64>,
    s: Vec<f64>,
    x_bar: Vec<f64>,
    xt_bar: Vec<f64>,
    z_bar: Vec<f64>,
    s_bar: Vec<f64>,
    zt_bar: Vec<f64>,
    theta_bar: Vec<f64>,
}

/// Joint loss with its library compiled once.
#[derive(Debug, Clone)]
pub struct JointLoss {
    lib: Library,
    weights: LossWeights,
}

impl JointLoss {
    pub fn new(spec: &LibrarySpec, weights: LossWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate()?;
        Ok(Self {
            lib: spec.compile(),
            weights,
        })
    }

    fn workspace(&self, enc: &MlpParams, dec: &MlpParams) -> Workspace {
        let (n_in, n) = (enc.input_dim(), enc.output_dim());
        let r = self.lib.n_terms();
        Workspace {
            enc_tape: Tape::new(&enc.dims),
            dec_tape: Tape::new(&dec.dims),
            enc_s: BackScratch::new(&enc.dims),
            dec_s: BackScratch::new(&dec.dims),
            theta: vec![0.0; r],
            jac: vec![0.0; r * n],
            s: vec![0.0; n],
            x_bar: vec![0.0; n_in],
            xt_bar: vec![0.0; n_in],
            z_bar: vec![0.0; n],
            s_bar: vec![0.0; n],
            zt_bar: vec![0.0; n],
            theta_bar: vec![0.0; r],
        }
    }

    fn check_shapes(&self, x: &Matrix, xdot: &Matrix, mu: &[f64], enc: &MlpParams, dec: &MlpParams, xi: &Matrix) -> Result<()> {
        let n = enc.output_dim();
        if x.rows() == 0 {
            return Err(invalid("empty batch"));
        }
        if x.shape() != xdot.shape() || mu.len() != x.rows() {
            return Err(invalid("x, xdot and mu must be aligned"));
        }
        if x.cols() != enc.input_dim() || dec.input_dim() != n || dec.output_dim() != x.cols() {
            return Err(invalid("encoder/decoder dimensions do not chain"));
        }
        if self.lib.state_dim() != n || xi.shape() != (self.lib.n_terms(), n) {
            return Err(invalid("library or coefficient shape does not match the latent dimension"));
        }
        Ok(())
    }

    /// Loss over the rows listed in `rows` and its gradients (accumulated
    /// into `grads`, which is zeroed first).
    fn eval_rows(
        &self,
        x: &Matrix,
        xdot: &Matrix,
        mu: &[f64],
        rows: &[usize],
        enc: &MlpParams,
        dec: &MlpParams,
        xi: &Matrix,
        grads: &mut Gradients,
        ws: &mut Workspace,
    ) -> LossParts {
        grads.encoder.fill_zero();
        grads.decoder.fill_zero();
        grads.xi.as_mut_slice().fill(0.0);
        let LossWeights { lambda1: l1w, lambda2, lambda3: l3w } = self.weights;
        let need_lib = l1w > 0.0 || l3w > 0.0;
        let enc_tan = l1w > 0.0;
        let dec_tan = l3w > 0.0;
        let n = enc.output_dim();
        let r = self.lib.n_terms();
        let mut parts = LossParts::default();
        for &row in rows {
            let xr = x.row(row);
            let xdr = xdot.row(row);
            forward_tape(enc, xr, if enc_tan { Some(xdr) } else { None }, &mut ws.enc_tape);
            let z = ws.enc_tape.output();
            if need_lib {
                self.lib.eval_with_jacobian(z, mu[row], &mut ws.theta, &mut ws.jac);
                ws.s.fill(0.0);
                for k in 0..r {
                    let t = ws.theta[k];
                    if t != 0.0 {
                        for (sj, &c) in ws.s.iter_mut().zip(xi.row(k)) {
                            *sj += t * c;
                        }
                    }
                }
            }
            forward_tape(dec, z, if dec_tan { Some(&ws.s) } else { None }, &mut ws.dec_tape);

            // decoder output adjoints
            let xhat = ws.dec_tape.output();
            for j in 0..xr.len() {
                let e = xr[j] - xhat[j];
                parts.reconstruction += e * e;
                ws.x_bar[j] = -2.0 * e;
            }
            if dec_tan {
                let dx = ws.dec_tape.output_tangent();
                for j in 0..xr.len() {
                    let e = xdr[j] - dx[j];
                    parts.consistency += l3w * e * e;
                    ws.xt_bar[j] = -2.0 * l3w * e;
                }
            }
            let (z_bar, s_bar) = (&mut ws.z_bar, &mut ws.s_bar);
            backward_tape(
                dec,
                &ws.dec_tape,
                &ws.x_bar,
                if dec_tan { Some(&ws.xt_bar) } else { None },
                &mut grads.decoder,
                &mut ws.dec_s,
                Some((z_bar, s_bar)),
            );
            if !dec_tan {
                ws.s_bar.fill(0.0);
            }
            // sparse regression term: ‖ż − s‖²
            if enc_tan {
                let zt = ws.enc_tape.output_tangent();
                for j in 0..n {
                    let e = zt[j] - ws.s[j];
                    parts.sparse_regression += l1w * e * e;
                    ws.zt_bar[j] = 2.0 * l1w * e;
                    ws.s_bar[j] -= 2.0 * l1w * e;
                }
            }
            // s = θᵀΞ
            if need_lib {
                for k in 0..r {
                    let t = ws.theta[k];
                    let mut tb = 0.0;
                    let gx = grads.xi.row_mut(k);
                    for j in 0..n {
                        gx[j] += t * ws.s_bar[j];
                        tb += xi[(k, j)] * ws.s_bar[j];
                    }
                    ws.theta_bar[k] = tb;
                }
                for k in 0..r {
                    let tb = ws.theta_bar[k];
                    if tb != 0.0 {
                        for j in 0..n {
                            ws.z_bar[j] += ws.jac[k * n + j] * tb;
                        }
                    }
                }
            }
            backward_tape(
                enc,
                &ws.enc_tape,
                &ws.z_bar,
                if enc_tan { Some(&ws.zt_bar) } else { None },
                &mut grads.encoder,
                &mut ws.enc_s,
                None,
            );
        }
        if lambda2 > 0.0 {
            for (g, &c) in grads.xi.as_mut_slice().iter_mut().zip(xi.as_slice()) {
                parts.l1 += lambda2 * c.abs();
                if c != 0.0 {
                    *g += lambda2 * c.signum();
                }
            }
        }
        parts
    }
}

/// Joint loss over a batch and gradients for encoder, decoder and Ξ.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss_and_grads(
    x: &Matrix,
    xdot: &Matrix,
    mu: &[f64],
    enc: &MlpParams,
    dec: &MlpParams,
    xi: &Matrix,
    spec: &LibrarySpec,
    weights: LossWeights,
) -> Result<(LossParts, Gradients)> {
    let loss = JointLoss::new(spec, weights)?;
    loss.check_shapes(x, xdot, mu, enc, dec, xi)?;
    let mut ws = loss.workspace(enc, dec);
    let mut grads = Gradients {
        encoder: MlpParams::zeros_like(&enc.dims),
        decoder: MlpParams::zeros_like(&dec.dims),
        xi: Matrix::zeros(xi.rows(), xi.cols()),
    };
    let rows: Vec<usize> = (0..x.rows()).collect();
    let parts = loss.eval_rows(x, xdot, mu, &rows, enc, dec, xi, &mut grads, &mut ws);
    parts.check()?;
    Ok((parts, grads))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// ADAM moments for one flat parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected ADAM update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64) {
    debug_assert_eq!(params.len(), state.m.len());
    debug_assert_eq!(grads.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Rows fed to the autoencoder: scaled POD coefficients, their time
/// derivatives and the parameter of each row.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub x: Matrix,
    pub xdot: Matrix,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedAutoencoder {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    pub xi: Matrix,
    pub spec: LibrarySpec,
    /// Sum of batch losses per epoch, plus the ℓ1 term at the epoch's end.
    pub loss_history: Vec<f64>,
}

impl TrainedAutoencoder {
    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        forward(&self.encoder, x)
    }

    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        forward(&self.decoder, z)
    }
}

/// Encoder dims `[input, hidden…, latent]` and the mirrored decoder dims.
pub fn network_dims(input: usize, hidden: &[usize], latent: usize) -> (Vec<usize>, Vec<usize>) {
    let mut enc = vec![input];
    enc.extend_from_slice(hidden);
    enc.push(latent);
    let dec = enc.iter().rev().copied().collect();
    (enc, dec)
}

/// Mini-batch ADAM on the joint loss; see [`train_with_progress`].
pub fn train(
    data: &TrainingData,
    hidden: &[usize],
    latent: usize,
    spec: &LibrarySpec,
    weights: LossWeights,
    config: &TrainConfig,
) -> Result<TrainedAutoencoder> {
    train_with_progress(data, hidden, latent, spec, weights, config, |_, _| {})
}

/// Mini-batch ADAM on the joint loss, calling `on_epoch(epoch, loss)` after
/// every epoch.
///
/// Encoder and decoder are initialized from `Rng::new(seed).fork(0)` and
/// `fork(1)`; batch order comes from `fork(2)`. Ξ starts at zero. Batches
/// are reduced in row order, so a fixed seed reproduces the loss history
/// bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn train_with_progress(
    data: &TrainingData,
    hidden: &[usize],
    latent: usize,
    spec: &LibrarySpec,
    weights: LossWeights,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainedAutoencoder> {
    config.validate()?;
    if latent == 0 {
        return Err(invalid("latent dimension must be at least 1"));
    }
    if spec.state_dim != latent {
        return Err(invalid(format!(
            "library has {} state variables but the latent dimension is {latent}",
            spec.state_dim
        )));
    }
    let (enc_dims, dec_dims) = network_dims(data.x.cols(), hidden, latent);
    let rng = Rng::new(config.seed);
    let mut enc = init_mlp(&enc_dims, &mut rng.fork(0))?;
    let mut dec = init_mlp(&dec_dims, &mut rng.fork(1))?;
    let mut order_rng = rng.fork(2);
    let mut xi = Matrix::zeros(spec.n_terms(), latent);

    let loss = JointLoss::new(spec, weights)?;
    loss.check_shapes(&data.x, &data.xdot, &data.mu, &enc, &dec, &xi)?;
    let mut ws = loss.workspace(&enc, &dec);
    let mut grads = Gradients {
        encoder: MlpParams::zeros_like(&enc_dims),
        decoder: MlpParams::zeros_like(&dec_dims),
        xi: Matrix::zeros(xi.rows(), xi.cols()),
    };
    let mut enc_state: Vec<AdamState> = enc.slices().iter().map(|s| AdamState::new(s.len())).collect();
    let mut dec_state: Vec<AdamState> = dec.slices().iter().map(|s| AdamState::new(s.len())).collect();
    let mut xi_state = AdamState::new(xi.as_slice().len());

    let mut order: Vec<usize> = (0..data.x.rows()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let lambda2 = weights.lambda2;
    for epoch in 0..config.epochs {
        let checkpoint = (enc.clone(), dec.clone(), xi.clone());
        if config.shuffle {
            order_rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let parts = loss.eval_rows(&data.x, &data.xdot, &data.mu, batch, &enc, &dec, &xi, &mut grads, &mut ws);
            let data_terms = LossParts { l1: 0.0, ..parts };
            if let Err(Error::NumericalFailure(reason)) = parts.check() {
                let (encoder, decoder, xi) = checkpoint;
                return Err(Error::TrainingAborted {
                    epoch,
                    reason,
                    checkpoint: Box::new(TrainedAutoencoder {
                        encoder,
                        decoder,
                        xi,
                        spec: spec.clone(),
                        loss_history: history,
                    }),
                });
            }
            epoch_loss += data_terms.total();
            for ((p, g), st) in enc.slices_mut().into_iter().zip(grads.encoder.slices()).zip(&mut enc_state) {
                adam_step(st, p, g, config.learning_rate);
            }
            for ((p, g), st) in dec.slices_mut().into_iter().zip(grads.decoder.slices()).zip(&mut dec_state) {
                adam_step(st, p, g, config.learning_rate);
            }
            adam_step(&mut xi_state, xi.as_mut_slice(), grads.xi.as_slice(), config.learning_rate);
        }
        epoch_loss += lambda2 * xi.as_slice().iter().map(|v| v.abs()).sum::<f64>();
        history.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
    }
    Ok(TrainedAutoencoder {
        encoder: enc,
        decoder: dec,
        xi,
        spec: spec.clone(),
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bound_and_zero_bias() {
        let p = init_mlp(&[4, 2], &mut Rng::new(1)).unwrap();
        assert!(p.weights()[0].max_abs() <= 1.0);
        assert!(p.biases()[0].iter().all(|&b| b == 0.0));
        assert_eq!(p, init_mlp(&[4, 2], &mut Rng::new(1)).unwrap());
        assert!(init_mlp(&[3], &mut Rng::new(1)).is_err());
    }

    #[test]
    fn zero_and_identity_networks() {
        let zero = MlpParams::zeros_like(&[3, 4, 2]);
        let out = forward(&zero, &Matrix::from_rows(&[[1.0, -2.0, 3.0]]).unwrap()).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
        let id = MlpParams::from_parts(vec![Matrix::identity(2)], vec![vec![0.0; 2]]).unwrap();
        assert_eq!(forward_one(&id, &[0.5, -4.0]).unwrap(), vec![0.5, -4.0]);
        assert!(forward(&id, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn hand_computed_two_two_one() {
        // h = [[1, 2], [-1, 0.5]]·(1, −1) + (0.5, 0) = (-0.5, -1.5)
        let w1 = Matrix::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap();
        let w2 = Matrix::from_rows(&[[2.0, -1.0]]).unwrap();
        let p = MlpParams::from_parts(vec![w1, w2], vec![vec![0.5, 0.0], vec![0.25]]).unwrap();
        let a = [(-0.5f64).exp() - 1.0, (-1.5f64).exp() - 1.0];
        let expect = 2.0 * a[0] - a[1] + 0.25;
        assert!((forward_one(&p, &[1.0, -1.0]).unwrap()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn jvp_linear_zero_and_finite_difference() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [3.0, -1.0]]).unwrap();
        let lin = MlpParams::from_parts(vec![w.clone()], vec![vec![0.3, 0.1]]).unwrap();
        let (_, t) = jvp(&lin, &[5.0, -7.0], &[1.0, 1.0]).unwrap();
        assert_eq!(t, w.matvec(&[1.0, 1.0]));

        let p = init_mlp(&[5, 7, 4, 3], &mut Rng::new(4)).unwrap();
        let x = [0.3, -0.2, 0.9, -1.1, 0.05];
        let (_, zero) = jvp(&p, &x, &[0.0; 5]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        let v = [0.5, -0.1, 0.2, 0.7, -0.3];
        let (_, t) = jvp(&p, &x, &v).unwrap();
        let h = 1e-5;
        let shift = |s: f64| {
            let xs: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + s * b).collect();
            forward_one(&p, &xs).unwrap()
        };
        let (fp, fm) = (shift(h), shift(-h));
        for i in 0..3 {
            let fd = (fp[i] - fm[i]) / (2.0 * h);
            assert!((fd - t[i]).abs() <= 1e-6 * fd.abs().max(1e-3), "{fd} vs {}", t[i]);
        }
    }

    #[test]
    fn jvp_and_vjp_dot_product_test() {
        let p = init_mlp(&[4, 6, 3], &mut Rng::new(8)).unwrap();
        let x = [0.1, -0.5, 0.8, -0.2];
        let v = [0.3, 0.2, -0.7, 0.4];
        let w = [1.0, -0.6, 0.25];
        let (_, jv) = jvp(&p, &x, &v).unwrap();
        let jtw = vjp(&p, &x, &w).unwrap();
        let lhs: f64 = jv.iter().zip(&w).map(|(a, b)| a * b).sum();
        let rhs: f64 = jtw.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1e-12));
    }

    #[test]
    fn elu_is_continuous_at_zero() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu_d(0.0).0, 1.0);
        assert!((elu_d(-1e-12).0 - 1.0).abs() < 1e-11);
    }

    #[test]
    fn adam_closed_forms() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, 2.0, 3.0];
        adam_step(&mut st, &mut p, &[0.0; 3], 0.1);
        assert_eq!(p, vec![1.0, 2.0, 3.0]);

        let mut st = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        adam_step(&mut st, &mut p, &[3.0, -0.5], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-9 && (p[1] - 0.01).abs() < 1e-9);
        let mut prev = p[0];
        for _ in 0..50 {
            adam_step(&mut st, &mut p, &[3.0, -0.5], 0.01);
            assert!(p[0] < prev);
            prev = p[0];
        }
    }

    #[test]
    fn pure_autoencoder_loss_is_zero_for_exact_reconstruction() {
        let enc = MlpParams::from_parts(vec![Matrix::identity(2)], vec![vec![0.0; 2]]).unwrap();
        let dec = enc.clone();
        let spec = LibrarySpec::new(2, 0, 1, 0, true).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let (parts, _) = joint_loss_and_grads(&x, &x, &[0.0, 0.0], &enc, &dec, &Matrix::zeros(3, 2), &spec, w).unwrap();
        assert_eq!(parts.total(), 0.0);
    }

    #[test]
    fn one_epoch_full_batch_is_one_step() {
        let mut rng = Rng::new(3);
        let x = Matrix::from_fn(10, 3, |_, _| rng.normal());
        let data = TrainingData { xdot: x.clone(), x, mu: vec![0.5; 10] };
        let spec = LibrarySpec::new(2, 1, 1, 1, true).unwrap();
        let w = LossWeights { lambda1: 1e-3, lambda2: 1e-4, lambda3: 1e-3 };
        let cfg = TrainConfig { epochs: 1, learning_rate: 1e-3, batch_size: 10, seed: 1, shuffle: true };
        let t = train(&data, &[4], 2, &spec, w, &cfg).unwrap();
        assert_eq!(t.loss_history.len(), 1);
        // Ξ started at zero and took exactly one ADAM step of size lr
        assert!(t.xi.as_slice().iter().all(|v| v.abs() <= 1e-3 + 1e-12));
    }
}
