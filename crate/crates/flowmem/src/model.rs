//! MLP velocity network `v(x, t)` with a sinusoidal time embedding.
//!
//! The network maps `[x ; embed(t)]` through fully connected layers with a
//! smooth GELU nonlinearity between them and a linear output layer. Weights
//! are fan-in-scaled Gaussians from a seeded stream, so a `(seed, widths)`
//! pair pins the model bit-exactly.

use crate::error::{Error, Result};
use crate::rng;
use crate::tape::{self, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Width of the sinusoidal time embedding. Eight frequency octaves, one
/// sine/cosine pair each.
pub const TIME_EMBED_WIDTH: usize = 16;

/// `embed(t)`: interleaved `sin(pi 2^i t), cos(pi 2^i t)` for i in 0..8.
pub fn time_embedding(t: f64) -> [f64; TIME_EMBED_WIDTH] {
    let mut out = [0.0; TIME_EMBED_WIDTH];
    let mut freq = std::f64::consts::PI;
    for i in 0..TIME_EMBED_WIDTH / 2 {
        out[2 * i] = (freq * t).sin();
        out[2 * i + 1] = (freq * t).cos();
        freq *= 2.0;
    }
    out
}

/// Anything that exposes a velocity field over `(x, t)` plus its input
/// Jacobian via vector-Jacobian products. Trained networks, the analytic
/// linear baseline, and test stubs all implement this, which is what lets
/// the attack and likelihood code run against closed-form oracles.
pub trait VelocityField {
    fn dim(&self) -> usize;

    /// `v(x, t)`.
    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// `J^T c` where `J = dv/dx` at `(x, t)`.
    fn input_vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64>;

    /// Several VJPs at one point. Implementations that can share a forward
    /// pass override this.
    fn input_vjp_multi(&self, x: &[f64], t: f64, cotangents: &[Vec<f64>]) -> Vec<Vec<f64>> {
        cotangents
            .iter()
            .map(|c| self.input_vjp(x, t, c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    /// `[fan_in, fan_out]`, row-major.
    pub w: Tensor,
    /// `[fan_out]`.
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpVelocityModel {
    dim: usize,
    hidden: Vec<usize>,
    pub(crate) layers: Vec<Linear>,
    seed: u64,
    /// Number of optimizer steps this model has absorbed.
    pub train_steps: u64,
    /// Descriptor of the timestep sampler it was trained under, carried
    /// into checkpoints for provenance.
    pub sampler_desc: String,
}

impl MlpVelocityModel {
    /// Fresh model with fan-in-scaled Gaussian weights and zero biases.
    pub fn new(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("data dimension must be positive".into()));
        }
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(dim + TIME_EMBED_WIDTH);
        widths.extend_from_slice(hidden);
        widths.push(dim);

        let mut r = rng::substream(seed, "model-init", 0);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let mut w = vec![0.0; fan_in * fan_out];
            rng::fill_standard_normal(&mut r, &mut w);
            for v in &mut w {
                *v *= std;
            }
            layers.push(Linear {
                w: Tensor::from_vec(vec![fan_in, fan_out], w)?,
                b: Tensor::zeros(vec![fan_out]),
            });
        }
        Ok(MlpVelocityModel {
            dim,
            hidden: hidden.to_vec(),
            layers,
            seed,
            train_steps: 0,
            sampler_desc: "untrained".to_string(),
        })
    }

    /// Model with every weight and bias at zero (useful as a stub).
    pub fn zeroed(dim: usize, hidden: &[usize]) -> Result<Self> {
        let mut m = Self::new(dim, hidden, 0)?;
        for l in &mut m.layers {
            l.w.data_mut().fill(0.0);
            l.b.data_mut().fill(0.0);
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn from_parts(
        dim: usize,
        hidden: Vec<usize>,
        layers: Vec<Linear>,
        seed: u64,
        train_steps: u64,
        sampler_desc: String,
    ) -> Self {
        MlpVelocityModel {
            dim,
            hidden,
            layers,
            seed,
            train_steps,
            sampler_desc,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.numel() + l.b.numel())
            .sum()
    }

    /// Flat borrow of every parameter tensor (weights then bias, per layer).
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.w, &l.b])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    pub fn all_params_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.is_finite() && l.b.is_finite())
    }

    fn check_input(&self, x: &[f64], t: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::shape(format!(
                "input has {} elements, model dimension is {}",
                x.len(),
                self.dim
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("t={} outside [0,1]", t)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                t,
                reason: "non-finite input to forward pass".into(),
            });
        }
        Ok(())
    }

    /// Pure forward pass on a frozen model. Thread-safe: takes `&self` and
    /// touches no shared state.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let emb = time_embedding(t);
        let mut cur: Vec<f64> = x.iter().copied().chain(emb.iter().copied()).collect();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let fan_in = layer.w.shape()[0];
            let fan_out = layer.w.shape()[1];
            debug_assert_eq!(cur.len(), fan_in);
            let mut next = layer.b.data().to_vec();
            for (i, &xi) in cur.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = &layer.w.data()[i * fan_out..(i + 1) * fan_out];
                for (nj, wv) in next.iter_mut().zip(wrow) {
                    *nj += xi * wv;
                }
            }
            if li != last {
                for v in &mut next {
                    *v = tape::gelu(*v);
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Batched frozen forward: `xs` is `[B, dim]`, `ts` one t per row.
    pub fn forward_batch(&self, xs: &Tensor, ts: &[f64]) -> Result<Tensor> {
        let b = xs.shape()[0];
        if xs.shape().len() != 2 || xs.shape()[1] != self.dim || ts.len() != b {
            return Err(Error::shape(format!(
                "batch shape {:?} / {} ts incompatible with dim {}",
                xs.shape(),
                ts.len(),
                self.dim
            )));
        }
        let mut out = Vec::with_capacity(b * self.dim);
        for (i, &t) in ts.iter().enumerate() {
            out.extend(self.forward(xs.row(i), t)?);
        }
        Tensor::from_vec(vec![b, self.dim], out)
    }
}

impl VelocityField for MlpVelocityModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, x: &[f64], t: f64) -> Vec<f64> {
        self.forward(x, t).expect("frozen forward on valid input")
    }

    fn input_vjp(&self, x: &[f64], t: f64, cotangent: &[f64]) -> Vec<f64> {
        self.input_vjp_multi(x, t, std::slice::from_ref(&cotangent.to_vec()))
            .pop()
            .unwrap()
    }

    fn input_vjp_multi(&self, x: &[f64], t: f64, cotangents: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let taped = TapedForward::with_input_grad(self, x, t).expect("vjp forward");
        let out = taped.output();
        cotangents
            .iter()
            .map(|c| {
                let grads = taped.tape.vjp(out, c).expect("vjp sweep");
                grads.get(taped.x_var.unwrap()).unwrap().to_vec()
            })
            .collect()
    }
}

/// One recorded forward pass of the MLP: parameters are tape leaves, so a
/// scalar loss built on top of [`TapedForward::output`] can be backpropagated
/// into the model via [`TapedForward::backward_into`].
pub struct TapedForward {
    pub tape: Tape,
    param_vars: Vec<(Var, Var)>,
    x_var: Option<Var>,
    out: Var,
}

impl TapedForward {
    /// Records a batched forward pass; `xs` is constant, parameters are
    /// differentiable leaves.
    pub fn batch(model: &MlpVelocityModel, xs: &Tensor, ts: &[f64]) -> Result<Self> {
        Self::build(model, xs, ts, false)
    }

    /// Records a single-sample pass where the *input* is the leaf and the
    /// parameters are constants; used for input-Jacobian probes.
    pub fn with_input_grad(model: &MlpVelocityModel, x: &[f64], t: f64) -> Result<Self> {
        let xs = Tensor::from_vec(vec![1, x.len()], x.to_vec())?;
        Self::build(model, &xs, &[t], true)
    }

    fn build(model: &MlpVelocityModel, xs: &Tensor, ts: &[f64], input_grad: bool) -> Result<Self> {
        let b = xs.shape()[0];
        if xs.shape().len() != 2 || xs.shape()[1] != model.dim || ts.len() != b {
            return Err(Error::shape(format!(
                "batch shape {:?} / {} ts incompatible with dim {}",
                xs.shape(),
                ts.len(),
                model.dim
            )));
        }
        if ts.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::InvalidArgument("t outside [0,1]".into()));
        }
        let mut tape = Tape::new();
        let param_vars: Vec<(Var, Var)> = model
            .layers
            .iter()
            .map(|l| {
                if input_grad {
                    (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                } else {
                    (tape.leaf(l.w.clone()), tape.leaf(l.b.clone()))
                }
            })
            .collect();

        let mut emb = Vec::with_capacity(b * TIME_EMBED_WIDTH);
        for &t in ts {
            emb.extend_from_slice(&time_embedding(t));
        }
        let emb = tape.constant(Tensor::from_vec(vec![b, TIME_EMBED_WIDTH], emb)?);
        let x_var = if input_grad {
            tape.leaf(xs.clone())
        } else {
            tape.constant(xs.clone())
        };
        let mut cur = tape.concat_cols(x_var, emb)?;
        let last = param_vars.len() - 1;
        for (li, &(w, bias)) in param_vars.iter().enumerate() {
            cur = tape.matmul(cur, w)?;
            cur = tape.add_row(cur, bias)?;
            if li != last {
                cur = tape.gelu(cur)?;
            }
        }
        Ok(TapedForward {
            tape,
            param_vars,
            x_var: input_grad.then_some(x_var),
            out: cur,
        })
    }

    /// The `[B, dim]` network output on the tape.
    pub fn output(&self) -> Var {
        self.out
    }

    /// Runs backward from `loss` and writes gradients into the model's
    /// parameter store (accumulating over prior contents is not supported:
    /// buffers are overwritten).
    pub fn backward_into(self, loss: Var, model: &mut MlpVelocityModel) -> Result<()> {
        let grads = self.tape.backward(loss)?;
        write_param_grads(&grads, &self.param_vars, model)
    }

    /// As [`Self::backward_into`] but from a vector output with cotangent.
    pub fn vjp_into(&self, cotangent: &[f64], model: &mut MlpVelocityModel) -> Result<()> {
        let grads = self.tape.vjp(self.out, cotangent)?;
        write_param_grads(&grads, &self.param_vars, model)
    }
}

fn write_param_grads(
    grads: &Gradients,
    param_vars: &[(Var, Var)],
    model: &mut MlpVelocityModel,
) -> Result<()> {
    if param_vars.len() != model.layers.len() {
        return Err(Error::State(
            "taped pass does not match model layer count".into(),
        ));
    }
    for (layer, &(wv, bv)) in model.layers.iter_mut().zip(param_vars) {
        let wg = grads
            .get(wv)
            .ok_or_else(|| Error::State("missing weight gradient".into()))?;
        let bg = grads
            .get(bv)
            .ok_or_else(|| Error::State("missing bias gradient".into()))?;
        layer.w.set_grad(wg.to_vec())?;
        layer.b.set_grad(bg.to_vec())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpVelocityModel::zeroed(4, &[8]).unwrap();
        let out = m.forward(&[1.0, -2.0, 3.0, 0.5], 0.3).unwrap();
        assert_eq!(out, vec![0.0; 4]);
    }

    #[test]
    fn identity_single_layer() {
        // One linear layer, x-block identity, t-block zero: v(x, t) = x.
        let d = 3;
        let mut m = MlpVelocityModel::zeroed(d, &[]).unwrap();
        {
            let w = m.layers[0].w.data_mut();
            for i in 0..d {
                w[i * d + i] = 1.0;
            }
        }
        let e1 = [1.0, 0.0, 0.0];
        let out = m.forward(&e1, 0.7).unwrap();
        assert_eq!(out, e1.to_vec());
    }

    /// Independent oracle: the same forward pass written as explicit loops
    /// over the raw weight buffers, no shared code with `forward`.
    fn hand_unrolled(m: &MlpVelocityModel, x: &[f64], t: f64) -> Vec<f64> {
        let emb = time_embedding(t);
        let mut cur: Vec<f64> = x.to_vec();
        cur.extend_from_slice(&emb);
        for (li, layer) in m.layers.iter().enumerate() {
            let (fin, fout) = (layer.w.shape()[0], layer.w.shape()[1]);
            let mut nxt = vec![0.0; fout];
            for j in 0..fout {
                let mut s = layer.b.data()[j];
                for i in 0..fin {
                    s += cur[i] * layer.w.data()[i * fout + j];
                }
                nxt[j] = s;
            }
            if li + 1 != m.layers.len() {
                for v in &mut nxt {
                    let u = 0.797884560802865 * (*v + 0.044715 * *v * *v * *v);
                    *v = 0.5 * *v * (1.0 + u.tanh());
                }
            }
            cur = nxt;
        }
        cur
    }

    #[test]
    fn forward_matches_hand_unrolled_oracle() {
        let m = MlpVelocityModel::new(6, &[11, 7], 99).unwrap();
        let mut r = rng::substream(5, "test", 0);
        for k in 0..20 {
            let x = rng::standard_normal_vec(&mut r, 6);
            let t = (k as f64 + 0.5) / 20.0;
            let got = m.forward(&x, t).unwrap();
            let want = hand_unrolled(&m, &x, t);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes_and_t() {
        let m = MlpVelocityModel::new(4, &[8], 1).unwrap();
        assert!(matches!(m.forward(&[0.0; 3], 0.5), Err(Error::Shape(_))));
        assert!(m.forward(&[0.0; 4], 1.5).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MlpVelocityModel::new(8, &[16, 16], 1234).unwrap();
        let b = MlpVelocityModel::new(8, &[16, 16], 1234).unwrap();
        let c = MlpVelocityModel::new(8, &[16, 16], 1235).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn taped_forward_matches_frozen_forward() {
        let m = MlpVelocityModel::new(5, &[9], 7).unwrap();
        let mut r = rng::substream(6, "test", 0);
        let xs = Tensor::from_vec(vec![3, 5], rng::standard_normal_vec(&mut r, 15)).unwrap();
        let ts = [0.1, 0.5, 0.9];
        let taped = TapedForward::batch(&m, &xs, &ts).unwrap();
        let frozen = m.forward_batch(&xs, &ts).unwrap();
        let taped_out = taped.tape.value(taped.output());
        for (a, b) in taped_out.iter().zip(frozen.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let m = MlpVelocityModel::new(4, &[6], 3).unwrap();
        let mut r = rng::substream(8, "test", 0);
        let x = rng::standard_normal_vec(&mut r, 4);
        let t = 0.4;
        let cot = rng::standard_normal_vec(&mut r, 4);
        let got = m.input_vjp(&x, t, &cot);
        let h = 1e-6;
        for i in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp: f64 = m
                .forward(&xp, t)
                .unwrap()
                .iter()
                .zip(&cot)
                .map(|(v, c)| v * c)
                .sum();
            let fm: f64 = m
                .forward(&xm, t)
                .unwrap()
                .iter()
                .zip(&cot)
                .map(|(v, c)| v * c)
                .sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - got[i]).abs() < 1e-6 * (1.0 + fd.abs()),
                "coord {i}: fd={fd} vjp={}",
                got[i]
            );
        }
    }
}
