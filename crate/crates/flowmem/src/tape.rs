//! Reverse-mode automatic differentiation on a per-step tape.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! consumes the tape and returns the gradients of a scalar loss with respect
//! to every `leaf` node. The op set is exactly what the velocity-network
//! training loss and input-Jacobian probes need; there is no broadcasting
//! beyond bias rows and no view machinery.
//!
//! Tapes are single-threaded by construction. A `Var` is branded with the id
//! of the tape that created it, so using it against another tape is a state
//! error rather than silent corruption.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { a: usize, b: usize },
    /// `[m,n] + [n]` broadcast over rows.
    AddRow { x: usize, bias: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Gelu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    /// `[m,n1] ++ [m,n2] -> [m,n1+n2]` along columns.
    ConcatCols { a: usize, b: usize },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by a reverse sweep, indexed by `Var`.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if `v` required grad and was reached.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::State(
                "tensor does not belong to this tape".to_string(),
            ));
        }
        Ok(v.idx)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.idx].data
    }

    fn dims2(&self, i: usize) -> Result<(usize, usize)> {
        let s = &self.nodes[i].shape;
        if s.len() != 2 {
            return Err(Error::shape(format!("expected 2-D tensor, got {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.dims2(ai)?;
        let (k2, n) = self.dims2(bi)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {} vs {}",
                k, k2
            )));
        }
        let data = matmul_raw(&self.nodes[ai].data, &self.nodes[bi].data, m, k, n);
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(vec![m, n], data, Op::MatMul { a: ai, b: bi }, ng))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xi, bi) = (self.check(x)?, self.check(bias)?);
        let (m, n) = self.dims2(xi)?;
        if self.nodes[bi].shape != [n] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match row width {}",
                self.nodes[bi].shape, n
            )));
        }
        let mut data = self.nodes[xi].data.clone();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += self.nodes[bi].data[c];
            }
        }
        let ng = self.nodes[xi].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(vec![m, n], data, Op::AddRow { x: xi, bias: bi }, ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.nodes[ai].shape, self.nodes[bi].shape
            )));
        }
        let data: Vec<f64> = self.nodes[ai]
            .data
            .iter()
            .zip(&self.nodes[bi].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(shape, data, op(ai, bi), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let data: Vec<f64> = self.nodes[ai].data.iter().map(|&x| c * x).collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.push(shape, data, Op::Scale { a: ai, c }, ng))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let data: Vec<f64> = self.nodes[ai].data.iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[ai].shape.clone();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.push(shape, data, Op::Gelu { a: ai }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s: f64 = self.nodes[ai].data.iter().sum();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.push(vec![1], vec![s], Op::Sum { a: ai }, ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].data.len() as f64;
        let s: f64 = self.nodes[ai].data.iter().sum();
        let ng = self.nodes[ai].needs_grad;
        Ok(self.push(vec![1], vec![s / n], Op::Mean { a: ai }, ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, n1) = self.dims2(ai)?;
        let (m2, n2) = self.dims2(bi)?;
        if m != m2 {
            return Err(Error::shape(format!(
                "concat_cols row counts differ: {} vs {}",
                m, m2
            )));
        }
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for r in 0..m {
            data.extend_from_slice(&self.nodes[ai].data[r * n1..(r + 1) * n1]);
            data.extend_from_slice(&self.nodes[bi].data[r * n2..(r + 1) * n2]);
        }
        let ng = self.nodes[ai].needs_grad || self.nodes[bi].needs_grad;
        Ok(self.push(vec![m, n1 + n2], data, Op::ConcatCols { a: ai, b: bi }, ng))
    }

    /// Reverse sweep from a scalar loss. Consumes the tape, so the graph is
    /// cleared once gradients are out.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if self.nodes[li].data.len() != 1 {
            return Err(Error::State(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[li].shape
            )));
        }
        self.sweep(li, &[1.0])
    }

    /// Reverse sweep from an arbitrary output with a caller-supplied
    /// cotangent: returns gradients of `cotangent . out`. Does not consume
    /// the tape, so several probes can reuse one forward pass.
    pub fn vjp(&self, out: Var, cotangent: &[f64]) -> Result<Gradients> {
        let oi = self.check(out)?;
        if self.nodes[oi].data.len() != cotangent.len() {
            return Err(Error::shape(format!(
                "cotangent length {} does not match output of {} elements",
                cotangent.len(),
                self.nodes[oi].data.len()
            )));
        }
        self.sweep(oi, cotangent)
    }

    fn sweep(&self, out: usize, seed: &[f64]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out] = Some(seed.to_vec());

        for i in (0..=out).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n = self.nodes[b].shape[1];
                    if self.nodes[a].needs_grad {
                        // dA = G . B^T
                        let bt = transpose(&self.nodes[b].data, k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        accumulate(&mut grads[a], &da);
                    }
                    if self.nodes[b].needs_grad {
                        // dB = A^T . G
                        let at = transpose(&self.nodes[a].data, m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        accumulate(&mut grads[b], &db);
                    }
                }
                Op::AddRow { x, bias } => {
                    if self.nodes[x].needs_grad {
                        accumulate(&mut grads[x], &g);
                    }
                    if self.nodes[bias].needs_grad {
                        let n = self.nodes[bias].data.len();
                        let mut db = vec![0.0; n];
                        for (j, gv) in g.iter().enumerate() {
                            db[j % n] += gv;
                        }
                        accumulate(&mut grads[bias], &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads[a], &g);
                    }
                    if self.nodes[b].needs_grad {
                        accumulate(&mut grads[b], &g);
                    }
                }
                Op::Sub { a, b } => {
                    if self.nodes[a].needs_grad {
                        accumulate(&mut grads[a], &g);
                    }
                    if self.nodes[b].needs_grad {
                        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                        accumulate(&mut grads[b], &neg);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[b].data)
                            .map(|(gv, bv)| gv * bv)
                            .collect();
                        accumulate(&mut grads[a], &da);
                    }
                    if self.nodes[b].needs_grad {
                        let db: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(gv, av)| gv * av)
                            .collect();
                        accumulate(&mut grads[b], &db);
                    }
                }
                Op::Scale { a, c } => {
                    if self.nodes[a].needs_grad {
                        let da: Vec<f64> = g.iter().map(|gv| gv * c).collect();
                        accumulate(&mut grads[a], &da);
                    }
                }
                Op::Gelu { a } => {
                    if self.nodes[a].needs_grad {
                        let da: Vec<f64> = g
                            .iter()
                            .zip(&self.nodes[a].data)
                            .map(|(gv, &x)| gv * gelu_derivative(x))
                            .collect();
                        accumulate(&mut grads[a], &da);
                    }
                }
                Op::Sum { a } => {
                    if self.nodes[a].needs_grad {
                        let da = vec![g[0]; self.nodes[a].data.len()];
                        accumulate(&mut grads[a], &da);
                    }
                }
                Op::Mean { a } => {
                    if self.nodes[a].needs_grad {
                        let n = self.nodes[a].data.len();
                        let da = vec![g[0] / n as f64; n];
                        accumulate(&mut grads[a], &da);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (m, n1) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let n2 = self.nodes[b].shape[1];
                    if self.nodes[a].needs_grad {
                        let mut da = vec![0.0; m * n1];
                        for r in 0..m {
                            da[r * n1..(r + 1) * n1]
                                .copy_from_slice(&g[r * (n1 + n2)..r * (n1 + n2) + n1]);
                        }
                        accumulate(&mut grads[a], &da);
                    }
                    if self.nodes[b].needs_grad {
                        let mut db = vec![0.0; m * n2];
                        for r in 0..m {
                            db[r * n2..(r + 1) * n2]
                                .copy_from_slice(&g[r * (n1 + n2) + n1..(r + 1) * (n1 + n2)]);
                        }
                        accumulate(&mut grads[b], &db);
                    }
                }
            }
        }

        // Leaves that were never reached keep a zero gradient so callers can
        // distinguish "detached" (zeros) from "not a leaf" (None).
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.data.len()]);
            }
        }

        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => {
            for (gi, di) in g.iter_mut().zip(delta) {
                *gi += di;
            }
        }
        None => *slot = Some(delta.to_vec()),
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
