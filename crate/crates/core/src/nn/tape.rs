//! Vector-level reverse-mode differentiation over a fixed set of primitives.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Parameters
//! are read from borrowed flat stores; [`Tape::backward`] returns one gradient
//! vector per store, aligned with its flat layout. An inference tape skips op
//! recording but runs the exact same arithmetic.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::math::{chol_diag, sigmoid, Activation};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

/// Location of an affine layer `y = W x + b` inside a parameter store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearRef {
    pub store: usize,
    pub w: usize,
    pub b: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { lin: LinearRef, x: u32 },
    Concat(Vec<u32>),
    Slice { x: u32, start: usize },
    Act(Activation, u32),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Scale(u32, f64),
    OneMinus(u32),
    LstmCell { gates: u32, c_prev: u32 },
    CholCov(u32),
    GaussNll { mean: u32, raw: u32, target: [f64; 2] },
    Sum(Vec<u32>),
}

/// Gradients with respect to each parameter store a tape was built over.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

pub struct Tape<'a> {
    id: u64,
    stores: Vec<&'a [f64]>,
    values: Vec<Vec<f64>>,
    ops: Vec<Op>,
    record: bool,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // independent accumulators hide the add latency
    const LANES: usize = 16;
    let mut acc = [0.0f64; LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for l in 0..width {
            acc[l] += acc[l + width];
        }
    }
    acc[0] + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<'a> Tape<'a> {
    /// Recording tape for training.
    pub fn new(stores: &[&'a [f64]]) -> Self {
        Self::build(stores, true)
    }

    /// Non-recording tape for inference; `backward` is unavailable.
    pub fn inference(stores: &[&'a [f64]]) -> Self {
        Self::build(stores, false)
    }

    fn build(stores: &[&'a [f64]], record: bool) -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            stores: stores.to_vec(),
            values: Vec::with_capacity(512),
            ops: Vec::with_capacity(if record { 512 } else { 0 }),
            record,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        let idx = self.values.len() as u32;
        self.values.push(value);
        if self.record {
            self.ops.push(op);
        }
        Var { tape: self.id, idx }
    }

    fn idx(&self, v: Var) -> u32 {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        v.idx
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[self.idx(v) as usize]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && (v.idx as usize) < self.values.len()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, v: &[f64]) -> Var {
        self.push(v.to_vec(), Op::Leaf)
    }

    pub fn zeros(&mut self, n: usize) -> Var {
        self.push(vec![0.0; n], Op::Leaf)
    }

    pub fn affine(&mut self, lin: LinearRef, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.values[xi as usize];
        if xv.len() != lin.cols {
            return Err(Error::DimensionMismatch {
                context: "affine input",
                expected: lin.cols,
                actual: xv.len(),
            });
        }
        let p = self.stores[lin.store];
        let w = &p[lin.w..lin.w + lin.rows * lin.cols];
        let b = &p[lin.b..lin.b + lin.rows];
        let y: Vec<f64> = w
            .chunks_exact(lin.cols)
            .zip(b)
            .map(|(row, bi)| dot(row, xv) + bi)
            .collect();
        Ok(self.push(y, Op::Affine { lin, x: xi }))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let ids: Vec<u32> = parts.iter().map(|v| self.idx(*v)).collect();
        let mut out = Vec::new();
        for &i in &ids {
            out.extend_from_slice(&self.values[i as usize]);
        }
        self.push(out, Op::Concat(ids))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xi = self.idx(x);
        let out = self.values[xi as usize][start..start + len].to_vec();
        self.push(out, Op::Slice { x: xi, start })
    }

    pub fn act(&mut self, kind: Activation, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.values[xi as usize].iter().map(|&v| kind.apply(v)).collect();
        self.push(out, Op::Act(kind, xi))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.act(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.act(Activation::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.act(Activation::Softplus, x)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(u32, u32) -> Op) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (&self.values[ai as usize], &self.values[bi as usize]);
        assert_eq!(av.len(), bv.len(), "elementwise operands differ in length");
        let out = av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect();
        self.push(out, op(ai, bi))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let xi = self.idx(x);
        let out = self.values[xi as usize].iter().map(|v| v * s).collect();
        self.push(out, Op::Scale(xi, s))
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let out = self.values[xi as usize].iter().map(|v| 1.0 - v).collect();
        self.push(out, Op::OneMinus(xi))
    }

    /// LSTM cell nonlinearity. `gates` holds pre-activations ordered
    /// (input, forget, cell, output); returns `[h; c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gi, ci) = (self.idx(gates), self.idx(c_prev));
        let g = &self.values[gi as usize];
        let c = &self.values[ci as usize];
        let h = c.len();
        if g.len() != 4 * h {
            return Err(Error::DimensionMismatch {
                context: "lstm gates",
                expected: 4 * h,
                actual: g.len(),
            });
        }
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let i_g = sigmoid(g[j]);
            let f_g = sigmoid(g[h + j]);
            let g_g = g[2 * h + j].tanh();
            let o_g = sigmoid(g[3 * h + j]);
            let c_new = f_g * c[j] + i_g * g_g;
            out[j] = o_g * c_new.tanh();
            out[h + j] = c_new;
        }
        Ok(self.push(out, Op::LstmCell { gates: gi, c_prev: ci }))
    }

    /// Covariance entries `[xx, xy, yy]` from three Cholesky parameters.
    pub fn chol_cov(&mut self, raw: Var) -> Var {
        let ri = self.idx(raw);
        let r = &self.values[ri as usize];
        assert_eq!(r.len(), 3, "cholesky parameters must have length 3");
        let (a, b, c) = (chol_diag(r[0]).0, chol_diag(r[1]).0, r[2]);
        self.push(vec![a * a, a * c, c * c + b * b], Op::CholCov(ri))
    }

    /// Scalar `-log N(target | mean, L Lᵀ)` with `L` from Cholesky parameters.
    pub fn gaussian_nll(&mut self, mean: Var, raw: Var, target: [f64; 2]) -> Var {
        let (mi, ri) = (self.idx(mean), self.idx(raw));
        let m = &self.values[mi as usize];
        let r = &self.values[ri as usize];
        assert_eq!(m.len(), 2, "mean must have length 2");
        assert_eq!(r.len(), 3, "cholesky parameters must have length 3");
        let (a, b, c) = (chol_diag(r[0]).0, chol_diag(r[1]).0, r[2]);
        let u0 = (target[0] - m[0]) / a;
        let u1 = (target[1] - m[1] - c * u0) / b;
        let nll = (2.0 * std::f64::consts::PI).ln() + a.ln() + b.ln() + 0.5 * (u0 * u0 + u1 * u1);
        self.push(vec![nll], Op::GaussNll { mean: mi, raw: ri, target })
    }

    /// Sum of every element of every operand.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let ids: Vec<u32> = parts.iter().map(|v| self.idx(*v)).collect();
        let total = ids
            .iter()
            .map(|&i| self.values[i as usize].iter().sum::<f64>())
            .sum();
        self.push(vec![total], Op::Sum(ids))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if !self.record {
            return Err(Error::Usage("backward called on an inference tape".into()));
        }
        if !self.contains(output) {
            return Err(Error::Usage("output variable is not on this tape".into()));
        }
        if self.values[output.idx as usize].len() != 1 {
            return Err(Error::Usage("backward requires a scalar output".into()));
        }
        let mut pgrads: Vec<Vec<f64>> = self.stores.iter().map(|s| vec![0.0; s.len()]).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.idx as usize + 1];
        grads[output.idx as usize] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: u32, len: usize) -> &mut Vec<f64> {
            grads[i as usize].get_or_insert_with(|| vec![0.0; len])
        }

        for n in (0..=output.idx as usize).rev() {
            let Some(dy) = grads[n].take() else { continue };
            let y = &self.values[n];
            match &self.ops[n] {
                Op::Leaf => {}
                Op::Affine { lin, x } => {
                    let xv = &self.values[*x as usize];
                    let p = self.stores[lin.store];
                    let w = &p[lin.w..lin.w + lin.rows * lin.cols];
                    let dx = acc(&mut grads, *x, lin.cols);
                    for (row, &d) in w.chunks_exact(lin.cols).zip(&dy) {
                        if d != 0.0 {
                            axpy(d, row, dx);
                        }
                    }
                    let pg = &mut pgrads[lin.store];
                    for (r, &d) in dy.iter().enumerate() {
                        if d != 0.0 {
                            let off = lin.w + r * lin.cols;
                            axpy(d, xv, &mut pg[off..off + lin.cols]);
                            pg[lin.b + r] += d;
                        }
                    }
                }
                Op::Concat(ids) => {
                    let mut off = 0;
                    for &i in ids {
                        let len = self.values[i as usize].len();
                        let dx = acc(&mut grads, i, len);
                        axpy(1.0, &dy[off..off + len], dx);
                        off += len;
                    }
                }
                Op::Slice { x, start } => {
                    let len = self.values[*x as usize].len();
                    let dx = acc(&mut grads, *x, len);
                    axpy(1.0, &dy, &mut dx[*start..*start + dy.len()]);
                }
                Op::Act(kind, x) => {
                    let xv = &self.values[*x as usize];
                    let local: Vec<f64> = match kind {
                        Activation::Tanh => y.iter().map(|t| 1.0 - t * t).collect(),
                        Activation::Sigmoid => y.iter().map(|s| s * (1.0 - s)).collect(),
                        Activation::Softplus => xv.iter().map(|&v| sigmoid(v)).collect(),
                    };
                    let dx = acc(&mut grads, *x, xv.len());
                    for ((g, d), l) in dx.iter_mut().zip(&dy).zip(local) {
                        *g += d * l;
                    }
                }
                Op::Add(a, b) => {
                    axpy(1.0, &dy, acc(&mut grads, *a, dy.len()));
                    axpy(1.0, &dy, acc(&mut grads, *b, dy.len()));
                }
                Op::Sub(a, b) => {
                    axpy(1.0, &dy, acc(&mut grads, *a, dy.len()));
                    axpy(-1.0, &dy, acc(&mut grads, *b, dy.len()));
                }
                Op::Mul(a, b) => {
                    let av = &self.values[*a as usize];
                    let bv = &self.values[*b as usize];
                    {
                        let da = acc(&mut grads, *a, dy.len());
                        for ((g, d), v) in da.iter_mut().zip(&dy).zip(bv) {
                            *g += d * v;
                        }
                    }
                    let db = acc(&mut grads, *b, dy.len());
                    for ((g, d), v) in db.iter_mut().zip(&dy).zip(av) {
                        *g += d * v;
                    }
                }
                Op::Scale(x, s) => axpy(*s, &dy, acc(&mut grads, *x, dy.len())),
                Op::OneMinus(x) => axpy(-1.0, &dy, acc(&mut grads, *x, dy.len())),
                Op::LstmCell { gates, c_prev } => {
                    let g = &self.values[*gates as usize];
                    let c = &self.values[*c_prev as usize];
                    let h = c.len();
                    let mut dg = vec![0.0; 4 * h];
                    let mut dc_prev = vec![0.0; h];
                    for j in 0..h {
                        let i_g = sigmoid(g[j]);
                        let f_g = sigmoid(g[h + j]);
                        let g_g = g[2 * h + j].tanh();
                        let o_g = sigmoid(g[3 * h + j]);
                        let c_new = y[h + j];
                        let tc = c_new.tanh();
                        let dh = dy[j];
                        let dc = dy[h + j] + dh * o_g * (1.0 - tc * tc);
                        dg[j] = dc * g_g * i_g * (1.0 - i_g);
                        dg[h + j] = dc * c[j] * f_g * (1.0 - f_g);
                        dg[2 * h + j] = dc * i_g * (1.0 - g_g * g_g);
                        dg[3 * h + j] = dh * tc * o_g * (1.0 - o_g);
                        dc_prev[j] = dc * f_g;
                    }
                    axpy(1.0, &dg, acc(&mut grads, *gates, 4 * h));
                    axpy(1.0, &dc_prev, acc(&mut grads, *c_prev, h));
                }
                Op::CholCov(x) => {
                    let r = &self.values[*x as usize];
                    let ((a, sa), (b, sb), c) = (chol_diag(r[0]), chol_diag(r[1]), r[2]);
                    let (dxx, dxy, dyy) = (dy[0], dy[1], dy[2]);
                    let da = 2.0 * a * dxx + c * dxy;
                    let db = 2.0 * b * dyy;
                    let dc = a * dxy + 2.0 * c * dyy;
                    let dx = acc(&mut grads, *x, 3);
                    dx[0] += da * sa;
                    dx[1] += db * sb;
                    dx[2] += dc;
                }
                Op::GaussNll { mean, raw, target } => {
                    let m = &self.values[*mean as usize];
                    let r = &self.values[*raw as usize];
                    let ((a, sa), (b, sb), c) = (chol_diag(r[0]), chol_diag(r[1]), r[2]);
                    let u0 = (target[0] - m[0]) / a;
                    let u1 = (target[1] - m[1] - c * u0) / b;
                    let g1 = u1;
                    let g0 = u0 - g1 * c / b;
                    let d = dy[0];
                    {
                        let dm = acc(&mut grads, *mean, 2);
                        dm[0] -= d * g0 / a;
                        dm[1] -= d * g1 / b;
                    }
                    let da = (1.0 - g0 * u0) / a;
                    let db = (1.0 - u1 * u1) / b;
                    let dc = -g1 * u0 / b;
                    let dr = acc(&mut grads, *raw, 3);
                    dr[0] += d * da * sa;
                    dr[1] += d * db * sb;
                    dr[2] += d * dc;
                }
                Op::Sum(ids) => {
                    let d = dy[0];
                    for &i in ids {
                        let len = self.values[i as usize].len();
                        for g in acc(&mut grads, i, len).iter_mut() {
                            *g += d;
                        }
                    }
                }
            }
        }
        Ok(Gradients(pgrads))
    }
}
