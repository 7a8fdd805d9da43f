//! Embedding, LSTM and MLP building blocks, and the embed→LSTM→MLP stack
//! every network in the crate is made of.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{LinearRef, Tape, Var};
use crate::error::{check_dim, Error, Result};

/// Layer widths of an embed→LSTM→MLP network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub output_dim: usize,
}

fn linear_ref(store: &ParamStore, slot: usize, name: &str, rows: usize, cols: usize) -> Result<LinearRef> {
    let w = format!("{name}.w");
    let b = format!("{name}.b");
    check_dim("weight block", rows * cols, store.block(&w)?.len())?;
    check_dim("bias block", rows, store.block(&b)?.len())?;
    Ok(LinearRef {
        store: slot,
        w: store.offset(&w)?,
        b: store.offset(&b)?,
        rows,
        cols,
    })
}

/// Recurrent state `(h, c)` as plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Recurrent state as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub h: Var,
    pub c: Var,
}

impl LstmVars {
    pub fn zeros(tape: &mut Tape<'_>, hidden: usize) -> Self {
        Self {
            h: tape.zeros(hidden),
            c: tape.zeros(hidden),
        }
    }

    pub fn from_state(tape: &mut Tape<'_>, s: &LstmState) -> Self {
        Self {
            h: tape.input(&s.h),
            c: tape.input(&s.c),
        }
    }

    pub fn to_state(self, tape: &Tape<'_>) -> LstmState {
        LstmState {
            h: tape.value(self.h).to_vec(),
            c: tape.value(self.c).to_vec(),
        }
    }
}

/// Embedding (affine + tanh), single LSTM layer and a one-hidden-layer
/// tanh MLP head. Holds only offsets; values live in a [`ParamStore`]
/// that is bound to tape slot `slot`.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet {
    pub spec: NetSpec,
    pub slot: usize,
    emb: LinearRef,
    lstm: LinearRef,
    mlp_hidden: LinearRef,
    mlp_out: LinearRef,
}

pub const EMB: &str = "emb";
pub const LSTM: &str = "lstm";
pub const MLP_HIDDEN: &str = "mlp.hidden";
pub const MLP_OUT: &str = "mlp.out";

impl RecurrentNet {
    /// Zero-valued store with this network's block layout.
    pub fn layout(spec: NetSpec) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        let lstm_in = spec.embed_dim + spec.hidden;
        for (name, rows, cols) in [
            (EMB, spec.embed_dim, spec.input_dim),
            (LSTM, 4 * spec.hidden, lstm_in),
            (MLP_HIDDEN, spec.mlp_hidden, spec.hidden),
            (MLP_OUT, spec.output_dim, spec.mlp_hidden),
        ] {
            s.add_block(format!("{name}.w"), &[rows, cols])?;
            s.add_block(format!("{name}.b"), &[rows])?;
        }
        Ok(s)
    }

    /// Fresh store initialised U(-1/√fan_in, 1/√fan_in) with forget-gate
    /// bias 1.
    pub fn init<R: Rng>(spec: NetSpec, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut s = Self::layout(spec)?;
        let lstm_in = spec.embed_dim + spec.hidden;
        for (name, fan_in) in [
            (EMB, spec.input_dim),
            (LSTM, lstm_in),
            (MLP_HIDDEN, spec.hidden),
            (MLP_OUT, spec.mlp_hidden),
        ] {
            let bound = 1.0 / (fan_in as f64).sqrt();
            s.init_uniform(&format!("{name}.w"), bound, rng)?;
            s.init_uniform(&format!("{name}.b"), bound, rng)?;
        }
        let h = spec.hidden;
        s.block_mut("lstm.b")?[h..2 * h].fill(1.0);
        let net = Self::bind(spec, &s, 0)?;
        Ok((net, s))
    }

    /// Resolves block offsets in `store`, checking shapes against `spec`.
    pub fn bind(spec: NetSpec, store: &ParamStore, slot: usize) -> Result<Self> {
        let lstm_in = spec.embed_dim + spec.hidden;
        Ok(Self {
            spec,
            slot,
            emb: linear_ref(store, slot, EMB, spec.embed_dim, spec.input_dim)?,
            lstm: linear_ref(store, slot, LSTM, 4 * spec.hidden, lstm_in)?,
            mlp_hidden: linear_ref(store, slot, MLP_HIDDEN, spec.mlp_hidden, spec.hidden)?,
            mlp_out: linear_ref(store, slot, MLP_OUT, spec.output_dim, spec.mlp_hidden)?,
        })
    }

    pub fn at_slot(mut self, slot: usize) -> Self {
        self.slot = slot;
        for l in [&mut self.emb, &mut self.lstm, &mut self.mlp_hidden, &mut self.mlp_out] {
            l.store = slot;
        }
        self
    }

    pub fn embed(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = tape.affine(self.emb, x)?;
        Ok(tape.tanh(a))
    }

    pub fn lstm(&self, tape: &mut Tape<'_>, state: LstmVars, x: Var) -> Result<LstmVars> {
        let h = self.spec.hidden;
        check_dim("lstm hidden state", h, tape.value(state.h).len())?;
        check_dim("lstm cell state", h, tape.value(state.c).len())?;
        let cat = tape.concat(&[x, state.h]);
        let gates = tape.affine(self.lstm, cat)?;
        let hc = tape.lstm_cell(gates, state.c)?;
        Ok(LstmVars {
            h: tape.slice(hc, 0, h),
            c: tape.slice(hc, h, h),
        })
    }

    pub fn mlp(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = tape.affine(self.mlp_hidden, x)?;
        let a = tape.tanh(a);
        tape.affine(self.mlp_out, a)
    }

    /// One recurrent step: embed the input, advance the LSTM, read out the
    /// MLP head.
    pub fn step(&self, tape: &mut Tape<'_>, state: LstmVars, input: Var) -> Result<(LstmVars, Var)> {
        check_dim("network input", self.spec.input_dim, tape.value(input).len())?;
        let e = self.embed(tape, input)?;
        let next = self.lstm(tape, state, e)?;
        let out = self.mlp(tape, next.h)?;
        Ok((next, out))
    }
}

/// LSTM update on plain vectors.
pub fn lstm_step(store: &ParamStore, net: &RecurrentNet, state: &LstmState, input: &[f64]) -> Result<LstmState> {
    check_dim("lstm input", net.spec.embed_dim, input.len())?;
    let net = net.clone().at_slot(0);
    let mut tape = Tape::inference(&[store.values()]);
    let s = LstmVars::from_state(&mut tape, state);
    let x = tape.input(input);
    Ok(net.lstm(&mut tape, s, x)?.to_state(&tape))
}

pub fn mlp_forward(store: &ParamStore, net: &RecurrentNet, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("mlp input", net.spec.hidden, input.len())?;
    let net = net.clone().at_slot(0);
    let mut tape = Tape::inference(&[store.values()]);
    let x = tape.input(input);
    let y = net.mlp(&mut tape, x)?;
    Ok(tape.value(y).to_vec())
}

pub fn embed_forward(store: &ParamStore, net: &RecurrentNet, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("embedding input", net.spec.input_dim, input.len())?;
    let net = net.clone().at_slot(0);
    let mut tape = Tape::inference(&[store.values()]);
    let x = tape.input(input);
    let y = net.embed(&mut tape, x)?;
    Ok(tape.value(y).to_vec())
}

/// Scales `grads` in place so their Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> Result<f64> {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("gradient norm".into()));
    }
    if norm > max_norm && max_norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    Ok(norm)
}
