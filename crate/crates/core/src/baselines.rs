//! Reference recurrent MDN estimators and imputation strategies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{CycleModel, CycleParams, LayerSizes, HEAD_OUTPUT};
use crate::error::{Error, Result};
use crate::math::{chol_params_to_cov, Gaussian2D, Vec2};
use crate::nn::{LstmVars, ParamStore, RecurrentNet, Tape, Var};
use crate::trajgen::ObservedSequence;

/// Baseline input: one (possibly imputed) position per step.
pub const BASELINE_INPUT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Emits a Gaussian over the true position at every step.
    OneToOne,
    /// Reads the whole sequence, then emits one Gaussian for the final step.
    Encoder,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::OneToOne => "one_to_one",
            BaselineKind::Encoder => "encoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub net: RecurrentNet,
}

impl Baseline {
    pub fn init<R: Rng>(kind: BaselineKind, sizes: LayerSizes, rng: &mut R) -> Result<(Self, ParamStore)> {
        let (net, store) = RecurrentNet::init(sizes.net_spec(BASELINE_INPUT), rng)?;
        Ok((Self { kind, net }, store))
    }

    pub fn bind(kind: BaselineKind, sizes: LayerSizes, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            kind,
            net: RecurrentNet::bind(sizes.net_spec(BASELINE_INPUT), store, 0)?,
        })
    }

    /// Head outputs (mean, Cholesky parameters) for every step.
    fn heads(&self, tape: &mut Tape<'_>, inputs: &[Vec2]) -> Result<Vec<(Var, Var)>> {
        if inputs.is_empty() {
            return Err(Error::InvalidInput("baseline needs a nonempty sequence".into()));
        }
        let mut state = LstmVars::zeros(tape, self.net.spec.hidden);
        let mut outs = Vec::with_capacity(inputs.len());
        let last = inputs.len() - 1;
        for (k, p) in inputs.iter().enumerate() {
            let x = tape.input(&p.to_array());
            match self.kind {
                BaselineKind::OneToOne => {
                    let (s, out) = self.net.step(tape, state, x)?;
                    state = s;
                    outs.push(out);
                }
                BaselineKind::Encoder => {
                    let e = self.net.embed(tape, x)?;
                    state = self.net.lstm(tape, state, e)?;
                    if k == last {
                        outs.push(self.net.mlp(tape, state.h)?);
                    }
                }
            }
        }
        debug_assert!(outs.iter().all(|o| tape.value(*o).len() == HEAD_OUTPUT));
        Ok(outs
            .into_iter()
            .map(|o| (tape.slice(o, 0, 2), tape.slice(o, 2, 3)))
            .collect())
    }

    /// Per-step estimates (one-to-one) or the single final estimate (encoder).
    pub fn forward(&self, store: &ParamStore, inputs: &[Vec2]) -> Result<Vec<Gaussian2D>> {
        let mut tape = Tape::inference(&[store.values()]);
        let heads = self.heads(&mut tape, inputs)?;
        heads
            .into_iter()
            .map(|(m, r)| {
                let (m, r) = (tape.value(m), tape.value(r));
                Gaussian2D::new(Vec2::new(m[0], m[1]), chol_params_to_cov([r[0], r[1], r[2]]))
            })
            .collect()
    }

    /// Training loss: per-step NLL for one-to-one, final-step NLL for the
    /// encoder.
    pub fn loss(&self, tape: &mut Tape<'_>, inputs: &[Vec2], gt: &[Vec2]) -> Result<Var> {
        if inputs.len() != gt.len() {
            return Err(Error::InvalidInput("baseline inputs and ground truth differ in length".into()));
        }
        let heads = self.heads(tape, inputs)?;
        let targets: &[Vec2] = match self.kind {
            BaselineKind::OneToOne => gt,
            BaselineKind::Encoder => &gt[gt.len() - 1..],
        };
        let terms: Vec<Var> = heads
            .iter()
            .zip(targets)
            .map(|((m, r), t)| tape.gaussian_nll(*m, *r, t.to_array()))
            .collect();
        Ok(tape.sum(&terms))
    }

    /// Positions the estimator is scored on, paired with their ground truth.
    pub fn scored_points(&self, estimates: &[Gaussian2D], gt: &[Vec2]) -> Vec<(Vec2, Vec2)> {
        match self.kind {
            BaselineKind::OneToOne => estimates.iter().zip(gt).map(|(e, g)| (e.mean, *g)).collect(),
            BaselineKind::Encoder => vec![(estimates[0].mean, gt[gt.len() - 1])],
        }
    }
}

pub fn one_to_one_forward(b: &Baseline, store: &ParamStore, inputs: &[Vec2]) -> Result<Vec<Gaussian2D>> {
    if b.kind != BaselineKind::OneToOne {
        return Err(Error::Usage("one_to_one_forward on an encoder baseline".into()));
    }
    b.forward(store, inputs)
}

pub fn encoder_forward(b: &Baseline, store: &ParamStore, inputs: &[Vec2]) -> Result<Gaussian2D> {
    if b.kind != BaselineKind::Encoder {
        return Err(Error::Usage("encoder_forward on a one-to-one baseline".into()));
    }
    Ok(b.forward(store, inputs)?[0])
}

/// Replaces masked observations with the prior mean the prediction network
/// emits while the filtering cycle runs over the sequence; observed entries
/// pass through unchanged.
pub fn impute_with_prediction(seq: &ObservedSequence, model: &CycleModel, params: &CycleParams) -> Result<Vec<Vec2>> {
    if seq.is_empty() || !seq.observed(0) {
        return Err(Error::InvalidInput("imputation needs an observed first step".into()));
    }
    let trace = model.run_cycle(params, seq)?;
    Ok(trace
        .steps
        .iter()
        .map(|st| match (st.m, st.prior) {
            (0, Some(p)) => p.0.mean,
            _ => st.obs,
        })
        .collect())
}

/// Linear interpolation across interior gaps; trailing gaps hold the last
/// observed value.
pub fn linear_interpolate(seq: &ObservedSequence) -> Result<Vec<Vec2>> {
    if seq.is_empty() || !seq.observed(0) {
        return Err(Error::InvalidInput("interpolation needs an observed first step".into()));
    }
    let n = seq.len();
    let mut out = seq.obs.clone();
    let mut last = 0;
    for k in 1..n {
        if !seq.observed(k) {
            continue;
        }
        if k - last > 1 {
            let (a, b) = (seq.obs[last], seq.obs[k]);
            let span = (k - last) as f64;
            for (j, slot) in out.iter_mut().enumerate().take(k).skip(last + 1) {
                let t = (j - last) as f64 / span;
                *slot = a + (b - a) * t;
            }
        }
        last = k;
    }
    for slot in out.iter_mut().skip(last + 1) {
        *slot = seq.obs[last];
    }
    Ok(out)
}
