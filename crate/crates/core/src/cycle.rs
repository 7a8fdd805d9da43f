//! Prediction-update filtering cycle.
//!
//! The prediction network maps the previous (masked) posterior mean and mask
//! bit to a Gaussian prior over the current position. The update network
//! sees that prior, the masked observation and the mask bit, and emits a
//! per-axis gain `k_obs` plus a posterior covariance; the posterior mean is
//! `(1 - k_obs) ⊙ prior_mean + k_obs ⊙ observation`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::{chol_params_to_cov, gaussian2d_nll, Activation, Gaussian2D, Mat2, Vec2};
use crate::nn::{LstmState, LstmVars, NetSpec, ParamStore, RecurrentNet, Tape, Var};
use crate::trajgen::ObservedSequence;

/// Prediction network input: masked posterior mean (2) and mask bit.
pub const PRED_INPUT: usize = 3;
/// Update network input: prior mean (2), prior covariance (xx, xy, yy),
/// masked observation (2) and mask bit.
pub const UPDATE_INPUT: usize = 8;
/// Mean or gain (2) followed by three Cholesky parameters.
pub const HEAD_OUTPUT: usize = 5;

/// Floor on the initial posterior standard deviation.
pub const MIN_INIT_SIGMA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainActivation {
    Sigmoid,
    Softplus,
}

impl GainActivation {
    fn activation(self) -> Activation {
        match self {
            GainActivation::Sigmoid => Activation::Sigmoid,
            GainActivation::Softplus => Activation::Softplus,
        }
    }
}

/// Which priors contribute to the prediction loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredTarget {
    /// Every step's prior is scored against that step's ground truth.
    EveryStep,
    /// Priors at masked steps are skipped; the first re-observed step is
    /// scored against the multi-step prediction that crossed the gap.
    SkipGaps,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorState(pub Gaussian2D);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorState(pub Gaussian2D);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainPair {
    pub k_obs: [f64; 2],
    pub k_pred: [f64; 2],
}

impl GainPair {
    pub fn from_obs(k_obs: [f64; 2]) -> Self {
        Self {
            k_obs,
            k_pred: [1.0 - k_obs[0], 1.0 - k_obs[1]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub prior: Option<PriorState>,
    pub posterior: PosteriorState,
    pub gain: Option<GainPair>,
    pub m: u8,
    pub k_miss: usize,
    pub obs: Vec2,
    pub gt: Vec2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub steps: Vec<TraceStep>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn posterior_means(&self) -> Vec<Vec2> {
        self.steps.iter().map(|s| s.posterior.0.mean).collect()
    }

    /// Every position shifted by `offset`; masked placeholders stay put.
    pub fn translated(mut self, offset: Vec2) -> Self {
        for s in &mut self.steps {
            if let Some(p) = &mut s.prior {
                p.0.mean = p.0.mean + offset;
            }
            s.posterior.0.mean = s.posterior.0.mean + offset;
            if s.m == 1 {
                s.obs = s.obs + offset;
            }
            s.gt = s.gt + offset;
        }
        self
    }
}

/// Running count of masked steps, reset by every observation.
pub fn k_miss_counts(mask: &[u8]) -> Vec<usize> {
    let mut out = Vec::with_capacity(mask.len());
    let mut run = 0;
    for &m in mask {
        run = if m == 0 { run + 1 } else { 0 };
        out.push(run);
    }
    out
}

/// Layer widths shared by the cycle networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSizes {
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
}

impl Default for LayerSizes {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            mlp_hidden: 64,
        }
    }
}

impl LayerSizes {
    pub fn net_spec(&self, input_dim: usize) -> NetSpec {
        NetSpec {
            input_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            mlp_hidden: self.mlp_hidden,
            output_dim: HEAD_OUTPUT,
        }
    }
}

/// Structure of the two cycle networks. Parameters live in a
/// [`CycleParams`]; the prediction network reads tape slot 0 and the update
/// network slot 1.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleModel {
    pub pred: RecurrentNet,
    pub up: RecurrentNet,
    pub gain: GainActivation,
    pub init_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleParams {
    pub pred: ParamStore,
    pub up: ParamStore,
}

impl CycleModel {
    pub fn init<R: Rng>(sizes: LayerSizes, gain: GainActivation, sigma_w: f64, rng: &mut R) -> Result<(Self, CycleParams)> {
        let (pred, pred_store) = RecurrentNet::init(sizes.net_spec(PRED_INPUT), rng)?;
        let (up, up_store) = RecurrentNet::init(sizes.net_spec(UPDATE_INPUT), rng)?;
        Ok((
            Self {
                pred,
                up: up.at_slot(1),
                gain,
                init_sigma: sigma_w.max(MIN_INIT_SIGMA),
            },
            CycleParams {
                pred: pred_store,
                up: up_store,
            },
        ))
    }

    pub fn bind(sizes: LayerSizes, gain: GainActivation, sigma_w: f64, params: &CycleParams) -> Result<Self> {
        Ok(Self {
            pred: RecurrentNet::bind(sizes.net_spec(PRED_INPUT), &params.pred, 0)?,
            up: RecurrentNet::bind(sizes.net_spec(UPDATE_INPUT), &params.up, 1)?,
            gain,
            init_sigma: sigma_w.max(MIN_INIT_SIGMA),
        })
    }

    fn hidden(&self) -> (usize, usize) {
        (self.pred.spec.hidden, self.up.spec.hidden)
    }

    /// Prediction step on tape variables; returns the new state and the
    /// prior's mean and Cholesky parameters.
    pub fn predict_vars(
        &self,
        tape: &mut Tape<'_>,
        state: LstmVars,
        posterior_mean: Var,
        m: f64,
    ) -> Result<(LstmVars, Var, Var)> {
        let masked = tape.scale(posterior_mean, m);
        let bit = tape.input(&[m]);
        let input = tape.concat(&[masked, bit]);
        let (next, out) = self.pred.step(tape, state, input)?;
        let mean = tape.slice(out, 0, 2);
        let raw = tape.slice(out, 2, 3);
        Ok((next, mean, raw))
    }

    /// Update step on tape variables; returns the new state, posterior mean,
    /// posterior Cholesky parameters and `k_obs`.
    pub fn update_vars(
        &self,
        tape: &mut Tape<'_>,
        state: LstmVars,
        prior_mean: Var,
        prior_raw: Var,
        z: Vec2,
        m: f64,
    ) -> Result<(LstmVars, Var, Var, Var)> {
        let cov = tape.chol_cov(prior_raw);
        let zm = [z.x * m, z.y * m];
        let obs = tape.input(&[zm[0], zm[1], m]);
        let input = tape.concat(&[prior_mean, cov, obs]);
        let (next, out) = self.up.step(tape, state, input)?;
        let gain_raw = tape.slice(out, 0, 2);
        let k_obs = tape.act(self.gain.activation(), gain_raw);
        let k_pred = tape.one_minus(k_obs);
        let zv = tape.input(&zm);
        let from_prior = tape.mul(k_pred, prior_mean);
        let from_obs = tape.mul(k_obs, zv);
        let mean = tape.add(from_prior, from_obs);
        let raw = tape.slice(out, 2, 3);
        Ok((next, mean, raw, k_obs))
    }

    /// Runs the whole cycle over `seq` on `tape`.
    pub fn unroll(&self, tape: &mut Tape<'_>, seq: &ObservedSequence) -> Result<Unrolled> {
        if seq.is_empty() {
            return Err(Error::InvalidInput("cannot filter an empty sequence".into()));
        }
        if !seq.observed(0) {
            return Err(Error::InvalidInput("first step of a sequence must be observed".into()));
        }
        let (hp, hu) = self.hidden();
        let mut ps = LstmVars::zeros(tape, hp);
        let mut us = LstmVars::zeros(tape, hu);
        let mut steps = Vec::with_capacity(seq.len());
        let mut post_mean = tape.input(&seq.obs[0].to_array());
        steps.push(UnrolledStep {
            prior: None,
            posterior_mean: post_mean,
            posterior_raw: None,
            k_obs: None,
        });
        for k in 1..seq.len() {
            let m_prev = seq.mask[k - 1] as f64;
            let (nps, prior_mean, prior_raw) = self.predict_vars(tape, ps, post_mean, m_prev)?;
            ps = nps;
            let m = seq.mask[k] as f64;
            let (nus, mean, raw, k_obs) = self.update_vars(tape, us, prior_mean, prior_raw, seq.obs[k], m)?;
            us = nus;
            post_mean = mean;
            steps.push(UnrolledStep {
                prior: Some((prior_mean, prior_raw)),
                posterior_mean: mean,
                posterior_raw: Some(raw),
                k_obs: Some(k_obs),
            });
        }
        Ok(Unrolled { steps })
    }

    /// Prediction recursion conditioned directly on `inputs` instead of
    /// posterior estimates. Element `k - 1` of the result is the prior for
    /// step `k` as (mean, Cholesky parameters).
    pub fn unroll_prediction(&self, tape: &mut Tape<'_>, inputs: &[Vec2], mask: &[u8]) -> Result<Vec<(Var, Var)>> {
        check_dim("prediction inputs vs mask", mask.len(), inputs.len())?;
        let mut state = LstmVars::zeros(tape, self.pred.spec.hidden);
        let mut priors = Vec::with_capacity(inputs.len().saturating_sub(1));
        for k in 1..inputs.len() {
            let prev = tape.input(&inputs[k - 1].to_array());
            let (s, mean, raw) = self.predict_vars(tape, state, prev, mask[k - 1] as f64)?;
            state = s;
            priors.push((mean, raw));
        }
        Ok(priors)
    }

    pub fn run_cycle(&self, params: &CycleParams, seq: &ObservedSequence) -> Result<FilterTrace> {
        let mut tape = Tape::inference(&[params.pred.values(), params.up.values()]);
        let u = self.unroll(&mut tape, seq)?;
        u.trace(&tape, seq, self.init_sigma)
    }

    /// Prediction step on plain values.
    pub fn prediction_step(
        &self,
        params: &CycleParams,
        state: &LstmState,
        posterior_prev: &PosteriorState,
        m_prev: u8,
    ) -> Result<(PriorState, LstmState)> {
        let mut tape = Tape::inference(&[params.pred.values(), params.up.values()]);
        let s = LstmVars::from_state(&mut tape, state);
        let pm = tape.input(&posterior_prev.0.mean.to_array());
        let (ns, mean, raw) = self.predict_vars(&mut tape, s, pm, m_prev as f64)?;
        let prior = gaussian_from(&tape, mean, raw)?;
        Ok((PriorState(prior), ns.to_state(&tape)))
    }

    /// Update step on plain values. A masked step must carry the `(0, 0)`
    /// placeholder.
    pub fn update_step(
        &self,
        params: &CycleParams,
        state: &LstmState,
        prior: &PriorState,
        z: Vec2,
        m: u8,
    ) -> Result<(PosteriorState, GainPair, LstmState)> {
        if m == 0 && z != Vec2::ZERO {
            return Err(Error::InvalidInput("masked step carries a non-placeholder observation".into()));
        }
        let mut tape = Tape::inference(&[params.pred.values(), params.up.values()]);
        let s = LstmVars::from_state(&mut tape, state);
        let pm = tape.input(&prior.0.mean.to_array());
        // the update network reads the prior covariance through its Cholesky parameters
        let praw = tape.input(&cov_to_chol_params(&prior.0.cov)?);
        let (ns, mean, raw, k) = self.update_vars(&mut tape, s, pm, praw, z, m as f64)?;
        let post = gaussian_from(&tape, mean, raw)?;
        let kv = tape.value(k);
        Ok((PosteriorState(post), GainPair::from_obs([kv[0], kv[1]]), ns.to_state(&tape)))
    }
}

/// Inverse of [`chol_params_to_cov`] for an SPD matrix.
pub fn cov_to_chol_params(cov: &Mat2) -> Result<[f64; 3]> {
    if !cov.is_spd() {
        return Err(Error::InvalidInput("covariance is not SPD".into()));
    }
    let a = cov.xx().sqrt();
    let c = cov.xy() / a;
    let b = (cov.yy() - c * c).sqrt();
    let inv_softplus = |y: f64| if y > 30.0 { y } else { y.exp_m1().ln() };
    Ok([inv_softplus(a), inv_softplus(b), c])
}

fn gaussian_from(tape: &Tape<'_>, mean: Var, raw: Var) -> Result<Gaussian2D> {
    let m = tape.value(mean);
    let r = tape.value(raw);
    Gaussian2D::new(Vec2::new(m[0], m[1]), chol_params_to_cov([r[0], r[1], r[2]]))
}

#[derive(Debug, Clone)]
pub struct UnrolledStep {
    pub prior: Option<(Var, Var)>,
    pub posterior_mean: Var,
    pub posterior_raw: Option<Var>,
    pub k_obs: Option<Var>,
}

/// Tape handles for every step of one unrolled cycle.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub steps: Vec<UnrolledStep>,
}

impl Unrolled {
    pub fn trace(&self, tape: &Tape<'_>, seq: &ObservedSequence, init_sigma: f64) -> Result<FilterTrace> {
        let k_miss = k_miss_counts(&seq.mask);
        let gt = seq.gt();
        let mut steps = Vec::with_capacity(self.steps.len());
        for (k, s) in self.steps.iter().enumerate() {
            let prior = s
                .prior
                .map(|(m, r)| gaussian_from(tape, m, r).map(PriorState))
                .transpose()?;
            let posterior = match s.posterior_raw {
                Some(r) => gaussian_from(tape, s.posterior_mean, r)?,
                None => {
                    let m = tape.value(s.posterior_mean);
                    Gaussian2D::isotropic(Vec2::new(m[0], m[1]), init_sigma)?
                }
            };
            let gain = s.k_obs.map(|v| {
                let kv = tape.value(v);
                GainPair::from_obs([kv[0], kv[1]])
            });
            steps.push(TraceStep {
                prior,
                posterior: PosteriorState(posterior),
                gain,
                m: seq.mask[k],
                k_miss: k_miss[k],
                obs: seq.obs[k],
                gt: gt[k],
            });
        }
        Ok(FilterTrace { steps })
    }

    /// Sum of prior negative log-likelihoods against the ground truth.
    pub fn loss_pred(&self, tape: &mut Tape<'_>, seq: &ObservedSequence, target: PredTarget) -> Var {
        let gt = seq.gt();
        let terms: Vec<Var> = self
            .steps
            .iter()
            .enumerate()
            .filter(|(k, _)| target == PredTarget::EveryStep || seq.observed(*k))
            .filter_map(|(k, s)| s.prior.map(|(m, r)| (k, m, r)))
            .map(|(k, m, r)| tape.gaussian_nll(m, r, gt[k].to_array()))
            .collect();
        tape.sum(&terms)
    }

    /// Sum of learned-posterior negative log-likelihoods against the ground
    /// truth. The initial posterior is fixed and does not contribute.
    pub fn loss_up(&self, tape: &mut Tape<'_>, seq: &ObservedSequence) -> Var {
        let gt = seq.gt();
        let terms: Vec<Var> = self
            .steps
            .iter()
            .enumerate()
            .filter_map(|(k, s)| s.posterior_raw.map(|r| (k, s.posterior_mean, r)))
            .map(|(k, m, r)| tape.gaussian_nll(m, r, gt[k].to_array()))
            .collect();
        tape.sum(&terms)
    }
}

fn check_aligned(trace: &FilterTrace, gt: &[Vec2]) -> Result<()> {
    if trace.len() != gt.len() {
        return Err(Error::InvalidInput(format!(
            "trace has {} steps but ground truth has {}",
            trace.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// Sum over steps with a prior of `-log N(gt_k | prior_k)`.
pub fn loss_pred(trace: &FilterTrace, gt: &[Vec2]) -> Result<f64> {
    check_aligned(trace, gt)?;
    let mut total = 0.0;
    for (s, g) in trace.steps.iter().zip(gt) {
        if let Some(p) = &s.prior {
            total += gaussian2d_nll(&p.0, *g)?;
        }
    }
    Ok(total)
}

/// Sum over steps with a learned posterior of `-log N(gt_k | posterior_k)`.
pub fn loss_up(trace: &FilterTrace, gt: &[Vec2]) -> Result<f64> {
    check_aligned(trace, gt)?;
    let mut total = 0.0;
    for (s, g) in trace.steps.iter().zip(gt) {
        if s.gain.is_some() {
            total += gaussian2d_nll(&s.posterior.0, *g)?;
        }
    }
    Ok(total)
}

pub const TRACE_COLUMNS: [&str; 19] = [
    "step", "m", "k_miss", "obs_x", "obs_y", "prior_x", "prior_y", "prior_cov_xx", "prior_cov_xy", "prior_cov_yy",
    "post_x", "post_y", "post_cov_xx", "post_cov_xy", "post_cov_yy", "k_obs_x", "k_obs_y", "gt_x", "gt_y",
];

/// Writes the trace as CSV. Steps without a prior or gain leave those
/// fields empty.
pub fn write_trace_csv<W: Write>(trace: &FilterTrace, mut w: W) -> Result<()> {
    writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (k, s) in trace.steps.iter().enumerate() {
        let p = s.prior.map(|p| p.0);
        let q = s.posterior.0;
        let fields = [
            k.to_string(),
            s.m.to_string(),
            s.k_miss.to_string(),
            s.obs.x.to_string(),
            s.obs.y.to_string(),
            opt(p.map(|g| g.mean.x)),
            opt(p.map(|g| g.mean.y)),
            opt(p.map(|g| g.cov.xx())),
            opt(p.map(|g| g.cov.xy())),
            opt(p.map(|g| g.cov.yy())),
            q.mean.x.to_string(),
            q.mean.y.to_string(),
            q.cov.xx().to_string(),
            q.cov.xy().to_string(),
            q.cov.yy().to_string(),
            opt(s.gain.map(|g| g.k_obs[0])),
            opt(s.gain.map(|g| g.k_obs[1])),
            s.gt.x.to_string(),
            s.gt.y.to_string(),
        ];
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Parses a trace written by [`write_trace_csv`].
pub fn read_trace_csv(text: &str) -> Result<FilterTrace> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::InvalidInput("empty trace file".into()))?;
    if header.trim() != TRACE_COLUMNS.join(",") {
        return Err(Error::InvalidInput("unexpected trace header".into()));
    }
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != TRACE_COLUMNS.len() {
            return Err(Error::InvalidInput(format!("trace row {}: expected 19 fields", i + 1)));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidInput(format!("trace row {}, column {}: {e}", i + 1, TRACE_COLUMNS[j])))
        };
        let opt = |j: usize| -> Result<Option<f64>> {
            if f[j].trim().is_empty() {
                Ok(None)
            } else {
                num(j).map(Some)
            }
        };
        let prior = match (opt(5)?, opt(6)?, opt(7)?, opt(8)?, opt(9)?) {
            (Some(x), Some(y), Some(a), Some(b), Some(c)) => {
                Some(PriorState(Gaussian2D::new(Vec2::new(x, y), Mat2([a, b, b, c]))?))
            }
            _ => None,
        };
        let posterior = Gaussian2D::new(Vec2::new(num(10)?, num(11)?), Mat2([num(12)?, num(13)?, num(13)?, num(14)?]))?;
        let gain = match (opt(15)?, opt(16)?) {
            (Some(a), Some(b)) => Some(GainPair::from_obs([a, b])),
            _ => None,
        };
        steps.push(TraceStep {
            prior,
            posterior: PosteriorState(posterior),
            gain,
            m: num(1)? as u8,
            k_miss: num(2)? as usize,
            obs: Vec2::new(num(3)?, num(4)?),
            gt: Vec2::new(num(17)?, num(18)?),
        });
    }
    Ok(FilterTrace { steps })
}
