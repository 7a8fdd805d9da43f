//! Displacement-error evaluation, report CSV, and the gain / gap /
//! imputation diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use super::config::{Condition, MODEL_CYCLE, MODEL_ENCODER, MODEL_ONE_TO_ONE};
use super::train::{TrainedBaseline, TrainedModels};
use crate::baselines::linear_interpolate;
use crate::cycle::FilterTrace;
use crate::error::{Error, Result};
use crate::math::{mean_std, Vec2};
use crate::nn::checkpoint::write_atomic;
use crate::trajgen::ObservedSequence;

/// ADE and σ_ADE of one model under one condition, in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultCell {
    pub p_miss: f64,
    pub p_outl: f64,
    pub sigma_w: f64,
    pub model: &'static str,
    pub ade: f64,
    pub sigma_ade: f64,
}

impl ResultCell {
    pub fn condition(&self) -> Condition {
        Condition::new(self.p_miss, self.p_outl, self.sigma_w)
    }
}

/// Scores (estimate, ground truth) pairs.
pub fn cell_from_pairs(c: Condition, model: &'static str, pairs: &[(Vec2, Vec2)]) -> Result<ResultCell> {
    let errors: Vec<f64> = pairs.iter().map(|(e, g)| (*e - *g).norm()).collect();
    let (ade, sigma_ade) = mean_std(&errors)?;
    if !ade.is_finite() {
        return Err(Error::NonFinite(format!("{model} ADE")));
    }
    Ok(ResultCell {
        p_miss: c.p_miss,
        p_outl: c.p_outl,
        sigma_w: c.sigma_w,
        model,
        ade,
        sigma_ade,
    })
}

/// Maps `f` over `items` on scoped worker threads, preserving order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok(out)
    })
}

/// Cycle traces for every sequence.
pub fn filter_all(m: &TrainedModels, seqs: &[ObservedSequence]) -> Result<Vec<FilterTrace>> {
    par_map(seqs, |s| m.filter(s))
}

fn baseline_pairs(m: &TrainedModels, b: &TrainedBaseline, seqs: &[ObservedSequence]) -> Result<Vec<(Vec2, Vec2)>> {
    let per_seq = par_map(seqs, |s| {
        let est = m.baseline_estimates(b, s)?;
        Ok(b.model.scored_points(&est, s.gt()))
    })?;
    Ok(per_seq.concat())
}

/// Three cells for one condition: cycle posterior means at every step,
/// one-to-one means at every step, encoder mean at the final step.
pub fn evaluate_condition(m: &TrainedModels, seqs: &[ObservedSequence]) -> Result<Vec<ResultCell>> {
    if seqs.is_empty() {
        return Err(Error::InvalidInput("evaluation set is empty".into()));
    }
    let c = m.config.condition();
    let traces = filter_all(m, seqs)?;
    let cycle: Vec<(Vec2, Vec2)> = traces
        .iter()
        .flat_map(|t| t.steps.iter().map(|s| (s.posterior.0.mean, s.gt)))
        .collect();
    Ok(vec![
        cell_from_pairs(c, MODEL_CYCLE, &cycle)?,
        cell_from_pairs(c, MODEL_ONE_TO_ONE, &baseline_pairs(m, &m.one_to_one, seqs)?)?,
        cell_from_pairs(c, MODEL_ENCODER, &baseline_pairs(m, &m.encoder, seqs)?)?,
    ])
}

/// Cells for every (models, evaluation set) pair, in input order.
pub fn evaluate_grid(runs: &[(&TrainedModels, &[ObservedSequence])]) -> Result<Vec<ResultCell>> {
    Ok(par_map(runs, |(m, seqs)| evaluate_condition(m, seqs))?.concat())
}

pub const REPORT_HEADER: &str = "p_miss,p_outl,sigma_w,model,ade_m,sigma_ade_m";

pub fn report_csv(cells: &[ResultCell]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for c in cells {
        let _ = writeln!(s, "{},{},{},{},{},{}", c.p_miss, c.p_outl, c.sigma_w, c.model, c.ade, c.sigma_ade);
    }
    s
}

pub fn write_report(cells: &[ResultCell], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(path, report_csv(cells).as_bytes())
}

/// Per-condition mean of ADE and σ_ADE over repeated runs; `runs` must
/// list the same cells in the same order.
pub fn aggregate(runs: &[Vec<ResultCell>]) -> Result<Vec<ResultCell>> {
    let first = runs.first().ok_or_else(|| Error::InvalidInput("no runs to aggregate".into()))?;
    let mut out = first.clone();
    for run in &runs[1..] {
        if run.len() != first.len() {
            return Err(Error::InvalidInput("runs differ in cell count".into()));
        }
        for (acc, c) in out.iter_mut().zip(run) {
            if acc.condition() != c.condition() || acc.model != c.model {
                return Err(Error::InvalidInput("runs list different cells".into()));
            }
            acc.ade += c.ade;
            acc.sigma_ade += c.sigma_ade;
        }
    }
    let n = runs.len() as f64;
    for c in &mut out {
        c.ade /= n;
        c.sigma_ade /= n;
    }
    Ok(out)
}

/// Mean `k_obs` (over both axes) at masked steps and at observed steps
/// without an outlier, excluding the initial step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainStats {
    pub masked_mean: f64,
    pub observed_mean: f64,
    pub n_masked: usize,
    pub n_observed: usize,
}

pub fn gain_stats(traces: &[FilterTrace], seqs: &[ObservedSequence]) -> Result<GainStats> {
    let (mut masked, mut observed) = (Vec::new(), Vec::new());
    for (t, s) in traces.iter().zip(seqs) {
        for (k, step) in t.steps.iter().enumerate() {
            let Some(g) = step.gain else { continue };
            let v = 0.5 * (g.k_obs[0] + g.k_obs[1]);
            if step.m == 0 {
                masked.push(v);
            } else if s.outlier[k] == 0 {
                observed.push(v);
            }
        }
    }
    if masked.is_empty() || observed.is_empty() {
        return Err(Error::InvalidInput("gain statistics need masked and observed steps".into()));
    }
    Ok(GainStats {
        masked_mean: mean_std(&masked)?.0,
        observed_mean: mean_std(&observed)?.0,
        n_masked: masked.len(),
        n_observed: observed.len(),
    })
}

/// Maximal runs of masked steps as `start..end` step ranges.
pub fn gaps(mask: &[u8]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < mask.len() {
        if mask[k] == 0 {
            let start = k;
            while k < mask.len() && mask[k] == 0 {
                k += 1;
            }
            out.push(start..k);
        } else {
            k += 1;
        }
    }
    out
}

/// Of all gaps of at least `min_len` masked steps, how many have a prior
/// covariance trace that never decreases across the gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GapMonotonicity {
    pub non_decreasing: usize,
    pub total: usize,
}

impl GapMonotonicity {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.non_decreasing as f64 / self.total as f64
        }
    }
}

pub fn gap_monotonicity(traces: &[FilterTrace], min_len: usize) -> GapMonotonicity {
    let mut r = GapMonotonicity { non_decreasing: 0, total: 0 };
    for t in traces {
        let mask: Vec<u8> = t.steps.iter().map(|s| s.m).collect();
        for g in gaps(&mask).into_iter().filter(|g| g.len() >= min_len) {
            let tr: Vec<f64> = t.steps[g].iter().filter_map(|s| s.prior.map(|p| p.0.cov.trace())).collect();
            r.total += 1;
            if tr.windows(2).all(|w| w[1] >= w[0]) {
                r.non_decreasing += 1;
            }
        }
    }
    r
}

/// Paired comparison of two gap-filling strategies over masked positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImputationComparison {
    pub imputation_ade: f64,
    pub interpolation_ade: f64,
    /// Mean of (imputation error − interpolation error) per masked step.
    pub mean_difference: f64,
    pub n: usize,
}

pub fn compare_imputation(m: &TrainedModels, seqs: &[ObservedSequence]) -> Result<ImputationComparison> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in seqs {
        let imp = m.impute(s)?;
        let lin = linear_interpolate(s)?;
        for k in (0..s.len()).filter(|&k| !s.observed(k)) {
            let g = s.gt()[k];
            a.push((imp[k] - g).norm());
            b.push((lin[k] - g).norm());
        }
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("no masked steps to compare".into()));
    }
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(ImputationComparison {
        imputation_ade: mean_std(&a)?.0,
        interpolation_ade: mean_std(&b)?.0,
        mean_difference: mean_std(&diff)?.0,
        n: a.len(),
    })
}
