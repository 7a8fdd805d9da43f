//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use pucycle::baselines::{Baseline, BaselineKind};
use pucycle::cycle::{CycleModel, CycleParams, GainActivation, LayerSizes, PredTarget};
use pucycle::math::Vec2;
use pucycle::nn::{ParamStore, Tape};
use pucycle::trajgen::{GroundTruthTrajectory, ObservedSequence, TrajectoryMeta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Central differences at `FD_STEP` carry ~1e-10 of rounding noise for
/// losses of order 10, so components below this size are judged on
/// absolute error `FD_TOLERANCE * FD_FLOOR`.
pub const FD_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A five-step sequence with random positions, one gap and one outlier-like
/// jump.
pub fn random_sequence(seed: u64) -> ObservedSequence {
    let mut r = rng(seed ^ 0x5eed);
    let mut p = Vec2::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0));
    let v = Vec2::new(r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2));
    let mut gt = Vec::new();
    for _ in 0..5 {
        gt.push(p);
        p = p + v;
    }
    let mask = vec![1, 1, 0, 1, 1];
    let mut outlier = vec![0; 5];
    outlier[3] = 1;
    let obs = gt
        .iter()
        .zip(&mask)
        .enumerate()
        .map(|(k, (g, m))| {
            if *m == 0 {
                return Vec2::ZERO;
            }
            let scale = if k == 3 { 0.5 } else { 0.05 };
            *g + Vec2::new(r.gen_range(-scale..scale), r.gen_range(-scale..scale))
        })
        .collect();
    ObservedSequence {
        id: seed,
        gt: GroundTruthTrajectory {
            dt: 0.0625,
            positions: gt,
            meta: TrajectoryMeta { speed: v.norm() * 16.0, turn_angle_deg: 0.0, turn_start: 0, turn_len: 1, initial_heading: 0.0 },
        },
        obs,
        mask,
        outlier,
    }
}

/// Worst relative error under two denominators.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RelErr {
    /// `max(|a|, |fd|, 1e-8)`.
    pub strict: f64,
    /// `max(|a|, |fd|, FD_FLOOR)`.
    pub floored: f64,
}

impl RelErr {
    pub fn max(self, o: RelErr) -> RelErr {
        RelErr { strict: self.strict.max(o.strict), floored: self.floored.max(o.floored) }
    }

    pub fn passes(self) -> bool {
        self.floored < FD_TOLERANCE
    }
}

/// Largest `|a - fd|` relative error over `indices`, where `fd` is the
/// central difference of `loss` at each parameter.
pub fn max_relative_error(params: &[f64], analytic: &[f64], indices: &[usize], loss: impl Fn(&[f64]) -> f64) -> RelErr {
    let mut p = params.to_vec();
    let mut worst = RelErr::default();
    for &i in indices {
        let orig = p[i];
        p[i] = orig + FD_STEP;
        let up = loss(&p);
        p[i] = orig - FD_STEP;
        let down = loss(&p);
        p[i] = orig;
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i];
        let scale = a.abs().max(fd.abs());
        let e = RelErr {
            strict: (a - fd).abs() / scale.max(1e-8),
            floored: (a - fd).abs() / scale.max(FD_FLOOR),
        };
        worst = worst.max(e);
    }
    worst
}

/// Joint `L_pred + L_up` of the cycle, targets at every step.
pub fn cycle_loss(model: &CycleModel, pred: &[f64], up: &[f64], seq: &ObservedSequence) -> f64 {
    let mut t = Tape::inference(&[pred, up]);
    let u = model.unroll(&mut t, seq).unwrap();
    let lp = u.loss_pred(&mut t, seq, PredTarget::EveryStep);
    let lu = u.loss_up(&mut t, seq);
    let l = t.add(lp, lu);
    t.scalar(l)
}

pub fn cycle_grads(model: &CycleModel, params: &CycleParams, seq: &ObservedSequence) -> (Vec<f64>, Vec<f64>) {
    let mut t = Tape::new(&[params.pred.values(), params.up.values()]);
    let u = model.unroll(&mut t, seq).unwrap();
    let lp = u.loss_pred(&mut t, seq, PredTarget::EveryStep);
    let lu = u.loss_up(&mut t, seq);
    let l = t.add(lp, lu);
    let mut g = t.backward(l).unwrap().0;
    let up = g.pop().unwrap();
    (g.pop().unwrap(), up)
}

/// Parameter indices to check: all of them, or an evenly strided sample
/// of `limit` when the network is larger.
pub fn check_indices(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        (0..n).collect()
    } else {
        (0..limit).map(|i| i * n / limit).collect()
    }
}

/// Worst relative error of the prediction and update network gradients of
/// the joint sequence loss.
pub fn check_cycle(sizes: LayerSizes, seed: u64, limit: usize) -> (RelErr, RelErr) {
    let (model, params) = CycleModel::init(sizes, GainActivation::Sigmoid, 0.05, &mut rng(seed)).unwrap();
    let seq = random_sequence(seed);
    let (gp, gu) = cycle_grads(&model, &params, &seq);
    let up = params.up.values().to_vec();
    let pred = params.pred.values().to_vec();
    let e_pred = max_relative_error(params.pred.values(), &gp, &check_indices(gp.len(), limit), |p| {
        cycle_loss(&model, p, &up, &seq)
    });
    let e_up = max_relative_error(params.up.values(), &gu, &check_indices(gu.len(), limit), |u| {
        cycle_loss(&model, &pred, u, &seq)
    });
    (e_pred, e_up)
}

fn baseline_loss(b: &Baseline, store: &[f64], seq: &ObservedSequence) -> f64 {
    let mut t = Tape::inference(&[store]);
    let l = b.loss(&mut t, &seq.obs, seq.gt()).unwrap();
    t.scalar(l)
}

/// Worst relative error of a baseline's sequence-loss gradient.
pub fn check_baseline(kind: BaselineKind, sizes: LayerSizes, seed: u64, limit: usize) -> RelErr {
    let (b, store): (Baseline, ParamStore) = Baseline::init(kind, sizes, &mut rng(seed)).unwrap();
    let seq = random_sequence(seed);
    let g = {
        let mut t = Tape::new(&[store.values()]);
        let l = b.loss(&mut t, &seq.obs, seq.gt()).unwrap();
        t.backward(l).unwrap().0.remove(0)
    };
    max_relative_error(store.values(), &g, &check_indices(g.len(), limit), |p| baseline_loss(&b, p, &seq))
}

pub fn small_sizes() -> LayerSizes {
    LayerSizes { embed_dim: 4, hidden: 5, mlp_hidden: 6 }
}
