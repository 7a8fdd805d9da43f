//! Synthetic maneuvering-pedestrian trajectories with bimodal observation
//! noise, outliers and missing observations.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Vec2;

/// Stream reserved for the train/eval shuffle; trajectory `i` uses stream `i`.
const SHUFFLE_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub fps: f64,
    pub speed_mean: f64,
    pub speed_std: f64,
    pub speed_min: f64,
    pub turn_angle_min_deg: f64,
    pub turn_angle_max_deg: f64,
    pub turn_duration_mean: f64,
    pub turn_duration_std: f64,
    /// Start positions are uniform in `[-w, w]²` for this half-width `w`, m.
    pub start_half_width: f64,
    pub sigma_w: f64,
    pub sigma_outl: f64,
    pub p_outl: f64,
    pub p_miss: f64,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            fps: 16.0,
            speed_mean: 1.38,
            speed_std: 0.37,
            speed_min: 0.1,
            turn_angle_min_deg: 45.0,
            turn_angle_max_deg: 100.0,
            turn_duration_mean: 1.83,
            turn_duration_std: 0.29,
            start_half_width: 2.0,
            sigma_w: 0.01,
            sigma_outl: 0.5,
            p_outl: 0.0,
            p_miss: 0.0,
            len_min: 8,
            len_max: 20,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.fps
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("generator config: {m}")));
        if self.fps.is_nan() || self.fps <= 0.0 {
            return bad("fps must be positive");
        }
        for (name, v) in [
            ("speed_std", self.speed_std),
            ("turn_duration_std", self.turn_duration_std),
            ("sigma_w", self.sigma_w),
            ("sigma_outl", self.sigma_outl),
            ("speed_min", self.speed_min),
            ("start_half_width", self.start_half_width),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and non-negative"));
            }
        }
        for (name, p) in [("p_outl", self.p_outl), ("p_miss", self.p_miss)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.len_min < 3 || self.len_min > self.len_max {
            return bad("need 3 <= len_min <= len_max");
        }
        if self.turn_angle_min_deg > self.turn_angle_max_deg {
            return bad("turn angle range is empty");
        }
        Ok(())
    }
}

/// Per-trajectory kinematic parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    pub start: Vec2,
    pub speed: f64,
    pub heading: f64,
    /// Signed total heading change, radians.
    pub turn_angle: f64,
    pub turn_duration: f64,
    /// Position of the turn inside the admissible start range, in [0, 1).
    pub turn_start_frac: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub speed: f64,
    pub turn_angle_deg: f64,
    pub turn_start: usize,
    pub turn_len: usize,
    pub initial_heading: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthTrajectory {
    pub dt: f64,
    pub positions: Vec<Vec2>,
    pub meta: TrajectoryMeta,
}

/// Observed sequence with its ground truth. `mask[k] == 1` means observed;
/// masked steps carry the `(0, 0)` placeholder in `obs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedSequence {
    pub id: u64,
    pub gt: GroundTruthTrajectory,
    pub obs: Vec<Vec2>,
    pub mask: Vec<u8>,
    pub outlier: Vec<u8>,
}

impl ObservedSequence {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn gt(&self) -> &[Vec2] {
        &self.gt.positions
    }

    pub fn observed(&self, k: usize) -> bool {
        self.mask[k] == 1
    }

    /// Copy translated so the first observation sits at the origin, with the
    /// offset that was removed. Placeholders stay at `(0, 0)`, so anchoring
    /// twice changes nothing. A sequence whose first step is masked keeps its
    /// frame.
    pub fn anchored(&self) -> (ObservedSequence, Vec2) {
        let offset = match self.mask.first() {
            Some(1) => self.obs[0],
            _ => Vec2::ZERO,
        };
        let mut out = self.clone();
        if offset != Vec2::ZERO {
            for p in &mut out.gt.positions {
                *p = *p - offset;
            }
            for (o, &m) in out.obs.iter_mut().zip(&self.mask) {
                if m == 1 {
                    *o = *o - offset;
                }
            }
        }
        (out, offset)
    }

    /// Checks length agreement, placeholders at masked steps and
    /// outlier ⇒ observed.
    pub fn validate(&self) -> Result<()> {
        let n = self.gt.positions.len();
        if n == 0 || self.obs.len() != n || self.mask.len() != n || self.outlier.len() != n {
            return Err(Error::InvalidInput(format!("sequence {}: inconsistent lengths", self.id)));
        }
        for k in 0..n {
            match (self.mask[k], self.outlier[k]) {
                (0, 0) if self.obs[k] == Vec2::ZERO => {}
                (0, _) => {
                    return Err(Error::InvalidInput(format!(
                        "sequence {}: masked step {k} must hold the placeholder and no outlier",
                        self.id
                    )))
                }
                (1, 0 | 1) => {}
                _ => return Err(Error::InvalidInput(format!("sequence {}: flags must be 0/1", self.id))),
            }
        }
        Ok(())
    }
}

pub(crate) fn trajectory_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn truncated_normal<R: Rng>(rng: &mut R, mean: f64, std: f64, min: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = mean + std * z;
        if v >= min {
            return v;
        }
    }
}

pub fn sample_agent<R: Rng>(cfg: &GeneratorConfig, rng: &mut R) -> AgentParams {
    let speed = truncated_normal(rng, cfg.speed_mean, cfg.speed_std, cfg.speed_min);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let magnitude = if cfg.turn_angle_max_deg > cfg.turn_angle_min_deg {
        rng.gen_range(cfg.turn_angle_min_deg..=cfg.turn_angle_max_deg)
    } else {
        cfg.turn_angle_min_deg
    };
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let turn_duration = truncated_normal(rng, cfg.turn_duration_mean, cfg.turn_duration_std, cfg.dt());
    let turn_start_frac = rng.gen::<f64>();
    let w = cfg.start_half_width;
    let start = if w > 0.0 {
        Vec2::new(rng.gen_range(-w..=w), rng.gen_range(-w..=w))
    } else {
        Vec2::ZERO
    };
    AgentParams {
        start,
        speed,
        heading,
        turn_angle: sign * magnitude.to_radians(),
        turn_duration,
        turn_start_frac,
    }
}

/// Constant-speed motion from `agent.start`. The heading of displacement `j`
/// rotates at a constant rate across the turn window so the heading of the
/// last displacement differs from the first by exactly the turn angle. A
/// turn longer than the sequence is compressed into it.
pub fn simulate(agent: &AgentParams, length: usize, cfg: &GeneratorConfig) -> Result<GroundTruthTrajectory> {
    if length < cfg.len_min || length > cfg.len_max || length < 3 {
        return Err(Error::InvalidInput(format!(
            "trajectory length {length} outside [{}, {}]",
            cfg.len_min, cfg.len_max
        )));
    }
    let dt = cfg.dt();
    let max_changes = length - 2;
    let turn_len = ((agent.turn_duration * cfg.fps).round() as usize).clamp(1, max_changes);
    let slack = max_changes - turn_len;
    let turn_start = ((agent.turn_start_frac * (slack + 1) as f64) as usize).min(slack);
    let rate = agent.turn_angle / turn_len as f64;
    let step = agent.speed * dt;

    let mut positions = Vec::with_capacity(length);
    let mut p = agent.start;
    positions.push(p);
    for j in 0..length - 1 {
        let progressed = j.saturating_sub(turn_start).min(turn_len);
        let h = agent.heading + rate * progressed as f64;
        p = p + Vec2::new(h.cos(), h.sin()) * step;
        positions.push(p);
    }
    Ok(GroundTruthTrajectory {
        dt,
        positions,
        meta: TrajectoryMeta {
            speed: agent.speed,
            turn_angle_deg: agent.turn_angle.to_degrees(),
            turn_start,
            turn_len,
            initial_heading: agent.heading,
        },
    })
}

/// Adds isotropic noise per step, σ_outl on outlier steps and σ_w
/// elsewhere. Every step consumes the same number of draws regardless of
/// configuration.
pub fn observe<R: Rng>(gt: &GroundTruthTrajectory, cfg: &GeneratorConfig, rng: &mut R, id: u64) -> ObservedSequence {
    let n = gt.positions.len();
    let mut obs = Vec::with_capacity(n);
    let mut outlier = Vec::with_capacity(n);
    for p in &gt.positions {
        let u: f64 = rng.gen();
        let nx: f64 = StandardNormal.sample(rng);
        let ny: f64 = StandardNormal.sample(rng);
        let flagged = u < cfg.p_outl;
        let sigma = if flagged { cfg.sigma_outl } else { cfg.sigma_w };
        obs.push(*p + Vec2::new(nx, ny) * sigma);
        outlier.push(flagged as u8);
    }
    ObservedSequence {
        id,
        gt: gt.clone(),
        obs,
        mask: vec![1; n],
        outlier,
    }
}

/// Draws missing events for every step but the first. Masked steps get the
/// placeholder and lose any outlier flag.
pub fn mask_missing<R: Rng>(mut seq: ObservedSequence, cfg: &GeneratorConfig, rng: &mut R) -> ObservedSequence {
    for k in 0..seq.len() {
        let u: f64 = rng.gen();
        if k > 0 && u < cfg.p_miss {
            seq.mask[k] = 0;
            seq.obs[k] = Vec2::ZERO;
            seq.outlier[k] = 0;
        }
    }
    seq
}

/// Trajectory `index` of the dataset seeded by `cfg.seed`; independent of
/// every other index.
pub fn generate_one(cfg: &GeneratorConfig, index: u64) -> Result<ObservedSequence> {
    let mut rng = trajectory_rng(cfg.seed, index);
    let length = rng.gen_range(cfg.len_min..=cfg.len_max);
    let agent = sample_agent(cfg, &mut rng);
    let gt = simulate(&agent, length, cfg)?;
    let seq = observe(&gt, cfg, &mut rng, index);
    Ok(mask_missing(seq, cfg, &mut rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<ObservedSequence>,
    pub eval: Vec<ObservedSequence>,
}

impl Dataset {
    pub fn split_index(n: usize) -> usize {
        n * 4 / 5
    }

    /// Every sequence in its anchored frame.
    pub fn anchored(&self) -> Dataset {
        let f = |v: &[ObservedSequence]| v.iter().map(|s| s.anchored().0).collect();
        Dataset { train: f(&self.train), eval: f(&self.eval) }
    }

    /// Splits an already shuffled sequence list 80/20.
    pub fn from_ordered(mut all: Vec<ObservedSequence>) -> Self {
        let cut = Self::split_index(all.len());
        let eval = all.split_off(cut);
        Self { train: all, eval }
    }

    pub fn all(&self) -> impl Iterator<Item = &ObservedSequence> {
        self.train.iter().chain(&self.eval)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for s in self.all() {
            serde_json::to_writer(&mut buf, &Record::from(s))?;
            buf.push(b'\n');
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "dataset",
                path: path.to_path_buf(),
            });
        }
        let f = BufReader::new(fs::File::open(path)?);
        let mut all = Vec::new();
        for (i, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            let seq = rec.into_sequence();
            seq.validate()?;
            all.push(seq);
        }
        Ok(Self::from_ordered(all))
    }
}

/// `n` trajectories shuffled with a seeded permutation and split 80/20.
pub fn make_dataset(cfg: &GeneratorConfig, n: usize) -> Result<Dataset> {
    cfg.validate()?;
    if n < 5 {
        return Err(Error::InvalidInput(format!("dataset needs at least 5 trajectories, got {n}")));
    }
    let mut all = (0..n as u64).map(|i| generate_one(cfg, i)).collect::<Result<Vec<_>>>()?;
    let mut rng = trajectory_rng(cfg.seed, SHUFFLE_STREAM);
    all.shuffle(&mut rng);
    Ok(Dataset::from_ordered(all))
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: u64,
    dt: f64,
    gt: Vec<[f64; 2]>,
    obs: Vec<[f64; 2]>,
    mask: Vec<u8>,
    outlier: Vec<u8>,
    meta: TrajectoryMeta,
}

impl From<&ObservedSequence> for Record {
    fn from(s: &ObservedSequence) -> Self {
        Self {
            id: s.id,
            dt: s.gt.dt,
            gt: s.gt.positions.iter().map(|p| p.to_array()).collect(),
            obs: s.obs.iter().map(|p| p.to_array()).collect(),
            mask: s.mask.clone(),
            outlier: s.outlier.clone(),
            meta: s.gt.meta.clone(),
        }
    }
}

impl Record {
    fn into_sequence(self) -> ObservedSequence {
        ObservedSequence {
            id: self.id,
            gt: GroundTruthTrajectory {
                dt: self.dt,
                positions: self.gt.into_iter().map(Vec2::from).collect(),
                meta: self.meta,
            },
            obs: self.obs.into_iter().map(Vec2::from).collect(),
            mask: self.mask,
            outlier: self.outlier,
        }
    }
}
