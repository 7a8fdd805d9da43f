//! Training schedules: two-phase prediction pretraining, joint cycle
//! training with full backpropagation through time, and baseline fitting.
//!
//! Every phase is one ADAM step per sequence over a seeded shuffle of the
//! training split, with one optimizer per network. All networks see each
//! sequence anchored at its first observation, so they never learn absolute
//! positions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::baselines::{impute_with_prediction, Baseline, BaselineKind};
use crate::cycle::{CycleModel, CycleParams, FilterTrace, PredTarget};
use crate::error::{Error, Result};
use crate::math::{Gaussian2D, Vec2};
use crate::nn::checkpoint::write_atomic;
use crate::nn::{clip_global_norm, AdamState, Checkpoint, ParamStore, Tape, Var};
use crate::trajgen::{trajectory_rng, Dataset, ObservedSequence};

const INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 100;

pub const PREDICTION_FILE: &str = "prediction.json";
pub const UPDATE_FILE: &str = "update.json";
pub const ONE_TO_ONE_FILE: &str = "one_to_one.json";
pub const ENCODER_FILE: &str = "encoder.json";
pub const LOG_FILE: &str = "train_log.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PreClean,
    PreNoisy,
    Joint,
    OneToOne,
    Encoder,
}

impl Phase {
    pub const ALL: [Phase; 5] = [Phase::PreClean, Phase::PreNoisy, Phase::Joint, Phase::OneToOne, Phase::Encoder];

    pub fn name(self) -> &'static str {
        match self {
            Phase::PreClean => "pre_clean",
            Phase::PreNoisy => "pre_noisy",
            Phase::Joint => "joint",
            Phase::OneToOne => "one_to_one",
            Phase::Encoder => "encoder",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    fn stream(self) -> u64 {
        SHUFFLE_STREAM_BASE + self as u64
    }
}

/// Mean per-term negative log-likelihoods after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub phase: Phase,
    /// 1-based within the phase.
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    /// Appends a record; any non-finite loss fails the run.
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if !r.train_loss.is_finite() || !r.eval_loss.is_finite() {
            return Err(Error::NonFinite(format!("{} epoch {}", r.phase.name(), r.epoch)));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn phase(&self, p: Phase) -> Vec<EpochRecord> {
        self.records.iter().copied().filter(|r| r.phase == p).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("phase,epoch,train_loss,eval_loss\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.phase.name(), r.epoch, r.train_loss, r.eval_loss);
        }
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(corrupt(format!("line {}: expected 4 fields", i + 1)));
            }
            let phase = Phase::parse(f[0]).ok_or_else(|| corrupt(format!("line {}: unknown phase", i + 1)))?;
            let num = |s: &str| s.parse::<f64>().map_err(|e| corrupt(format!("line {}: {e}", i + 1)));
            records.push(EpochRecord {
                phase,
                epoch: f[1].parse().map_err(|e| corrupt(format!("line {}: {e}", i + 1)))?,
                train_loss: num(f[2])?,
                eval_loss: num(f[3])?,
            });
        }
        Ok(Self { records })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBaseline {
    pub model: Baseline,
    pub store: ParamStore,
    pub opt: AdamState,
}

/// Cycle networks, both baselines, optimizer states and the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels {
    pub config: ExperimentConfig,
    pub cycle: CycleModel,
    pub params: CycleParams,
    pub pred_opt: AdamState,
    pub up_opt: AdamState,
    pub one_to_one: TrainedBaseline,
    pub encoder: TrainedBaseline,
    pub log: TrainLog,
}

/// Untrained cycle networks for `cfg`.
pub fn init_cycle(cfg: &ExperimentConfig) -> Result<(CycleModel, CycleParams)> {
    let mut rng = trajectory_rng(cfg.seed, INIT_STREAM);
    CycleModel::init(cfg.sizes, cfg.gain, cfg.generator.sigma_w, &mut rng)
}

fn init_baseline(cfg: &ExperimentConfig, kind: BaselineKind) -> Result<TrainedBaseline> {
    let stream = match kind {
        BaselineKind::OneToOne => INIT_STREAM + 1,
        BaselineKind::Encoder => INIT_STREAM + 2,
    };
    let mut rng = trajectory_rng(cfg.seed, stream);
    let (model, store) = Baseline::init(kind, cfg.sizes, &mut rng)?;
    let opt = AdamState::new(store.len(), cfg.lr);
    Ok(TrainedBaseline { model, store, opt })
}

/// One ADAM step per store on the gradient of the scalar built by `f`.
/// Returns the loss value and its number of terms.
fn fit_step<F>(stores: &mut [&mut ParamStore], opts: &mut [&mut AdamState], clip: f64, f: F) -> Result<(f64, usize)>
where
    F: FnOnce(&mut Tape<'_>) -> Result<(Var, usize)>,
{
    let (loss, terms, grads) = {
        let views: Vec<&[f64]> = stores.iter().map(|s| s.values()).collect();
        let mut tape = Tape::new(&views);
        let (out, terms) = f(&mut tape)?;
        let loss = tape.scalar(out);
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        (loss, terms, tape.backward(out)?)
    };
    for ((store, opt), mut g) in stores.iter_mut().zip(opts.iter_mut()).zip(grads.0) {
        clip_global_norm(&mut g, clip)?;
        opt.step(store.values_mut(), &g)?;
    }
    Ok((loss, terms))
}

/// Mean per-term loss over `seqs` on inference tapes.
fn eval_mean<F>(stores: &[&[f64]], seqs: &[ObservedSequence], f: F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, usize) -> Result<(Var, usize)>,
{
    let (mut total, mut n) = (0.0, 0usize);
    for i in 0..seqs.len() {
        let mut tape = Tape::inference(stores);
        let (out, terms) = f(&mut tape, i)?;
        total += tape.scalar(out);
        n += terms;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// Runs `epochs` shuffled passes over `n_train` sequences. `step` trains on
/// one sequence; `evaluate` returns the per-term evaluation loss after each
/// epoch.
#[allow(clippy::too_many_arguments)]
fn run_epochs<T, S, E>(
    cfg: &ExperimentConfig,
    phase: Phase,
    epochs: usize,
    n_train: usize,
    state: &mut T,
    log: &mut TrainLog,
    mut step: S,
    evaluate: E,
) -> Result<()>
where
    T: ?Sized,
    S: FnMut(&mut T, usize) -> Result<(f64, usize)>,
    E: Fn(&T) -> Result<f64>,
{
    let mut rng = trajectory_rng(cfg.seed, phase.stream());
    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut total, mut n) = (0.0, 0usize);
        for &i in &order {
            let (l, terms) = step(state, i)?;
            total += l;
            n += terms;
        }
        let rec = EpochRecord {
            phase,
            epoch,
            train_loss: if n == 0 { 0.0 } else { total / n as f64 },
            eval_loss: evaluate(state)?,
        };
        if epoch == 1 || epoch == epochs || epoch % 10 == 0 {
            info!("{} epoch {epoch}/{epochs}: train {:.4} eval {:.4}", phase.name(), rec.train_loss, rec.eval_loss);
        } else {
            debug!("{} epoch {epoch}/{epochs}: train {:.4} eval {:.4}", phase.name(), rec.train_loss, rec.eval_loss);
        }
        log.push(rec)?;
    }
    Ok(())
}

/// Prediction loss with the network conditioned directly on `inputs`.
fn conditioned_pred_loss(
    model: &CycleModel,
    tape: &mut Tape<'_>,
    inputs: &[Vec2],
    seq: &ObservedSequence,
    target: PredTarget,
) -> Result<(Var, usize)> {
    let priors = model.unroll_prediction(tape, inputs, &seq.mask)?;
    let gt = seq.gt();
    let terms: Vec<Var> = priors
        .iter()
        .enumerate()
        .map(|(i, p)| (i + 1, p))
        .filter(|(k, _)| target == PredTarget::EveryStep || seq.observed(*k))
        .map(|(k, (m, r))| tape.gaussian_nll(*m, *r, gt[k].to_array()))
        .collect();
    let n = terms.len();
    Ok((tape.sum(&terms), n))
}

struct Net<'a> {
    store: &'a mut ParamStore,
    opt: &'a mut AdamState,
}

/// Pretrains the prediction network on ground-truth positions, then on the
/// noisy observations. Masked steps feed the placeholder in both phases.
pub fn pretrain_prediction(
    cfg: &ExperimentConfig,
    model: &CycleModel,
    pred: &mut ParamStore,
    opt: &mut AdamState,
    data: &Dataset,
    log: &mut TrainLog,
) -> Result<()> {
    let target = cfg.pred_target;
    let data = &data.anchored();
    let mut net = Net { store: pred, opt };
    for (phase, epochs) in [(Phase::PreClean, cfg.epochs_pre_clean), (Phase::PreNoisy, cfg.epochs_pre_noisy)] {
        let inputs_of = |s: &ObservedSequence| -> Vec<Vec2> {
            if phase == Phase::PreClean {
                s.gt().to_vec()
            } else {
                s.obs.clone()
            }
        };
        let train_inputs: Vec<Vec<Vec2>> = data.train.iter().map(inputs_of).collect();
        let eval_inputs: Vec<Vec<Vec2>> = data.eval.iter().map(inputs_of).collect();
        run_epochs(
            cfg,
            phase,
            epochs,
            data.train.len(),
            &mut net,
            log,
            |n, i| {
                fit_step(&mut [&mut *n.store], &mut [&mut *n.opt], cfg.clip_norm, |t| {
                    conditioned_pred_loss(model, t, &train_inputs[i], &data.train[i], target)
                })
            },
            |n| {
                eval_mean(&[n.store.values()], &data.eval, |t, i| {
                    conditioned_pred_loss(model, t, &eval_inputs[i], &data.eval[i], target)
                })
            },
        )?;
    }
    Ok(())
}

fn cycle_losses(
    model: &CycleModel,
    tape: &mut Tape<'_>,
    seq: &ObservedSequence,
    target: PredTarget,
) -> Result<(Var, Var, usize)> {
    let u = model.unroll(tape, seq)?;
    let lp = u.loss_pred(tape, seq, target);
    let lu = u.loss_up(tape, seq);
    Ok((lp, lu, seq.len() - 1))
}

struct Pair<'a> {
    params: &'a mut CycleParams,
    pred_opt: &'a mut AdamState,
    up_opt: &'a mut AdamState,
}

/// Trains both cycle networks end to end on `L_pred + w * L_up`. The logged
/// evaluation loss is the mean per-step update loss.
pub fn joint_train(
    cfg: &ExperimentConfig,
    model: &CycleModel,
    params: &mut CycleParams,
    pred_opt: &mut AdamState,
    up_opt: &mut AdamState,
    data: &Dataset,
    log: &mut TrainLog,
) -> Result<()> {
    let (target, w) = (cfg.pred_target, cfg.up_loss_weight);
    let data = &data.anchored();
    let mut pair = Pair { params, pred_opt, up_opt };
    run_epochs(
        cfg,
        Phase::Joint,
        cfg.epochs_joint,
        data.train.len(),
        &mut pair,
        log,
        |p, i| {
            let CycleParams { pred, up } = &mut *p.params;
            fit_step(&mut [pred, up], &mut [&mut *p.pred_opt, &mut *p.up_opt], cfg.clip_norm, |t| {
                let (lp, lu, n) = cycle_losses(model, t, &data.train[i], target)?;
                let lu = t.scale(lu, w);
                Ok((t.add(lp, lu), n))
            })
        },
        |p| {
            eval_mean(&[p.params.pred.values(), p.params.up.values()], &data.eval, |t, i| {
                let (_, lu, n) = cycle_losses(model, t, &data.eval[i], target)?;
                Ok((lu, n))
            })
        },
    )
}

fn baseline_terms(kind: BaselineKind, len: usize) -> usize {
    match kind {
        BaselineKind::OneToOne => len,
        BaselineKind::Encoder => 1,
    }
}

/// Fits a baseline on sequences whose gaps were filled by the trained
/// prediction network.
pub fn train_baseline(
    cfg: &ExperimentConfig,
    kind: BaselineKind,
    cycle: &CycleModel,
    params: &CycleParams,
    data: &Dataset,
    log: &mut TrainLog,
) -> Result<TrainedBaseline> {
    let mut b = init_baseline(cfg, kind)?;
    let data = &data.anchored();
    let impute = |seqs: &[ObservedSequence]| -> Result<Vec<Vec<Vec2>>> {
        seqs.iter().map(|s| impute_with_prediction(s, cycle, params)).collect()
    };
    let train_inputs = impute(&data.train)?;
    let eval_inputs = impute(&data.eval)?;
    let phase = match kind {
        BaselineKind::OneToOne => Phase::OneToOne,
        BaselineKind::Encoder => Phase::Encoder,
    };
    let model = b.model.clone();
    run_epochs(
        cfg,
        phase,
        cfg.epochs_baseline,
        data.train.len(),
        &mut b,
        log,
        |b, i| {
            let gt = data.train[i].gt();
            fit_step(&mut [&mut b.store], &mut [&mut b.opt], cfg.clip_norm, |t| {
                Ok((model.loss(t, &train_inputs[i], gt)?, baseline_terms(kind, gt.len())))
            })
        },
        |b| {
            eval_mean(&[b.store.values()], &data.eval, |t, i| {
                let gt = data.eval[i].gt();
                Ok((model.loss(t, &eval_inputs[i], gt)?, baseline_terms(kind, gt.len())))
            })
        },
    )?;
    Ok(b)
}

/// Full schedule: pretraining, joint training, then both baselines.
pub fn train_all(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedModels> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("training split is empty".into()));
    }
    let mut log = TrainLog::default();
    let (cycle, mut params) = init_cycle(cfg)?;
    let mut pred_opt = AdamState::new(params.pred.len(), cfg.lr);
    let mut up_opt = AdamState::new(params.up.len(), cfg.lr);
    let data = &data.anchored();
    pretrain_prediction(cfg, &cycle, &mut params.pred, &mut pred_opt, data, &mut log)?;
    joint_train(cfg, &cycle, &mut params, &mut pred_opt, &mut up_opt, data, &mut log)?;
    let one_to_one = train_baseline(cfg, BaselineKind::OneToOne, &cycle, &params, data, &mut log)?;
    let encoder = train_baseline(cfg, BaselineKind::Encoder, &cycle, &params, data, &mut log)?;
    Ok(TrainedModels {
        config: cfg.clone(),
        cycle,
        params,
        pred_opt,
        up_opt,
        one_to_one,
        encoder,
        log,
    })
}

impl TrainedModels {
    /// Cycle trace for `seq` in its own coordinates.
    pub fn filter(&self, seq: &ObservedSequence) -> Result<FilterTrace> {
        let (local, offset) = seq.anchored();
        Ok(self.cycle.run_cycle(&self.params, &local)?.translated(offset))
    }

    /// Gap-filled copy of the observations, in the coordinates of `seq`.
    pub fn impute(&self, seq: &ObservedSequence) -> Result<Vec<Vec2>> {
        let (local, offset) = seq.anchored();
        let filled = impute_with_prediction(&local, &self.cycle, &self.params)?;
        Ok(filled.into_iter().map(|p| p + offset).collect())
    }

    /// Baseline estimates for `seq`, fed the imputed observations.
    pub fn baseline_estimates(&self, b: &TrainedBaseline, seq: &ObservedSequence) -> Result<Vec<Gaussian2D>> {
        let (local, offset) = seq.anchored();
        let inputs = impute_with_prediction(&local, &self.cycle, &self.params)?;
        let mut est = b.model.forward(&b.store, &inputs)?;
        for e in &mut est {
            e.mean = e.mean + offset;
        }
        Ok(est)
    }

    fn checkpoints(&self) -> Result<[(&'static str, Checkpoint); 4]> {
        let c = &self.config;
        let echo = serde_json::to_value(c)?;
        let pre = (c.epochs_pre_clean + c.epochs_pre_noisy + c.epochs_joint) as u64;
        let ck = |kind: &str, store: &ParamStore, opt: &AdamState, epoch: usize| {
            Checkpoint::new(kind, echo.clone(), store, opt.clone(), epoch as u64, c.seed)
        };
        Ok([
            (PREDICTION_FILE, Checkpoint::new("prediction", echo.clone(), &self.params.pred, self.pred_opt.clone(), pre, c.seed)),
            (UPDATE_FILE, ck("update", &self.params.up, &self.up_opt, c.epochs_joint)),
            (ONE_TO_ONE_FILE, ck(BaselineKind::OneToOne.name(), &self.one_to_one.store, &self.one_to_one.opt, c.epochs_baseline)),
            (ENCODER_FILE, ck(BaselineKind::Encoder.name(), &self.encoder.store, &self.encoder.opt, c.epochs_baseline)),
        ])
    }

    /// Writes four checkpoints and the training log into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (file, ck) in self.checkpoints()? {
            ck.save(&dir.join(file))?;
        }
        write_atomic(&dir.join(LOG_FILE), self.log.to_csv().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let pred = Checkpoint::load(&dir.join(PREDICTION_FILE))?;
        let config: ExperimentConfig = serde_json::from_value(pred.config.clone()).map_err(|e| Error::Corrupt {
            path: dir.join(PREDICTION_FILE),
            reason: format!("config: {e}"),
        })?;
        let up = Checkpoint::load(&dir.join(UPDATE_FILE))?;
        let expect_kind = |ck: &Checkpoint, kind: &str, file: &str| -> Result<()> {
            if ck.kind != kind {
                return Err(Error::Corrupt {
                    path: dir.join(file),
                    reason: format!("checkpoint kind is {}, expected {kind}", ck.kind),
                });
            }
            Ok(())
        };
        expect_kind(&pred, "prediction", PREDICTION_FILE)?;
        expect_kind(&up, "update", UPDATE_FILE)?;
        let params = CycleParams { pred: pred.store()?, up: up.store()? };
        let cycle = CycleModel::bind(config.sizes, config.gain, config.generator.sigma_w, &params)?;
        let baseline = |kind: BaselineKind, file: &str| -> Result<TrainedBaseline> {
            let ck = Checkpoint::load(&dir.join(file))?;
            expect_kind(&ck, kind.name(), file)?;
            let store = ck.store()?;
            Ok(TrainedBaseline { model: Baseline::bind(kind, config.sizes, &store)?, store, opt: ck.optimizer })
        };
        let one_to_one = baseline(BaselineKind::OneToOne, ONE_TO_ONE_FILE)?;
        let encoder = baseline(BaselineKind::Encoder, ENCODER_FILE)?;
        let log_path = dir.join(LOG_FILE);
        let log = match fs::read_to_string(&log_path) {
            Ok(text) => TrainLog::from_csv(&text, &log_path)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => TrainLog::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self {
            config,
            cycle,
            params,
            pred_opt: pred.optimizer,
            up_opt: up.optimizer,
            one_to_one,
            encoder,
            log,
        })
    }
}
