//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 3 to 7 need the eight desk-scale training runs. They are read
//! from the checkpoint cache (`PUCYCLE_ACCEPTANCE_CACHE`, default
//! `target/acceptance-cache`) and trained there first when absent, which
//! takes roughly 25 minutes per condition on one core.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;
use pucycle::baselines::BaselineKind;
use pucycle::cycle::{k_miss_counts, CycleModel, FilterTrace, GainActivation, LayerSizes};
use pucycle::harness::eval::{compare_imputation, filter_all, gain_stats, gap_monotonicity};
use pucycle::harness::table::{evaluate_runs, run_grid, ConditionRun};
use pucycle::harness::{reference_ade, train_all, Condition, ExperimentConfig, TrainedModels, MODEL_CYCLE, MODEL_ENCODER, MODEL_ONE_TO_ONE};
use pucycle::math::Gaussian2D;
use pucycle::nn::Checkpoint;
use pucycle::trajgen::{generate_one, make_dataset, sample_agent, Dataset, GeneratorConfig, ObservedSequence};
use pucycle::Result;

const QUICK_BUDGET: Duration = Duration::from_secs(60);
const TABLE_BAND: f64 = 0.5;
const MASKED_GAIN_MAX: f64 = 0.1;
const GAIN_SEPARATION: f64 = 0.3;
const GAP_FRACTION: f64 = 0.9;
const FIG3_CONDITION: Condition = Condition::new(0.1, 0.0, 0.01);

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        if !ok {
            self.failures += 1;
        }
        println!("{} [{id}] {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    }

    /// Supplementary measurement outside the numbered criteria; never gates.
    fn note(&mut self, id: &str, ok: bool, detail: impl AsRef<str>) {
        println!("NOTE [{id}] {} {}", if ok { "met:" } else { "not met:" }, detail.as_ref());
    }

    fn error(&mut self, id: &str, e: &pucycle::Error) {
        self.line(id, false, format!("error: {e}"));
    }
}

fn cache_dir() -> PathBuf {
    std::env::var_os("PUCYCLE_ACCEPTANCE_CACHE")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance-cache"))
}

fn gradient_check(r: &mut Report) {
    let start = Instant::now();
    let mut worst = [RelErr::default(); 4];
    for seed in 0..10 {
        let (p, u) = check_cycle(small_sizes(), seed, usize::MAX);
        worst[0] = worst[0].max(p);
        worst[1] = worst[1].max(u);
        worst[2] = worst[2].max(check_baseline(BaselineKind::OneToOne, small_sizes(), seed, usize::MAX));
        worst[3] = worst[3].max(check_baseline(BaselineKind::Encoder, small_sizes(), seed, usize::MAX));
    }
    let (p, u) = check_cycle(LayerSizes::default(), 3, 300);
    worst[0] = worst[0].max(p);
    worst[1] = worst[1].max(u);
    worst[2] = worst[2].max(check_baseline(BaselineKind::OneToOne, LayerSizes::default(), 3, 300));
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|e| e.passes()) && elapsed < QUICK_BUDGET;
    let names = ["prediction", "update", "one_to_one", "encoder"];
    let fmt = |f: fn(&RelErr) -> f64| {
        names.iter().zip(&worst).map(|(n, e)| format!("{n} {:.1e}", f(e))).collect::<Vec<_>>().join(" ")
    };
    r.line(
        "1 gradients",
        ok,
        format!(
            "max rel err {} (< {FD_TOLERANCE:e}, h={FD_STEP:e}, denominator floor {FD_FLOOR:e}) in {:.1}s",
            fmt(|e| e.floored),
            elapsed.as_secs_f64()
        ),
    );
    println!("      with a 1e-8 denominator floor: {}", fmt(|e| e.strict));
}

fn generator_fidelity(r: &mut Report) -> Result<()> {
    let start = Instant::now();
    let cfg = GeneratorConfig { p_miss: 0.1, p_outl: 0.1, seed: 11, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let speeds: Vec<f64> = (0..10_000).map(|_| sample_agent(&cfg, &mut rng).speed).collect();
    let (mean, std) = pucycle::math::mean_std(&speeds)?;

    // missing events are drawn for every step after the first; outliers are
    // only visible on observed steps
    let (mut eligible, mut missing, mut observed, mut outliers) = (0usize, 0usize, 0usize, 0usize);
    let mut i = 0;
    while eligible < 100_000 {
        let s = generate_one(&cfg, i)?;
        for k in 1..s.len() {
            eligible += 1;
            if s.observed(k) {
                observed += 1;
                outliers += s.outlier[k] as usize;
            } else {
                missing += 1;
            }
        }
        i += 1;
    }
    let miss_rate = missing as f64 / eligible as f64;
    let outl_rate = outliers as f64 / observed as f64;
    let elapsed = start.elapsed();
    let ok = (mean - 1.38).abs() <= 0.02
        && (std - 0.37).abs() <= 0.02
        && (miss_rate - 0.1).abs() <= 0.005
        && (outl_rate - 0.1).abs() <= 0.005
        && elapsed < QUICK_BUDGET;
    r.line(
        "2 generator",
        ok,
        format!(
            "speed mean {mean:.4} std {std:.4} (1.38/0.37 ± 0.02); missing {miss_rate:.4} over {eligible} steps, outliers {outl_rate:.4} over {observed} observed (0.1 ± 0.005) in {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    Ok(())
}

fn cell(cells: &[pucycle::harness::ResultCell], c: &Condition, model: &str) -> f64 {
    cells
        .iter()
        .find(|x| x.condition() == *c && x.model == model)
        .map_or(f64::NAN, |x| x.ade)
}

fn table_and_ordering(r: &mut Report, runs: &[ConditionRun]) -> Result<()> {
    let cells = evaluate_runs(runs)?;
    let mut in_band = 0;
    let mut detail = Vec::new();
    let (mut beats_1to1, mut beats_enc) = (0, 0);
    for c in Condition::grid() {
        let ours = cell(&cells, &c, MODEL_CYCLE);
        let (reference, _) = reference_ade(&c, MODEL_CYCLE).expect("grid condition");
        let ok = (ours - reference).abs() <= TABLE_BAND * reference;
        in_band += ok as usize;
        let (o, e) = (cell(&cells, &c, MODEL_ONE_TO_ONE), cell(&cells, &c, MODEL_ENCODER));
        beats_1to1 += (ours <= o) as usize;
        beats_enc += (ours <= e) as usize;
        println!(
            "      {c}: cycle {ours:.4} (ref {reference:.3}{}) one_to_one {o:.4} encoder {e:.4}",
            if ok { "" } else { ", out of band" }
        );
        detail.push(format!("{ours:.3}"));
    }
    r.line(
        "3 table",
        in_band == 8,
        format!("{in_band}/8 cycle cells within ±50% of the reference; cycle ADE [{}]", detail.join(", ")),
    );
    for (c, model) in [(Condition::new(0.0, 0.1, 0.05), MODEL_ONE_TO_ONE), (Condition::new(0.0, 0.0, 0.01), MODEL_ENCODER)] {
        let ours = cell(&cells, &c, model);
        let (reference, _) = reference_ade(&c, model).expect("grid condition");
        r.note(
            "baseline table",
            (ours - reference).abs() <= TABLE_BAND * reference,
            format!("{model} at {c}: {ours:.4} vs reference {reference:.3} (±50%)"),
        );
    }
    r.line(
        "4 ordering",
        beats_1to1 >= 7 && beats_enc == 8,
        format!("cycle ≤ one_to_one in {beats_1to1}/8 (need 7), ≤ encoder in {beats_enc}/8 (need 8)"),
    );
    Ok(())
}

fn missing_runs(runs: &[ConditionRun]) -> Vec<&ConditionRun> {
    runs.iter().filter(|r| r.condition.p_miss > 0.0).collect()
}

fn gain_behaviour(r: &mut Report, runs: &[ConditionRun]) -> Result<()> {
    let run = runs.iter().find(|x| x.condition == FIG3_CONDITION).expect("grid condition");
    let traces = filter_all(&run.models, &run.data.eval)?;
    let g = gain_stats(&traces, &run.data.eval)?;
    let ok = g.masked_mean < MASKED_GAIN_MAX && g.observed_mean - g.masked_mean >= GAIN_SEPARATION;
    r.line(
        "5 gain",
        ok,
        format!(
            "{FIG3_CONDITION}: mean k_obs masked {:.4} over {} steps (< {MASKED_GAIN_MAX}), observed {:.4} over {} steps (gap ≥ {GAIN_SEPARATION})",
            g.masked_mean, g.n_masked, g.observed_mean, g.n_observed
        ),
    );
    Ok(())
}

fn gap_uncertainty(r: &mut Report, runs: &[ConditionRun]) -> Result<()> {
    let (mut good, mut total) = (0, 0);
    for run in missing_runs(runs) {
        let g = gap_monotonicity(&filter_all(&run.models, &run.data.eval)?, 2);
        good += g.non_decreasing;
        total += g.total;
    }
    let frac = if total == 0 { 0.0 } else { good as f64 / total as f64 };
    r.line(
        "6 gap uncertainty",
        frac >= GAP_FRACTION,
        format!("prior trace non-decreasing on {good}/{total} gaps of length ≥ 2 ({frac:.3}, need {GAP_FRACTION})"),
    );
    Ok(())
}

fn imputation(r: &mut Report, runs: &[ConditionRun]) -> Result<()> {
    let (mut sum_diff, mut sum_imp, mut sum_lin, mut n) = (0.0, 0.0, 0.0, 0usize);
    for run in missing_runs(runs) {
        let c = compare_imputation(&run.models, &run.data.eval)?;
        println!(
            "      {}: imputation {:.4} interpolation {:.4} paired diff {:+.4} over {} steps",
            run.condition, c.imputation_ade, c.interpolation_ade, c.mean_difference, c.n
        );
        sum_diff += c.mean_difference * c.n as f64;
        sum_imp += c.imputation_ade * c.n as f64;
        sum_lin += c.interpolation_ade * c.n as f64;
        n += c.n;
    }
    let n_f = n.max(1) as f64;
    let diff = sum_diff / n_f;
    r.line(
        "7 imputation",
        n > 0 && diff < 0.0,
        format!(
            "gap-position ADE imputation {:.4} vs interpolation {:.4}; paired mean difference {diff:+.5} over {n} masked steps (< 0)",
            sum_imp / n_f,
            sum_lin / n_f
        ),
    );
    Ok(())
}

/// Logged-curve examples of the training operations.
fn training_curves(r: &mut Report, runs: &[ConditionRun]) {
    use pucycle::harness::Phase;
    let (mut joint_ok, mut pre_ok) = (true, true);
    let mut worst_drop = f64::INFINITY;
    for run in runs {
        let log = &run.models.log;
        let joint = log.phase(Phase::Joint);
        let pre = log.phase(Phase::PreClean);
        match (joint.first(), joint.last()) {
            (Some(a), Some(b)) => {
                let drop = (a.eval_loss - b.eval_loss) / a.eval_loss.abs();
                worst_drop = worst_drop.min(drop);
                joint_ok &= drop >= 0.2;
            }
            _ => joint_ok = false,
        }
        match (pre.first(), pre.last()) {
            (Some(a), Some(b)) => pre_ok &= b.train_loss < a.train_loss,
            _ => pre_ok = false,
        }
    }
    r.note(
        "curves pretrain",
        pre_ok,
        "clean pretraining: final epoch mean NLL below the first in every condition",
    );
    r.note(
        "curves joint",
        joint_ok,
        format!("eval update loss relative decrease epoch 1 to final: worst {worst_drop:.3} (need ≥ 0.2)"),
    );
}

fn all_spd(t: &FilterTrace) -> bool {
    t.steps
        .iter()
        .all(|s| s.posterior.0.cov.is_spd() && s.prior.is_none_or(|p| p.0.cov.is_spd()))
}

/// Gain convexity, posterior mean inside the prior/observation box and the
/// k_miss recount.
fn trace_invariants(t: &FilterTrace, seq: &ObservedSequence) -> std::result::Result<(), String> {
    let recount = k_miss_counts(&seq.mask);
    for (k, s) in t.steps.iter().enumerate() {
        let brute = (0..=k).rev().take_while(|&j| seq.mask[j] == 0).count();
        if s.k_miss != brute || recount[k] != brute {
            return Err(format!("step {k}: k_miss {} recount {brute}", s.k_miss));
        }
        let (Some(g), Some(p)) = (s.gain, s.prior) else { continue };
        let prior = p.0.mean.to_array();
        let obs = s.obs.to_array();
        let post = s.posterior.0.mean.to_array();
        for a in 0..2 {
            if (g.k_obs[a] + g.k_pred[a] - 1.0).abs() > 1e-12 || !(0.0..=1.0).contains(&g.k_obs[a]) {
                return Err(format!("step {k}: gains {:?}", g));
            }
            let (lo, hi) = (prior[a].min(obs[a]), prior[a].max(obs[a]));
            let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
            if post[a] < lo - slack || post[a] > hi + slack {
                return Err(format!("step {k}: posterior {post:?} outside prior {prior:?} / obs {obs:?}"));
            }
        }
    }
    Ok(())
}

fn cached_properties(runs: &[ConditionRun]) -> Result<(bool, String)> {
    let (mut spd, mut inv) = (true, None);
    let mut n_cov = 0usize;
    for run in runs {
        let m = &run.models;
        for s in &run.data.eval {
            // invariants hold in the frame the networks ran in
            let (local, _) = s.anchored();
            let t = m.cycle.run_cycle(&m.params, &local)?;
            spd &= all_spd(&t);
            n_cov += 2 * t.len() - 1;
            if inv.is_none() {
                inv = trace_invariants(&t, &local).err();
            }
            for b in [&m.one_to_one, &m.encoder] {
                let est: Vec<Gaussian2D> = m.baseline_estimates(b, s)?;
                n_cov += est.len();
                spd &= est.iter().all(|g| g.cov.is_spd());
            }
        }
    }
    let ok = spd && inv.is_none();
    Ok((ok, format!("{n_cov} trained covariances SPD: {spd}; trace invariants: {}", inv.unwrap_or_else(|| "hold".into()))))
}

fn random_properties() -> std::result::Result<(), String> {
    let strategy = (any::<u64>(), any::<u64>(), 0.0..0.6f64, 0.0..0.3f64, 0.001..0.2f64);
    let mut runner = TestRunner::new(Config { cases: 64, ..Config::default() });
    runner
        .run(&strategy, |(init_seed, data_seed, p_miss, p_outl, sigma_w)| {
            let (model, params) = CycleModel::init(small_sizes(), GainActivation::Sigmoid, sigma_w, &mut rng(init_seed))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let cfg = GeneratorConfig { seed: data_seed, p_miss, p_outl, sigma_w, ..Default::default() };
            let seq = generate_one(&cfg, data_seed % 97).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let t = model.run_cycle(&params, &seq).map_err(|e| TestCaseError::fail(e.to_string()))?;
            prop_assert!(all_spd(&t));
            trace_invariants(&t, &seq).map_err(TestCaseError::fail)?;
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn round_trips(runs: &[ConditionRun]) -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let data_path = dir.path().join("d.jsonl");
    let data = make_dataset(&GeneratorConfig { p_miss: 0.1, p_outl: 0.1, seed: 5, ..Default::default() }, 50)?;
    data.write_jsonl(&data_path)?;
    let back = Dataset::read_jsonl(&data_path)?;
    let copy = dir.path().join("d2.jsonl");
    back.write_jsonl(&copy)?;
    let data_ok = back == data && std::fs::read(&data_path)? == std::fs::read(&copy)?;

    let mut ck_ok = true;
    for run in runs.iter().take(1) {
        let out = dir.path().join("ck");
        run.models.save(&out)?;
        let again = TrainedModels::load(&out)?;
        ck_ok &= again.params == run.models.params && again.one_to_one == run.models.one_to_one;
        for f in std::fs::read_dir(&out)? {
            let p = f?.path();
            if p.extension().is_some_and(|e| e == "json") {
                let bytes = std::fs::read(&p)?;
                let ck = Checkpoint::from_bytes(&bytes, &p)?;
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                ck_ok &= ck.to_bytes()? == bytes && bits(ck.store()?.values()) == bits(&ck.params);
            }
        }
    }
    Ok((data_ok && ck_ok, format!("dataset round trip {data_ok}, checkpoint round trip {ck_ok}")))
}

fn deterministic_training() -> Result<bool> {
    let cfg = ExperimentConfig {
        n_trajectories: 20,
        sizes: small_sizes(),
        epochs_pre_clean: 2,
        epochs_pre_noisy: 2,
        epochs_joint: 3,
        epochs_baseline: 2,
        generator: GeneratorConfig { p_miss: 0.1, p_outl: 0.1, seed: 4, ..Default::default() },
        seed: 9,
        ..Default::default()
    };
    let data = make_dataset(&cfg.generator, cfg.n_trajectories)?;
    let a = train_all(&cfg, &data)?;
    let b = train_all(&cfg, &data)?;
    let dir = tempfile::tempdir()?;
    a.save(&dir.path().join("a"))?;
    b.save(&dir.path().join("b"))?;
    let mut same = a == b;
    for f in ["prediction.json", "update.json", "one_to_one.json", "encoder.json", "train_log.csv"] {
        same &= std::fs::read(dir.path().join("a").join(f))? == std::fs::read(dir.path().join("b").join(f))?;
    }
    Ok(same)
}

fn properties(r: &mut Report, runs: &[ConditionRun]) -> Result<()> {
    let (cached_ok, cached) = cached_properties(runs)?;
    let random = random_properties();
    let (rt_ok, rt) = round_trips(runs)?;
    let det = deterministic_training()?;
    r.line(
        "8 properties",
        cached_ok && random.is_ok() && rt_ok && det,
        format!(
            "{cached}; 64 random cycles: {}; {rt}; identical seeds bit-identical: {det}",
            random.err().unwrap_or_else(|| "hold".into())
        ),
    );
    Ok(())
}

type Check = fn(&mut Report, &[ConditionRun]) -> Result<()>;

fn main() -> ExitCode {
    // the libtest flags cargo forwards are ignored; only --list needs an answer
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut r = Report { failures: 0 };
    gradient_check(&mut r);
    if let Err(e) = generator_fidelity(&mut r) {
        r.error("2 generator", &e);
    }

    let cache = cache_dir();
    println!("      desk-scale runs cached in {}", cache.display());
    match run_grid(&ExperimentConfig::default(), Some(&cache)) {
        Ok(runs) => {
            let checks: [(&str, Check); 5] = [
                ("3 table / 4 ordering", table_and_ordering),
                ("5 gain", gain_behaviour),
                ("6 gap uncertainty", gap_uncertainty),
                ("7 imputation", imputation),
                ("8 properties", properties),
            ];
            for (id, check) in checks {
                if let Err(e) = check(&mut r, &runs) {
                    r.error(id, &e);
                }
            }
            training_curves(&mut r, &runs);
        }
        Err(e) => r.error("3-8 desk-scale runs", &e),
    }

    println!("acceptance: {} failure(s)", r.failures);
    if r.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
