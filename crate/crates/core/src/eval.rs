//! Planning metrics, latency measurement and ablation sweeps.
//!
//! L2 at horizon `h` is the distance at the waypoint whose timestamp is
//! closest to `h` (or, in cumulative mode, the mean over waypoints up to
//! `h`); the reported average is the mean of the 1 s, 2 s and 3 s values.
//! A plan fails when any waypoint within the first second is more than
//! 10 m off. Malformed decodes count as failures and score L2 against an
//! all-zero plan.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::codec::{Codec, TokenId, Trajectory};
use crate::decoder::{decode_autoregressive, decode_diffusion, DecodeConfig, DecodeError, Decoded, DecodeTrace};
use crate::model::{MaskPredictor, SceneRaster};
use crate::world::{ParkingSample, SceneSample, SPOT_WIDTH};

pub const HORIZONS: [f64; 3] = [1.0, 2.0, 3.0];
pub const FAILURE_WINDOW: f64 = 1.0;
pub const FAILURE_DISTANCE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum L2Mode {
    /// Distance at the waypoint nearest the horizon.
    #[default]
    Horizon,
    /// Mean distance over waypoints up to the horizon.
    Cumulative,
}

fn check_pair(pred: &Trajectory, truth: &Trajectory) -> Result<(), EvalError> {
    if pred.len() != truth.len() || pred.dt != truth.dt || truth.is_empty() {
        return Err(EvalError::DimensionMismatch(format!(
            "prediction has {} waypoints at dt={}, truth has {} at dt={}",
            pred.len(),
            pred.dt,
            truth.len(),
            truth.dt
        )));
    }
    Ok(())
}

pub fn l2_error(pred: &Trajectory, truth: &Trajectory, horizon: f64, mode: L2Mode) -> Result<f64, EvalError> {
    check_pair(pred, truth)?;
    let dist = |k: usize| pred.waypoints[k].distance(&truth.waypoints[k]);
    match mode {
        L2Mode::Horizon => {
            let mut best = 0;
            for k in 1..truth.len() {
                if (truth.time_of(k) - horizon).abs() < (truth.time_of(best) - horizon).abs() {
                    best = k;
                }
            }
            Ok(dist(best))
        }
        L2Mode::Cumulative => {
            let ks: Vec<usize> = (0..truth.len()).filter(|&k| truth.time_of(k) <= horizon + 1e-9).collect();
            if ks.is_empty() {
                return Err(EvalError::DimensionMismatch(format!("no waypoint within {horizon} s")));
            }
            Ok(ks.iter().map(|&k| dist(k)).sum::<f64>() / ks.len() as f64)
        }
    }
}

pub fn is_failure(pred: &Trajectory, truth: &Trajectory) -> Result<bool, EvalError> {
    check_pair(pred, truth)?;
    Ok((0..truth.len())
        .filter(|&k| truth.time_of(k) <= FAILURE_WINDOW + 1e-9)
        .any(|k| pred.waypoints[k].distance(&truth.waypoints[k]) > FAILURE_DISTANCE))
}

/// Prompt and ground truth for one evaluation decode.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub scene: SceneRaster,
    pub context: Vec<TokenId>,
    pub truth: Trajectory,
}

impl From<&SceneSample> for EvalSample {
    fn from(s: &SceneSample) -> Self {
        Self {
            scene: s.raster.clone(),
            context: s.instruction.clone(),
            truth: s.truth.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoderChoice {
    Diffusion(DecodeConfig),
    Autoregressive,
}

impl DecoderChoice {
    pub fn run(
        &self,
        model: &MaskPredictor<f32>,
        codec: &Codec,
        scene: &SceneRaster,
        context: &[TokenId],
    ) -> Result<Decoded, DecodeError> {
        match self {
            DecoderChoice::Diffusion(cfg) => decode_diffusion(model, codec, scene, context, cfg),
            DecoderChoice::Autoregressive => decode_autoregressive(model, codec, scene, context),
        }
    }

    fn describe(&self) -> (String, Option<usize>, Option<f64>, String) {
        match self {
            DecoderChoice::Diffusion(c) => ("diffusion".into(), Some(c.steps), Some(c.tau), c.cache.to_string()),
            DecoderChoice::Autoregressive => ("autoregressive".into(), None, None, "off".into()),
        }
    }
}

/// A decode that either produced a trajectory or a malformed sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub trajectory: Option<Trajectory>,
    pub trace: DecodeTrace,
    pub seconds: f64,
}

/// Decodes one prompt, folding [`DecodeError::Malformed`] into the outcome.
pub fn decode_outcome(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    scene: &SceneRaster,
    context: &[TokenId],
    decoder: &DecoderChoice,
) -> Result<SampleOutcome, EvalError> {
    let start = Instant::now();
    let result = decoder.run(model, codec, scene, context);
    let seconds = start.elapsed().as_secs_f64();
    match result {
        Ok(d) => Ok(SampleOutcome {
            trajectory: Some(d.trajectory),
            trace: d.trace,
            seconds,
        }),
        Err(DecodeError::Malformed { trace, .. }) => Ok(SampleOutcome {
            trajectory: None,
            trace: *trace,
            seconds,
        }),
        Err(e) => Err(e.into()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanMetrics {
    /// L2 at 1 s, 2 s, 3 s.
    pub l2_at: [f64; 3],
    pub l2_avg: f64,
    pub failure_rate: f64,
    pub malformed: usize,
    pub samples: usize,
}

impl PlanMetrics {
    /// Aggregates stored predictions; `None` marks a malformed decode.
    pub fn from_predictions(
        preds: &[Option<Trajectory>],
        truths: &[Trajectory],
        mode: L2Mode,
    ) -> Result<Self, EvalError> {
        if preds.is_empty() || preds.len() != truths.len() {
            return Err(EvalError::EmptySplit);
        }
        let mut sums = [0.0; 3];
        let mut failures = 0;
        let mut malformed = 0;
        for (pred, truth) in preds.iter().zip(truths) {
            let fallback;
            let p = match pred {
                Some(p) => p,
                None => {
                    malformed += 1;
                    fallback = Trajectory::zeros(truth.len());
                    &fallback
                }
            };
            for (s, &h) in sums.iter_mut().zip(&HORIZONS) {
                *s += l2_error(p, truth, h, mode)?;
            }
            if pred.is_none() || is_failure(p, truth)? {
                failures += 1;
            }
        }
        let n = preds.len() as f64;
        let l2_at = sums.map(|s| s / n);
        Ok(Self {
            l2_at,
            l2_avg: l2_at.iter().sum::<f64>() / 3.0,
            failure_rate: failures as f64 / n,
            malformed,
            samples: preds.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub decoder: String,
    pub steps: Option<usize>,
    pub tau: Option<f64>,
    pub cache: String,
    /// Mean seconds per decode in each repeat of the batch.
    pub repeat_means: Vec<f64>,
    /// Median over repeats of the per-decode mean.
    pub seconds: f64,
    pub mean_calls: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub l2_mode: L2Mode,
    /// Timed passes over the split; metrics come from the first.
    pub repeats: usize,
    /// Threads decoding disjoint chunks of the split.
    pub workers: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            l2_mode: L2Mode::Horizon,
            repeats: 5,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: PlanMetrics,
    pub latency: LatencyReport,
    pub outcomes: Vec<SampleOutcome>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn decode_split(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    split: &[EvalSample],
    decoder: &DecoderChoice,
    workers: usize,
) -> Result<Vec<SampleOutcome>, EvalError> {
    let run = |chunk: &[EvalSample]| -> Result<Vec<SampleOutcome>, EvalError> {
        chunk
            .iter()
            .map(|s| decode_outcome(model, codec, &s.scene, &s.context, decoder))
            .collect()
    };
    if workers <= 1 || split.len() < 2 {
        return run(split);
    }
    let chunk = split.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = split.chunks(chunk).map(|c| scope.spawn(move || run(c))).collect();
        let mut out = Vec::with_capacity(split.len());
        for h in handles {
            out.extend(h.join().expect("decode worker panicked")?);
        }
        Ok(out)
    })
}

pub fn evaluate(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    split: &[EvalSample],
    decoder: &DecoderChoice,
    opts: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut outcomes = Vec::new();
    let mut repeat_means = Vec::new();
    for rep in 0..opts.repeats.max(1) {
        let pass = decode_split(model, codec, split, decoder, opts.workers)?;
        repeat_means.push(pass.iter().map(|o| o.seconds).sum::<f64>() / split.len() as f64);
        if rep == 0 {
            outcomes = pass;
        }
    }
    let preds: Vec<Option<Trajectory>> = outcomes.iter().map(|o| o.trajectory.clone()).collect();
    let truths: Vec<Trajectory> = split.iter().map(|s| s.truth.clone()).collect();
    let metrics = PlanMetrics::from_predictions(&preds, &truths, opts.l2_mode)?;
    let (name, steps, tau, cache) = decoder.describe();
    let latency = LatencyReport {
        decoder: name,
        steps,
        tau,
        cache,
        seconds: median(&repeat_means),
        repeat_means,
        mean_calls: outcomes.iter().map(|o| o.trace.model_calls as f64).sum::<f64>() / outcomes.len() as f64,
    };
    Ok(Evaluation {
        metrics,
        latency,
        outcomes,
    })
}

/// One row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub steps: usize,
    pub tau: f64,
    pub fixed_pattern: bool,
    pub l2_avg: f64,
    pub failure_rate: f64,
    pub seconds: f64,
    /// Mean demasking iterations, equal to mean model calls.
    pub mean_steps: f64,
}

impl AblationRow {
    fn from_eval(e: &Evaluation, steps: usize, tau: f64, fixed_pattern: bool) -> Self {
        Self {
            steps,
            tau,
            fixed_pattern,
            l2_avg: e.metrics.l2_avg,
            failure_rate: e.metrics.failure_rate,
            seconds: e.latency.seconds,
            mean_steps: e.latency.mean_calls,
        }
    }
}

pub fn ablate_threshold(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    split: &[EvalSample],
    taus: &[f64],
    steps: usize,
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>, EvalError> {
    taus.iter()
        .map(|&tau| {
            let cfg = DecoderChoice::Diffusion(DecodeConfig::new(steps, tau));
            let e = evaluate(model, codec, split, &cfg, opts)?;
            Ok(AblationRow::from_eval(&e, steps, tau, codec.spec().fixed_pattern))
        })
        .collect()
}

/// A trained model together with the template it decodes.
#[derive(Debug, Clone, Copy)]
pub struct Variant<'a> {
    pub model: &'a MaskPredictor<f32>,
    pub codec: &'a Codec,
}

/// Rows for each step count, one per variant in the order given.
pub fn ablate_steps(
    variants: &[Variant<'_>],
    split: &[EvalSample],
    step_counts: &[usize],
    tau: f64,
    opts: &EvalOptions,
) -> Result<Vec<AblationRow>, EvalError> {
    let mut rows = Vec::new();
    for &steps in step_counts {
        for v in variants {
            let cfg = DecoderChoice::Diffusion(DecodeConfig::new(steps, tau));
            let e = evaluate(v.model, v.codec, split, &cfg, opts)?;
            rows.push(AblationRow::from_eval(&e, steps, tau, v.codec.spec().fixed_pattern));
        }
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "steps,tau,fixed_pattern,l2_avg,failure_rate,mean_time_s,mean_steps";

pub fn ablation_csv(rows: &[AblationRow], provenance: &str) -> String {
    let mut out = provenance_comment(provenance);
    out.push_str(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.6},{:.3}",
            r.steps,
            r.tau,
            if r.fixed_pattern { "on" } else { "off" },
            r.l2_avg,
            r.failure_rate,
            r.seconds,
            r.mean_steps
        );
    }
    out
}

pub const COMPARISON_HEADER: &str = "decoder,steps,tau,cache,l2_1s,l2_2s,l2_3s,l2_avg,failure_rate,mean_time_s,mean_calls";

pub fn comparison_csv(evals: &[&Evaluation], provenance: &str) -> String {
    let mut out = provenance_comment(provenance);
    out.push_str(COMPARISON_HEADER);
    out.push('\n');
    for e in evals {
        let (m, l) = (&e.metrics, &e.latency);
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.6},{:.3}",
            l.decoder,
            l.steps.map_or("-".into(), |s| s.to_string()),
            l.tau.map_or("-".into(), |t| t.to_string()),
            l.cache,
            m.l2_at[0],
            m.l2_at[1],
            m.l2_at[2],
            m.l2_avg,
            m.failure_rate,
            l.seconds,
            l.mean_calls
        );
    }
    out
}

fn provenance_comment(provenance: &str) -> String {
    provenance.lines().map(|l| format!("# {l}\n")).collect()
}

/// Fixed-width text block with the usual planning-table column names.
pub fn summary_table(evals: &[&Evaluation]) -> String {
    let mut out = String::from(
        "Method            | L2 (m) 1s | 2s     | 3s     | Avg.   | Failure Rate (%) | Inference Time (s) | Calls\n",
    );
    for e in evals {
        let (m, l) = (&e.metrics, &e.latency);
        let name = match (l.steps, l.tau) {
            (Some(s), Some(t)) => format!("diffusion S={s} τ={t}"),
            _ => l.decoder.clone(),
        };
        let _ = writeln!(
            out,
            "{name:<17} | {:>9.3} | {:>6.3} | {:>6.3} | {:>6.3} | {:>16.2} | {:>18.4} | {:>5.1}",
            m.l2_at[0],
            m.l2_at[1],
            m.l2_at[2],
            m.l2_avg,
            100.0 * m.failure_rate,
            l.seconds,
            l.mean_calls
        );
    }
    out
}

/// Threshold sweep rendered with threshold, average L2 and time columns.
pub fn threshold_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("Threshold | L2 (m) Avg | Inference Time (s) | Steps\n");
    for r in rows {
        let _ = writeln!(out, "{:>9} | {:>10.3} | {:>18.4} | {:>5.2}", r.tau, r.l2_avg, r.seconds, r.mean_steps);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParkingReport {
    pub success_rate: f64,
    /// Median over samples of single-decode wall-clock.
    pub median_latency: f64,
    pub mean_latency: f64,
    pub samples: usize,
}

/// Success means the decoded waypoint lies within half a spot width of
/// the commanded spot's centre.
pub fn parking_success(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    split: &[ParkingSample],
    config: &DecodeConfig,
) -> Result<ParkingReport, EvalError> {
    if split.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let choice = DecoderChoice::Diffusion(*config);
    let mut hits = 0;
    let mut times = Vec::with_capacity(split.len());
    for s in split {
        let out = decode_outcome(model, codec, &s.raster, &s.instruction, &choice)?;
        times.push(out.seconds);
        let target = crate::world::spot_center(s.best_spot);
        if let Some(t) = out.trajectory {
            if t.waypoints.len() == 1 && t.waypoints[0].distance(&target) <= SPOT_WIDTH / 2.0 {
                hits += 1;
            }
        }
    }
    Ok(ParkingReport {
        success_rate: hits as f64 / split.len() as f64,
        median_latency: median(&times),
        mean_latency: times.iter().sum::<f64>() / times.len() as f64,
        samples: split.len(),
    })
}
