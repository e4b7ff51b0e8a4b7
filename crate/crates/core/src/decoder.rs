//! Iterative parallel demasking and the left-to-right reference decoder.
//!
//! Diffusion decoding starts from the template with every free position
//! masked. Each iteration predicts all positions in one model call, then
//! commits the `max(⌈|free|/S⌉, #{conf > τ})` most confident masked
//! predictions and leaves the rest masked. Committed positions are never
//! masked again.

use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::codec::{Codec, CodecError, SlotKind, SymbolClass, TokenId, TokenSequence, Trajectory};
use crate::model::{MaskPredictor, ModelError, ModelInput, PromptCache, ProbRows, SceneRaster};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("decoded sequence is malformed: {source}")]
    Malformed {
        #[source]
        source: CodecError,
        trace: Box<DecodeTrace>,
    },
    #[error("trace line {line}: {reason}")]
    TraceFormat { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CachePolicy {
    Off,
    /// Reuse prompt keys/values, recomputing them every `refresh` iterations.
    Prompt { refresh: usize },
}

impl std::fmt::Display for CachePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CachePolicy::Off => f.write_str("off"),
            CachePolicy::Prompt { refresh } => write!(f, "prompt:{refresh}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub steps: usize,
    pub tau: f64,
    pub cache: CachePolicy,
}

impl DecodeConfig {
    pub fn new(steps: usize, tau: f64) -> Self {
        Self {
            steps,
            tau,
            cache: CachePolicy::Off,
        }
    }

    pub fn with_cache(mut self, cache: CachePolicy) -> Self {
        self.cache = cache;
        self
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.steps == 0 {
            return Err(DecodeError::Config("steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(DecodeError::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        if let CachePolicy::Prompt { refresh: 0 } = self.cache {
            return Err(DecodeError::Config("cache refresh interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// Argmax token and its probability at every response position.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub ids: Vec<TokenId>,
    pub confidence: Vec<f64>,
}

/// Row-wise argmax over every token except the reserved mask symbol,
/// which must never be committed. Ties go to the lowest token id.
pub fn argmax_rows(rows: &ProbRows<f32>, mask: TokenId) -> Prediction {
    let mut ids = Vec::with_capacity(rows.rows);
    let mut confidence = Vec::with_capacity(rows.rows);
    let skip = mask.index();
    for i in 0..rows.rows {
        let row = rows.row(i);
        let mut best = usize::from(skip == 0);
        for (j, &p) in row.iter().enumerate() {
            if j != skip && p > row[best] {
                best = j;
            }
        }
        ids.push(TokenId(best as u32));
        confidence.push(row[best] as f64);
    }
    Prediction { ids, confidence }
}

/// Tokens each response position may take. Under the fixed pattern a sign
/// slot accepts only signs and a digit slot only digits; `None` leaves the
/// position unrestricted (frozen positions, or every position when the
/// pattern is off and the model must also produce the formatting).
pub fn slot_choices(codec: &Codec) -> Vec<Option<Vec<TokenId>>> {
    let tpl = codec.template();
    if !codec.spec().fixed_pattern {
        return vec![None; tpl.len()];
    }
    let vocab = codec.vocab();
    let of_class = |keep: fn(SymbolClass) -> bool| -> Vec<TokenId> {
        (0..vocab.len() as u32)
            .map(TokenId)
            .filter(|&t| vocab.class(t).is_some_and(keep))
            .collect()
    };
    let signs = of_class(|c| matches!(c, SymbolClass::Sign(_)));
    let digits = of_class(|c| matches!(c, SymbolClass::Digit(_)));
    tpl.layout()
        .iter()
        .map(|k| match k {
            SlotKind::Sign => Some(signs.clone()),
            SlotKind::IntDigit | SlotKind::FracDigit => Some(digits.clone()),
            _ => None,
        })
        .collect()
}

/// [`argmax_rows`] restricted per position to `choices`. The confidence
/// of a restricted position is renormalised over its choices.
pub fn argmax_choices(rows: &ProbRows<f32>, mask: TokenId, choices: &[Option<Vec<TokenId>>]) -> Prediction {
    let mut pred = argmax_rows(rows, mask);
    for (i, allowed) in choices.iter().enumerate() {
        let Some(allowed) = allowed else { continue };
        let row = rows.row(i);
        let mut best = allowed[0];
        let mut total = 0.0f64;
        for &t in allowed {
            total += row[t.index()] as f64;
            if row[t.index()] > row[best.index()] {
                best = t;
            }
        }
        pred.ids[i] = best;
        pred.confidence[i] = if total > 0.0 { row[best.index()] as f64 / total } else { 1.0 / allowed.len() as f64 };
    }
    pred
}

/// One model call over the current partially masked response.
pub fn predict_all(model: &MaskPredictor<f32>, input: &ModelInput<'_>) -> Result<Prediction, DecodeError> {
    if input.response.masked_count() == 0 {
        return Err(DecodeError::Config("nothing left to predict".into()));
    }
    Ok(argmax_rows(&model.forward(input)?, input.response.mask_id()))
}

/// `⌈free / steps⌉`, the per-iteration minimum number of commits.
pub fn schedule_floor(free: usize, steps: usize) -> usize {
    free.div_ceil(steps.max(1)).max(1)
}

/// Commits the most confident masked predictions.
///
/// Returns the new sequence and the committed positions in descending
/// confidence order (ties to the lower position).
pub fn remask(
    seq: &TokenSequence,
    pred: &Prediction,
    free_count: usize,
    steps: usize,
    tau: f64,
) -> (TokenSequence, Vec<usize>) {
    let mut masked: Vec<usize> = seq.masked_positions().collect();
    if masked.is_empty() {
        return (seq.clone(), Vec::new());
    }
    let above = masked.iter().filter(|&&p| pred.confidence[p] > tau).count();
    let n = schedule_floor(free_count, steps).max(above).min(masked.len());
    let order = |a: &usize, b: &usize| pred.confidence[*b].total_cmp(&pred.confidence[*a]).then(a.cmp(b));
    if n < masked.len() {
        masked.select_nth_unstable_by(n - 1, order);
        masked.truncate(n);
    }
    masked.sort_unstable_by(order);
    let mut out = seq.clone();
    for &p in &masked {
        out.set(p, pred.ids[p]);
    }
    (out, masked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKind {
    Diffusion,
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Committed positions, most confident first.
    pub unmasked: Vec<usize>,
    pub ids: Vec<TokenId>,
    pub confidences: Vec<f64>,
    /// Highest confidence among positions left masked after this step.
    pub kept_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub kind: DecoderKind,
    pub steps: Vec<StepRecord>,
    pub model_calls: usize,
    /// Seconds spent inside the decode loop.
    pub wall_clock: f64,
    /// Prompt rows served from the cache, summed over calls.
    pub cache_hits: usize,
    pub refreshes: usize,
    pub sequence: TokenSequence,
}

impl DecodeTrace {
    /// One tab-separated line per step: step, committed positions, token
    /// ids, confidences, highest kept-masked confidence (`-` if none).
    /// A `#` header line carries the totals.
    pub fn to_records(&self, codec: &Codec) -> String {
        let kind = match self.kind {
            DecoderKind::Diffusion => "diffusion",
            DecoderKind::Autoregressive => "autoregressive",
        };
        let mut out = format!(
            "# decoder={kind} calls={} refreshes={} cache_hits={} wall_clock_s={} sequence={}\n",
            self.model_calls,
            self.refreshes,
            self.cache_hits,
            self.wall_clock,
            self.sequence.render(codec.vocab())
        );
        let join = |it: &mut dyn Iterator<Item = String>| it.collect::<Vec<_>>().join(",");
        for s in &self.steps {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                s.step,
                join(&mut s.unmasked.iter().map(|p| p.to_string())),
                join(&mut s.ids.iter().map(|t| t.0.to_string())),
                join(&mut s.confidences.iter().map(|c| c.to_string())),
                s.kept_max.map_or("-".to_string(), |c| c.to_string()),
            );
        }
        out
    }

    /// Parses the step lines written by [`DecodeTrace::to_records`].
    pub fn parse_steps(text: &str) -> Result<Vec<StepRecord>, DecodeError> {
        fn list<T: std::str::FromStr>(s: &str, line: usize) -> Result<Vec<T>, DecodeError> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|v| {
                    v.parse().map_err(|_| DecodeError::TraceFormat {
                        line,
                        reason: format!("bad value {v:?}"),
                    })
                })
                .collect()
        }
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            if raw.starts_with('#') || raw.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 5 {
                return Err(DecodeError::TraceFormat {
                    line,
                    reason: format!("expected 5 columns, found {}", cols.len()),
                });
            }
            let step = list::<usize>(cols[0], line)?;
            if step.len() != 1 {
                return Err(DecodeError::TraceFormat {
                    line,
                    reason: "missing step index".into(),
                });
            }
            out.push(StepRecord {
                step: step[0],
                unmasked: list(cols[1], line)?,
                ids: list::<u32>(cols[2], line)?.into_iter().map(TokenId).collect(),
                confidences: list(cols[3], line)?,
                kept_max: if cols[4] == "-" {
                    None
                } else {
                    Some(list::<f64>(cols[4], line)?[0])
                },
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub trajectory: Trajectory,
    pub trace: DecodeTrace,
}

fn finish(codec: &Codec, trace: DecodeTrace) -> Result<Decoded, DecodeError> {
    match codec.decode(&trace.sequence) {
        Ok(trajectory) => Ok(Decoded { trajectory, trace }),
        Err(source) => Err(DecodeError::Malformed {
            source,
            trace: Box::new(trace),
        }),
    }
}

/// Confidence-aware iterative demasking.
pub fn decode_diffusion(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    scene: &SceneRaster,
    context: &[TokenId],
    config: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    config.validate()?;
    let start = Instant::now();
    let free = codec.template().free_positions().len();
    let prompt_len = model.config().prompt_len();
    let choices = slot_choices(codec);
    let mut seq = codec.fresh_masked();
    let mut cache = PromptCache::new();
    let mut trace = DecodeTrace {
        kind: DecoderKind::Diffusion,
        steps: Vec::new(),
        model_calls: 0,
        wall_clock: 0.0,
        cache_hits: 0,
        refreshes: 0,
        sequence: seq.clone(),
    };
    // Every iteration commits at least one position, so `free` bounds the loop.
    for step in 0..free.max(1) {
        if seq.masked_count() == 0 {
            break;
        }
        let input = ModelInput {
            scene,
            context,
            response: &seq,
        };
        let rows = match config.cache {
            CachePolicy::Off => model.forward(&input)?,
            CachePolicy::Prompt { refresh } => {
                if step % refresh == 0 {
                    trace.refreshes += 1;
                    model.forward_filling(&input, &mut cache)?
                } else {
                    trace.cache_hits += prompt_len;
                    model.forward_cached(&input, &cache)?
                }
            }
        };
        trace.model_calls += 1;
        let pred = argmax_choices(&rows, seq.mask_id(), &choices);
        let (next, unmasked) = remask(&seq, &pred, free, config.steps, config.tau);
        let kept_max = next
            .masked_positions()
            .map(|p| pred.confidence[p])
            .max_by(f64::total_cmp);
        trace.steps.push(StepRecord {
            step,
            ids: unmasked.iter().map(|&p| pred.ids[p]).collect(),
            confidences: unmasked.iter().map(|&p| pred.confidence[p]).collect(),
            unmasked,
            kept_max,
        });
        seq = next;
    }
    trace.wall_clock = start.elapsed().as_secs_f64();
    trace.sequence = seq;
    finish(codec, trace)
}

/// Greedy left-to-right decoding under a causal mask, one model call per
/// free position.
pub fn decode_autoregressive(
    model: &MaskPredictor<f32>,
    codec: &Codec,
    scene: &SceneRaster,
    context: &[TokenId],
) -> Result<Decoded, DecodeError> {
    let start = Instant::now();
    let choices = slot_choices(codec);
    let mut seq = codec.fresh_masked();
    let mut trace = DecodeTrace {
        kind: DecoderKind::Autoregressive,
        steps: Vec::new(),
        model_calls: 0,
        wall_clock: 0.0,
        cache_hits: 0,
        refreshes: 0,
        sequence: seq.clone(),
    };
    for (step, &pos) in codec.template().free_positions().iter().enumerate() {
        let input = ModelInput {
            scene,
            context,
            response: &seq,
        };
        let row = model.forward_ar(&input, pos)?;
        trace.model_calls += 1;
        let rows = ProbRows {
            rows: 1,
            vocab: row.len(),
            data: row,
        };
        let pred = argmax_choices(&rows, seq.mask_id(), &choices[pos..=pos]);
        seq.set(pos, pred.ids[0]);
        trace.steps.push(StepRecord {
            step,
            unmasked: vec![pos],
            ids: pred.ids.clone(),
            confidences: pred.confidence.clone(),
            kept_max: None,
        });
    }
    trace.wall_clock = start.elapsed().as_secs_f64();
    trace.sequence = seq;
    finish(codec, trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::TemplateSpec;
    use crate::model::ModelConfig;

    fn prediction(conf: &[f64]) -> Prediction {
        Prediction {
            ids: (0..conf.len()).map(|i| TokenId(4 + i as u32 % 10)).collect(),
            confidence: conf.to_vec(),
        }
    }

    fn all_masked(n: usize) -> TokenSequence {
        TokenSequence::from_ids(vec![TokenId(0); n], TokenId(0))
    }

    #[test]
    fn hand_example() {
        let pred = prediction(&[0.9, 0.2, 0.8, 0.4, 0.95, 0.1]);
        let (next, chosen) = remask(&all_masked(6), &pred, 6, 3, 0.7);
        assert_eq!(chosen, vec![4, 0, 2]);
        assert_eq!(next.masked_positions().collect::<Vec<_>>(), vec![1, 3, 5]);
        assert_eq!(next.ids()[4], pred.ids[4]);
    }

    #[test]
    fn threshold_boundaries() {
        let pred = prediction(&[1.0, 0.2, 0.8, 0.4, 0.95, 0.1]);
        // Nothing is strictly above 1.0, so only the schedule floor applies.
        let (_, chosen) = remask(&all_masked(6), &pred, 6, 3, 1.0);
        assert_eq!(chosen, vec![0, 4]);
        let (next, chosen) = remask(&all_masked(6), &pred, 6, 3, 0.0);
        assert_eq!(chosen.len(), 6);
        assert!(next.is_fully_unmasked());
        // More steps than positions: one commit per step.
        let (_, chosen) = remask(&all_masked(6), &pred, 6, 50, 1.0);
        assert_eq!(chosen, vec![0]);
    }

    #[test]
    fn confidence_ties_go_to_lower_positions() {
        let pred = prediction(&[0.5; 6]);
        let (_, chosen) = remask(&all_masked(6), &pred, 6, 3, 0.9);
        assert_eq!(chosen, vec![0, 1]);
    }

    #[test]
    fn unmasked_positions_are_untouched() {
        let mut seq = all_masked(6);
        seq.set(4, TokenId(9));
        let pred = prediction(&[0.1, 0.1, 0.1, 0.1, 0.99, 0.1]);
        let (next, chosen) = remask(&seq, &pred, 6, 6, 0.5);
        assert_eq!(chosen, vec![0]);
        assert_eq!(next.ids()[4], TokenId(9));
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        let rows = ProbRows {
            rows: 2,
            vocab: 3,
            data: vec![0.25, 0.5, 0.25, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
        };
        let p = argmax_rows(&rows, TokenId(2));
        assert_eq!(p.ids, vec![TokenId(1), TokenId(0)]);
        assert_eq!(p.confidence[0], 0.5);
        // The mask symbol never wins, even when it holds the most mass.
        let p = argmax_rows(&rows, TokenId(1));
        assert_eq!(p.ids, vec![TokenId(0), TokenId(0)]);
        assert_eq!(p.confidence[0], 0.25);
    }

    fn setup() -> (Codec, MaskPredictor<f32>, SceneRaster, Vec<TokenId>) {
        let codec = Codec::new(TemplateSpec::new(2, 1, 1).unwrap());
        let cfg = ModelConfig::tiny(codec.vocab().len(), codec.spec().length());
        let model = MaskPredictor::new(cfg, 5).unwrap();
        let mut scene = SceneRaster::zeros(cfg.channels, cfg.raster_height, cfg.raster_width);
        scene.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f32 / 7.0);
        let context = vec![codec.vocab().pad_id(); cfg.context_len];
        (codec, model, scene, context)
    }

    #[test]
    fn uniform_model_predicts_lowest_id_with_uniform_confidence() {
        let (codec, mut model, scene, context) = setup();
        model.zero_head();
        let seq = codec.fresh_masked();
        let input = ModelInput {
            scene: &scene,
            context: &context,
            response: &seq,
        };
        let p = predict_all(&model, &input).unwrap();
        let u = 1.0 / codec.vocab().len() as f64;
        assert!(p.ids.iter().all(|&id| id == codec.vocab().pad_id()));
        assert!(p.confidence.iter().all(|c| (c - u).abs() < 1e-6));
        // Slot choices turn the flat distribution into the lowest sign and
        // digit, i.e. the all-zero plan.
        let d = decode_diffusion(&model, &codec, &scene, &context, &DecodeConfig::new(4, 0.0)).unwrap();
        assert_eq!(d.trajectory, Trajectory::zeros(2));
        // Without the pattern, padding fills every slot and the plan is malformed.
        let off = Codec::new(codec.spec().with_fixed_pattern(false));
        let err = decode_diffusion(&model, &off, &scene, &context, &DecodeConfig::new(4, 0.0)).unwrap_err();
        assert!(matches!(err, DecodeError::Malformed { .. }));
    }

    #[test]
    fn slot_choices_renormalise_confidence() {
        let codec = Codec::new(TemplateSpec::new(1, 1, 1).unwrap());
        let v = codec.vocab();
        let choices = slot_choices(&codec);
        let sign = codec.template().slot_layout()[0].x.sign;
        assert_eq!(choices[sign].as_deref(), Some(&[v.sign(false), v.sign(true)][..]));
        assert!(choices[0].is_none());
        let mut data = vec![0.0f32; codec.template().len() * v.len()];
        let at = |pos: usize, t: TokenId| pos * v.len() + t.index();
        data[at(sign, v.pad_id())] = 0.5;
        data[at(sign, v.sign(true))] = 0.3;
        data[at(sign, v.sign(false))] = 0.1;
        let rows = ProbRows {
            rows: codec.template().len(),
            vocab: v.len(),
            data,
        };
        let p = argmax_choices(&rows, v.mask_id(), &choices);
        assert_eq!(p.ids[sign], v.sign(true));
        assert!((p.confidence[sign] - 0.75).abs() < 1e-6);
        let off = slot_choices(&Codec::new(codec.spec().with_fixed_pattern(false)));
        assert!(off.iter().all(Option::is_none));
    }

    #[test]
    fn degenerate_threshold_decodes_in_one_call() {
        let (codec, model, scene, context) = setup();
        match decode_diffusion(&model, &codec, &scene, &context, &DecodeConfig::new(8, 0.0)) {
            Ok(d) => assert_eq!(d.trace.model_calls, 1),
            Err(DecodeError::Malformed { trace, .. }) => assert_eq!(trace.model_calls, 1),
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn one_commit_per_step_when_steps_equal_free() {
        let (codec, model, scene, context) = setup();
        let free = codec.template().free_positions().len();
        let trace = match decode_diffusion(&model, &codec, &scene, &context, &DecodeConfig::new(free, 1.0)) {
            Ok(d) => d.trace,
            Err(DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        assert_eq!(trace.model_calls, free);
        assert!(trace.steps.iter().all(|s| s.unmasked.len() == 1));
    }

    #[test]
    fn autoregressive_fills_left_to_right() {
        let (codec, model, scene, context) = setup();
        let trace = match decode_autoregressive(&model, &codec, &scene, &context) {
            Ok(d) => d.trace,
            Err(DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        let order: Vec<usize> = trace.steps.iter().flat_map(|s| s.unmasked.clone()).collect();
        assert_eq!(order, codec.template().free_positions());
        assert_eq!(trace.model_calls, codec.template().free_positions().len());
        assert!(trace.sequence.conforms_to(codec.template()));
    }

    #[test]
    fn cache_refresh_every_step_matches_uncached() {
        let (codec, model, scene, context) = setup();
        let base = DecodeConfig::new(3, 0.9);
        let run = |cfg: DecodeConfig| match decode_diffusion(&model, &codec, &scene, &context, &cfg) {
            Ok(d) => d.trace,
            Err(DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        let off = run(base);
        let k1 = run(base.with_cache(CachePolicy::Prompt { refresh: 1 }));
        assert_eq!(off.steps, k1.steps);
        assert_eq!(off.sequence, k1.sequence);
        assert_eq!(k1.cache_hits, 0);
        let never = run(base.with_cache(CachePolicy::Prompt { refresh: 3 }));
        assert_eq!(never.refreshes, never.model_calls.div_ceil(3));
        assert_eq!(
            never.cache_hits,
            (never.model_calls - never.refreshes) * model.config().prompt_len()
        );
    }

    #[test]
    fn trace_records_round_trip() {
        let (codec, model, scene, context) = setup();
        let trace = match decode_diffusion(&model, &codec, &scene, &context, &DecodeConfig::new(3, 0.5)) {
            Ok(d) => d.trace,
            Err(DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        let text = trace.to_records(&codec);
        assert_eq!(text.lines().count(), trace.steps.len() + 1);
        assert_eq!(DecodeTrace::parse_steps(&text).unwrap(), trace.steps);
        assert!(DecodeTrace::parse_steps("0\t1\t2\n").is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let (codec, model, scene, context) = setup();
        for cfg in [
            DecodeConfig::new(0, 0.5),
            DecodeConfig::new(2, 1.5),
            DecodeConfig::new(2, 0.5).with_cache(CachePolicy::Prompt { refresh: 0 }),
        ] {
            assert!(matches!(
                decode_diffusion(&model, &codec, &scene, &context, &cfg),
                Err(DecodeError::Config(_))
            ));
        }
    }
}
