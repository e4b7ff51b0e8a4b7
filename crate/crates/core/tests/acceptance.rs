//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! fails. Trains three toy models (fixed pattern on, off and parking), so a
//! full run takes a while.
//!
//! Set `MASKPLAN_ACCEPTANCE_CKPTS=<dir>` to reuse checkpoints between runs;
//! the training-time budget is then reported as not measured.

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::{demasking_violations, finite_difference_check, random_remask_case, random_trajectory, reference_remask, GradFixture};
use maskplan::codec::{Codec, TemplateSpec, Trajectory, Vocabulary};
use maskplan::config::RunConfig;
use maskplan::decoder::{decode_autoregressive, decode_diffusion, remask, CachePolicy, DecodeConfig, Prediction};
use maskplan::eval::{
    ablate_steps, ablate_threshold, evaluate, median, parking_success, DecoderChoice, EvalOptions, EvalSample,
    PlanMetrics, Variant,
};
use maskplan::model::checkpoint::Checkpoint;
use maskplan::model::MaskPredictor;
use maskplan::training::{train, TrainExample, TrainOutputs};
use maskplan::world::{generate_parking, generate_scene, split_seeds, DatasetKind, Split};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TRAIN_SAMPLES: usize = 5000;
const VAL_SAMPLES: usize = 200;

struct Suite {
    lines: Vec<(bool, String)>,
}

impl Suite {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("[{}] {id} {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, format!("{id} {detail}")));
    }
}

struct Trained {
    model: MaskPredictor<f32>,
    codec: Codec,
    /// `None` when the checkpoint was reused.
    train_seconds: Option<f64>,
}

fn train_or_load(name: &str, cfg: &RunConfig) -> Trained {
    let vocab = Vocabulary::standard();
    let codec = Codec::new(cfg.template().unwrap());
    let cached: Option<PathBuf> = std::env::var_os("MASKPLAN_ACCEPTANCE_CKPTS").map(|d| PathBuf::from(d).join(format!("{name}.ckpt")));
    if let Some(path) = cached.as_ref().filter(|p| p.exists()) {
        let ck = Checkpoint::load(path).unwrap();
        if ck.template == codec.spec() && ck.provenance == cfg.echo() {
            println!("  reusing {}", path.display());
            return Trained {
                model: ck.model,
                codec,
                train_seconds: None,
            };
        }
    }
    let start = Instant::now();
    let data: Vec<TrainExample> = split_seeds(0, cfg.train_count, Split::Train)
        .into_iter()
        .map(|s| match cfg.kind {
            DatasetKind::Driving => generate_scene(s, &vocab).to_example(&codec).unwrap(),
            DatasetKind::Parking => generate_parking(s, &vocab).to_example(&codec).unwrap(),
        })
        .collect();
    let model = MaskPredictor::new(cfg.model(vocab.len()).unwrap(), cfg.seed).unwrap();
    let echo = cfg.echo();
    let outputs = TrainOutputs {
        log: None,
        checkpoint: cached.as_deref(),
        provenance: &echo,
    };
    if let Some(dir) = cached.as_ref().and_then(|p| p.parent()) {
        std::fs::create_dir_all(dir).unwrap();
    }
    let (model, report) = train(model, &data, codec.template(), &cfg.train(), &outputs).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let losses: Vec<String> = report.epoch_losses.iter().map(|l| format!("{l:.2}")).collect();
    println!("  trained {name} in {secs:.0} s, epoch losses [{}]", losses.join(", "));
    Trained {
        model,
        codec,
        train_seconds: Some(secs),
    }
}

fn driving_val() -> Vec<EvalSample> {
    let vocab = Vocabulary::standard();
    split_seeds(0, VAL_SAMPLES, Split::Val)
        .iter()
        .map(|&s| EvalSample::from(&generate_scene(s, &vocab)))
        .collect()
}

fn gradients(suite: &mut Suite) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut pass = true;
    for seed in [1, 2, 3] {
        let fx = GradFixture::new(seed);
        for c in finite_difference_check(&fx, 1e-4) {
            worst = worst.max(c.tensor_rel).max(c.max_significant_rel);
            pass &= c.passes(1e-4);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    suite.record(
        "C1 gradient check",
        pass && secs < 60.0,
        format!("worst relative error {worst:.2e} over 3 seeds (tol 1e-4), {secs:.1} s (< 60 s)"),
    );
}

fn remask_oracle(suite: &mut Suite) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let case = random_remask_case(&mut rng);
        let pred = Prediction {
            ids: case.ids.clone(),
            confidence: case.confidence.clone(),
        };
        let (seq, chosen) = remask(&case.seq, &pred, case.free, case.steps, case.tau);
        let (want_ids, want_chosen) = reference_remask(&case);
        if chosen != want_chosen || seq.ids() != &want_ids[..] {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    suite.record(
        "C2 remask oracle",
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatches in 10000 instances, {secs:.2} s (< 10 s)"),
    );
}

fn codec_round_trip(suite: &mut Suite) {
    let spec = TemplateSpec::driving();
    let codec = Codec::new(spec);
    let tol = 10f64.powi(-(spec.frac_digits as i32));
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst, mut malformed, mut over) = (0.0f64, 0, 0);
    for _ in 0..10_000 {
        let t = random_trajectory(&mut rng, spec);
        match codec.encode(&t).and_then(|s| codec.decode(&s)) {
            Ok(back) => {
                for (a, b) in t.waypoints.iter().zip(&back.waypoints) {
                    let e = (a.x - b.x).abs().max((a.y - b.y).abs());
                    worst = worst.max(e);
                    over += usize::from(e >= tol);
                }
            }
            Err(_) => malformed += 1,
        }
    }
    suite.record(
        "C10 codec round trip",
        malformed == 0 && over == 0,
        format!("10000 trajectories, max error {worst:.1e} (< {tol:.0e}), {malformed} malformed"),
    );
}

fn call_count_law(suite: &mut Suite, fp_on: &Trained, val: &[EvalSample]) {
    let free = fp_on.codec.template().free_positions().len();
    let config = DecodeConfig::new(8, 1.0);
    let (mut d_calls, mut a_calls) = (0usize, 0usize);
    let (mut d_time, mut a_time) = (Vec::new(), Vec::new());
    for s in val.iter().cycle().take(100) {
        let d = match decode_diffusion(&fp_on.model, &fp_on.codec, &s.scene, &s.context, &config) {
            Ok(d) => d.trace,
            Err(maskplan::decoder::DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        let a = match decode_autoregressive(&fp_on.model, &fp_on.codec, &s.scene, &s.context) {
            Ok(d) => d.trace,
            Err(maskplan::decoder::DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        d_calls = d_calls.max(d.model_calls);
        a_calls = a_calls.max(a.model_calls);
        d_time.push(d.wall_clock);
        a_time.push(a.wall_clock);
    }
    let (dm, am) = (median(&d_time), median(&a_time));
    let pass = free == 48 && d_calls <= 8 && a_calls == 48 && a_calls >= 6 * d_calls && dm < am;
    suite.record(
        "C4 call-count law",
        pass,
        format!(
            "|free| = {free}: diffusion <= {d_calls} calls vs AR {a_calls}; median wall-clock {:.2} ms vs {:.2} ms over 100 paired decodes",
            dm * 1e3,
            am * 1e3
        ),
    );
}

fn demasking_invariants(suite: &mut Suite, fp_on: &Trained, fp_off: &Trained, val: &[EvalSample]) {
    let settings = [1usize, 4, 8, 16, 32, 48, 128];
    let taus = [0.0, 0.3, 0.5, 0.9, 1.0];
    let mut violations = Vec::new();
    let mut decodes = 0;
    for i in 0..1000 {
        let s = &val[i % val.len()];
        let t = if i % 4 == 3 { fp_off } else { fp_on };
        let steps = settings[i % settings.len()];
        let tau = taus[(i / settings.len()) % taus.len()];
        let cache = match i % 3 {
            0 => CachePolicy::Off,
            1 => CachePolicy::Prompt { refresh: 1 },
            _ => CachePolicy::Prompt { refresh: 3 },
        };
        let cfg = DecodeConfig::new(steps, tau).with_cache(cache);
        let trace = match decode_diffusion(&t.model, &t.codec, &s.scene, &s.context, &cfg) {
            Ok(d) => d.trace,
            Err(maskplan::decoder::DecodeError::Malformed { trace, .. }) => *trace,
            Err(e) => panic!("{e}"),
        };
        decodes += 1;
        for v in demasking_violations(&trace, &t.codec, steps) {
            violations.push(format!("decode {i}: {v}"));
        }
    }
    if let Some(v) = violations.first() {
        println!("  first violation: {v}");
    }
    suite.record(
        "C3 demasking invariants",
        violations.is_empty(),
        format!("{} violations over {decodes} decodes", violations.len()),
    );
}

fn learning_sanity(suite: &mut Suite, fp_on: &Trained, val: &[EvalSample], opts: &EvalOptions) {
    let start = Instant::now();
    let e = evaluate(&fp_on.model, &fp_on.codec, val, &DecoderChoice::Diffusion(DecodeConfig::new(16, 0.5)), opts).unwrap();
    let zero: Vec<Option<Trajectory>> = val.iter().map(|s| Some(Trajectory::zeros(s.truth.len()))).collect();
    let truths: Vec<Trajectory> = val.iter().map(|s| s.truth.clone()).collect();
    let baseline = PlanMetrics::from_predictions(&zero, &truths, opts.l2_mode).unwrap();
    let eval_secs = start.elapsed().as_secs_f64();
    let m = &e.metrics;
    let ratio = baseline.l2_avg / m.l2_avg;
    let (time_ok, time_note) = match fp_on.train_seconds {
        Some(t) => (t + eval_secs < 1800.0, format!("{:.0} s train+eval (< 1800 s)", t + eval_secs)),
        None => (true, "runtime not measured (checkpoint reused)".to_string()),
    };
    suite.record(
        "C5 learning sanity",
        ratio >= 3.0 && m.failure_rate < 0.01 && time_ok,
        format!(
            "l2_avg {:.3} m vs zero baseline {:.3} m ({ratio:.1}x, need >= 3x); L2@1/2/3 s {:.2}/{:.2}/{:.2}; failure {:.1}% (< 1%), {} malformed; {time_note}",
            m.l2_avg,
            baseline.l2_avg,
            m.l2_at[0],
            m.l2_at[1],
            m.l2_at[2],
            100.0 * m.failure_rate,
            m.malformed
        ),
    );
}

fn threshold_trend(suite: &mut Suite, fp_on: &Trained, val: &[EvalSample], opts: &EvalOptions) {
    let taus = [0.9, 0.7, 0.5, 0.3];
    let rows = ablate_threshold(&fp_on.model, &fp_on.codec, val, &taus, 16, opts).unwrap();
    let mut pass = true;
    for w in rows.windows(2) {
        pass &= w[1].mean_steps <= w[0].mean_steps;
        pass &= w[1].seconds <= 1.1 * w[0].seconds;
    }
    let cells: Vec<String> = rows
        .iter()
        .map(|r| format!("tau {}: {:.2} steps {:.2} ms l2 {:.2}", r.tau, r.mean_steps, r.seconds * 1e3, r.l2_avg))
        .collect();
    suite.record("C6 threshold trend", pass, format!("S = 16; {}", cells.join("; ")));
}

fn fixed_pattern_benefit(suite: &mut Suite, fp_on: &Trained, fp_off: &Trained, val: &[EvalSample], opts: &EvalOptions) {
    let variants = [
        Variant {
            model: &fp_on.model,
            codec: &fp_on.codec,
        },
        Variant {
            model: &fp_off.model,
            codec: &fp_off.codec,
        },
    ];
    let rows = ablate_steps(&variants, val, &[16, 32], 0.5, opts).unwrap();
    let mut pass = true;
    let mut cells = Vec::new();
    for pair in rows.chunks(2) {
        let (on, off) = (&pair[0], &pair[1]);
        pass &= on.mean_steps <= off.mean_steps && on.l2_avg <= off.l2_avg;
        cells.push(format!(
            "S {}: calls {:.2} vs {:.2}, l2 {:.3} vs {:.3}",
            on.steps, on.mean_steps, off.mean_steps, on.l2_avg, off.l2_avg
        ));
    }
    suite.record("C7 fixed-pattern benefit", pass, format!("on vs off; {}", cells.join("; ")));
}

fn cache(suite: &mut Suite, fp_on: &Trained, val: &[EvalSample], opts: &EvalOptions) {
    let steps = 16;
    let off = DecodeConfig::new(steps, 0.5);
    let k1 = off.with_cache(CachePolicy::Prompt { refresh: 1 });
    let ks = off.with_cache(CachePolicy::Prompt { refresh: steps });
    let mut identical = true;
    for s in val {
        let a = decode_diffusion(&fp_on.model, &fp_on.codec, &s.scene, &s.context, &off);
        let b = decode_diffusion(&fp_on.model, &fp_on.codec, &s.scene, &s.context, &k1);
        let strip = |r: Result<maskplan::decoder::Decoded, maskplan::decoder::DecodeError>| match r {
            Ok(d) => (d.trace.sequence, d.trace.steps),
            Err(maskplan::decoder::DecodeError::Malformed { trace, .. }) => (trace.sequence, trace.steps),
            Err(e) => panic!("{e}"),
        };
        identical &= strip(a) == strip(b);
    }
    let e_off = evaluate(&fp_on.model, &fp_on.codec, val, &DecoderChoice::Diffusion(off), opts).unwrap();
    let e_ks = evaluate(&fp_on.model, &fp_on.codec, val, &DecoderChoice::Diffusion(ks), opts).unwrap();
    let rel = (e_ks.metrics.l2_avg - e_off.metrics.l2_avg).abs() / e_off.metrics.l2_avg;
    let (mut t_off, mut t_ks) = (Vec::new(), Vec::new());
    for s in val.iter().cycle().take(100) {
        for (cfg, out) in [(&off, &mut t_off), (&ks, &mut t_ks)] {
            let t = match decode_diffusion(&fp_on.model, &fp_on.codec, &s.scene, &s.context, cfg) {
                Ok(d) => d.trace.wall_clock,
                Err(maskplan::decoder::DecodeError::Malformed { trace, .. }) => trace.wall_clock,
                Err(e) => panic!("{e}"),
            };
            out.push(t);
        }
    }
    let (mo, mk) = (median(&t_off), median(&t_ks));
    suite.record(
        "C8 prompt cache",
        identical && rel <= 0.05 && mk < mo,
        format!(
            "K = 1 bitwise identical: {identical}; K = S = {steps}: l2_avg {:.3} vs {:.3} ({:.1}% apart, <= 5%), median {:.2} ms vs {:.2} ms over 100 trials",
            e_ks.metrics.l2_avg,
            e_off.metrics.l2_avg,
            100.0 * rel,
            mk * 1e3,
            mo * 1e3
        ),
    );
}

fn parking(suite: &mut Suite, model: &Trained) {
    let vocab = Vocabulary::standard();
    let split: Vec<_> = split_seeds(0, VAL_SAMPLES, Split::Val)
        .iter()
        .map(|&s| generate_parking(s, &vocab))
        .collect();
    let r = parking_success(&model.model, &model.codec, &split, &DecodeConfig::new(16, 0.5)).unwrap();
    suite.record(
        "C9 parking",
        r.success_rate >= 0.9 && r.median_latency < 1.0,
        format!(
            "success {:.1}% on {} held-out commands (>= 90%), median latency {:.2} ms (< 1 s)",
            100.0 * r.success_rate,
            r.samples,
            r.median_latency * 1e3
        ),
    );
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to enumerate here.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut suite = Suite { lines: Vec::new() };
    gradients(&mut suite);
    remask_oracle(&mut suite);
    codec_round_trip(&mut suite);

    let base = RunConfig {
        train_count: TRAIN_SAMPLES,
        val_count: VAL_SAMPLES,
        ..RunConfig::for_kind(DatasetKind::Driving)
    };
    let fp_on = train_or_load("driving-fp-on", &base);
    let val = driving_val();
    let opts = EvalOptions::default();
    learning_sanity(&mut suite, &fp_on, &val, &opts);
    call_count_law(&mut suite, &fp_on, &val);
    threshold_trend(&mut suite, &fp_on, &val, &opts);
    cache(&mut suite, &fp_on, &val, &opts);

    let fp_off = train_or_load(
        "driving-fp-off",
        &RunConfig {
            fixed_pattern: false,
            ..base.clone()
        },
    );
    demasking_invariants(&mut suite, &fp_on, &fp_off, &val);
    fixed_pattern_benefit(&mut suite, &fp_on, &fp_off, &val, &opts);

    let park = train_or_load(
        "parking",
        &RunConfig {
            train_count: TRAIN_SAMPLES,
            ..RunConfig::for_kind(DatasetKind::Parking)
        },
    );
    parking(&mut suite, &park);

    let failed = suite.lines.iter().filter(|(p, _)| !p).count();
    println!("acceptance: {} passed, {failed} failed", suite.lines.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
