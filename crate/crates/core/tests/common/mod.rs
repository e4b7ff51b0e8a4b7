//! Independent oracles shared by the integration tests and the acceptance
//! suite. Nothing here calls into the library paths it checks.
#![allow(dead_code)]

use maskplan::codec::{Codec, TemplateSpec, TokenId, TokenSequence, Trajectory, Waypoint};
use maskplan::model::{MaskPredictor, ModelConfig, ModelInput, SceneRaster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient agreement for one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// max over elements of |a − fd| / (|fd| + 1e-8)
    pub max_elem_rel: f64,
    /// Same ratio restricted to elements with |fd| > 1e-6; excludes
    /// entries whose true gradient is zero (the key bias under softmax).
    pub max_significant_rel: f64,
    /// ‖a − fd‖ / (‖fd‖ + 1e-8)
    pub tensor_rel: f64,
}

impl TensorCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.tensor_rel < tol && self.max_significant_rel < tol
    }
}

/// A random `d_model = 8`, one-block f64 model with a random scene, context
/// and a partially masked target for the `(1, (1,1))` template.
pub struct GradFixture {
    pub model: MaskPredictor<f64>,
    pub scene: SceneRaster,
    pub context: Vec<TokenId>,
    pub targets: TokenSequence,
    pub corrupted: TokenSequence,
    pub t: f64,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let spec = TemplateSpec::new(1, 1, 1).unwrap();
        let codec = Codec::new(spec);
        let cfg = ModelConfig::tiny(codec.vocab().len(), spec.length());
        let model = MaskPredictor::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        let mut scene = SceneRaster::zeros(cfg.channels, cfg.raster_height, cfg.raster_width);
        scene.data.iter_mut().for_each(|v| *v = rng.random::<f32>());
        let context = (0..cfg.context_len)
            .map(|_| TokenId(rng.random_range(1..codec.vocab().len() as u32)))
            .collect();
        let targets = codec
            .encode(&Trajectory::new(vec![Waypoint::new(
                rng.random_range(-9.0..9.0),
                rng.random_range(-9.0..9.0),
            )]))
            .unwrap();
        let mut corrupted = targets.clone();
        let free = codec.template().free_positions().to_vec();
        for (k, &p) in free.iter().enumerate() {
            if k % 2 == 0 || rng.random_bool(0.5) {
                corrupted.mask(p);
            }
        }
        Self {
            model,
            scene,
            context,
            targets,
            corrupted,
            t: rng.random_range(0.2..1.0),
        }
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            scene: &self.scene,
            context: &self.context,
            response: &self.corrupted,
        }
    }
}

/// Central differences with step `eps` against the analytic gradient, for
/// every parameter tensor.
pub fn finite_difference_check(fx: &GradFixture, eps: f64) -> Vec<TensorCheck> {
    let (_, analytic) = fx.model.loss_and_grad(&fx.input(), &fx.targets, fx.t).unwrap();
    let names: Vec<String> = analytic.named().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.clone()).collect();
    let mut probe = fx.model.clone();
    let mut out = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let mut fd = vec![0.0; len];
        for (i, slot) in fd.iter_mut().enumerate() {
            let orig = probe.weights().tensors()[ti].data[i];
            probe.weights_mut().tensors_mut()[ti].data[i] = orig + eps;
            let up = loss_of(&probe, fx);
            probe.weights_mut().tensors_mut()[ti].data[i] = orig - eps;
            let down = loss_of(&probe, fx);
            probe.weights_mut().tensors_mut()[ti].data[i] = orig;
            *slot = (up - down) / (2.0 * eps);
        }
        let a = &analytic[ti];
        let max_elem_rel = a
            .iter()
            .zip(&fd)
            .map(|(x, f)| (x - f).abs() / (f.abs() + 1e-8))
            .fold(0.0, f64::max);
        let max_significant_rel = a
            .iter()
            .zip(&fd)
            .filter(|(_, f)| f.abs() > 1e-6)
            .map(|(x, f)| (x - f).abs() / (f.abs() + 1e-8))
            .fold(0.0, f64::max);
        let diff: f64 = a.iter().zip(&fd).map(|(x, f)| (x - f).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = fd.iter().map(|f| f * f).sum::<f64>().sqrt();
        out.push(TensorCheck {
            name,
            max_elem_rel,
            max_significant_rel,
            tensor_rel: diff / (norm + 1e-8),
        });
    }
    out
}

fn loss_of(model: &MaskPredictor<f64>, fx: &GradFixture) -> f64 {
    let input = ModelInput {
        scene: &fx.scene,
        context: &fx.context,
        response: &fx.corrupted,
    };
    model.loss(&input, &fx.targets, fx.t).unwrap()
}

/// A random remask problem: a partially masked sequence and per-position
/// confidences, quantised so ties occur.
pub struct RemaskCase {
    pub seq: TokenSequence,
    pub ids: Vec<TokenId>,
    pub confidence: Vec<f64>,
    pub free: usize,
    pub steps: usize,
    pub tau: f64,
}

pub fn random_remask_case(rng: &mut ChaCha8Rng) -> RemaskCase {
    let mask = TokenId(0);
    let len = rng.random_range(1..=64);
    let mut ids = vec![TokenId(1); len];
    let mut any = false;
    for id in ids.iter_mut() {
        if rng.random_bool(0.6) {
            *id = mask;
            any = true;
        }
    }
    if !any {
        ids[rng.random_range(0..len)] = mask;
    }
    let levels = [4.0, 10.0, 1000.0][rng.random_range(0..3)];
    let confidence = (0..len).map(|_| (rng.random::<f64>() * levels).round() / levels).collect();
    let masked = ids.iter().filter(|&&i| i == mask).count();
    RemaskCase {
        seq: TokenSequence::from_ids(ids, mask),
        ids: (0..len).map(|i| TokenId(2 + i as u32 % 13)).collect(),
        confidence,
        free: rng.random_range(masked..=len),
        steps: rng.random_range(1..=len),
        tau: [0.0, 1.0, rng.random::<f64>()][rng.random_range(0..3)],
    }
}

/// Sort every masked position by (confidence desc, position asc), then keep
/// `max(ceil(free / steps), #{conf > tau})` of them.
pub fn reference_remask(case: &RemaskCase) -> (Vec<TokenId>, Vec<usize>) {
    let mask = case.seq.mask_id();
    let mut masked: Vec<usize> = (0..case.seq.len()).filter(|&p| case.seq.ids()[p] == mask).collect();
    masked.sort_by(|&a, &b| {
        case.confidence[b]
            .partial_cmp(&case.confidence[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let floor = (case.free + case.steps - 1) / case.steps;
    let above = masked.iter().filter(|&&p| case.confidence[p] > case.tau).count();
    let n = floor.max(above).max(1).min(masked.len());
    let chosen = masked[..n].to_vec();
    let mut out = case.seq.ids().to_vec();
    for &p in &chosen {
        out[p] = case.ids[p];
    }
    (out, chosen)
}

/// Every demasking invariant violated by one diffusion trace.
pub fn demasking_violations(
    trace: &maskplan::decoder::DecodeTrace,
    codec: &Codec,
    steps: usize,
) -> Vec<String> {
    let tpl = codec.template();
    let free: Vec<usize> = tpl.free_positions().to_vec();
    let mut bad = Vec::new();
    let mut still_masked: std::collections::BTreeSet<usize> = free.iter().copied().collect();
    for s in &trace.steps {
        if s.unmasked.is_empty() {
            bad.push(format!("step {} commits nothing", s.step));
        }
        for &p in &s.unmasked {
            if !still_masked.remove(&p) {
                bad.push(format!("step {} commits {p}, which was not masked", s.step));
            }
        }
        if let (Some(kept), Some(min)) = (s.kept_max, s.confidences.iter().copied().reduce(f64::min)) {
            if min < kept {
                bad.push(format!("step {}: committed min {min} < kept max {kept}", s.step));
            }
        }
        if s.kept_max.is_some() != !still_masked.is_empty() {
            bad.push(format!("step {}: kept_max disagrees with the masked set", s.step));
        }
    }
    if !still_masked.is_empty() {
        bad.push(format!("{} positions never committed", still_masked.len()));
    }
    if trace.steps.len() > steps.min(free.len()) {
        bad.push(format!("{} steps exceeds min(S={steps}, free={})", trace.steps.len(), free.len()));
    }
    for &(p, id) in tpl.frozen_positions() {
        if trace.sequence.ids()[p] != id {
            bad.push(format!("frozen position {p} changed"));
        }
    }
    for s in &trace.steps {
        for (&p, &id) in s.unmasked.iter().zip(&s.ids) {
            if trace.sequence.ids()[p] != id {
                bad.push(format!("position {p} changed after commit"));
            }
        }
    }
    bad
}

/// Horizon L2 recomputed from scratch: the waypoint at `t = (k+1) dt`
/// closest to `h`.
pub fn reference_l2(pred: &Trajectory, truth: &Trajectory, h: f64) -> f64 {
    let k = (0..truth.waypoints.len())
        .min_by(|&a, &b| {
            let da = ((a + 1) as f64 * truth.dt - h).abs();
            let db = ((b + 1) as f64 * truth.dt - h).abs();
            da.partial_cmp(&db).unwrap().then(a.cmp(&b))
        })
        .unwrap();
    let (p, q) = (pred.waypoints[k], truth.waypoints[k]);
    ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt()
}

pub fn reference_failure(pred: &Trajectory, truth: &Trajectory) -> bool {
    truth.waypoints.iter().enumerate().any(|(k, q)| {
        let p = pred.waypoints[k];
        (k + 1) as f64 * truth.dt <= 1.0 + 1e-9 && ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt() > 10.0
    })
}

/// A trajectory whose coordinates are exact multiples of `10^-frac` inside
/// the template range.
pub fn random_trajectory(rng: &mut ChaCha8Rng, spec: TemplateSpec) -> Trajectory {
    let scale = 10f64.powi(spec.frac_digits as i32);
    let max = (10f64.powi(spec.int_digits as i32) * scale) as i64 - 1;
    let mut coord = || rng.random_range(-max..=max) as f64 / scale;
    Trajectory::new((0..spec.waypoints).map(|_| Waypoint::new(coord(), coord())).collect())
}
