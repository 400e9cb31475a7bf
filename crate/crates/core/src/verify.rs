//! Fast self-check battery.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::{kf_forecast, CvModel, KalmanConfig};
use crate::nn::{gradient_check, gradient_check_floored, softmax};
use crate::ogm::{FlatClass, GridCell, GridSpec};
use crate::seq2seq::{
    beam_search_decode, decode_step, encode, sequence_nll, teacher_forced_log_probs, ModelConfig,
    ModelParams, Observation, ProbabilityMap, Token,
};

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Adds an error to one analytic gradient entry; the gradient check
    /// must then fail.
    pub perturb_analytic_gradient: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub detail: String,
    pub seconds: f64,
}

/// A random observation window with plausible feature ranges.
pub fn random_window(len: usize, rng: &mut impl Rng) -> Vec<Observation> {
    (0..len)
        .map(|_| Observation {
            v: rng.gen_range(20.0..35.0),
            yaw_rate: rng.gen_range(-0.05..0.05),
            x: rng.gen_range(0.0..180.0),
            y: rng.gen_range(-9.0..9.0),
            vx: rng.gen_range(-5.0..5.0),
            vy: rng.gen_range(-1.5..1.5),
        })
        .collect()
}

/// Randomly initialised model whose biases are moved off zero, so no ReLU
/// input sits exactly on its kink.
pub fn gradient_fixture(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ModelParams::init(config, &mut rng);
    p.normalizer.mean = [27.5, 0.0, 90.0, 0.0, 0.0, 0.0];
    p.normalizer.std = [4.0, 0.03, 50.0, 5.0, 3.0, 0.8];
    let layout = p.tensor_layout();
    for ((name, _), t) in layout.iter().zip(p.tensors_mut()) {
        if name.ends_with("bias") {
            t.iter_mut().for_each(|b| *b = rng.gen_range(0.05..0.3));
        }
    }
    p
}

/// Four-class model (3x1 grid) for exhaustive beam comparisons.
pub fn four_class_config(
    cell_dim: usize,
    obs_len: usize,
    horizon: usize,
    beam_width: usize,
) -> ModelConfig {
    ModelConfig {
        q_w: 3,
        q_l: 1,
        beam_width,
        ..ModelConfig::tiny(cell_dim, obs_len, horizon)
    }
}

/// All `classes^horizon` sequences with their teacher-forced log-probability,
/// best first (ties by lexicographic class order).
pub fn enumerate_sequences(
    params: &ModelParams,
    obs: &[Observation],
    horizon: usize,
) -> crate::Result<Vec<(Vec<FlatClass>, f64)>> {
    let n = params.config.num_classes();
    let total = n.pow(horizon as u32);
    let mut out = Vec::with_capacity(total);
    for code in 0..total {
        let mut c = code;
        let mut seq = vec![FlatClass(0); horizon];
        for s in (0..horizon).rev() {
            seq[s] = FlatClass::from_index(c % n);
            c /= n;
        }
        let lp: f64 = teacher_forced_log_probs(params, obs, &seq)?.iter().sum();
        out.push((seq, lp));
    }
    out.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite")
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(out)
}

fn timed(
    name: &'static str,
    f: impl FnOnce() -> crate::Result<(bool, f64, String)>,
) -> CheckResult {
    let t = Instant::now();
    let (passed, max_error, detail) =
        f().unwrap_or_else(|e| (false, f64::NAN, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        max_error,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn gradient(opts: &VerifyOptions) -> crate::Result<(bool, f64, String)> {
    let cfg = ModelConfig::tiny(8, 4, 3);
    let p = gradient_fixture(&cfg, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let obs = random_window(4, &mut rng);
    let labels: Vec<FlatClass> = (0..3).map(|_| FlatClass(rng.gen_range(1..=757))).collect();
    let (_, g) = sequence_nll(&p, &[&obs], &[&labels], true)?;
    let mut analytic = g.expect("gradient requested").to_flat();
    if opts.perturb_analytic_gradient {
        analytic[7] += 1e-3;
    }
    let mut probe = p.clone();
    let mut f = |flat: &[f64]| {
        probe.set_flat(flat).expect("same layout");
        sequence_nll(&probe, &[&obs], &[&labels], false)
            .expect("valid example")
            .0
    };
    let floored = gradient_check_floored(&p.to_flat(), &analytic, 1e-5, 1e-3, &mut f);
    let strict = gradient_check(&p.to_flat(), &analytic, 1e-5, &mut f);
    let passed = floored.max_rel_error < 1e-6 && floored.max_abs_error < 1e-8;
    Ok((
        passed,
        floored.max_rel_error,
        format!(
            "{} params; rel err (floor 1e-3) {:.2e}, abs err {:.2e}, rel err (floor 1e-12) {:.2e}",
            analytic.len(),
            floored.max_rel_error,
            floored.max_abs_error,
            strict.max_rel_error
        ),
    ))
}

fn beam_oracle() -> crate::Result<(bool, f64, String)> {
    let cfg = four_class_config(8, 4, 3, 64);
    let p = gradient_fixture(&cfg, 21);
    let obs = random_window(4, &mut ChaCha8Rng::seed_from_u64(22));
    let beam = beam_search_decode(&p, &encode(&p, &obs)?, 64, 3)?.hypotheses;
    let exhaustive = enumerate_sequences(&p, &obs, 3)?;
    let mut max_err: f64 = 0.0;
    let mut same = beam.len() == exhaustive.len();
    for (h, (seq, lp)) in beam.iter().zip(&exhaustive) {
        same &= &h.classes == seq;
        max_err = max_err.max((h.log_prob - lp).abs());
    }
    Ok((
        same && max_err < 1e-9,
        max_err,
        format!("{} sequences, order match {same}", beam.len()),
    ))
}

fn quantization() -> crate::Result<(bool, f64, String)> {
    let g = GridSpec::default();
    let dims = g.dims();
    let mut bad = 0;
    for w in 1..=dims.q_w {
        for l in 1..=dims.q_l {
            let cell = GridCell::InMap { w, l };
            let (x, y) = g.cell_center(cell)?;
            bad += usize::from(g.quantize(x, y)? != cell);
        }
    }
    for q in 1..=dims.num_classes() {
        bad += usize::from(dims.flatten(dims.unflatten(FlatClass(q))?) != FlatClass(q));
    }
    bad += usize::from(g.quantize(180.0, 0.0)? != GridCell::OutOfMap);
    bad += usize::from(g.quantize(0.0, g.y_min)? != GridCell::InMap { w: 1, l: 1 });
    Ok((
        bad == 0,
        bad as f64,
        format!(
            "{} cells, {} classes, {bad} mismatches",
            dims.q_w * dims.q_l,
            dims.num_classes()
        ),
    ))
}

fn softmax_contract() -> crate::Result<(bool, f64, String)> {
    let mut worst: f64 = 0.0;
    for z in [vec![1000.0, 0.0], vec![0.0; 757], vec![-745.0, 0.0, 709.0]] {
        let p = softmax(&z);
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
        if p.iter().any(|v| !(*v >= 0.0)) {
            return Ok((false, f64::NAN, "negative or NaN probability".into()));
        }
    }
    let cfg = ModelConfig::tiny(8, 4, 10);
    let p = gradient_fixture(&cfg, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut steps = 0;
    for _ in 0..20 {
        let mut state = encode(&p, &random_window(4, &mut rng))?.decoder_state(false);
        let mut tok = Token::Start;
        for _ in 0..10 {
            let (lp, next) = decode_step(&p, &state, &[tok])?;
            worst = worst.max(ProbabilityMap::from_log_probs(lp.row(0)).check(1.0)?);
            tok = Token::Class(FlatClass(rng.gen_range(1..=757)));
            state = next;
            steps += 1;
        }
    }
    Ok((
        worst <= 1e-9,
        worst,
        format!("{steps} decode steps plus stability cases"),
    ))
}

fn kalman() -> crate::Result<(bool, f64, String)> {
    let g = GridSpec::default();
    let m = CvModel::new(&KalmanConfig::default());
    let (x0, y0, vx, vy) = (12.3, -4.1, 7.0, 1.1);
    let obs: Vec<Observation> = (0..50)
        .map(|i| {
            let t = i as f64 * 0.1;
            Observation {
                v: 28.0,
                yaw_rate: 0.0,
                x: x0 + vx * t,
                y: y0 + vy * t,
                vx,
                vy,
            }
        })
        .collect();
    let fc = kf_forecast(&obs[..30], &m, 10, &g)?;
    let truth: Vec<FlatClass> = (1..=10)
        .map(|d| g.quantize_class(obs[29 + 2 * d].x, obs[29 + 2 * d].y))
        .collect::<crate::Result<_>>()?;
    let wrong = fc.iter().zip(&truth).filter(|(a, b)| a != b).count();
    Ok((
        wrong == 0,
        wrong as f64,
        format!("{wrong} of 10 forecast cells differ"),
    ))
}

pub fn run_battery(opts: &VerifyOptions) -> Vec<CheckResult> {
    vec![
        timed("gradient", || gradient(opts)),
        timed("beam-exhaustive", beam_oracle),
        timed("quantization", quantization),
        timed("softmax", softmax_contract),
        timed("kalman-cv", kalman),
    ]
}
