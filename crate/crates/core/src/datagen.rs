//! Synthetic highway scenes observed from an ego vehicle.
//!
//! Road frame: `X` along a straight road, `Y` to the left, lane `k` centred
//! at `Y = k * lane_width` (lane 0 rightmost). A merging vehicle starts on
//! a ramp lane at `Y = -lane_width`.

use std::collections::BTreeSet;
use std::f64::consts::TAU;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seq2seq::{Observation, OBS_FEATURES};

pub const FRAME_DT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManeuverMix {
    pub lane_keep: f64,
    pub lane_change: f64,
    pub cut_in: f64,
    pub merge: f64,
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            lane_keep: 0.3,
            lane_change: 0.3,
            cut_in: 0.25,
            merge: 0.15,
        }
    }
}

impl ManeuverMix {
    fn weights(&self) -> [f64; 4] {
        [self.lane_keep, self.lane_change, self.cut_in, self.merge]
    }
}

/// Standard deviation of the additive Gaussian noise on each observed feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationNoise {
    pub v: f64,
    pub yaw_rate: f64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        Self {
            v: 0.1,
            yaw_rate: 0.002,
            x: 0.5,
            y: 0.2,
            vx: 0.5,
            vy: 0.5,
        }
    }
}

impl ObservationNoise {
    pub fn zero() -> Self {
        Self {
            v: 0.0,
            yaw_rate: 0.0,
            x: 0.0,
            y: 0.0,
            vx: 0.0,
            vy: 0.0,
        }
    }

    fn to_array(self) -> [f64; OBS_FEATURES] {
        [self.v, self.yaw_rate, self.x, self.y, self.vx, self.vy]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenarios: usize,
    pub vehicles_per_scenario: usize,
    pub frames_per_record: usize,
    pub lane_count_min: usize,
    pub lane_count_max: usize,
    pub lane_width: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Range of a surrounding vehicle's nominal speed relative to the ego.
    pub relative_speed: f64,
    pub maneuver_mix: ManeuverMix,
    pub lane_change_duration_min: f64,
    pub lane_change_duration_max: f64,
    /// Latest maneuver onset, seconds after the first frame.
    pub maneuver_start_max: f64,
    pub speed_ou_theta: f64,
    pub speed_ou_sigma: f64,
    /// Amplitude in meters of the ego's sinusoidal in-lane wander.
    pub ego_wander_amplitude: f64,
    pub ego_wander_period_min: f64,
    pub ego_wander_period_max: f64,
    pub noise: ObservationNoise,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenarios: 36,
            vehicles_per_scenario: 3,
            frames_per_record: 64,
            lane_count_min: 3,
            lane_count_max: 4,
            lane_width: 3.5,
            speed_min: 20.0,
            speed_max: 35.0,
            relative_speed: 4.0,
            maneuver_mix: ManeuverMix::default(),
            lane_change_duration_min: 4.0,
            lane_change_duration_max: 6.0,
            maneuver_start_max: 4.0,
            speed_ou_theta: 0.5,
            speed_ou_sigma: 0.5,
            ego_wander_amplitude: 0.5,
            ego_wander_period_min: 4.0,
            ego_wander_period_max: 15.0,
            noise: ObservationNoise::default(),
            test_fraction: 1.0 / 6.0,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario: {m}")));
        let w = self.maneuver_mix.weights();
        if w.iter().any(|p| !(*p >= 0.0)) {
            return bad(format!(
                "maneuver probabilities must be non-negative, got {w:?}"
            ));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("maneuver probabilities sum to {sum}, expected 1"));
        }
        if !(self.lane_change_duration_min > 0.0
            && self.lane_change_duration_min <= self.lane_change_duration_max)
        {
            return bad("lane change durations must be positive with min <= max".into());
        }
        if self.lane_count_min < 2 || self.lane_count_min > self.lane_count_max {
            return bad("lane counts must satisfy 2 <= min <= max".into());
        }
        if !(self.lane_width > 0.0 && self.speed_min > 0.0 && self.speed_min <= self.speed_max) {
            return bad("lane width and speed range must be positive".into());
        }
        if self.scenarios == 0 || self.vehicles_per_scenario == 0 || self.frames_per_record < 3 {
            return bad("need at least one scenario, one vehicle and three frames".into());
        }
        if !(self.ego_wander_period_min > 0.0
            && self.ego_wander_period_min <= self.ego_wander_period_max)
        {
            return bad("ego wander periods must be positive with min <= max".into());
        }
        if self.noise.to_array().iter().any(|s| !(*s >= 0.0)) {
            return bad("noise standard deviations must be non-negative".into());
        }
        let frac = |f: f64| (0.0..1.0).contains(&f);
        if !frac(self.test_fraction) || !frac(self.val_fraction) {
            return bad("split fractions must lie in [0, 1)".into());
        }
        if [
            self.relative_speed,
            self.maneuver_start_max,
            self.speed_ou_theta,
            self.speed_ou_sigma,
            self.ego_wander_amplitude,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return bad(
                "relative speed, onset, OU and wander parameters must be non-negative".into(),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    LaneKeep,
    LaneChange,
    CutIn,
    Merge,
}

/// One surrounding vehicle seen from the ego over a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub scenario_id: usize,
    pub vehicle_id: usize,
    pub maneuver: Maneuver,
    /// Observations at 0.1 s spacing, each `[v, yaw_rate, x, y, vx, vy]`.
    #[serde(with = "frame_arrays")]
    pub frames: Vec<Observation>,
    /// Noise-free road-frame position `[X, Y]` per frame.
    #[serde(default)]
    pub truth: Vec<[f64; 2]>,
}

mod frame_arrays {
    use super::{Observation, OBS_FEATURES};
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(frames: &[Observation], s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<[f64; OBS_FEATURES]> = frames.iter().map(Observation::to_array).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Observation>, D::Error> {
        let rows = Vec::<[f64; OBS_FEATURES]>::deserialize(d)?;
        Ok(rows.into_iter().map(Observation::from_array).collect())
    }
}

/// Minimum-jerk blend `10τ³ - 15τ⁴ + 6τ⁵`, clamped to `[0, 1]` outside.
pub fn quintic(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

/// Derivative of [`quintic`] with respect to `τ`.
pub fn quintic_rate(tau: f64) -> f64 {
    if !(0.0..=1.0).contains(&tau) {
        return 0.0;
    }
    30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
}

/// Lateral position moving from `from` to `to` over `[start, start + duration]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LateralProfile {
    pub from: f64,
    pub to: f64,
    pub start: f64,
    pub duration: f64,
}

impl LateralProfile {
    pub fn hold(y: f64) -> Self {
        Self {
            from: y,
            to: y,
            start: 0.0,
            duration: 1.0,
        }
    }

    pub fn position(&self, t: f64) -> f64 {
        self.from + (self.to - self.from) * quintic((t - self.start) / self.duration)
    }

    pub fn velocity(&self, t: f64) -> f64 {
        (self.to - self.from) * quintic_rate((t - self.start) / self.duration) / self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub records: usize,
    pub splits: SplitManifest,
    pub generator: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<TrajectoryRecord>,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<TrajectoryRecord> {
        let ids: BTreeSet<usize> = self.manifest.splits.ids(split).iter().copied().collect();
        self.records
            .iter()
            .filter(|r| ids.contains(&r.scenario_id))
            .cloned()
            .collect()
    }
}

/// Scenario-level split: a shuffled id list, `test_fraction` of it held out,
/// then `val_fraction` of the remainder for validation.
pub fn split_scenarios(
    n: usize,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> SplitManifest {
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), &mut rng);
    let n_test = (n as f64 * test_fraction).round() as usize;
    let rest = n - n_test;
    let n_val = (rest as f64 * val_fraction).round() as usize;
    let mut test = ids[..n_test].to_vec();
    let mut val = ids[n_test..n_test + n_val].to_vec();
    let mut train = ids[n_test + n_val..].to_vec();
    for v in [&mut train, &mut val, &mut test] {
        v.sort_unstable();
    }
    SplitManifest { train, val, test }
}

struct Ego {
    x: Vec<f64>,
    y: Vec<f64>,
    heading: Vec<f64>,
    speed: Vec<f64>,
}

/// Ornstein-Uhlenbeck speed around `nominal`, Euler-Maruyama at `FRAME_DT`.
fn ou_speed(nominal: f64, n: usize, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = Vec::with_capacity(n);
    let mut cur = nominal;
    for _ in 0..n {
        v.push(cur);
        let z: f64 = rng.sample(rand_distr::StandardNormal);
        cur += cfg.speed_ou_theta * (nominal - cur) * FRAME_DT
            + cfg.speed_ou_sigma * FRAME_DT.sqrt() * z;
        cur = cur.max(1.0);
    }
    v
}

fn integrate(x0: f64, speed: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(speed.len());
    let mut cur = x0;
    for &v in speed {
        x.push(cur);
        cur += v * FRAME_DT;
    }
    x
}

/// Time of sample `i` when the padded track starts one frame early.
fn time(i: usize) -> f64 {
    (i as f64 - 1.0) * FRAME_DT
}

fn simulate_ego(lane: usize, n: usize, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Ego {
    let nominal = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let speed_long = ou_speed(nominal, n, cfg, rng);
    let x = integrate(0.0, &speed_long);
    let period = rng.gen_range(cfg.ego_wander_period_min..=cfg.ego_wander_period_max);
    let phase = rng.gen_range(0.0..TAU);
    let a = cfg.ego_wander_amplitude;
    let omega = TAU / period;
    let centre = lane as f64 * cfg.lane_width;
    let y: Vec<f64> = (0..n)
        .map(|i| centre + a * (omega * time(i) + phase).sin())
        .collect();
    let lateral_rate: Vec<f64> = (0..n)
        .map(|i| a * omega * (omega * time(i) + phase).cos())
        .collect();
    let heading = lateral_rate
        .iter()
        .zip(&speed_long)
        .map(|(vy, vx)| vy.atan2(*vx))
        .collect();
    let speed = lateral_rate
        .iter()
        .zip(&speed_long)
        .map(|(vy, vx)| vx.hypot(*vy))
        .collect();
    Ego {
        x,
        y,
        heading,
        speed,
    }
}

fn sample_maneuver(mix: &ManeuverMix, rng: &mut ChaCha8Rng) -> Maneuver {
    let w = mix.weights();
    let mut u = rng.gen_range(0.0..1.0);
    for (k, p) in w.iter().enumerate() {
        if u < *p {
            return [
                Maneuver::LaneKeep,
                Maneuver::LaneChange,
                Maneuver::CutIn,
                Maneuver::Merge,
            ][k];
        }
        u -= p;
    }
    // Rounding slack: the last maneuver with non-zero weight.
    let k = w.iter().rposition(|p| *p > 0.0).unwrap_or(0);
    [
        Maneuver::LaneKeep,
        Maneuver::LaneChange,
        Maneuver::CutIn,
        Maneuver::Merge,
    ][k]
}

struct Plan {
    lateral: LateralProfile,
    x0: f64,
    dv: f64,
}

fn plan_vehicle(
    m: Maneuver,
    ego_lane: usize,
    lanes: usize,
    ego_x0: f64,
    cfg: &ScenarioConfig,
    rng: &mut ChaCha8Rng,
) -> Plan {
    let w = cfg.lane_width;
    let rel = cfg.relative_speed;
    let duration = rng.gen_range(cfg.lane_change_duration_min..=cfg.lane_change_duration_max);
    let start = rng.gen_range(0.0..=cfg.maneuver_start_max);
    let change = |from: usize, to: f64| LateralProfile {
        from: from as f64 * w,
        to,
        start,
        duration,
    };
    match m {
        Maneuver::LaneKeep => Plan {
            lateral: LateralProfile::hold(rng.gen_range(0..lanes) as f64 * w),
            x0: ego_x0 + rng.gen_range(5.0..170.0),
            dv: rng.gen_range(-rel..=rel),
        },
        Maneuver::LaneChange => {
            let from = rng.gen_range(0..lanes);
            let to = match from {
                0 => 1,
                f if f + 1 == lanes => f - 1,
                f if rng.gen_bool(0.5) => f + 1,
                f => f - 1,
            };
            Plan {
                lateral: change(from, to as f64 * w),
                x0: ego_x0 + rng.gen_range(5.0..170.0),
                dv: rng.gen_range(-rel..=rel),
            }
        }
        Maneuver::CutIn => {
            let from = match ego_lane {
                0 => 1,
                e if e + 1 == lanes => e - 1,
                e if rng.gen_bool(0.5) => e + 1,
                e => e - 1,
            };
            Plan {
                lateral: change(from, ego_lane as f64 * w),
                x0: ego_x0 + rng.gen_range(8.0..60.0),
                dv: rng.gen_range(-0.25 * rel..=0.75 * rel),
            }
        }
        Maneuver::Merge => Plan {
            lateral: LateralProfile {
                from: -w,
                to: 0.0,
                start,
                duration,
            },
            x0: ego_x0 + rng.gen_range(10.0..150.0),
            dv: rng.gen_range(-1.5 * rel..=0.0),
        },
    }
}

fn generate_scenario(id: usize, cfg: &ScenarioConfig) -> Vec<TrajectoryRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(id as u64);
    // Padded by one frame on each side for central differences.
    let n = cfg.frames_per_record + 2;
    let lanes = rng.gen_range(cfg.lane_count_min..=cfg.lane_count_max);
    let ego_lane = rng.gen_range(0..lanes);
    let ego = simulate_ego(ego_lane, n, cfg, &mut rng);
    let noise = cfg.noise.to_array();
    let ego_nominal = ego.speed[0];

    (0..cfg.vehicles_per_scenario)
        .map(|vid| {
            let maneuver = sample_maneuver(&cfg.maneuver_mix, &mut rng);
            let plan = plan_vehicle(maneuver, ego_lane, lanes, ego.x[1], cfg, &mut rng);
            let nominal = (ego_nominal + plan.dv).clamp(cfg.speed_min, cfg.speed_max);
            let speed = ou_speed(nominal, n, cfg, &mut rng);
            let gx = integrate(plan.x0 - speed[0] * FRAME_DT, &speed);
            let gy: Vec<f64> = (0..n).map(|i| plan.lateral.position(time(i))).collect();

            let rel: Vec<[f64; 2]> = (0..n)
                .map(|i| {
                    let (s, c) = ego.heading[i].sin_cos();
                    let dx = gx[i] - ego.x[i];
                    let dy = gy[i] - ego.y[i];
                    [c * dx + s * dy, -s * dx + c * dy]
                })
                .collect();
            let frames = (1..n - 1)
                .map(|i| {
                    let clean = [
                        ego.speed[i],
                        (ego.heading[i + 1] - ego.heading[i - 1]) / (2.0 * FRAME_DT),
                        rel[i][0],
                        rel[i][1],
                        (rel[i + 1][0] - rel[i - 1][0]) / (2.0 * FRAME_DT),
                        (rel[i + 1][1] - rel[i - 1][1]) / (2.0 * FRAME_DT),
                    ];
                    let mut o = [0.0; OBS_FEATURES];
                    for k in 0..OBS_FEATURES {
                        o[k] = clean[k]
                            + if noise[k] > 0.0 {
                                Normal::new(0.0, noise[k])
                                    .expect("validated std")
                                    .sample(&mut rng)
                            } else {
                                0.0
                            };
                    }
                    Observation::from_array(o)
                })
                .collect();
            TrajectoryRecord {
                scenario_id: id,
                vehicle_id: vid,
                maneuver,
                frames,
                truth: (1..n - 1).map(|i| [gx[i], gy[i]]).collect(),
            }
        })
        .collect()
}

/// All scenarios of `cfg`, in scenario then vehicle order, with the split.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records: Vec<TrajectoryRecord> = (0..cfg.scenarios)
        .into_par_iter()
        .map(|id| generate_scenario(id, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        records: records.len(),
        splits: split_scenarios(cfg.scenarios, cfg.test_fraction, cfg.val_fraction, cfg.seed),
        generator: cfg.clone(),
    };
    Ok(Dataset { records, manifest })
}

pub fn write_dataset(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if let Some(f) = rec.frames.iter().find(|f| !f.is_finite()) {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("non-finite frame {f:?}"),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Path of the manifest that accompanies a dataset file.
pub fn manifest_path(dataset: &Path) -> std::path::PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// Writes `<path>` and `<path>.manifest.json`.
pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    write_dataset(&dataset.records, path)?;
    write_manifest(&dataset.manifest, &manifest_path(path))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let records = read_dataset(path)?;
    let manifest = read_manifest(&manifest_path(path))?;
    if manifest.records != records.len() {
        return Err(Error::InvalidInput(format!(
            "{} lists {} records, dataset has {}",
            manifest_path(path).display(),
            manifest.records,
            records.len()
        )));
    }
    Ok(Dataset { records, manifest })
}
