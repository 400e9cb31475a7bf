//! Top-Ω mean absolute error in grid units, and its tabular rendering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::{kf_forecast, CvModel};
use crate::error::{Error, Result};
use crate::ogm::{FlatClass, GridCell, GridDims, GridSpec};
use crate::seq2seq::{beam_search_decode, encode, ModelParams};
use crate::train::TrainingExample;

/// Seconds between decoder outputs.
pub const STEP_SECONDS: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Closest candidate chosen independently at each evaluated step.
    #[default]
    PerStep,
    /// One hypothesis per example, closest on average over the horizon.
    WholeTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub omegas: Vec<usize>,
    /// Evaluation horizons in seconds, multiples of 0.2.
    pub horizons: Vec<f64>,
    pub selection: Selection,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            omegas: vec![1, 3, 5],
            horizons: vec![0.4, 0.8, 1.2, 1.6, 2.0],
            selection: Selection::PerStep,
        }
    }
}

impl EvalConfig {
    /// Decoder step (1-based) for each horizon.
    pub fn steps(&self) -> Result<Vec<usize>> {
        self.horizons.iter().map(|&h| horizon_step(h)).collect()
    }

    pub fn validate(&self, beam_width: usize, max_step: usize) -> Result<()> {
        if self.omegas.is_empty() || self.horizons.is_empty() {
            return Err(Error::Config(
                "eval: omegas and horizons must be non-empty".into(),
            ));
        }
        if let Some(o) = self.omegas.iter().find(|&&o| o == 0 || o > beam_width) {
            return Err(Error::Config(format!(
                "eval: omega {o} must lie in 1..={beam_width} (the beam width)"
            )));
        }
        for (h, s) in self.horizons.iter().zip(self.steps()?) {
            if s > max_step {
                return Err(Error::Config(format!(
                    "eval: horizon {h} s is step {s}, beyond the decoder horizon of {max_step} steps"
                )));
            }
        }
        Ok(())
    }
}

pub fn horizon_step(seconds: f64) -> Result<usize> {
    let s = seconds / STEP_SECONDS;
    if !(s.is_finite() && s >= 0.5 && (s - s.round()).abs() < 1e-9) {
        return Err(Error::Config(format!(
            "horizon {seconds} s is not a positive multiple of {STEP_SECONDS} s"
        )));
    }
    Ok(s.round() as usize)
}

/// Distance between a predicted cell and an in-map truth `(w, l)` with its
/// per-axis parts. An out-of-map prediction is placed on the nearest
/// virtual cell just outside the grid and the gap lies along that axis.
pub fn cell_distance(
    dims: GridDims,
    predicted: GridCell,
    w_gt: usize,
    l_gt: usize,
) -> (f64, f64, f64) {
    match predicted {
        GridCell::InMap { w, l } => {
            let dx = w.abs_diff(w_gt) as f64;
            let dy = l.abs_diff(l_gt) as f64;
            (dx.hypot(dy), dx, dy)
        }
        GridCell::OutOfMap => {
            let gaps = [
                (w_gt, true),
                (dims.q_w + 1 - w_gt, true),
                (l_gt, false),
                (dims.q_l + 1 - l_gt, false),
            ];
            let (g, along_w) = gaps.into_iter().min_by_key(|(g, _)| *g).expect("four gaps");
            let g = g as f64;
            if along_w {
                (g, g, 0.0)
            } else {
                (g, 0.0, g)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaeCell {
    pub mae: f64,
    pub mae_x: f64,
    pub mae_y: f64,
    /// Examples with an in-map truth at this step.
    pub count: usize,
    /// Examples whose truth is out of map at this step.
    pub excluded: usize,
}

fn truth_cell(dims: GridDims, q: FlatClass) -> Result<Option<(usize, usize)>> {
    Ok(match dims.unflatten(q)? {
        GridCell::InMap { w, l } => Some((w, l)),
        GridCell::OutOfMap => None,
    })
}

/// Top-Ω MAE at 1-based decoder step `step`. `predictions[i]` holds the
/// ranked hypotheses (best first) for example `i`; ties in distance go to
/// the higher-ranked hypothesis.
pub fn top_omega_mae(
    dims: GridDims,
    predictions: &[Vec<Vec<FlatClass>>],
    truths: &[Vec<FlatClass>],
    omega: usize,
    step: usize,
    selection: Selection,
) -> Result<MaeCell> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if omega == 0 || step == 0 {
        return Err(Error::InvalidInput("omega and step are 1-based".into()));
    }
    let mut sums = (0.0, 0.0, 0.0);
    let (mut count, mut excluded) = (0, 0);
    for (hyps, truth) in predictions.iter().zip(truths) {
        if hyps.len() < omega {
            return Err(Error::InvalidInput(format!(
                "omega {omega} exceeds the {} hypotheses available",
                hyps.len()
            )));
        }
        if let Some(h) = hyps
            .iter()
            .find(|h| h.len() < step || h.len() != truth.len())
        {
            return Err(Error::Shape(format!(
                "hypothesis of length {} against truth of length {} at step {step}",
                h.len(),
                truth.len()
            )));
        }
        if truth_cell(dims, truth[step - 1])?.is_none() {
            excluded += 1;
            continue;
        }
        let at = |h: &Vec<FlatClass>, s: usize| -> Result<Option<(f64, f64, f64)>> {
            Ok(truth_cell(dims, truth[s])?
                .map(|(w, l)| cell_distance(dims, dims.unflatten(h[s]).expect("validated"), w, l)))
        };
        for h in &hyps[..omega] {
            for q in h {
                dims.unflatten(*q)?;
            }
        }
        let chosen = match selection {
            Selection::PerStep => {
                let mut best = at(&hyps[0], step - 1)?.expect("truth in map");
                for h in &hyps[1..omega] {
                    let d = at(h, step - 1)?.expect("truth in map");
                    if d.0 < best.0 {
                        best = d;
                    }
                }
                best
            }
            Selection::WholeTrajectory => {
                let mut best_idx = 0;
                let mut best_score = f64::INFINITY;
                for (k, h) in hyps[..omega].iter().enumerate() {
                    let mut s = 0.0;
                    for t in 0..truth.len() {
                        if let Some(d) = at(h, t)? {
                            s += d.0;
                        }
                    }
                    if s < best_score {
                        best_score = s;
                        best_idx = k;
                    }
                }
                at(&hyps[best_idx], step - 1)?.expect("truth in map")
            }
        };
        sums.0 += chosen.0;
        sums.1 += chosen.1;
        sums.2 += chosen.2;
        count += 1;
    }
    let n = count.max(1) as f64;
    Ok(MaeCell {
        mae: sums.0 / n,
        mae_x: sums.1 / n,
        mae_y: sums.2 / n,
        count,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub omega: usize,
    pub horizon: f64,
    pub step: usize,
    #[serde(flatten)]
    pub value: MaeCell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub selection: Selection,
    pub omegas: Vec<usize>,
    pub horizons: Vec<f64>,
    /// Number of evaluated examples.
    pub examples: usize,
    /// Omega-major, then horizon.
    pub cells: Vec<ReportCell>,
}

impl EvalReport {
    pub fn cell(&self, omega: usize, horizon: f64) -> Option<&MaeCell> {
        self.cells
            .iter()
            .find(|c| c.omega == omega && (c.horizon - horizon).abs() < 1e-9)
            .map(|c| &c.value)
    }
}

pub enum Predictor<'a> {
    Model {
        params: &'a ModelParams,
        beam_width: usize,
    },
    Kalman {
        model: CvModel,
        grid: GridSpec,
    },
}

impl Predictor<'_> {
    fn name(&self) -> String {
        match self {
            Predictor::Model { beam_width, .. } => format!("seq2seq (K={beam_width})"),
            Predictor::Kalman { .. } => "kalman-cv".into(),
        }
    }

    /// Ranked class sequences for one example.
    pub fn predict(
        &self,
        example: &TrainingExample,
        horizon: usize,
    ) -> Result<Vec<Vec<FlatClass>>> {
        match self {
            Predictor::Model { params, beam_width } => {
                let summary = encode(params, &example.inputs)?;
                Ok(beam_search_decode(params, &summary, *beam_width, horizon)?
                    .hypotheses
                    .into_iter()
                    .map(|h| h.classes)
                    .collect())
            }
            Predictor::Kalman { model, grid } => {
                Ok(vec![kf_forecast(&example.inputs, model, horizon, grid)?])
            }
        }
    }
}

/// Predicts every example and fills all (Ω, δ) cells. The Kalman baseline
/// yields a single hypothesis and is reported at Ω = 1 only.
pub fn evaluate(
    predictor: &Predictor,
    dims: GridDims,
    test: &[TrainingExample],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let horizon = test[0].labels.len();
    let steps = cfg.steps()?;
    let omegas: Vec<usize> = match predictor {
        Predictor::Kalman { .. } => vec![1],
        Predictor::Model { beam_width, .. } => {
            cfg.validate(*beam_width, horizon)?;
            cfg.omegas.clone()
        }
    };
    if let Some(s) = steps.iter().find(|&&s| s > horizon) {
        return Err(Error::Config(format!(
            "eval step {s} beyond label horizon {horizon}"
        )));
    }
    let predictions: Vec<Vec<Vec<FlatClass>>> = test
        .par_iter()
        .map(|ex| predictor.predict(ex, horizon))
        .collect::<Result<_>>()?;
    let truths: Vec<Vec<FlatClass>> = test.iter().map(|e| e.labels.clone()).collect();
    let mut cells = Vec::new();
    for &omega in &omegas {
        for (&h, &step) in cfg.horizons.iter().zip(&steps) {
            cells.push(ReportCell {
                omega,
                horizon: h,
                step,
                value: top_omega_mae(dims, &predictions, &truths, omega, step, cfg.selection)?,
            });
        }
    }
    Ok(EvalReport {
        method: predictor.name(),
        selection: cfg.selection,
        omegas,
        horizons: cfg.horizons.clone(),
        examples: test.len(),
        cells,
    })
}

/// Aligned text table plus a comma-separated `omega,delta,metric,value`
/// series whose `avg` rows are the mean over horizons.
pub fn render_report(report: &EvalReport) -> (String, String) {
    let metrics: [(&str, fn(&MaeCell) -> f64); 3] = [
        ("MAE", |c| c.mae),
        ("MAE_X", |c| c.mae_x),
        ("MAE_Y", |c| c.mae_y),
    ];
    let mut table = format!(
        "{} | selection {:?} | {} examples\n",
        report.method, report.selection, report.examples
    );
    let mut header = format!("{:>8}", "horizon");
    for o in &report.omegas {
        for (m, _) in &metrics {
            header.push_str(&format!(" {:>9}", format!("{m}@{o}")));
        }
    }
    table.push_str(&header);
    table.push('\n');
    let mut csv = String::from("omega,delta,metric,value\n");
    let mut sums = vec![[0.0; 3]; report.omegas.len()];
    for &h in &report.horizons {
        let mut row = format!("{:>7.1}s", h);
        for (oi, &o) in report.omegas.iter().enumerate() {
            let c = report.cell(o, h).copied().unwrap_or(MaeCell {
                mae: f64::NAN,
                mae_x: f64::NAN,
                mae_y: f64::NAN,
                count: 0,
                excluded: 0,
            });
            for (mi, (m, get)) in metrics.iter().enumerate() {
                let v = get(&c);
                sums[oi][mi] += v;
                row.push_str(&format!(" {:>9.2}", v));
                csv.push_str(&format!("{o},{h},{m},{v:?}\n"));
            }
        }
        table.push_str(&row);
        table.push('\n');
    }
    let n = report.horizons.len() as f64;
    let mut row = format!("{:>8}", "avg");
    for (oi, &o) in report.omegas.iter().enumerate() {
        for (mi, (m, _)) in metrics.iter().enumerate() {
            let v = sums[oi][mi] / n;
            row.push_str(&format!(" {:>9.2}", v));
            csv.push_str(&format!("{o},avg,{m},{v:?}\n"));
        }
    }
    table.push_str(&row);
    table.push('\n');
    let excluded: Vec<String> = report
        .horizons
        .iter()
        .map(|&h| {
            format!(
                "{h}s:{}",
                report.cell(report.omegas[0], h).map_or(0, |c| c.excluded)
            )
        })
        .collect();
    table.push_str(&format!(
        "out-of-map truths excluded: {}\n",
        excluded.join(" ")
    ));
    (table, csv)
}
