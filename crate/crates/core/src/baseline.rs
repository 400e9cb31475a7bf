//! Constant-velocity Kalman filter in the relative frame.

use nalgebra::{Matrix2, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ogm::{FlatClass, GridSpec};
use crate::seq2seq::Observation;
use crate::train::LABEL_STRIDE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    pub dt: f64,
    /// Process acceleration noise, m/s².
    pub sigma_a: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_vx: f64,
    pub sigma_vy: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            sigma_a: 2.0,
            sigma_x: 0.5,
            sigma_y: 0.2,
            sigma_vx: 0.5,
            sigma_vy: 0.5,
        }
    }
}

impl KalmanConfig {
    pub fn validate(&self) -> Result<()> {
        let s = [
            self.sigma_a,
            self.sigma_x,
            self.sigma_y,
            self.sigma_vx,
            self.sigma_vy,
        ];
        if !(self.dt > 0.0) || s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!(
                "kalman: dt must be positive and noise non-negative, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// State `(x, y, vx, vy)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: Vector4<f64>,
    pub cov: Matrix4<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvModel {
    pub dt: f64,
    pub f: Matrix4<f64>,
    pub h: Matrix4<f64>,
    pub q: Matrix4<f64>,
    pub r: Matrix4<f64>,
}

impl CvModel {
    pub fn new(cfg: &KalmanConfig) -> Self {
        let dt = cfg.dt;
        let mut f = Matrix4::identity();
        f[(0, 2)] = dt;
        f[(1, 3)] = dt;
        let block = Matrix2::new(
            dt.powi(4) / 4.0,
            dt.powi(3) / 2.0,
            dt.powi(3) / 2.0,
            dt * dt,
        ) * cfg.sigma_a.powi(2);
        let mut q = Matrix4::zeros();
        for (axis, vel) in [(0, 2), (1, 3)] {
            q[(axis, axis)] = block[(0, 0)];
            q[(axis, vel)] = block[(0, 1)];
            q[(vel, axis)] = block[(1, 0)];
            q[(vel, vel)] = block[(1, 1)];
        }
        let r = Matrix4::from_diagonal(&Vector4::new(
            cfg.sigma_x.powi(2),
            cfg.sigma_y.powi(2),
            cfg.sigma_vx.powi(2),
            cfg.sigma_vy.powi(2),
        ));
        Self {
            dt,
            f,
            h: Matrix4::identity(),
            q,
            r,
        }
    }
}

pub fn measurement(o: &Observation) -> Vector4<f64> {
    Vector4::new(o.x, o.y, o.vx, o.vy)
}

fn symmetrize(p: Matrix4<f64>) -> Matrix4<f64> {
    (p + p.transpose()) * 0.5
}

pub fn kf_predict(state: &KalmanState, model: &CvModel) -> KalmanState {
    KalmanState {
        mean: model.f * state.mean,
        cov: symmetrize(model.f * state.cov * model.f.transpose() + model.q),
    }
}

/// Gain/innovation correction with the Joseph-form covariance update.
pub fn kf_update(state: &KalmanState, model: &CvModel, z: &Vector4<f64>) -> Result<KalmanState> {
    let h = model.h;
    let s = h * state.cov * h.transpose() + model.r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Numerical(format!("innovation covariance is singular: {s}")))?;
    let k = state.cov * h.transpose() * s_inv;
    let mean = state.mean + k * (z - h * state.mean);
    let a = Matrix4::identity() - k * h;
    let cov = a * state.cov * a.transpose() + k * model.r * k.transpose();
    if !mean.iter().chain(cov.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite filter state".into()));
    }
    Ok(KalmanState {
        mean,
        cov: symmetrize(cov),
    })
}

/// Filters `obs`, initialised from the first measurement with covariance R.
pub fn kf_filter(obs: &[Observation], model: &CvModel) -> Result<KalmanState> {
    let (first, rest) = obs
        .split_first()
        .ok_or_else(|| Error::InvalidInput("no observations to filter".into()))?;
    let mut st = KalmanState {
        mean: measurement(first),
        cov: model.r,
    };
    for o in rest {
        st = kf_update(&kf_predict(&st, model), model, &measurement(o))?;
    }
    Ok(st)
}

/// Predicted `(x, y)` every `LABEL_STRIDE` frames for `horizon` outputs.
pub fn kf_forecast_positions(
    obs: &[Observation],
    model: &CvModel,
    horizon: usize,
) -> Result<Vec<(f64, f64)>> {
    let mut st = kf_filter(obs, model)?;
    let mut out = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        for _ in 0..LABEL_STRIDE {
            st = kf_predict(&st, model);
        }
        out.push((st.mean[0], st.mean[1]));
    }
    Ok(out)
}

/// Single grid-class forecast at 0.2 s spacing.
pub fn kf_forecast(
    obs: &[Observation],
    model: &CvModel,
    horizon: usize,
    grid: &GridSpec,
) -> Result<Vec<FlatClass>> {
    kf_forecast_positions(obs, model, horizon)?
        .into_iter()
        .map(|(x, y)| grid.quantize_class(x, y))
        .collect()
}
