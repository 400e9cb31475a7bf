//! LSTM encoder-decoder over occupancy-grid classes.
//!
//! The encoder runs each normalized observation through a stack of ReLU dense
//! layers and then a stack of LSTMs. The decoder is initialized from the
//! encoder's final LSTM states, consumes one embedded grid class per step and
//! emits a distribution over all grid classes. Beam search over that decoder
//! produces the K most probable future cell sequences.

mod beam;
mod checkpoint;
mod model;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Dense, Lstm};
use crate::ogm::{FlatClass, GridDims};

pub use beam::{beam_search, greedy_search, Hypothesis, StepScorer};
pub use checkpoint::{load_checkpoint, save_checkpoint, FORMAT_VERSION};
pub use model::{
    beam_search_decode, decode_step, encode, encode_batch, greedy_decode, predict_scene,
    sequence_nll, teacher_forced_log_probs, Decoder, DecoderState, EncoderSummary, ProbabilityMap,
    TrajectoryPrediction,
};

/// Number of features per observation.
pub const OBS_FEATURES: usize = 6;

/// One 100 ms sensor frame for one surrounding vehicle, in the ego frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Observation {
    /// Ego speed, m/s.
    pub v: f64,
    /// Ego yaw rate, rad/s.
    pub yaw_rate: f64,
    /// Relative longitudinal position, m.
    pub x: f64,
    /// Relative lateral position, m.
    pub y: f64,
    /// Relative longitudinal velocity, m/s.
    pub vx: f64,
    /// Relative lateral velocity, m/s.
    pub vy: f64,
}

impl Observation {
    pub fn to_array(&self) -> [f64; OBS_FEATURES] {
        [self.v, self.yaw_rate, self.x, self.y, self.vx, self.vy]
    }

    pub fn from_array(a: [f64; OBS_FEATURES]) -> Self {
        Self {
            v: a[0],
            yaw_rate: a[1],
            x: a[2],
            y: a[3],
            vx: a[4],
            vy: a[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Decoder input: the start token or a previously emitted class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Start,
    Class(FlatClass),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Dense layers before the encoder LSTMs and after the decoder LSTMs.
    pub fc_depth: usize,
    /// LSTM cell width; also the width of every hidden dense layer.
    pub cell_dim: usize,
    pub lstm_stack_depth: usize,
    pub q_w: usize,
    pub q_l: usize,
    pub embed_dim_per_axis: usize,
    /// Observation window length M (100 ms frames).
    pub obs_len: usize,
    /// Decoder steps Δ (200 ms each).
    pub horizon: usize,
    /// Beam width K.
    pub beam_width: usize,
    /// Start the decoder from zero hidden outputs instead of the encoder's.
    pub zero_hidden_init: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: OBS_FEATURES,
            fc_depth: 3,
            cell_dim: 256,
            lstm_stack_depth: 2,
            q_w: 36,
            q_l: 21,
            embed_dim_per_axis: 128,
            obs_len: 30,
            horizon: 10,
            beam_width: 10,
            zero_hidden_init: false,
        }
    }
}

impl ModelConfig {
    /// Small model on the default grid, sized for tests.
    pub fn tiny(cell_dim: usize, obs_len: usize, horizon: usize) -> Self {
        Self {
            cell_dim,
            embed_dim_per_axis: cell_dim / 2,
            obs_len,
            horizon,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> GridDims {
        GridDims::new(self.q_w, self.q_l)
    }

    pub fn num_classes(&self) -> usize {
        self.grid().num_classes()
    }

    pub fn embed_cols_w(&self) -> usize {
        self.q_w + 1
    }

    pub fn embed_cols_l(&self) -> usize {
        self.q_l + 1
    }

    pub fn decoder_input_dim(&self) -> usize {
        2 * self.embed_dim_per_axis
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("model: {msg}")));
        if self.input_dim != OBS_FEATURES {
            return bad("input_dim must be 6");
        }
        if self.fc_depth == 0 || self.lstm_stack_depth == 0 {
            return bad("fc_depth and lstm_stack_depth must be at least 1");
        }
        if self.cell_dim == 0 || self.q_w == 0 || self.q_l == 0 {
            return bad("dimensions must be positive");
        }
        if 2 * self.embed_dim_per_axis != self.cell_dim {
            return bad("2 * embed_dim_per_axis must equal cell_dim");
        }
        if self.obs_len == 0 || self.horizon == 0 || self.beam_width == 0 {
            return bad("obs_len, horizon and beam_width must be at least 1");
        }
        Ok(())
    }
}

/// Per-feature standardization fitted on the training inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; OBS_FEATURES],
    pub std: [f64; OBS_FEATURES],
}

impl Default for Normalizer {
    fn default() -> Self {
        Self {
            mean: [0.0; OBS_FEATURES],
            std: [1.0; OBS_FEATURES],
        }
    }
}

impl Normalizer {
    pub fn fit<'a>(observations: impl IntoIterator<Item = &'a Observation>) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; OBS_FEATURES];
        let mut sum_sq = [0.0; OBS_FEATURES];
        for o in observations {
            for (k, v) in o.to_array().into_iter().enumerate() {
                sum[k] += v;
                sum_sq[k] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for k in 0..OBS_FEATURES {
            let mean = sum[k] / n as f64;
            let var = (sum_sq[k] / n as f64 - mean * mean).max(0.0);
            out.mean[k] = mean;
            // Constant features pass through unscaled.
            out.std[k] = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, o: &Observation) -> [f64; OBS_FEATURES] {
        let mut a = o.to_array();
        for k in 0..OBS_FEATURES {
            a[k] = (a[k] - self.mean[k]) / self.std[k];
        }
        a
    }
}

/// All learned weights of the encoder-decoder plus the input normalizer.
///
/// The same type doubles as the gradient accumulator and as optimizer moment
/// storage; [`ModelParams::tensors`] fixes the traversal order everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub enc_fc: Vec<Dense>,
    pub enc_lstm: Vec<Lstm>,
    pub dec_lstm: Vec<Lstm>,
    pub dec_fc: Vec<Dense>,
    /// `embed_dim_per_axis x (q_w + 1)`; the last column is out-of-map.
    pub embed_w: Array2<f64>,
    /// `embed_dim_per_axis x (q_l + 1)`; the last column is out-of-map.
    pub embed_l: Array2<f64>,
    pub normalizer: Normalizer,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config.cell_dim;
        let mut enc_fc = vec![Dense::zeros(config.input_dim, c)];
        enc_fc.extend((1..config.fc_depth).map(|_| Dense::zeros(c, c)));
        let enc_lstm = (0..config.lstm_stack_depth)
            .map(|_| Lstm::zeros(c, c))
            .collect();
        let dec_lstm = (0..config.lstm_stack_depth)
            .map(|i| {
                Lstm::zeros(
                    if i == 0 {
                        config.decoder_input_dim()
                    } else {
                        c
                    },
                    c,
                )
            })
            .collect();
        let mut dec_fc: Vec<Dense> = (1..config.fc_depth).map(|_| Dense::zeros(c, c)).collect();
        dec_fc.push(Dense::zeros(c, config.num_classes()));
        Self {
            config: config.clone(),
            enc_fc,
            enc_lstm,
            dec_lstm,
            dec_fc,
            embed_w: Array2::zeros((config.embed_dim_per_axis, config.embed_cols_w())),
            embed_l: Array2::zeros((config.embed_dim_per_axis, config.embed_cols_l())),
            normalizer: Normalizer::default(),
        }
    }

    /// Glorot-uniform matrices; zero biases except LSTM forget biases of 1.
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let c = config.cell_dim;
        let mut p = Self::zeros(config);
        p.enc_fc = vec![Dense::glorot(config.input_dim, c, rng)];
        p.enc_fc
            .extend((1..config.fc_depth).map(|_| Dense::glorot(c, c, rng)));
        p.enc_lstm = (0..config.lstm_stack_depth)
            .map(|_| Lstm::glorot(c, c, rng))
            .collect();
        p.dec_lstm = (0..config.lstm_stack_depth)
            .map(|i| {
                Lstm::glorot(
                    if i == 0 {
                        config.decoder_input_dim()
                    } else {
                        c
                    },
                    c,
                    rng,
                )
            })
            .collect();
        p.dec_fc = (1..config.fc_depth)
            .map(|_| Dense::glorot(c, c, rng))
            .collect();
        p.dec_fc.push(Dense::glorot(c, config.num_classes(), rng));
        let e = config.embed_dim_per_axis;
        for m in [&mut p.embed_w, &mut p.embed_l] {
            let bound = (6.0 / (e + m.ncols()) as f64).sqrt();
            m.mapv_inplace(|_| rng.gen_range(-bound..bound));
        }
        p
    }

    /// Same architecture, all weights zero, normalizer kept.
    pub fn zeros_like(&self) -> Self {
        let mut z = Self::zeros(&self.config);
        z.normalizer = self.normalizer;
        z
    }

    /// Names and shapes of the trainable tensors, in traversal order.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, d) in self.enc_fc.iter().enumerate() {
            out.push((format!("enc_fc.{i}.weight"), d.weight.shape().to_vec()));
            out.push((format!("enc_fc.{i}.bias"), d.bias.shape().to_vec()));
        }
        for (prefix, stack) in [("enc_lstm", &self.enc_lstm), ("dec_lstm", &self.dec_lstm)] {
            for (i, l) in stack.iter().enumerate() {
                out.push((format!("{prefix}.{i}.w_u"), l.w_u.shape().to_vec()));
                out.push((format!("{prefix}.{i}.w_h"), l.w_h.shape().to_vec()));
                out.push((format!("{prefix}.{i}.b"), l.b.shape().to_vec()));
            }
        }
        for (i, d) in self.dec_fc.iter().enumerate() {
            out.push((format!("dec_fc.{i}.weight"), d.weight.shape().to_vec()));
            out.push((format!("dec_fc.{i}.bias"), d.bias.shape().to_vec()));
        }
        out.push(("embed_w".into(), self.embed_w.shape().to_vec()));
        out.push(("embed_l".into(), self.embed_l.shape().to_vec()));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for d in &self.enc_fc {
            out.extend(d.tensors());
        }
        for l in self.enc_lstm.iter().chain(&self.dec_lstm) {
            out.extend(l.tensors());
        }
        for d in &self.dec_fc {
            out.extend(d.tensors());
        }
        out.push(self.embed_w.as_slice().expect("standard layout"));
        out.push(self.embed_l.as_slice().expect("standard layout"));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for d in &mut self.enc_fc {
            out.extend(d.tensors_mut());
        }
        for l in self.enc_lstm.iter_mut().chain(self.dec_lstm.iter_mut()) {
            out.extend(l.tensors_mut());
        }
        for d in &mut self.dec_fc {
            out.extend(d.tensors_mut());
        }
        out.push(self.embed_w.as_slice_mut().expect("standard layout"));
        out.push(self.embed_l.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Euclidean norm over all trainable tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_shapes() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let p = ModelParams::zeros(&cfg);
        assert_eq!(cfg.num_classes(), 757);
        assert_eq!(p.embed_w.dim(), (128, 37));
        assert_eq!(p.embed_l.dim(), (128, 22));
        assert_eq!(p.enc_fc.len(), 3);
        assert_eq!(p.enc_fc[0].weight.dim(), (256, 6));
        assert_eq!(p.dec_fc[2].weight.dim(), (757, 256));
        assert_eq!(p.dec_lstm[0].input_dim(), 256);
        assert_eq!(p.tensor_layout().len(), p.tensors().len());
    }

    #[test]
    fn config_rejects_inconsistent_embedding() {
        let cfg = ModelConfig {
            embed_dim_per_axis: 100,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn init_sets_forget_bias() {
        let cfg = ModelConfig::tiny(8, 4, 3);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(p.enc_lstm[0]
            .bias(crate::nn::Gate::Forget)
            .iter()
            .all(|&b| b == 1.0));
        assert!(p.enc_lstm[0]
            .bias(crate::nn::Gate::Input)
            .iter()
            .all(|&b| b == 0.0));
        let bound = (6.0f64 / (8.0 + 6.0)).sqrt();
        assert!(p.enc_fc[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn flat_round_trip() {
        let cfg = ModelConfig::tiny(4, 2, 2);
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0; 3]).is_err());
    }

    #[test]
    fn normalizer_standardizes() {
        let obs: Vec<Observation> = (0..10)
            .map(|i| {
                Observation::from_array([20.0, 0.0, i as f64, -(i as f64), 1.0, 2.0 * i as f64])
            })
            .collect();
        let n = Normalizer::fit(&obs);
        assert_eq!(n.std[0], 1.0);
        let z: Vec<[f64; 6]> = obs.iter().map(|o| n.apply(o)).collect();
        let mean_x: f64 = z.iter().map(|a| a[2]).sum::<f64>() / 10.0;
        let var_x: f64 = z.iter().map(|a| a[2] * a[2]).sum::<f64>() / 10.0;
        assert!(mean_x.abs() < 1e-12);
        assert!((var_x - 1.0).abs() < 1e-12);
    }
}
