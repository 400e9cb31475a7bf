use ndarray::{s, Array2, ArrayView1};
use rayon::prelude::*;

use super::beam::{beam_search, greedy_search, Hypothesis, StepScorer};
use super::{ModelParams, Observation, Token, OBS_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{
    dense_backward, dense_forward, dense_forward_taped, log_softmax_rows, lstm_backward,
    lstm_forward, Activation, DenseTape, LstmState, LstmTape,
};
use crate::ogm::FlatClass;

/// Final encoder LSTM states, bottom layer first, one row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderSummary {
    pub layers: Vec<LstmState>,
}

impl EncoderSummary {
    /// Decoder start state: the encoder's cell memories, and either its hidden
    /// outputs or zeros.
    pub fn decoder_state(&self, zero_hidden: bool) -> DecoderState {
        DecoderState {
            layers: self
                .layers
                .iter()
                .map(|st| LstmState {
                    c: st.c.clone(),
                    h: if zero_hidden {
                        Array2::zeros(st.h.raw_dim())
                    } else {
                        st.h.clone()
                    },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
}

impl DecoderState {
    pub fn batch(&self) -> usize {
        self.layers[0].batch()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            layers: self.layers.iter().map(|l| l.select(rows)).collect(),
        }
    }
}

/// Occupancy distribution over all grid classes for one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(pub Vec<f64>);

impl ProbabilityMap {
    pub fn from_log_probs(row: ArrayView1<f64>) -> Self {
        Self(row.iter().map(|l| l.exp()).collect())
    }

    /// Checks non-negativity and unit sum within `tol`; returns the sum error.
    pub fn check(&self, tol: f64) -> Result<f64> {
        if let Some(p) = self.0.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(Error::Numerical(format!("invalid probability {p}")));
        }
        let err = (self.0.iter().sum::<f64>() - 1.0).abs();
        if err > tol {
            return Err(Error::Numerical(format!("probabilities sum to 1 {err:+e}")));
        }
        Ok(err)
    }
}

/// K hypotheses for one vehicle, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPrediction {
    pub hypotheses: Vec<Hypothesis>,
}

fn check_window(params: &ModelParams, obs: &[Observation]) -> Result<()> {
    if obs.len() != params.config.obs_len {
        return Err(Error::Contract(format!(
            "encoder expects {} observations, got {}",
            params.config.obs_len,
            obs.len()
        )));
    }
    if let Some(o) = obs.iter().find(|o| !o.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite observation {o:?}")));
    }
    Ok(())
}

fn normalized_inputs(params: &ModelParams, windows: &[&[Observation]], t: usize) -> Array2<f64> {
    let mut x = Array2::zeros((windows.len(), OBS_FEATURES));
    for (r, w) in windows.iter().enumerate() {
        let z = params.normalizer.apply(&w[t]);
        x.row_mut(r).assign(&ArrayView1::from(&z[..]));
    }
    x
}

struct EncoderStepTape {
    fc: Vec<DenseTape>,
    lstm: Vec<LstmTape>,
}

fn run_encoder(
    params: &ModelParams,
    windows: &[&[Observation]],
    keep_tapes: bool,
) -> Result<(EncoderSummary, Vec<EncoderStepTape>)> {
    for w in windows {
        check_window(params, w)?;
    }
    let cd = params.config.cell_dim;
    let mut states: Vec<LstmState> = params
        .enc_lstm
        .iter()
        .map(|_| LstmState::zeros(windows.len(), cd))
        .collect();
    let mut tapes = Vec::new();
    for t in 0..params.config.obs_len {
        let mut x = normalized_inputs(params, windows, t);
        let mut fc_tapes = Vec::new();
        for d in &params.enc_fc {
            if keep_tapes {
                let (y, tape) = dense_forward_taped(d, x, Activation::Relu)?;
                fc_tapes.push(tape);
                x = y;
            } else {
                x = dense_forward(d, x.view(), Activation::Relu)?;
            }
        }
        let mut lstm_tapes = Vec::new();
        for (p, st) in params.enc_lstm.iter().zip(states.iter_mut()) {
            let (next, tape) = lstm_forward(p, x.view(), st)?;
            x = next.h.clone();
            *st = next;
            if keep_tapes {
                lstm_tapes.push(tape);
            }
        }
        if keep_tapes {
            tapes.push(EncoderStepTape {
                fc: fc_tapes,
                lstm: lstm_tapes,
            });
        }
    }
    Ok((EncoderSummary { layers: states }, tapes))
}

/// Encodes one observation window (oldest first, exactly `obs_len` frames).
pub fn encode(params: &ModelParams, obs: &[Observation]) -> Result<EncoderSummary> {
    encode_batch(params, &[obs])
}

pub fn encode_batch(params: &ModelParams, windows: &[&[Observation]]) -> Result<EncoderSummary> {
    Ok(run_encoder(params, windows, false)?.0)
}

/// Decoder input rows: embedding columns concatenated, zeros for the start token.
fn embed_tokens(params: &ModelParams, tokens: &[Token]) -> Result<Array2<f64>> {
    let e = params.config.embed_dim_per_axis;
    let grid = params.config.grid();
    let mut x = Array2::zeros((tokens.len(), 2 * e));
    for (r, tok) in tokens.iter().enumerate() {
        if let Token::Class(q) = tok {
            let (cw, cl) = grid.embedding_columns(*q)?;
            x.slice_mut(s![r, 0..e]).assign(&params.embed_w.column(cw));
            x.slice_mut(s![r, e..]).assign(&params.embed_l.column(cl));
        }
    }
    Ok(x)
}

struct DecoderStepTape {
    tokens: Vec<Token>,
    lstm: Vec<LstmTape>,
    fc: Vec<DenseTape>,
}

fn decoder_forward(
    params: &ModelParams,
    state: &DecoderState,
    tokens: &[Token],
    keep_tapes: bool,
) -> Result<(Array2<f64>, DecoderState, Option<DecoderStepTape>)> {
    if tokens.len() != state.batch() {
        return Err(Error::Shape(format!(
            "{} tokens for a decoder batch of {}",
            tokens.len(),
            state.batch()
        )));
    }
    let mut x = embed_tokens(params, tokens)?;
    let mut next = Vec::with_capacity(params.dec_lstm.len());
    let mut lstm_tapes = Vec::new();
    for (p, st) in params.dec_lstm.iter().zip(&state.layers) {
        let (n, tape) = lstm_forward(p, x.view(), st)?;
        x = n.h.clone();
        next.push(n);
        if keep_tapes {
            lstm_tapes.push(tape);
        }
    }
    let last = params.dec_fc.len() - 1;
    let mut fc_tapes = Vec::new();
    for (i, d) in params.dec_fc.iter().enumerate() {
        let act = if i == last {
            Activation::Identity
        } else {
            Activation::Relu
        };
        if keep_tapes {
            let (y, tape) = dense_forward_taped(d, x, act)?;
            fc_tapes.push(tape);
            x = y;
        } else {
            x = dense_forward(d, x.view(), act)?;
        }
    }
    let log_probs = log_softmax_rows(x.view());
    let tape = keep_tapes.then(|| DecoderStepTape {
        tokens: tokens.to_vec(),
        lstm: lstm_tapes,
        fc: fc_tapes,
    });
    Ok((log_probs, DecoderState { layers: next }, tape))
}

/// One decoder step for a batch of hypotheses: consumes `tokens` and returns
/// the log-probability rows of the next class together with the new state.
pub fn decode_step(
    params: &ModelParams,
    state: &DecoderState,
    tokens: &[Token],
) -> Result<(Array2<f64>, DecoderState)> {
    let (lp, next, _) = decoder_forward(params, state, tokens, false)?;
    Ok((lp, next))
}

/// [`StepScorer`] over a trained encoder-decoder.
#[derive(Debug, Clone, Copy)]
pub struct Decoder<'a> {
    pub params: &'a ModelParams,
}

impl StepScorer for Decoder<'_> {
    type State = DecoderState;

    fn num_classes(&self) -> usize {
        self.params.config.num_classes()
    }

    fn step(&self, state: &DecoderState, tokens: &[Token]) -> Result<(Array2<f64>, DecoderState)> {
        decode_step(self.params, state, tokens)
    }

    fn select(&self, state: &DecoderState, rows: &[usize]) -> DecoderState {
        state.select(rows)
    }
}

fn single_row(summary: &EncoderSummary) -> Result<()> {
    if summary.layers.first().map(LstmState::batch) != Some(1) {
        return Err(Error::Contract(
            "decoding expects a single-sequence encoder summary".into(),
        ));
    }
    Ok(())
}

pub fn beam_search_decode(
    params: &ModelParams,
    summary: &EncoderSummary,
    beam_width: usize,
    horizon: usize,
) -> Result<TrajectoryPrediction> {
    single_row(summary)?;
    let init = summary.decoder_state(params.config.zero_hidden_init);
    let hypotheses = beam_search(&Decoder { params }, init, beam_width, horizon)?;
    Ok(TrajectoryPrediction { hypotheses })
}

pub fn greedy_decode(
    params: &ModelParams,
    summary: &EncoderSummary,
    horizon: usize,
) -> Result<Hypothesis> {
    single_row(summary)?;
    let init = summary.decoder_state(params.config.zero_hidden_init);
    greedy_search(&Decoder { params }, init, horizon)
}

/// Independent encode + beam search for every vehicle with shared
/// parameters. Output order matches input order.
pub fn predict_scene(
    params: &ModelParams,
    scenes: &[Vec<Observation>],
    beam_width: usize,
    horizon: usize,
) -> Result<Vec<TrajectoryPrediction>> {
    if scenes.is_empty() {
        return Err(Error::InvalidInput("scene has no vehicles".into()));
    }
    scenes
        .par_iter()
        .enumerate()
        .map(|(index, obs)| {
            encode(params, obs)
                .and_then(|summary| beam_search_decode(params, &summary, beam_width, horizon))
                .map_err(|e| Error::Vehicle {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Per-step log-probabilities of `labels` when the decoder is fed the
/// labels themselves (teacher forcing).
pub fn teacher_forced_log_probs(
    params: &ModelParams,
    obs: &[Observation],
    labels: &[FlatClass],
) -> Result<Vec<f64>> {
    let summary = encode(params, obs)?;
    let mut state = summary.decoder_state(params.config.zero_hidden_init);
    let mut token = Token::Start;
    let mut out = Vec::with_capacity(labels.len());
    for &q in labels {
        let (lp, next) = decode_step(params, &state, &[token])?;
        out.push(lp[[0, q.index()]]);
        state = next;
        token = Token::Class(q);
    }
    Ok(out)
}

/// Summed negative log-likelihood of `labels` under teacher forcing, and
/// optionally its gradient with respect to every trainable tensor.
pub fn sequence_nll(
    params: &ModelParams,
    inputs: &[&[Observation]],
    labels: &[&[FlatClass]],
    want_grad: bool,
) -> Result<(f64, Option<ModelParams>)> {
    let cfg = &params.config;
    if inputs.len() != labels.len() || inputs.is_empty() {
        return Err(Error::Shape(format!(
            "{} input windows for {} label sequences",
            inputs.len(),
            labels.len()
        )));
    }
    let q_count = cfg.num_classes();
    for l in labels {
        if l.len() != cfg.horizon {
            return Err(Error::Contract(format!(
                "expected {} labels per example, got {}",
                cfg.horizon,
                l.len()
            )));
        }
        if let Some(q) = l.iter().find(|q| q.0 == 0 || q.0 > q_count) {
            return Err(Error::InvalidInput(format!("label class {q} out of range")));
        }
    }
    let batch = inputs.len();

    let (summary, enc_tapes) = run_encoder(params, inputs, want_grad)?;
    let mut state = summary.decoder_state(cfg.zero_hidden_init);
    let mut loss = 0.0;
    let mut dec_tapes = Vec::new();
    let mut dlogits = Vec::new();
    for step in 0..cfg.horizon {
        let tokens: Vec<Token> = labels
            .iter()
            .map(|l| {
                if step == 0 {
                    Token::Start
                } else {
                    Token::Class(l[step - 1])
                }
            })
            .collect();
        let (lp, next, tape) = decoder_forward(params, &state, &tokens, want_grad)?;
        for (r, l) in labels.iter().enumerate() {
            loss -= lp[[r, l[step].index()]];
        }
        if want_grad {
            let mut d = lp.mapv(f64::exp);
            for (r, l) in labels.iter().enumerate() {
                d[[r, l[step].index()]] -= 1.0;
            }
            dlogits.push(d);
            dec_tapes.push(tape.expect("tapes requested"));
        }
        state = next;
    }
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    if !want_grad {
        return Ok((loss, None));
    }

    let mut grads = params.zeros_like();
    let cd = cfg.cell_dim;
    let e = cfg.embed_dim_per_axis;
    let grid = cfg.grid();
    let depth = params.dec_lstm.len();
    let mut gc: Vec<Array2<f64>> = (0..depth).map(|_| Array2::zeros((batch, cd))).collect();
    let mut gh = gc.clone();

    for (tape, d) in dec_tapes.into_iter().zip(dlogits).rev() {
        let mut g = d;
        for (i, ft) in tape.fc.into_iter().enumerate().rev() {
            g = dense_backward(&params.dec_fc[i], ft, g.view(), &mut grads.dec_fc[i]);
        }
        gh[depth - 1] += &g;
        for (l, lt) in tape.lstm.into_iter().enumerate().rev() {
            let back = lstm_backward(
                &params.dec_lstm[l],
                lt,
                gc[l].view(),
                gh[l].view(),
                &mut grads.dec_lstm[l],
            );
            gc[l] = back.grad_prev.c;
            gh[l] = back.grad_prev.h;
            if l > 0 {
                gh[l - 1] += &back.grad_input;
                continue;
            }
            for (r, tok) in tape.tokens.iter().enumerate() {
                if let Token::Class(q) = tok {
                    let (cw, cl) = grid.embedding_columns(*q)?;
                    let row = back.grad_input.row(r);
                    let mut col_w = grads.embed_w.column_mut(cw);
                    col_w += &row.slice(s![0..e]);
                    let mut col_l = grads.embed_l.column_mut(cl);
                    col_l += &row.slice(s![e..]);
                }
            }
        }
    }

    if cfg.zero_hidden_init {
        gh.iter_mut().for_each(|g| g.fill(0.0));
    }
    for tape in enc_tapes.into_iter().rev() {
        let mut g_in = None;
        for (l, lt) in tape.lstm.into_iter().enumerate().rev() {
            let back = lstm_backward(
                &params.enc_lstm[l],
                lt,
                gc[l].view(),
                gh[l].view(),
                &mut grads.enc_lstm[l],
            );
            gc[l] = back.grad_prev.c;
            gh[l] = back.grad_prev.h;
            if l > 0 {
                gh[l - 1] += &back.grad_input;
            } else {
                g_in = Some(back.grad_input);
            }
        }
        let mut g = g_in.expect("at least one encoder layer");
        for (i, ft) in tape.fc.into_iter().enumerate().rev() {
            g = dense_backward(&params.enc_fc[i], ft, g.view(), &mut grads.enc_fc[i]);
        }
    }
    Ok((loss, Some(grads)))
}
