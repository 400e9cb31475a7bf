use std::cmp::Ordering;

use ndarray::Array2;

use super::Token;
use crate::error::{Error, Result};
use crate::ogm::FlatClass;

/// An autoregressive next-class distribution over a batch of hypotheses.
pub trait StepScorer {
    type State;

    fn num_classes(&self) -> usize;

    /// Feeds one token per state row and returns `rows x num_classes`
    /// log-probabilities of the next class plus the advanced state.
    fn step(&self, state: &Self::State, tokens: &[Token]) -> Result<(Array2<f64>, Self::State)>;

    /// Rows `rows` of `state`, in that order.
    fn select(&self, state: &Self::State, rows: &[usize]) -> Self::State;
}

/// A decoded class sequence with its cumulative natural-log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub classes: Vec<FlatClass>,
    pub log_prob: f64,
    /// Log-probability the decoder assigned at each step along this path.
    pub step_log_probs: Vec<f64>,
}

struct Candidate {
    score: f64,
    class: usize,
    parent: usize,
}

/// Descending score, then lower class id, then lower parent index.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.class.cmp(&b.class))
        .then(a.parent.cmp(&b.parent))
}

fn check_rows(lp: &Array2<f64>, rows: usize, classes: usize) -> Result<()> {
    if lp.dim() != (rows, classes) {
        return Err(Error::Shape(format!(
            "scorer returned {:?}, expected ({rows}, {classes})",
            lp.dim()
        )));
    }
    if let Some(v) = lp.iter().find(|v| v.is_nan() || **v == f64::INFINITY) {
        return Err(Error::Numerical(format!(
            "decoder emitted log-probability {v}"
        )));
    }
    Ok(())
}

/// Keeps the `beam_width` most probable partial sequences at every step.
///
/// The single-row `init` state is expanded once from the start token; each
/// later step ranks all `rows x classes` extensions by cumulative
/// log-probability. Returns at most `beam_width` complete sequences of
/// length `horizon`, best first.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    init: S::State,
    beam_width: usize,
    horizon: usize,
) -> Result<Vec<Hypothesis>> {
    if beam_width == 0 || horizon == 0 {
        return Err(Error::InvalidInput(
            "beam width and horizon must be at least 1".into(),
        ));
    }
    let n_classes = scorer.num_classes();
    let mut beams = vec![Hypothesis {
        classes: Vec::with_capacity(horizon),
        log_prob: 0.0,
        step_log_probs: Vec::with_capacity(horizon),
    }];
    let mut tokens = vec![Token::Start];
    let mut state = init;

    for _ in 0..horizon {
        let (lp, next) = scorer.step(&state, &tokens)?;
        check_rows(&lp, beams.len(), n_classes)?;

        let mut cands: Vec<Candidate> = Vec::with_capacity(beams.len() * n_classes);
        for (parent, h) in beams.iter().enumerate() {
            for (class, &l) in lp.row(parent).iter().enumerate() {
                cands.push(Candidate {
                    score: h.log_prob + l,
                    class,
                    parent,
                });
            }
        }
        if cands.len() > beam_width {
            cands.select_nth_unstable_by(beam_width - 1, rank);
            cands.truncate(beam_width);
        }
        cands.sort_by(rank);

        let parents: Vec<usize> = cands.iter().map(|c| c.parent).collect();
        beams = cands
            .iter()
            .map(|c| {
                let from = &beams[c.parent];
                let mut classes = from.classes.clone();
                classes.push(FlatClass::from_index(c.class));
                let mut steps = from.step_log_probs.clone();
                steps.push(lp[[c.parent, c.class]]);
                Hypothesis {
                    classes,
                    log_prob: c.score,
                    step_log_probs: steps,
                }
            })
            .collect();
        tokens = beams
            .iter()
            .map(|h| Token::Class(*h.classes.last().unwrap()))
            .collect();
        state = scorer.select(&next, &parents);
    }
    Ok(beams)
}

/// Picks the most probable class at every step (lowest id on ties) and
/// feeds it back.
pub fn greedy_search<S: StepScorer>(
    scorer: &S,
    init: S::State,
    horizon: usize,
) -> Result<Hypothesis> {
    let n_classes = scorer.num_classes();
    let mut hyp = Hypothesis {
        classes: Vec::with_capacity(horizon),
        log_prob: 0.0,
        step_log_probs: Vec::with_capacity(horizon),
    };
    let mut state = init;
    let mut token = Token::Start;
    for _ in 0..horizon {
        let (lp, next) = scorer.step(&state, &[token])?;
        check_rows(&lp, 1, n_classes)?;
        let mut best = 0;
        for (k, &l) in lp.row(0).iter().enumerate() {
            if l > lp[[0, best]] {
                best = k;
            }
        }
        let l = lp[[0, best]];
        hyp.log_prob += l;
        hyp.step_log_probs.push(l);
        hyp.classes.push(FlatClass::from_index(best));
        token = Token::Class(FlatClass::from_index(best));
        state = next;
    }
    Ok(hyp)
}
