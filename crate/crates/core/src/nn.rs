//! Minimal f64 numerical core: dense layers, the LSTM cell with its analytic
//! backward pass, softmax, and a central-difference gradient checker.
//!
//! All layers work on row-major batches: one row per sequence. Matrix products
//! go through `ndarray`'s GEMM, whose summation order is fixed for a given
//! shape, so identical inputs give bit-identical outputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Overflow-free logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound))
}

fn check_cols(what: &str, m: &ArrayView2<f64>, expected: usize) -> Result<()> {
    if m.ncols() != expected {
        return Err(Error::Shape(format!(
            "{what}: expected {expected} columns, got {}",
            m.ncols()
        )));
    }
    Ok(())
}

/// Affine layer `y = W x + b`, weight stored `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Cached forward values for [`dense_backward`].
#[derive(Debug)]
pub struct DenseTape {
    input: Array2<f64>,
    output: Array2<f64>,
    activation: Activation,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: glorot(out_dim, in_dim, rng),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [
            self.weight.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.weight.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// `activation(x W^T + b)` for a batch `x` of shape `batch x in_dim`.
pub fn dense_forward(p: &Dense, x: ArrayView2<f64>, activation: Activation) -> Result<Array2<f64>> {
    check_cols("dense input", &x, p.in_dim())?;
    let mut out = Array2::zeros((x.nrows(), p.out_dim()));
    general_mat_mul(1.0, &x, &p.weight.t(), 0.0, &mut out);
    out += &p.bias;
    if activation == Activation::Relu {
        out.mapv_inplace(|v| v.max(0.0));
    }
    Ok(out)
}

pub fn dense_forward_taped(
    p: &Dense,
    x: Array2<f64>,
    activation: Activation,
) -> Result<(Array2<f64>, DenseTape)> {
    let out = dense_forward(p, x.view(), activation)?;
    let tape = DenseTape {
        input: x,
        output: out.clone(),
        activation,
    };
    Ok((out, tape))
}

/// Accumulates parameter gradients into `grads` and returns the gradient
/// with respect to the layer input.
pub fn dense_backward(
    p: &Dense,
    tape: DenseTape,
    grad_out: ArrayView2<f64>,
    grads: &mut Dense,
) -> Array2<f64> {
    let mut g = grad_out.to_owned();
    if tape.activation == Activation::Relu {
        Zip::from(&mut g).and(&tape.output).for_each(|g, &y| {
            if y <= 0.0 {
                *g = 0.0;
            }
        });
    }
    general_mat_mul(1.0, &g.t(), &tape.input, 1.0, &mut grads.weight);
    grads.bias += &g.sum_axis(Axis(0));
    g.dot(&p.weight)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    Candidate = 3,
}

/// LSTM cell parameters.
///
/// The four gate blocks are stacked row-wise in the order forget, input,
/// output, candidate: `w_u` holds `W_uf; W_ui; W_uo; W_uc` (each
/// `cell_dim x input_dim`), `w_h` the recurrent matrices, `b` the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub w_u: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

impl Lstm {
    pub fn zeros(input_dim: usize, cell_dim: usize) -> Self {
        Self {
            w_u: Array2::zeros((4 * cell_dim, input_dim)),
            w_h: Array2::zeros((4 * cell_dim, cell_dim)),
            b: Array1::zeros(4 * cell_dim),
        }
    }

    /// Glorot-uniform gate matrices, zero biases except a forget bias of 1.
    pub fn glorot(input_dim: usize, cell_dim: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_dim, cell_dim);
        for gate in 0..4 {
            let rows = gate * cell_dim..(gate + 1) * cell_dim;
            p.w_u
                .slice_mut(s![rows.clone(), ..])
                .assign(&glorot(cell_dim, input_dim, rng));
            p.w_h
                .slice_mut(s![rows, ..])
                .assign(&glorot(cell_dim, cell_dim, rng));
        }
        p.b.slice_mut(s![0..cell_dim]).fill(1.0);
        p
    }

    pub fn cell_dim(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.w_u.ncols()
    }

    fn rows(&self, gate: Gate) -> std::ops::Range<usize> {
        let c = self.cell_dim();
        gate as usize * c..(gate as usize + 1) * c
    }

    pub fn input_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        self.w_u.slice(s![self.rows(gate), ..])
    }

    pub fn recurrent_weights(&self, gate: Gate) -> ArrayView2<'_, f64> {
        self.w_h.slice(s![self.rows(gate), ..])
    }

    pub fn bias(&self, gate: Gate) -> ArrayView1<'_, f64> {
        self.b.slice(s![self.rows(gate)])
    }

    pub fn tensors(&self) -> [&[f64]; 3] {
        [
            self.w_u.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.b.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 3] {
        [
            self.w_u.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.b.as_slice_mut().expect("standard layout"),
        ]
    }
}

/// Cell memory `c` and output `h`, one row per sequence in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub c: Array2<f64>,
    pub h: Array2<f64>,
}

impl LstmState {
    pub fn zeros(batch: usize, cell_dim: usize) -> Self {
        Self {
            c: Array2::zeros((batch, cell_dim)),
            h: Array2::zeros((batch, cell_dim)),
        }
    }

    pub fn batch(&self) -> usize {
        self.c.nrows()
    }

    /// Rows `idx` of this state, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            c: self.c.select(Axis(0), idx),
            h: self.h.select(Axis(0), idx),
        }
    }
}

/// Forward intermediates of one LSTM step. Moved into [`lstm_backward`], so
/// each tape is consumed exactly once.
#[derive(Debug)]
pub struct LstmTape {
    u: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    f: Array2<f64>,
    i: Array2<f64>,
    o: Array2<f64>,
    g: Array2<f64>,
    tanh_c: Array2<f64>,
}

impl LstmTape {
    /// Gate activations `(f, i, o)` recorded during the forward step.
    pub fn gates(&self) -> (&Array2<f64>, &Array2<f64>, &Array2<f64>) {
        (&self.f, &self.i, &self.o)
    }
}

/// One LSTM step:
///
/// ```text
/// f = σ(W_uf u + W_hf h' + b_f)     i = σ(W_ui u + W_hi h' + b_i)
/// o = σ(W_uo u + W_ho h' + b_o)     c = f ⊙ c' + i ⊙ tanh(W_uc u + W_hc h' + b_c)
/// h = o ⊙ tanh(c)
/// ```
pub fn lstm_forward(
    p: &Lstm,
    u: ArrayView2<f64>,
    prev: &LstmState,
) -> Result<(LstmState, LstmTape)> {
    let cd = p.cell_dim();
    check_cols("lstm input", &u, p.input_dim())?;
    check_cols("lstm previous c", &prev.c.view(), cd)?;
    check_cols("lstm previous h", &prev.h.view(), cd)?;
    let batch = u.nrows();
    if prev.c.nrows() != batch || prev.h.nrows() != batch {
        return Err(Error::Shape(format!(
            "lstm batch: input has {batch} rows, state has {}/{}",
            prev.c.nrows(),
            prev.h.nrows()
        )));
    }

    let mut pre = Array2::zeros((batch, 4 * cd));
    general_mat_mul(1.0, &u, &p.w_u.t(), 0.0, &mut pre);
    general_mat_mul(1.0, &prev.h, &p.w_h.t(), 1.0, &mut pre);
    pre += &p.b;

    let f = pre.slice(s![.., 0..cd]).mapv(sigmoid);
    let i = pre.slice(s![.., cd..2 * cd]).mapv(sigmoid);
    let o = pre.slice(s![.., 2 * cd..3 * cd]).mapv(sigmoid);
    let g = pre.slice(s![.., 3 * cd..]).mapv(f64::tanh);

    let mut c = Array2::zeros((batch, cd));
    Zip::from(&mut c)
        .and(&f)
        .and(&prev.c)
        .and(&i)
        .and(&g)
        .for_each(|c, &f, &cp, &i, &g| *c = f * cp + i * g);
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;

    let tape = LstmTape {
        u: u.to_owned(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        f,
        i,
        o,
        g,
        tanh_c,
    };
    Ok((LstmState { c, h }, tape))
}

/// Gradients flowing out of one backward LSTM step.
#[derive(Debug)]
pub struct LstmBackward {
    pub grad_prev: LstmState,
    pub grad_input: Array2<f64>,
}

/// Backward pass of [`lstm_forward`]. `grad_c`/`grad_h` are the loss
/// gradients with respect to the step's outputs; parameter gradients are
/// accumulated into `grads`.
pub fn lstm_backward(
    p: &Lstm,
    tape: LstmTape,
    grad_c: ArrayView2<f64>,
    grad_h: ArrayView2<f64>,
    grads: &mut Lstm,
) -> LstmBackward {
    let cd = p.cell_dim();
    let batch = tape.u.nrows();
    let LstmTape {
        u,
        h_prev,
        c_prev,
        f,
        i,
        o,
        g,
        tanh_c,
    } = tape;

    let mut dpre = Array2::zeros((batch, 4 * cd));
    let mut dc_prev = Array2::zeros((batch, cd));
    {
        let (mut d_f, rest) = dpre.view_mut().split_at(Axis(1), cd);
        let (mut d_i, rest) = rest.split_at(Axis(1), cd);
        let (mut d_o, mut d_g) = rest.split_at(Axis(1), cd);
        for r in 0..batch {
            for k in 0..cd {
                let (fv, iv, ov, gv, tc) =
                    (f[[r, k]], i[[r, k]], o[[r, k]], g[[r, k]], tanh_c[[r, k]]);
                let gh = grad_h[[r, k]];
                let dc = grad_c[[r, k]] + gh * ov * (1.0 - tc * tc);
                d_o[[r, k]] = gh * tc * ov * (1.0 - ov);
                d_f[[r, k]] = dc * c_prev[[r, k]] * fv * (1.0 - fv);
                d_i[[r, k]] = dc * gv * iv * (1.0 - iv);
                d_g[[r, k]] = dc * iv * (1.0 - gv * gv);
                dc_prev[[r, k]] = dc * fv;
            }
        }
    }

    general_mat_mul(1.0, &dpre.t(), &u, 1.0, &mut grads.w_u);
    general_mat_mul(1.0, &dpre.t(), &h_prev, 1.0, &mut grads.w_h);
    grads.b += &dpre.sum_axis(Axis(0));

    LstmBackward {
        grad_prev: LstmState {
            c: dc_prev,
            h: dpre.dot(&p.w_h),
        },
        grad_input: dpre.dot(&p.w_u),
    }
}

/// Numerically stable softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Row-wise `log softmax`, via log-sum-exp with max subtraction.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_error: f64,
}

/// Floor on the relative-error denominator used by [`gradient_check`].
pub const REL_ERROR_FLOOR: f64 = 1e-12;

pub fn relative_error(a: f64, n: f64) -> f64 {
    relative_error_floored(a, n, REL_ERROR_FLOOR)
}

pub fn relative_error_floored(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against the central difference `(f(p+h) - f(p-h)) / 2h`
/// for every coordinate of `params`.
pub fn gradient_check<F>(params: &[f64], analytic: &[f64], h: f64, f: F) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    gradient_check_floored(params, analytic, h, REL_ERROR_FLOOR, f)
}

/// [`gradient_check`] with a caller-chosen denominator floor. A floor near
/// the finite-difference noise level (about `ulp(f) / h`) keeps coordinates
/// whose true gradient is below that noise from dominating the maximum.
pub fn gradient_check_floored<F>(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
    mut f: F,
) -> GradCheck
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length mismatch");
    let mut p = params.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_error: 0.0,
    };
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + h;
        let plus = f(&p);
        p[k] = orig - h;
        let minus = f(&p);
        p[k] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = relative_error_floored(analytic[k], numeric, floor);
        if err > worst.max_rel_error || k == 0 {
            worst.max_rel_error = err;
            worst.worst_index = k;
            worst.analytic = analytic[k];
            worst.numeric = numeric;
        }
        worst.max_abs_error = worst.max_abs_error.max((analytic[k] - numeric).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    fn random_lstm(input_dim: usize, cell_dim: usize, rng: &mut impl Rng) -> Lstm {
        Lstm {
            w_u: random_matrix(4 * cell_dim, input_dim, rng),
            w_h: random_matrix(4 * cell_dim, cell_dim, rng),
            b: Array1::from_shape_simple_fn(4 * cell_dim, || rng.gen_range(-1.0..1.0)),
        }
    }

    #[test]
    fn dense_relu_clips() {
        let p = Dense {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let y = dense_forward(&p, array![[-1.0, 2.0]].view(), Activation::Relu).unwrap();
        assert_eq!(y, array![[0.0, 2.0]]);
    }

    #[test]
    fn dense_zero_weight_gives_bias() {
        let p = Dense {
            weight: Array2::zeros((3, 2)),
            bias: array![1.5, -2.0, 0.25],
        };
        let y = dense_forward(&p, array![[7.0, -3.0]].view(), Activation::Identity).unwrap();
        assert_eq!(y, array![[1.5, -2.0, 0.25]]);
    }

    #[test]
    fn dense_matches_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Dense {
            weight: random_matrix(3, 4, &mut rng),
            bias: Array1::from_shape_simple_fn(3, || rng.gen_range(-1.0..1.0)),
        };
        let x = random_matrix(1, 4, &mut rng);
        let y = dense_forward(&p, x.view(), Activation::Identity).unwrap();
        for r in 0..3 {
            let mut acc = p.bias[r];
            for c in 0..4 {
                acc += p.weight[[r, c]] * x[[0, c]];
            }
            assert_abs_diff_eq!(y[[0, r]], acc, epsilon = 1e-14);
        }
    }

    #[test]
    fn dense_rejects_bad_shape() {
        let p = Dense::zeros(3, 2);
        assert!(matches!(
            dense_forward(&p, Array2::zeros((1, 4)).view(), Activation::Relu),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn lstm_zero_fixed_point() {
        let p = Lstm::zeros(3, 4);
        let (next, _) =
            lstm_forward(&p, array![[0.3, -1.0, 2.0]].view(), &LstmState::zeros(1, 4)).unwrap();
        assert!(next.c.iter().all(|&v| v == 0.0));
        assert!(next.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_zero_params_unit_memory() {
        let p = Lstm::zeros(2, 3);
        let prev = LstmState {
            c: Array2::ones((1, 3)),
            h: Array2::zeros((1, 3)),
        };
        let (next, _) = lstm_forward(&p, array![[1.0, -1.0]].view(), &prev).unwrap();
        for k in 0..3 {
            assert_abs_diff_eq!(next.c[[0, k]], 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(next.h[[0, k]], 0.231_058_578_630_005, epsilon = 1e-12);
        }
    }

    /// Scalar-loop evaluation of the LSTM recursions, independent of the
    /// stacked/GEMM layout.
    fn lstm_scalar_oracle(
        p: &Lstm,
        u: &[f64],
        c_prev: &[f64],
        h_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let cd = p.cell_dim();
        let affine = |gate: Gate, k: usize| {
            let wu = p.input_weights(gate);
            let wh = p.recurrent_weights(gate);
            let mut acc = p.bias(gate)[k];
            for (j, &uj) in u.iter().enumerate() {
                acc += wu[[k, j]] * uj;
            }
            for (j, &hj) in h_prev.iter().enumerate() {
                acc += wh[[k, j]] * hj;
            }
            acc
        };
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut c = vec![0.0; cd];
        let mut h = vec![0.0; cd];
        for k in 0..cd {
            let f = sig(affine(Gate::Forget, k));
            let i = sig(affine(Gate::Input, k));
            let o = sig(affine(Gate::Output, k));
            c[k] = f * c_prev[k] + i * affine(Gate::Candidate, k).tanh();
            h[k] = o * c[k].tanh();
        }
        (c, h)
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_lstm(3, 4, &mut rng);
        let u = random_matrix(1, 3, &mut rng);
        let prev = LstmState {
            c: random_matrix(1, 4, &mut rng),
            h: random_matrix(1, 4, &mut rng),
        };
        let (next, _) = lstm_forward(&p, u.view(), &prev).unwrap();
        let (c, h) = lstm_scalar_oracle(
            &p,
            u.as_slice().unwrap(),
            prev.c.as_slice().unwrap(),
            prev.h.as_slice().unwrap(),
        );
        for k in 0..4 {
            assert_abs_diff_eq!(next.c[[0, k]], c[k], epsilon = 1e-14);
            assert_abs_diff_eq!(next.h[[0, k]], h[k], epsilon = 1e-14);
        }
    }

    #[test]
    fn lstm_backward_zero_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_lstm(2, 3, &mut rng);
        let (_, tape) = lstm_forward(
            &p,
            random_matrix(2, 2, &mut rng).view(),
            &LstmState::zeros(2, 3),
        )
        .unwrap();
        let mut grads = Lstm::zeros(2, 3);
        let zero = Array2::zeros((2, 3));
        let out = lstm_backward(&p, tape, zero.view(), zero.view(), &mut grads);
        assert!(grads.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        assert!(out.grad_input.iter().all(|&v| v == 0.0));
        assert!(out.grad_prev.c.iter().all(|&v| v == 0.0));
        assert!(out.grad_prev.h.iter().all(|&v| v == 0.0));
    }

    /// Loss = sum of weighted final c and h after `steps` chained forward
    /// calls. Returns the loss and the analytic gradient of every parameter.
    fn chained_loss(
        p: &Lstm,
        inputs: &[Array2<f64>],
        wc: &Array2<f64>,
        wh: &Array2<f64>,
        want_grad: bool,
    ) -> (f64, Option<Lstm>) {
        let batch = inputs[0].nrows();
        let mut state = LstmState::zeros(batch, p.cell_dim());
        let mut tapes = Vec::new();
        for u in inputs {
            let (next, tape) = lstm_forward(p, u.view(), &state).unwrap();
            tapes.push(tape);
            state = next;
        }
        let loss = (&state.c * wc).sum() + (&state.h * wh).sum();
        if !want_grad {
            return (loss, None);
        }
        let mut grads = Lstm::zeros(p.input_dim(), p.cell_dim());
        let mut gc = wc.clone();
        let mut gh = wh.clone();
        for tape in tapes.into_iter().rev() {
            let back = lstm_backward(p, tape, gc.view(), gh.view(), &mut grads);
            gc = back.grad_prev.c;
            gh = back.grad_prev.h;
        }
        (loss, Some(grads))
    }

    fn flatten_lstm(p: &Lstm) -> Vec<f64> {
        p.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    fn unflatten_lstm(template: &Lstm, flat: &[f64]) -> Lstm {
        let mut p = template.clone();
        let mut off = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        p
    }

    fn lstm_grad_error(
        input_dim: usize,
        cell_dim: usize,
        steps: usize,
        batch: usize,
        seed: u64,
    ) -> f64 {
        lstm_grad_error_floored(input_dim, cell_dim, steps, batch, seed, REL_ERROR_FLOOR)
    }

    fn lstm_grad_error_floored(
        input_dim: usize,
        cell_dim: usize,
        steps: usize,
        batch: usize,
        seed: u64,
        floor: f64,
    ) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_lstm(input_dim, cell_dim, &mut rng);
        let inputs: Vec<_> = (0..steps)
            .map(|_| random_matrix(batch, input_dim, &mut rng))
            .collect();
        let wc = random_matrix(batch, cell_dim, &mut rng);
        let wh = random_matrix(batch, cell_dim, &mut rng);
        let (_, grads) = chained_loss(&p, &inputs, &wc, &wh, true);
        let analytic = flatten_lstm(&grads.unwrap());
        let flat = flatten_lstm(&p);
        gradient_check_floored(&flat, &analytic, 1e-5, floor, |q| {
            chained_loss(&unflatten_lstm(&p, q), &inputs, &wc, &wh, false).0
        })
        .max_rel_error
    }

    #[test]
    fn scalar_lstm_single_step_gradient() {
        let err = lstm_grad_error(1, 1, 1, 1, 21);
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn five_step_bptt_gradient() {
        let err = lstm_grad_error(3, 4, 5, 1, 22);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn lstm_input_and_state_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_lstm(3, 2, &mut rng);
        let u = random_matrix(1, 3, &mut rng);
        let prev = LstmState {
            c: random_matrix(1, 2, &mut rng),
            h: random_matrix(1, 2, &mut rng),
        };
        let wc = random_matrix(1, 2, &mut rng);
        let wh = random_matrix(1, 2, &mut rng);
        let loss = |u: &Array2<f64>, prev: &LstmState| {
            let (n, _) = lstm_forward(&p, u.view(), prev).unwrap();
            (&n.c * &wc).sum() + (&n.h * &wh).sum()
        };
        let (_, tape) = lstm_forward(&p, u.view(), &prev).unwrap();
        let mut grads = Lstm::zeros(3, 2);
        let back = lstm_backward(&p, tape, wc.view(), wh.view(), &mut grads);

        let mut analytic: Vec<f64> = back.grad_input.iter().copied().collect();
        analytic.extend(back.grad_prev.c.iter());
        analytic.extend(back.grad_prev.h.iter());
        let mut flat: Vec<f64> = u.iter().copied().collect();
        flat.extend(prev.c.iter());
        flat.extend(prev.h.iter());
        let check = gradient_check(&flat, &analytic, 1e-5, |q| {
            let u = Array2::from_shape_vec((1, 3), q[0..3].to_vec()).unwrap();
            let st = LstmState {
                c: Array2::from_shape_vec((1, 2), q[3..5].to_vec()).unwrap(),
                h: Array2::from_shape_vec((1, 2), q[5..7].to_vec()).unwrap(),
            };
            loss(&u, &st)
        });
        assert!(check.max_rel_error < 1e-7, "{check:?}");
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Dense {
            weight: random_matrix(3, 4, &mut rng),
            bias: Array1::from_shape_simple_fn(3, || rng.gen_range(-1.0..1.0)),
        };
        let x = random_matrix(2, 4, &mut rng);
        let wy = random_matrix(2, 3, &mut rng);
        let loss = |p: &Dense| (dense_forward(p, x.view(), Activation::Relu).unwrap() * &wy).sum();
        let (_, tape) = dense_forward_taped(&p, x.clone(), Activation::Relu).unwrap();
        let mut grads = Dense::zeros(4, 3);
        dense_backward(&p, tape, wy.view(), &mut grads);
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect();
        let flat: Vec<f64> = p.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let check = gradient_check(&flat, &analytic, 1e-5, |q| {
            let mut pp = p.clone();
            pp.weight.as_slice_mut().unwrap().copy_from_slice(&q[..12]);
            pp.bias.as_slice_mut().unwrap().copy_from_slice(&q[12..]);
            loss(&pp)
        });
        assert!(check.max_rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(&vec![0.3; 757]);
        for v in &p {
            assert_abs_diff_eq!(*v, 1.0 / 757.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits() {
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert!(p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let z = [0.4, -1.3, 2.2, 0.0, -0.7];
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        let p = softmax(&z);
        for (pi, zi) in p.iter().zip(z) {
            assert_abs_diff_eq!(*pi, zi.exp() / denom, epsilon = 1e-15);
        }
        let lp = log_softmax_rows(Array2::from_shape_vec((1, 5), z.to_vec()).unwrap().view());
        for (l, pi) in lp.iter().zip(&p) {
            assert_abs_diff_eq!(l.exp(), *pi, epsilon = 1e-15);
        }
    }

    #[test]
    fn sigmoid_is_overflow_free() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid(-2.0), 1.0 / (1.0 + 2f64.exp()), epsilon = 1e-16);
    }

    #[test]
    fn gradient_check_quadratic() {
        // f(p) = sum a_k p_k^2 + b_k p_k
        let a = [1.5, -0.25, 3.0];
        let b = [0.5, 2.0, -1.0];
        let p: [f64; 3] = [0.3, -1.2, 0.7];
        let grad: Vec<f64> = (0..3).map(|k| 2.0 * a[k] * p[k] + b[k]).collect();
        let f = |q: &[f64]| {
            (0..3)
                .map(|k| a[k] * q[k] * q[k] + b[k] * q[k])
                .sum::<f64>()
        };
        let check = gradient_check(&p, &grad, 1e-5, f);
        assert!(check.max_rel_error < 1e-10, "{check:?}");
    }

    #[test]
    fn gradient_check_truncation_sweep() {
        // Cubic terms make the central difference O(h^2) inexact.
        let p: [f64; 2] = [0.8, -0.4];
        let f = |q: &[f64]| q[0].powi(3) + (2.0 * q[1]).sin();
        let grad = [3.0 * p[0] * p[0], 2.0 * (2.0 * p[1]).cos()];
        let errs: Vec<f64> = [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
            .iter()
            .map(|&h| gradient_check(&p, &grad, h, f).max_rel_error)
            .collect();
        assert!(errs[0] > 1e-3);
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn bptt_gradients_match_for_random_shapes(
            input_dim in 1usize..4, cell_dim in 1usize..5, steps in 1usize..4, batch in 1usize..3, seed in 0u64..1000
        ) {
            // Coordinates whose gradient is below ~1e-4 sit at the central
            // difference roundoff floor, so the denominator is floored there.
            let err = lstm_grad_error_floored(input_dim, cell_dim, steps, batch, seed, 1e-4);
            prop_assert!(err < 1e-6, "relative error {}", err);
        }

        #[test]
        fn softmax_is_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..20), shift in -100.0f64..100.0) {
            let p = softmax(&z);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            for (a, b) in p.iter().zip(softmax(&shifted)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn gates_in_unit_interval_and_cell_bounded(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_lstm(3, 4, &mut rng);
            let prev = LstmState { c: random_matrix(2, 4, &mut rng) * 3.0, h: random_matrix(2, 4, &mut rng) };
            let (next, tape) = lstm_forward(&p, random_matrix(2, 3, &mut rng).view(), &prev).unwrap();
            let (f, i, o) = tape.gates();
            for g in [f, i, o] {
                prop_assert!(g.iter().all(|&v| v > 0.0 && v < 1.0));
            }
            for (c, cp) in next.c.iter().zip(prev.c.iter()) {
                prop_assert!(c.abs() <= cp.abs() + 1.0);
            }
        }

        #[test]
        fn lstm_forward_is_deterministic(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_lstm(5, 6, &mut rng);
            let u = random_matrix(3, 5, &mut rng);
            let prev = LstmState { c: random_matrix(3, 6, &mut rng), h: random_matrix(3, 6, &mut rng) };
            let (a, _) = lstm_forward(&p, u.view(), &prev).unwrap();
            let (b, _) = lstm_forward(&p, u.view(), &prev).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
