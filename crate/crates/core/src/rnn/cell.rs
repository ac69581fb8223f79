//! Cell step functions.
//!
//! Each cell is written once against the tape; the plain-tensor entry points
//! below build a throwaway tape around the same code so the traced forward
//! pass and standalone steps cannot drift apart.
//!
//! Weight layout per layer: the step input is the row-wise concatenation
//! `[x_t | h_prev]`, multiplied by `weight` of shape `(in + E, G·E)`.
//!
//! - vanilla: G = 1, `h = tanh([x|h]·W + b)`
//! - lstm: G = 4 in gate order `[i, f, n, o]`;
//!   `c = f⊙c_prev + i⊙n`, `h = o⊙tanh(c)`
//! - gru: G = 2 in order `[z, r]`, plus `cand_weight (in + E, E)` for the
//!   candidate `n = tanh([x | r⊙h]·W_n + b_n)`; `h = (1 − z)⊙n + z⊙h_prev`

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Borrowed view of one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams<'a> {
    pub weight: &'a Tensor,
    pub bias: &'a Tensor,
    pub cand_weight: Option<&'a Tensor>,
    pub cand_bias: Option<&'a Tensor>,
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerVars {
    pub weight: Var,
    pub bias: Var,
    pub cand_weight: Option<Var>,
    pub cand_bias: Option<Var>,
}

impl LayerVars {
    pub(crate) fn load(tape: &mut Tape, p: LayerParams<'_>, track: bool) -> Self {
        let mut put = |t: &Tensor| {
            if track {
                tape.variable(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let weight = put(p.weight);
        let bias = put(p.bias);
        let cand_weight = p.cand_weight.map(&mut put);
        let cand_bias = p.cand_bias.map(&mut put);
        Self {
            weight,
            bias,
            cand_weight,
            cand_bias,
        }
    }
}

fn affine(tape: &mut Tape, input: Var, weight: Var, bias: Var) -> Var {
    let z = tape.matmul(input, weight);
    tape.add_row(z, bias)
}

pub(crate) fn vanilla_step(tape: &mut Tape, p: &LayerVars, x: Var, h: Var) -> Var {
    let xh = tape.concat(x, h);
    let z = affine(tape, xh, p.weight, p.bias);
    tape.tanh(z)
}

pub(crate) fn lstm_step(tape: &mut Tape, p: &LayerVars, x: Var, h: Var, c: Var) -> (Var, Var) {
    let e = tape.value(h).cols();
    let xh = tape.concat(x, h);
    let gates = affine(tape, xh, p.weight, p.bias);
    let i = tape.slice_cols(gates, 0, e);
    let f = tape.slice_cols(gates, e, e);
    let n = tape.slice_cols(gates, 2 * e, e);
    let o = tape.slice_cols(gates, 3 * e, e);
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let n = tape.tanh(n);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c);
    let write = tape.mul(i, n);
    let c_next = tape.add(keep, write);
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed);
    (h_next, c_next)
}

pub(crate) fn gru_step(tape: &mut Tape, p: &LayerVars, x: Var, h: Var) -> Var {
    let e = tape.value(h).cols();
    let (cw, cb) = match (p.cand_weight, p.cand_bias) {
        (Some(w), Some(b)) => (w, b),
        _ => unreachable!("gru layers always carry candidate parameters"),
    };
    let xh = tape.concat(x, h);
    let gates = affine(tape, xh, p.weight, p.bias);
    let z = tape.slice_cols(gates, 0, e);
    let r = tape.slice_cols(gates, e, e);
    let z = tape.sigmoid(z);
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h);
    let x_rh = tape.concat(x, rh);
    let n = affine(tape, x_rh, cw, cb);
    let n = tape.tanh(n);
    let diff = tape.sub(h, n);
    let carried = tape.mul(z, diff);
    tape.add(n, carried)
}

fn check_step_shapes(
    p: LayerParams<'_>,
    gates: usize,
    x: &Tensor,
    h: &Tensor,
    c: Option<&Tensor>,
) -> Result<()> {
    let (b, e) = (h.rows(), h.cols());
    let input = x.cols();
    let bad = |what: &str| Err(Error::Config(format!("cell step: {what}")));
    if x.rank() != 2 || h.rank() != 2 || x.rows() != b {
        return bad("x and h must be (B, ·) matrices with equal B");
    }
    if p.weight.shape() != [input + e, gates * e] {
        return bad(&format!(
            "weight {:?} does not fit input {input} and state {e}",
            p.weight.shape()
        ));
    }
    if p.bias.len() != gates * e {
        return bad("bias width");
    }
    if let Some(c) = c {
        if c.shape() != h.shape() {
            return bad("cell state shape differs from hidden state");
        }
    }
    Ok(())
}

/// One LSTM step on plain tensors: returns `(h, c)`, each `(B, E)`.
pub fn lstm_cell_step(
    p: LayerParams<'_>,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_step_shapes(p, 4, x, h_prev, Some(c_prev))?;
    let mut tape = Tape::new();
    let vars = LayerVars::load(&mut tape, p, false);
    let (xv, hv, cv) = (
        tape.constant(x.clone()),
        tape.constant(h_prev.clone()),
        tape.constant(c_prev.clone()),
    );
    let (h, c) = lstm_step(&mut tape, &vars, xv, hv, cv);
    Ok((tape.value(h).clone(), tape.value(c).clone()))
}

pub fn vanilla_cell_step(p: LayerParams<'_>, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    check_step_shapes(p, 1, x, h_prev, None)?;
    let mut tape = Tape::new();
    let vars = LayerVars::load(&mut tape, p, false);
    let (xv, hv) = (tape.constant(x.clone()), tape.constant(h_prev.clone()));
    let h = vanilla_step(&mut tape, &vars, xv, hv);
    Ok(tape.value(h).clone())
}

pub fn gru_cell_step(p: LayerParams<'_>, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    check_step_shapes(p, 2, x, h_prev, None)?;
    let e = h_prev.cols();
    match (p.cand_weight, p.cand_bias) {
        (Some(w), Some(b)) if w.shape() == [x.cols() + e, e] && b.len() == e => {}
        _ => {
            return Err(Error::Config(
                "cell step: gru candidate parameters missing or misshaped".into(),
            ))
        }
    }
    let mut tape = Tape::new();
    let vars = LayerVars::load(&mut tape, p, false);
    let (xv, hv) = (tape.constant(x.clone()), tape.constant(h_prev.clone()));
    let h = gru_step(&mut tape, &vars, xv, hv);
    Ok(tape.value(h).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Owned {
        weight: Tensor,
        bias: Tensor,
        cand_weight: Option<Tensor>,
        cand_bias: Option<Tensor>,
    }

    impl Owned {
        fn random(input: usize, e: usize, gates: usize, gru: bool, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Self {
                weight: Tensor::uniform(&[input + e, gates * e], -1.0, 1.0, &mut rng),
                bias: Tensor::uniform(&[gates * e], -1.0, 1.0, &mut rng),
                cand_weight: gru.then(|| Tensor::uniform(&[input + e, e], -1.0, 1.0, &mut rng)),
                cand_bias: gru.then(|| Tensor::uniform(&[e], -1.0, 1.0, &mut rng)),
            }
        }

        fn zeros(input: usize, e: usize, gates: usize, gru: bool) -> Self {
            Self {
                weight: Tensor::zeros(&[input + e, gates * e]),
                bias: Tensor::zeros(&[gates * e]),
                cand_weight: gru.then(|| Tensor::zeros(&[input + e, e])),
                cand_bias: gru.then(|| Tensor::zeros(&[e])),
            }
        }

        fn view(&self) -> LayerParams<'_> {
            LayerParams {
                weight: &self.weight,
                bias: &self.bias,
                cand_weight: self.cand_weight.as_ref(),
                cand_bias: self.cand_bias.as_ref(),
            }
        }
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[rows, cols], -1.0, 1.0, &mut rng)
    }

    // Scalar-loop oracles: the same equations, element by element.

    fn pre_activation(w: &Tensor, b: &Tensor, xh: &[f64], col: usize) -> f64 {
        let cols = w.cols();
        let mut acc = b.data()[col];
        for (k, v) in xh.iter().enumerate() {
            acc += v * w.data()[k * cols + col];
        }
        acc
    }

    fn lstm_oracle(p: &Owned, x: &Tensor, h: &Tensor, c: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let (bsz, e) = (h.rows(), h.cols());
        let mut hs = vec![0.0; bsz * e];
        let mut cs = vec![0.0; bsz * e];
        for b in 0..bsz {
            let mut xh: Vec<f64> = x.data()[b * x.cols()..(b + 1) * x.cols()].to_vec();
            xh.extend_from_slice(&h.data()[b * e..(b + 1) * e]);
            for j in 0..e {
                let i = sigmoid(pre_activation(&p.weight, &p.bias, &xh, j));
                let f = sigmoid(pre_activation(&p.weight, &p.bias, &xh, e + j));
                let n = pre_activation(&p.weight, &p.bias, &xh, 2 * e + j).tanh();
                let o = sigmoid(pre_activation(&p.weight, &p.bias, &xh, 3 * e + j));
                let cn = f * c.data()[b * e + j] + i * n;
                cs[b * e + j] = cn;
                hs[b * e + j] = o * cn.tanh();
            }
        }
        (hs, cs)
    }

    fn vanilla_oracle(p: &Owned, x: &Tensor, h: &Tensor) -> Vec<f64> {
        let (bsz, e) = (h.rows(), h.cols());
        let mut out = vec![0.0; bsz * e];
        for b in 0..bsz {
            let mut xh: Vec<f64> = x.data()[b * x.cols()..(b + 1) * x.cols()].to_vec();
            xh.extend_from_slice(&h.data()[b * e..(b + 1) * e]);
            for j in 0..e {
                out[b * e + j] = pre_activation(&p.weight, &p.bias, &xh, j).tanh();
            }
        }
        out
    }

    fn gru_oracle(p: &Owned, x: &Tensor, h: &Tensor) -> Vec<f64> {
        let (bsz, e) = (h.rows(), h.cols());
        let cw = p.cand_weight.as_ref().unwrap();
        let cb = p.cand_bias.as_ref().unwrap();
        let mut out = vec![0.0; bsz * e];
        for b in 0..bsz {
            let xs = &x.data()[b * x.cols()..(b + 1) * x.cols()];
            let hp = &h.data()[b * e..(b + 1) * e];
            let mut xh = xs.to_vec();
            xh.extend_from_slice(hp);
            let z: Vec<f64> = (0..e)
                .map(|j| sigmoid(pre_activation(&p.weight, &p.bias, &xh, j)))
                .collect();
            let r: Vec<f64> = (0..e)
                .map(|j| sigmoid(pre_activation(&p.weight, &p.bias, &xh, e + j)))
                .collect();
            let mut xrh = xs.to_vec();
            xrh.extend((0..e).map(|j| r[j] * hp[j]));
            for j in 0..e {
                let n = pre_activation(cw, cb, &xrh, j).tanh();
                out[b * e + j] = (1.0 - z[j]) * n + z[j] * hp[j];
            }
        }
        out
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn lstm_zero_params_fixed_point() {
        let p = Owned::zeros(3, 4, 4, false);
        let x = rand_matrix(2, 3, 1);
        let z = Tensor::zeros(&[2, 4]);
        let (h, c) = lstm_cell_step(p.view(), &x, &z, &z).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));
        assert!(c.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_preserve_context() {
        let e = 4;
        let mut p = Owned::zeros(2, e, 4, false);
        for j in 0..e {
            p.bias.data_mut()[j] = -50.0; // input gate closed
            p.bias.data_mut()[e + j] = 50.0; // forget gate open
        }
        let x = rand_matrix(1, 2, 2);
        let h = Tensor::zeros(&[1, e]);
        let c = Tensor::new(vec![1, e], vec![0.3, -0.7, 1.5, -2.0]).unwrap();
        let (_, c_next) = lstm_cell_step(p.view(), &x, &h, &c).unwrap();
        assert_close(c_next.data(), c.data(), 1e-12);
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let (e, b, input) = (4, 2, 3);
        let p = Owned::random(input, e, 4, false, 7);
        let x = rand_matrix(b, input, 70);
        let h = rand_matrix(b, e, 71);
        let c = rand_matrix(b, e, 72);
        let (hn, cn) = lstm_cell_step(p.view(), &x, &h, &c).unwrap();
        let (ho, co) = lstm_oracle(&p, &x, &h, &c);
        assert_close(hn.data(), &ho, 1e-12);
        assert_close(cn.data(), &co, 1e-12);
        assert!(hn.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn vanilla_zero_params() {
        let p = Owned::zeros(2, 3, 1, false);
        let h = vanilla_cell_step(p.view(), &rand_matrix(1, 2, 3), &rand_matrix(1, 3, 4)).unwrap();
        assert!(h.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vanilla_small_signal_identity() {
        let (input, e) = (2, 3);
        let mut p = Owned::zeros(input, e, 1, false);
        for j in 0..e {
            p.weight.set(&[input + j, j], 1.0);
        }
        let v = Tensor::new(vec![1, e], vec![1e-4, -2e-4, 3e-4]).unwrap();
        let h = vanilla_cell_step(p.view(), &rand_matrix(1, input, 5), &v).unwrap();
        // tanh(v) = v − v³/3 + …
        assert_close(h.data(), v.data(), 1e-11);
    }

    #[test]
    fn vanilla_matches_scalar_oracle() {
        let (e, input) = (3, 2);
        let p = Owned::random(input, e, 1, false, 11);
        let x = rand_matrix(2, input, 110);
        let h = rand_matrix(2, e, 111);
        let out = vanilla_cell_step(p.view(), &x, &h).unwrap();
        assert_close(out.data(), &vanilla_oracle(&p, &x, &h), 1e-12);
    }

    #[test]
    fn gru_zero_params_halves_state() {
        let p = Owned::zeros(2, 4, 2, true);
        let h = rand_matrix(2, 4, 6);
        let out = gru_cell_step(p.view(), &rand_matrix(2, 2, 7), &h).unwrap();
        assert_close(out.data(), h.scale(0.5).data(), 1e-15);
    }

    #[test]
    fn gru_saturated_update_gate_keeps_state() {
        let e = 4;
        let mut p = Owned::random(3, e, 2, true, 8);
        for j in 0..e {
            p.bias.data_mut()[j] = 50.0;
        }
        let h = rand_matrix(1, e, 9);
        let out = gru_cell_step(p.view(), &rand_matrix(1, 3, 10), &h).unwrap();
        assert_close(out.data(), h.data(), 1e-12);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let (e, input) = (4, 3);
        let p = Owned::random(input, e, 2, true, 3);
        let x = rand_matrix(2, input, 30);
        let h = rand_matrix(2, e, 31);
        let out = gru_cell_step(p.view(), &x, &h).unwrap();
        assert_close(out.data(), &gru_oracle(&p, &x, &h), 1e-12);
    }

    #[test]
    fn shape_mismatch_is_configuration_error() {
        let p = Owned::zeros(3, 4, 4, false);
        let x = rand_matrix(2, 2, 1);
        let z = Tensor::zeros(&[2, 4]);
        assert!(matches!(
            lstm_cell_step(p.view(), &x, &z, &z),
            Err(Error::Config(_))
        ));
        let g = Owned::zeros(3, 4, 2, false);
        assert!(gru_cell_step(g.view(), &rand_matrix(2, 3, 1), &z).is_err());
    }
}
