use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{l1_subgradient, sigmoid, InputGradient, Matrix, Model};
use crate::error::{Error, Result};
use crate::featurize::SequenceInput;

/// Single-layer LSTM over a fixed-length visit sequence followed by a dense
/// sigmoid head on the final hidden state.
///
/// Input kernels `w_*` are `F x H`, recurrent kernels `u_*` are `H x H`.
/// Gates: input `i`, forget `f`, output `o` (sigmoid) and candidate `g` (tanh).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub w_i: Matrix,
    pub w_f: Matrix,
    pub w_o: Matrix,
    pub w_g: Matrix,
    pub u_i: Matrix,
    pub u_f: Matrix,
    pub u_o: Matrix,
    pub u_g: Matrix,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_g: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: f64,
}

/// Activations cached at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// Forward cache for backpropagation through time.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmTape {
    pub steps: Vec<LstmStep>,
    /// Inverted-dropout multipliers applied to the final hidden state.
    pub mask: Option<Vec<f64>>,
    /// Final hidden state after dropout, as seen by the dense head.
    pub head_input: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        let fm = || Matrix::zeros(features, hidden);
        let hm = || Matrix::zeros(hidden, hidden);
        LstmParams {
            w_i: fm(),
            w_f: fm(),
            w_o: fm(),
            w_g: fm(),
            u_i: hm(),
            u_f: hm(),
            u_o: hm(),
            u_g: hm(),
            b_i: vec![0.0; hidden],
            b_f: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
            b_g: vec![0.0; hidden],
            dense_w: vec![0.0; hidden],
            dense_b: 0.0,
        }
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) for every parameter except the forget
    /// gate bias, which starts at 1.
    pub fn init<R: Rng + ?Sized>(features: usize, hidden: usize, rng: &mut R) -> Self {
        let s = 1.0 / (hidden as f64).sqrt();
        let mut p = LstmParams::zeros(features, hidden);
        for slice in p.slices_mut() {
            for v in slice.iter_mut() {
                *v = rng.random_range(-s..s);
            }
        }
        p.b_f.iter_mut().for_each(|b| *b = 1.0);
        p
    }

    pub fn features(&self) -> usize {
        self.w_i.rows()
    }

    pub fn hidden(&self) -> usize {
        self.b_i.len()
    }

    fn check(&self, seq: &SequenceInput) -> Result<()> {
        if seq.steps.cols() != self.features() {
            return Err(Error::ShapeMismatch(format!(
                "sequence has {} features per step, model expects {}",
                seq.steps.cols(),
                self.features()
            )));
        }
        if seq.steps.rows() == 0 {
            return Err(Error::ShapeMismatch("empty sequence".into()));
        }
        Ok(())
    }

    /// Runs the recurrence. With `dropout = Some((rate, rng))` and a positive
    /// rate, inverted dropout is applied to the final hidden state.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        seq: &SequenceInput,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<(f64, LstmTape)> {
        self.check(seq)?;
        let h_dim = self.hidden();
        let mut h_prev = vec![0.0; h_dim];
        let mut c_prev = vec![0.0; h_dim];
        let mut steps = Vec::with_capacity(seq.steps.rows());
        for t in 0..seq.steps.rows() {
            let x = seq.steps.row(t);
            let gate = |w: &Matrix, u: &Matrix, b: &[f64]| {
                let mut z = b.to_vec();
                w.add_vec_mul(x, &mut z);
                u.add_vec_mul(&h_prev, &mut z);
                z
            };
            let mut i = gate(&self.w_i, &self.u_i, &self.b_i);
            let mut f = gate(&self.w_f, &self.u_f, &self.b_f);
            let mut o = gate(&self.w_o, &self.u_o, &self.b_o);
            let mut g = gate(&self.w_g, &self.u_g, &self.b_g);
            for j in 0..h_dim {
                i[j] = sigmoid(i[j]);
                f[j] = sigmoid(f[j]);
                o[j] = sigmoid(o[j]);
                g[j] = g[j].tanh();
            }
            let c: Vec<f64> = (0..h_dim).map(|j| f[j] * c_prev[j] + i[j] * g[j]).collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h: Vec<f64> = (0..h_dim).map(|j| o[j] * tanh_c[j]).collect();
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("LSTM cell state at step {t}")));
            }
            h_prev.clone_from(&h);
            c_prev.clone_from(&c);
            steps.push(LstmStep { i, f, o, g, c, h, tanh_c });
        }

        let mask = match dropout {
            Some((rate, rng)) if rate > 0.0 => {
                let keep = 1.0 - rate;
                Some(
                    (0..h_dim)
                        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / keep })
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };
        let head_input: Vec<f64> = match &mask {
            Some(m) => h_prev.iter().zip(m).map(|(h, m)| h * m).collect(),
            None => h_prev,
        };
        let logit = self.dense_b
            + self
                .dense_w
                .iter()
                .zip(&head_input)
                .map(|(w, h)| w * h)
                .sum::<f64>();
        if !logit.is_finite() {
            return Err(Error::NonFinite("LSTM logit".into()));
        }
        Ok((
            logit,
            LstmTape {
                steps,
                mask,
                head_input,
            },
        ))
    }

    /// Backpropagation through time from `dlogit`. Accumulates parameter
    /// gradients into `grads` and input gradients (`T x F`) into `dx` when given.
    pub fn backprop(
        &self,
        seq: &SequenceInput,
        tape: &LstmTape,
        dlogit: f64,
        mut grads: Option<&mut LstmParams>,
        mut dx: Option<&mut Matrix>,
    ) {
        let h_dim = self.hidden();
        if let Some(g) = grads.as_deref_mut() {
            for (gw, h) in g.dense_w.iter_mut().zip(&tape.head_input) {
                *gw += dlogit * h;
            }
            g.dense_b += dlogit;
        }
        let mut dh: Vec<f64> = self.dense_w.iter().map(|w| dlogit * w).collect();
        if let Some(m) = &tape.mask {
            for (d, m) in dh.iter_mut().zip(m) {
                *d *= m;
            }
        }
        let mut dc = vec![0.0; h_dim];
        let zeros = vec![0.0; h_dim];
        let mut dz = [vec![0.0; h_dim], vec![0.0; h_dim], vec![0.0; h_dim], vec![0.0; h_dim]];

        for t in (0..tape.steps.len()).rev() {
            let s = &tape.steps[t];
            let (c_prev, h_prev) = if t == 0 {
                (&zeros, &zeros)
            } else {
                (&tape.steps[t - 1].c, &tape.steps[t - 1].h)
            };
            for j in 0..h_dim {
                let d_o = dh[j] * s.tanh_c[j];
                dc[j] += dh[j] * s.o[j] * (1.0 - s.tanh_c[j] * s.tanh_c[j]);
                let d_i = dc[j] * s.g[j];
                let d_g = dc[j] * s.i[j];
                let d_f = dc[j] * c_prev[j];
                dz[0][j] = d_i * s.i[j] * (1.0 - s.i[j]);
                dz[1][j] = d_f * s.f[j] * (1.0 - s.f[j]);
                dz[2][j] = d_o * s.o[j] * (1.0 - s.o[j]);
                dz[3][j] = d_g * (1.0 - s.g[j] * s.g[j]);
                dc[j] *= s.f[j];
            }
            let x = seq.steps.row(t);
            if let Some(g) = grads.as_deref_mut() {
                let parts: [(&mut Matrix, &mut Matrix, &mut Vec<f64>); 4] = [
                    (&mut g.w_i, &mut g.u_i, &mut g.b_i),
                    (&mut g.w_f, &mut g.u_f, &mut g.b_f),
                    (&mut g.w_o, &mut g.u_o, &mut g.b_o),
                    (&mut g.w_g, &mut g.u_g, &mut g.b_g),
                ];
                for ((gw, gu, gb), d) in parts.into_iter().zip(&dz) {
                    gw.add_outer(x, d);
                    gu.add_outer(h_prev, d);
                    for (b, dv) in gb.iter_mut().zip(d) {
                        *b += dv;
                    }
                }
            }
            let kernels = [
                (&self.w_i, &self.u_i),
                (&self.w_f, &self.u_f),
                (&self.w_o, &self.u_o),
                (&self.w_g, &self.u_g),
            ];
            if let Some(dx) = dx.as_deref_mut() {
                for ((w, _), d) in kernels.iter().zip(&dz) {
                    w.add_mul_vec(d, dx.row_mut(t));
                }
            }
            dh.iter_mut().for_each(|v| *v = 0.0);
            for ((_, u), d) in kernels.iter().zip(&dz) {
                u.add_mul_vec(d, &mut dh);
            }
        }
    }
}

impl Model for LstmParams {
    type Input = SequenceInput;
    type Tape = LstmTape;

    fn logit(&self, x: &SequenceInput) -> Result<f64> {
        self.forward::<rand_chacha::ChaCha8Rng>(x, None).map(|(z, _)| z)
    }

    fn forward_train<R: Rng + ?Sized>(
        &self,
        x: &SequenceInput,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(f64, LstmTape)> {
        self.forward(x, Some((dropout, rng)))
    }

    fn backward(&self, x: &SequenceInput, tape: &LstmTape, dlogit: f64, grads: &mut Self) {
        self.backprop(x, tape, dlogit, Some(grads), None);
    }

    fn zeros_like(&self) -> Self {
        LstmParams::zeros(self.features(), self.hidden())
    }

    fn kernel_abs_sum(&self) -> f64 {
        [&self.w_i, &self.w_f, &self.w_o, &self.w_g]
            .iter()
            .flat_map(|m| m.data())
            .map(|v| v.abs())
            .sum()
    }

    fn add_l1_subgradient(&self, lambda: f64, grads: &mut Self) {
        if lambda == 0.0 {
            return;
        }
        let pairs = [
            (&self.w_i, &mut grads.w_i),
            (&self.w_f, &mut grads.w_f),
            (&self.w_o, &mut grads.w_o),
            (&self.w_g, &mut grads.w_g),
        ];
        for (w, g) in pairs {
            for (gv, wv) in g.data_mut().iter_mut().zip(w.data()) {
                *gv += l1_subgradient(*wv, lambda);
            }
        }
    }

    fn slices(&self) -> Vec<&[f64]> {
        vec![
            self.w_i.data(),
            self.w_f.data(),
            self.w_o.data(),
            self.w_g.data(),
            self.u_i.data(),
            self.u_f.data(),
            self.u_o.data(),
            self.u_g.data(),
            &self.b_i,
            &self.b_f,
            &self.b_o,
            &self.b_g,
            &self.dense_w,
            std::slice::from_ref(&self.dense_b),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.w_i.data_mut(),
            self.w_f.data_mut(),
            self.w_o.data_mut(),
            self.w_g.data_mut(),
            self.u_i.data_mut(),
            self.u_f.data_mut(),
            self.u_o.data_mut(),
            self.u_g.data_mut(),
            &mut self.b_i,
            &mut self.b_f,
            &mut self.b_o,
            &mut self.b_g,
            &mut self.dense_w,
            std::slice::from_mut(&mut self.dense_b),
        ]
    }
}

impl InputGradient for LstmParams {
    type Input = SequenceInput;

    fn probability_and_input_gradient(&self, x: &SequenceInput) -> Result<(f64, Vec<f64>)> {
        let (logit, tape) = self.forward::<rand_chacha::ChaCha8Rng>(x, None)?;
        let p = sigmoid(logit);
        let mut dx = Matrix::zeros(x.steps.rows(), x.steps.cols());
        self.backprop(x, &tape, p * (1.0 - p), None, Some(&mut dx));
        Ok((p, dx.data().to_vec()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(t: usize, f: usize, rng: &mut ChaCha8Rng) -> SequenceInput {
        SequenceInput {
            steps: Matrix::from_fn(t, f, |_, _| rng.random_range(-1.0..1.0)),
            pad_count: 0,
        }
    }

    /// Per-element scalar reimplementation of the recurrence.
    fn naive_probability(p: &LstmParams, x: &SequenceInput) -> f64 {
        let (hd, fd) = (p.hidden(), p.features());
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for t in 0..x.steps.rows() {
            let mut hn = vec![0.0; hd];
            let mut cn = vec![0.0; hd];
            for j in 0..hd {
                let pre = |w: &Matrix, u: &Matrix, b: &[f64]| {
                    let mut z = b[j];
                    for k in 0..fd {
                        z += x.steps.get(t, k) * w.get(k, j);
                    }
                    for m in 0..hd {
                        z += h[m] * u.get(m, j);
                    }
                    z
                };
                let ig = 1.0 / (1.0 + (-pre(&p.w_i, &p.u_i, &p.b_i)).exp());
                let fg = 1.0 / (1.0 + (-pre(&p.w_f, &p.u_f, &p.b_f)).exp());
                let og = 1.0 / (1.0 + (-pre(&p.w_o, &p.u_o, &p.b_o)).exp());
                let gg = pre(&p.w_g, &p.u_g, &p.b_g).tanh();
                cn[j] = fg * c[j] + ig * gg;
                hn[j] = og * cn[j].tanh();
            }
            h = hn;
            c = cn;
        }
        let mut z = p.dense_b;
        for j in 0..hd {
            z += p.dense_w[j] * h[j];
        }
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn zero_parameters_give_half() {
        let p = LstmParams::zeros(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = seq(6, 3, &mut rng);
        let (z, tape) = p.forward::<ChaCha8Rng>(&x, None).unwrap();
        assert_eq!(sigmoid(z), 0.5);
        assert!(tape.steps.last().unwrap().h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn padded_steps_keep_state_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LstmParams::init(3, 4, &mut rng);
        for b in [&mut p.b_i, &mut p.b_f, &mut p.b_o, &mut p.b_g] {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut x = seq(6, 3, &mut rng);
        for t in 0..3 {
            x.steps.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, tape) = p.forward::<ChaCha8Rng>(&x, None).unwrap();
        for s in &tape.steps[..3] {
            assert!(s.c.iter().chain(&s.h).all(|v| *v == 0.0));
        }
        assert!(tape.steps[3].h.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = LstmParams::init(5, 4, &mut rng);
            let x = seq(6, 5, &mut rng);
            let fast = p.probability(&x).unwrap();
            assert!((fast - naive_probability(&p, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = LstmParams::zeros(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(p.logit(&seq(6, 4, &mut rng)).is_err());
    }

    #[test]
    fn inference_is_deterministic_and_train_mode_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmParams::init(4, 8, &mut rng);
        let x = seq(6, 4, &mut rng);
        assert_eq!(p.logit(&x).unwrap(), p.logit(&x).unwrap());
        let (_, tape) = p.forward_train(&x, 0.5, &mut rng).unwrap();
        let mask = tape.mask.unwrap();
        assert!(mask.iter().all(|m| *m == 0.0 || *m == 2.0));
    }
}
