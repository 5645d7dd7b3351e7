//! Affine and GRU layers expressed on the tape.

use rand::Rng;

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore};
use crate::tensor::{gemm, Tensor};

/// `out = x·w + b` on plain tensors.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 || w.shape().len() != 2 || x.cols() != w.rows() || b.len() != w.cols()
    {
        return Err(Error::Shape(format!(
            "affine {:?} x {:?} + {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (x.rows(), x.cols(), w.cols());
    let mut out: Vec<f64> = b.data().iter().copied().cycle().take(m * n).collect();
    gemm(m, k, n, x.data(), false, w.data(), false, 1.0, &mut out);
    Tensor::new(vec![m, n], out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Affine {
    pub prefix: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAffine {
    pub w: Var,
    pub b: Var,
}

impl Affine {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        store.init_affine(prefix, in_dim, out_dim, rng);
        Self {
            prefix: prefix.to_string(),
            in_dim,
            out_dim,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.b", self.prefix)
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, trainable: bool) -> BoundAffine {
        BoundAffine {
            w: tape.bind(store, &self.weight_name(), trainable),
            b: tape.bind(store, &self.bias_name(), trainable),
        }
    }
}

impl BoundAffine {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w)?;
        tape.add_row(xw, self.b)
    }
}

/// Dimensions and parameter names of a GRU cell.
///
/// Gate order in the fused weights is reset, update, candidate:
/// `w_x: [input, 3·hidden]`, `w_h: [hidden, 3·hidden]`, `b_x`, `b_h: [3·hidden]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GruCellParams {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundGru {
    pub w_x: Var,
    pub w_h: Var,
    pub b_x: Var,
    pub b_h: Var,
    pub hidden_dim: usize,
}

impl GruCellParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let p = Self {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        };
        let h3 = 3 * hidden_dim;
        store.insert(p.name("w_x"), uniform(&[input_dim, h3], input_dim, rng));
        store.insert(p.name("w_h"), uniform(&[hidden_dim, h3], hidden_dim, rng));
        store.insert(p.name("b_x"), Tensor::zeros(&[h3]));
        store.insert(p.name("b_h"), Tensor::zeros(&[h3]));
        p
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn check(&self, store: &ParamStore) -> Result<()> {
        let h3 = 3 * self.hidden_dim;
        let expect = [
            ("w_x", vec![self.input_dim, h3]),
            ("w_h", vec![self.hidden_dim, h3]),
            ("b_x", vec![h3]),
            ("b_h", vec![h3]),
        ];
        for (part, shape) in expect {
            let n = self.name(part);
            if !store.contains(&n) || store.value(&n).shape() != shape.as_slice() {
                return Err(Error::Shape(format!("GRU parameter {n} expected {shape:?}")));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, store: &ParamStore, trainable: bool) -> BoundGru {
        BoundGru {
            w_x: tape.bind(store, &self.name("w_x"), trainable),
            w_h: tape.bind(store, &self.name("w_h"), trainable),
            b_x: tape.bind(store, &self.name("b_x"), trainable),
            b_h: tape.bind(store, &self.name("b_h"), trainable),
            hidden_dim: self.hidden_dim,
        }
    }
}

impl BoundGru {
    /// Input-side gate pre-activations `x·w_x + b_x`. Independent of the
    /// hidden state, so a whole sequence can be projected at once.
    pub fn project_input(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, self.w_x)?;
        tape.add_row(xw, self.b_x)
    }

    /// One recurrence step from projected input `gx: [batch, 3·hidden]`.
    pub fn step_projected(&self, tape: &mut Tape, gx: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        if tape.shape(h).len() != 2 || tape.shape(h)[1] != hd || tape.shape(gx)[0] != tape.shape(h)[0]
        {
            return Err(Error::Shape(format!(
                "GRU hidden {:?} for projected input {:?}",
                tape.shape(h),
                tape.shape(gx)
            )));
        }
        let hw = tape.matmul(h, self.w_h)?;
        let gh = tape.add_row(hw, self.b_h)?;

        let xr = tape.slice_cols(gx, 0, hd)?;
        let hr = tape.slice_cols(gh, 0, hd)?;
        let r_pre = tape.add(xr, hr)?;
        let r = tape.sigmoid(r_pre);

        let xz = tape.slice_cols(gx, hd, hd)?;
        let hz = tape.slice_cols(gh, hd, hd)?;
        let z_pre = tape.add(xz, hz)?;
        let z = tape.sigmoid(z_pre);

        let xn = tape.slice_cols(gx, 2 * hd, hd)?;
        let hn = tape.slice_cols(gh, 2 * hd, hd)?;
        let rhn = tape.mul(r, hn)?;
        let n_pre = tape.add(xn, rhn)?;
        let n = tape.tanh(n_pre);

        // h' = (1 - z)·n + z·h = n + z·(h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gx = self.project_input(tape, x)?;
        self.step_projected(tape, gx, h)
    }
}

/// One GRU step on plain tensors, without recording a tape.
pub fn gru_step(x: &Tensor, h: &Tensor, cell: &GruCellParams, store: &ParamStore) -> Result<Tensor> {
    cell.check(store)?;
    let hd = cell.hidden_dim;
    if x.shape().len() != 2 || x.cols() != cell.input_dim || h.shape() != [x.rows(), hd] {
        return Err(Error::Shape(format!(
            "GRU step with input {:?} and hidden {:?} for cell {}->{}",
            x.shape(),
            h.shape(),
            cell.input_dim,
            hd
        )));
    }
    let gx = affine_forward(x, store.value(&cell.name("w_x")), store.value(&cell.name("b_x")))?;
    let gh = affine_forward(h, store.value(&cell.name("w_h")), store.value(&cell.name("b_h")))?;
    let mut out = Vec::with_capacity(x.rows() * hd);
    for r in 0..x.rows() {
        let (gxr, ghr, hr) = (gx.row(r), gh.row(r), h.row(r));
        for j in 0..hd {
            let reset = sigmoid(gxr[j] + ghr[j]);
            let update = sigmoid(gxr[hd + j] + ghr[hd + j]);
            let cand = (gxr[2 * hd + j] + reset * ghr[2 * hd + j]).tanh();
            out.push(cand + update * (hr[j] - cand));
        }
    }
    Tensor::new(vec![x.rows(), hd], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar-loop GRU written directly from the gate equations.
    fn gru_oracle(x: &[Vec<f64>], h: &[Vec<f64>], store: &ParamStore, cell: &GruCellParams) -> Vec<Vec<f64>> {
        let hd = cell.hidden_dim;
        let wx = store.value(&cell.name("w_x"));
        let wh = store.value(&cell.name("w_h"));
        let bx = store.value(&cell.name("b_x"));
        let bh = store.value(&cell.name("b_h"));
        let mut out = Vec::new();
        for (xr, hr) in x.iter().zip(h) {
            let gate = |g: usize, j: usize| -> (f64, f64) {
                let col = g * hd + j;
                let mut a = bx.data()[col];
                for (i, xi) in xr.iter().enumerate() {
                    a += xi * wx.get(i, col);
                }
                let mut b = bh.data()[col];
                for (i, hi) in hr.iter().enumerate() {
                    b += hi * wh.get(i, col);
                }
                (a, b)
            };
            let mut row = Vec::new();
            for j in 0..hd {
                let (rx, rh) = gate(0, j);
                let r = sig(rx + rh);
                let (zx, zh) = gate(1, j);
                let z = sig(zx + zh);
                let (nx, nh) = gate(2, j);
                let n = (nx + r * nh).tanh();
                row.push((1.0 - z) * n + z * hr[j]);
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn affine_identity_and_scalar() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = affine_forward(&x, &w, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        let out = affine_forward(
            &Tensor::from_rows(&[vec![1.0]]).unwrap(),
            &Tensor::from_rows(&[vec![3.0]]).unwrap(),
            &Tensor::vector(vec![-1.0]),
        )
        .unwrap();
        assert_eq!(out.data(), &[2.0]);
    }

    #[test]
    fn affine_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, k, n) = (4, 7, 3);
        let x = uniform(&[m, k], 1, &mut rng);
        let w = uniform(&[k, n], 1, &mut rng);
        let b = uniform(&[n], 1, &mut rng);
        let out = affine_forward(&x, &w, &b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let mut s = b.data()[j];
                for l in 0..k {
                    s += x.get(i, l) * w.get(l, j);
                }
                assert!((out.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[2, 3]);
        assert!(affine_forward(&x, &w, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::new("g");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCellParams::init(&mut store, "gru", 3, 4, &mut rng);
        for (_, p) in store.iter_mut() {
            p.value.fill(0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]).unwrap();
        let h = Tensor::zeros(&[1, 4]);
        let out = gru_step(&x, &h, &cell, &store).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn saturated_update_gate_carries_state() {
        let mut store = ParamStore::new("g");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = GruCellParams::init(&mut store, "gru", 3, 4, &mut rng);
        let bx = store.value_mut(&cell.name("b_x"));
        for j in 4..8 {
            bx.data_mut()[j] = 60.0;
        }
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap();
        let h = Tensor::from_rows(&[vec![0.5, -0.25, 0.1, 0.7]]).unwrap();
        let out = gru_step(&x, &h, &cell, &store).unwrap();
        for (a, b) in out.data().iter().zip(h.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut store = ParamStore::new("g");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cell = GruCellParams::init(&mut store, "gru", 5, 6, &mut rng);
        for (_, p) in store.iter_mut() {
            if p.value.shape().len() == 1 {
                p.value = uniform(p.value.shape(), 1, &mut rng);
            }
        }
        let x = uniform(&[2, 5], 1, &mut rng);
        let h = uniform(&[2, 6], 1, &mut rng);
        let rows = |t: &Tensor| (0..t.rows()).map(|r| t.row(r).to_vec()).collect::<Vec<_>>();
        let expect = gru_oracle(&rows(&x), &rows(&h), &store, &cell);
        let got = gru_step(&x, &h, &cell, &store).unwrap();
        for (r, er) in expect.iter().enumerate() {
            for (j, e) in er.iter().enumerate() {
                assert!((got.get(r, j) - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn taped_gru_matches_plain() {
        let mut store = ParamStore::new("g");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = GruCellParams::init(&mut store, "gru", 4, 3, &mut rng);
        let x = uniform(&[3, 4], 1, &mut rng);
        let h = uniform(&[3, 3], 1, &mut rng);
        let mut tape = Tape::new();
        let bound = cell.bind(&mut tape, &store, true);
        let xv = tape.constant(x.clone());
        let hv = tape.constant(h.clone());
        let out = bound.step(&mut tape, xv, hv).unwrap();
        let plain = gru_step(&x, &h, &cell, &store).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gru_shape_mismatch() {
        let mut store = ParamStore::new("g");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cell = GruCellParams::init(&mut store, "gru", 3, 4, &mut rng);
        let x = Tensor::zeros(&[1, 2]);
        let h = Tensor::zeros(&[1, 4]);
        assert!(gru_step(&x, &h, &cell, &store).is_err());
        let x = Tensor::zeros(&[1, 3]);
        let h = Tensor::zeros(&[1, 5]);
        assert!(gru_step(&x, &h, &cell, &store).is_err());
    }
}
