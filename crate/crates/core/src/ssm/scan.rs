//! Sequential recurrence `h_t = Ā_t ⊙ h_{t-1} + B̄_t x_t`, `y_t = C_t h_t + D ⊙ x_t`.

use super::layer::{S4Params, SsmLayer, SsmLayerParams};
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Discretized step: `Ā = exp(ΔA)` (zero-order hold) and `B̄ = ΔB` (Euler).
#[derive(Clone, Debug)]
pub struct Discretized {
    /// `[D,H]`, every entry in (0,1)
    pub abar: Vec<f64>,
    /// `[D,H]`, `delta[d] * b[n]`
    pub bbar: Vec<f64>,
    d: usize,
    h: usize,
}

impl Discretized {
    /// Input contribution `B̄ x` for input `x` (length `D`), shape `[D,H]`.
    pub fn input_term(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bbar.clone();
        for (row, &xd) in out.chunks_mut(self.h).zip(x) {
            row.iter_mut().for_each(|v| *v *= xd);
        }
        out
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.h)
    }
}

pub fn discretize(a: &Tensor, delta: &[f64], b: &[f64]) -> Result<Discretized> {
    let (d, h) = (a.shape()[0], a.shape()[1]);
    if delta.len() != d || b.len() != h {
        return Err(Error::dim(
            "discretize",
            format!("A {:?}, delta {}, B {}", a.shape(), delta.len(), b.len()),
        ));
    }
    if let Some((i, v)) = delta.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
        return Err(Error::contract(format!(
            "step size delta[{i}] = {v} is not positive (missing softplus?)"
        )));
    }
    let mut abar = Vec::with_capacity(d * h);
    let mut bbar = Vec::with_capacity(d * h);
    for (row, &dt) in a.data().chunks(h).zip(delta) {
        abar.extend(row.iter().map(|&an| (dt * an).exp()));
        bbar.extend(b.iter().map(|&bn| dt * bn));
    }
    Ok(Discretized { abar, bbar, d, h })
}

/// Recorded states and outputs of one scan.
#[derive(Clone, Debug)]
pub struct ScanTrace {
    /// `[T,D,H]`
    pub h_seq: Tensor,
    /// `[T,D]`
    pub y_seq: Tensor,
    /// `[T,D,H]`
    pub abar_seq: Tensor,
    /// `[T,H]` readout vectors `C_t`
    pub c_seq: Tensor,
}

impl ScanTrace {
    pub fn len(&self) -> usize {
        self.y_seq.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, t: usize) -> &[f64] {
        let dh = self.h_seq.shape()[1] * self.h_seq.shape()[2];
        &self.h_seq.data()[t * dh..(t + 1) * dh]
    }

    pub fn abar(&self, t: usize) -> &[f64] {
        let dh = self.abar_seq.shape()[1] * self.abar_seq.shape()[2];
        &self.abar_seq.data()[t * dh..(t + 1) * dh]
    }

    pub fn final_state(&self) -> Tensor {
        let s = self.h_seq.shape();
        Tensor::new(&[s[1], s[2]], self.state(self.len() - 1).to_vec()).unwrap()
    }

    pub fn output(&self, t: usize) -> &[f64] {
        self.y_seq.row(t)
    }
}

/// Adapter hooks understood by the plain scan.
#[derive(Clone, Debug, Default)]
pub struct ScanHooks<'a> {
    /// initial state `[D,H]`; zeros when absent
    pub h0: Option<&'a Tensor>,
    /// state offset `h'` `[D,H]`: adds `C_t h'` to every output
    pub offset_h: Option<&'a Tensor>,
    /// output offset `y'` `[D]`
    pub offset_y: Option<&'a [f64]>,
}

pub fn scan<L: SsmLayer + ?Sized>(layer: &L, x_seq: &Tensor, hooks: &ScanHooks<'_>) -> Result<ScanTrace> {
    let (d, h) = (layer.d_inner(), layer.d_state());
    if x_seq.rank() != 2 || x_seq.shape()[1] != d {
        return Err(Error::dim(
            "scan",
            format!("input {:?} does not match D = {d}", x_seq.shape()),
        ));
    }
    let t_len = x_seq.shape()[0];
    if t_len == 0 {
        return Err(Error::contract("scan needs at least one timestep"));
    }
    if !x_seq.is_finite() {
        return Err(Error::Numeric("scan input has non-finite entries".into()));
    }
    for (name, t) in [("h0", hooks.h0), ("offset_h", hooks.offset_h)] {
        if let Some(t) = t {
            if t.shape() != [d, h] {
                return Err(Error::dim("scan", format!("{name} {:?}, expected [{d}, {h}]", t.shape())));
            }
        }
    }
    if let Some(y) = hooks.offset_y {
        if y.len() != d {
            return Err(Error::dim("scan", format!("offset_y has {} entries, expected {d}", y.len())));
        }
    }

    let a = layer.a();
    let skip = layer.skip();
    let mut state = hooks.h0.map_or_else(|| vec![0.0; d * h], |t| t.data().to_vec());
    let mut h_seq = Vec::with_capacity(t_len * d * h);
    let mut abar_seq = Vec::with_capacity(t_len * d * h);
    let mut c_seq = Vec::with_capacity(t_len * h);
    let mut y_seq = Vec::with_capacity(t_len * d);

    for t in 0..t_len {
        let x = x_seq.row(t);
        let coeffs = layer.coeffs(x);
        let disc = discretize(&a, &coeffs.delta, &coeffs.b)?;
        let input = disc.input_term(x);
        for ((s, ab), inp) in state.iter_mut().zip(&disc.abar).zip(&input) {
            *s = ab * *s + inp;
        }
        for dd in 0..d {
            let row = &state[dd * h..(dd + 1) * h];
            let mut y: f64 = row.iter().zip(&coeffs.c).map(|(s, c)| s * c).sum();
            if let Some(off) = hooks.offset_h {
                let off_row = &off.data()[dd * h..(dd + 1) * h];
                y += off_row.iter().zip(&coeffs.c).map(|(o, c)| o * c).sum::<f64>();
            }
            if let Some(off) = hooks.offset_y {
                y += off[dd];
            }
            y += skip[dd] * x[dd];
            y_seq.push(y);
        }
        h_seq.extend_from_slice(&state);
        abar_seq.extend_from_slice(&disc.abar);
        c_seq.extend_from_slice(&coeffs.c);
    }

    Ok(ScanTrace {
        h_seq: Tensor::new(&[t_len, d, h], h_seq)?,
        y_seq: Tensor::new(&[t_len, d], y_seq)?,
        abar_seq: Tensor::new(&[t_len, d, h], abar_seq)?,
        c_seq: Tensor::new(&[t_len, h], c_seq)?,
    })
}

/// Selective scan; `h0` defaults to zeros.
pub fn s6_scan(params: &SsmLayerParams, x_seq: &Tensor, h0: Option<&Tensor>) -> Result<ScanTrace> {
    scan(params, x_seq, &ScanHooks { h0, ..Default::default() })
}

/// Time-invariant scan; `h0` defaults to zeros.
pub fn s4_scan(params: &S4Params, x_seq: &Tensor, h0: Option<&Tensor>) -> Result<ScanTrace> {
    scan(params, x_seq, &ScanHooks { h0, ..Default::default() })
}
