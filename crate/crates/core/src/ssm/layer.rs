use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::diffmath::kernels::softplus;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Per-timestep coefficients of the recurrence: step size per channel and the
/// input/readout vectors shared across channels.
#[derive(Clone, Debug, PartialEq)]
pub struct StepCoeffs {
    pub delta: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// A diagonal SSM layer with `D` channels and `H` states per channel.
pub trait SsmLayer {
    fn d_inner(&self) -> usize;
    fn d_state(&self) -> usize;
    /// Realized continuous-time `A`, shape `[D,H]`, strictly negative.
    fn a(&self) -> Tensor;
    fn skip(&self) -> &[f64];
    /// Step size, `B` and `C` for input `x` (length `D`).
    fn coeffs(&self, x: &[f64]) -> StepCoeffs;
}

/// Selective (input-dependent) layer parameters.
///
/// `B_t = W_B x_t`, `C_t = W_C x_t`, `Δ_t = softplus(W_dt W_dt_in x_t + b_dt)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmLayerParams {
    /// `[D,H]`; realized `A = -exp(a_log)`
    pub a_log: Tensor,
    /// `[H,D]`
    pub w_b: Tensor,
    /// `[H,D]`
    pub w_c: Tensor,
    /// `[D,R]`
    pub w_dt: Tensor,
    /// `[R,D]`
    pub w_dt_in: Tensor,
    /// `[D]`
    pub b_dt: Tensor,
    /// `[D]`
    pub skip_d: Tensor,
}

fn mat_vec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl SsmLayerParams {
    pub fn dt_rank(&self) -> usize {
        self.w_dt.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a_log.shape().first().copied().unwrap_or(0);
        let h = self.a_log.shape().get(1).copied().unwrap_or(0);
        let r = self.w_dt_in.shape().first().copied().unwrap_or(0);
        let expect: [(&str, &Tensor, Vec<usize>); 7] = [
            ("a_log", &self.a_log, vec![d, h]),
            ("w_b", &self.w_b, vec![h, d]),
            ("w_c", &self.w_c, vec![h, d]),
            ("w_dt", &self.w_dt, vec![d, r]),
            ("w_dt_in", &self.w_dt_in, vec![r, d]),
            ("b_dt", &self.b_dt, vec![d]),
            ("skip_d", &self.skip_d, vec![d]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "ssm params",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!("{name} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Draws a random layer: `a_log ~ N(0,1)`, weights `~ N(0, weight_std²)`,
    /// `b_dt` such that the initial step size is log-uniform in `[1e-3, 1e-1]`.
    pub fn random<R: Rng>(rng: &mut R, d: usize, h: usize, dt_rank: usize, weight_std: f64) -> Self {
        let std = Normal::new(0.0, 1.0).unwrap();
        let w = Normal::new(0.0, weight_std).unwrap();
        let mut draw = |shape: &[usize], dist: &Normal<f64>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
        };
        let a_log = draw(&[d, h], &std);
        let w_b = draw(&[h, d], &w);
        let w_c = draw(&[h, d], &w);
        let w_dt = draw(&[d, dt_rank], &w);
        let w_dt_in = draw(&[dt_rank, d], &w);
        SsmLayerParams {
            a_log,
            w_b,
            w_c,
            w_dt,
            w_dt_in,
            b_dt: Tensor::from_vec(dt_bias_init(rng, d)),
            skip_d: Tensor::ones(&[d]),
        }
    }
}

/// Inverse of softplus, used to place initial step sizes.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Biases whose softplus is log-uniform in `[1e-3, 1e-1]`.
pub fn dt_bias_init<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let u = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).unwrap();
    (0..d).map(|_| inverse_softplus(u.sample(rng).exp())).collect()
}

impl SsmLayer for SsmLayerParams {
    fn d_inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    fn d_state(&self) -> usize {
        self.a_log.shape()[1]
    }

    fn a(&self) -> Tensor {
        let vals = self.a_log.data().iter().map(|v| -v.exp()).collect();
        Tensor::new(self.a_log.shape(), vals).unwrap()
    }

    fn skip(&self) -> &[f64] {
        self.skip_d.data()
    }

    fn coeffs(&self, x: &[f64]) -> StepCoeffs {
        let low = mat_vec(&self.w_dt_in, x);
        let delta = mat_vec(&self.w_dt, &low)
            .iter()
            .zip(self.b_dt.data())
            .map(|(v, b)| softplus(v + b))
            .collect();
        StepCoeffs {
            delta,
            b: mat_vec(&self.w_b, x),
            c: mat_vec(&self.w_c, x),
        }
    }
}

/// Time-invariant layer: `Δ`, `B`, `C` are constants rather than projections.
#[derive(Clone, Debug, PartialEq)]
pub struct S4Params {
    /// `[D,H]`, strictly negative
    pub a: Tensor,
    /// `[H]`
    pub b: Vec<f64>,
    /// `[H]`
    pub c: Vec<f64>,
    /// `[D]`, strictly positive
    pub delta: Vec<f64>,
    /// `[D]`
    pub skip_d: Vec<f64>,
}

impl S4Params {
    pub fn random<R: Rng>(rng: &mut R, d: usize, h: usize) -> Self {
        let std = Normal::new(0.0, 1.0).unwrap();
        let a = (0..d * h).map(|_| -Distribution::<f64>::sample(&std, rng).exp()).collect();
        let b = (0..h).map(|_| std.sample(rng)).collect();
        let c = (0..h).map(|_| std.sample(rng)).collect();
        let u = Uniform::new(1e-3f64.ln(), 1e-1f64.ln()).unwrap();
        let delta = (0..d).map(|_| u.sample(rng).exp()).collect();
        S4Params {
            a: Tensor::new(&[d, h], a).unwrap(),
            b,
            c,
            delta,
            skip_d: vec![1.0; d],
        }
    }

    /// The constants an S6 layer would produce for a fixed input vector.
    pub fn frozen_from(params: &SsmLayerParams, x: &[f64]) -> Self {
        let StepCoeffs { delta, b, c } = params.coeffs(x);
        S4Params {
            a: params.a(),
            b,
            c,
            delta,
            skip_d: params.skip_d.data().to_vec(),
        }
    }
}

impl SsmLayer for S4Params {
    fn d_inner(&self) -> usize {
        self.a.shape()[0]
    }

    fn d_state(&self) -> usize {
        self.a.shape()[1]
    }

    fn a(&self) -> Tensor {
        self.a.clone()
    }

    fn skip(&self) -> &[f64] {
        &self.skip_d
    }

    fn coeffs(&self, _x: &[f64]) -> StepCoeffs {
        StepCoeffs {
            delta: self.delta.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
        }
    }
}

/// Either flavour, for code that checks both.
#[derive(Clone, Debug, PartialEq)]
pub enum AnySsm {
    S4(S4Params),
    S6(SsmLayerParams),
}

impl SsmLayer for AnySsm {
    fn d_inner(&self) -> usize {
        match self {
            AnySsm::S4(p) => p.d_inner(),
            AnySsm::S6(p) => p.d_inner(),
        }
    }
    fn d_state(&self) -> usize {
        match self {
            AnySsm::S4(p) => p.d_state(),
            AnySsm::S6(p) => p.d_state(),
        }
    }
    fn a(&self) -> Tensor {
        match self {
            AnySsm::S4(p) => p.a(),
            AnySsm::S6(p) => p.a(),
        }
    }
    fn skip(&self) -> &[f64] {
        match self {
            AnySsm::S4(p) => p.skip(),
            AnySsm::S6(p) => p.skip(),
        }
    }
    fn coeffs(&self, x: &[f64]) -> StepCoeffs {
        match self {
            AnySsm::S4(p) => p.coeffs(x),
            AnySsm::S6(p) => p.coeffs(x),
        }
    }
}
