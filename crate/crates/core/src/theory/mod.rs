//! Executable checks of the prompt/state equivalences: prefixes collapse to an
//! initial state, iterative suffixes to a state offset.

mod suite;

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::ssm::{discretize, scan, ScanHooks, ScanTrace, SsmLayer};

pub use suite::{
    random_instance, run_all, verify_initial_state_closed_form, verify_offset_y_matches_h_s4,
    verify_prefix_equivalence, verify_suffix_equivalence, verify_uniform_effect, verify_decay_monotone,
    naive_suffix_separation, EquivalenceReport, Instance, InstanceKind, SeparationReport, VerifyOutput,
};

/// Smallest `Ā` entry the iterative suffix is allowed to invert.
pub const ABAR_FLOOR: f64 = 1e-300;

/// Final hidden state after scanning `prefix: [V,D]` from a zero state.
pub fn prefix_to_initial_state<L: SsmLayer + ?Sized>(layer: &L, prefix: &Tensor) -> Result<Tensor> {
    if prefix.rank() != 2 || prefix.shape()[0] == 0 {
        return Err(Error::contract(format!(
            "prefix needs at least one virtual token, got shape {:?}",
            prefix.shape()
        )));
    }
    Ok(scan(layer, prefix, &ScanHooks::default())?.final_state())
}

/// Outputs of `prefix ++ x` at the positions of `x`, and of `x` alone started
/// from the state the prefix leaves behind. `V = 0` compares plain scans.
pub fn prefix_pair<L: SsmLayer + ?Sized>(layer: &L, x_seq: &Tensor, prefix: &Tensor) -> Result<(Tensor, Tensor)> {
    let t_len = x_seq.shape()[0];
    let d = layer.d_inner();
    let v = prefix.shape()[0];
    if v == 0 {
        let y = scan(layer, x_seq, &ScanHooks::default())?.y_seq;
        return Ok((y.clone(), y));
    }
    let mut joined = prefix.data().to_vec();
    joined.extend_from_slice(x_seq.data());
    let joined = Tensor::new(&[v + t_len, d], joined)?;
    let full = scan(layer, &joined, &ScanHooks::default())?;
    let tail = Tensor::new(&[t_len, d], full.y_seq.data()[v * d..].to_vec())?;
    let h0 = prefix_to_initial_state(layer, prefix)?;
    let seeded = scan(
        layer,
        x_seq,
        &ScanHooks {
            h0: Some(&h0),
            ..Default::default()
        },
    )?;
    Ok((tail, seeded.y_seq))
}

/// `Ā_s` and `B̄_s x_s` for a suffix embedding `x_s` (length `D`).
fn suffix_terms<L: SsmLayer + ?Sized>(layer: &L, suffix: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if suffix.len() != layer.d_inner() {
        return Err(Error::dim(
            "suffix",
            format!("embedding has {} entries, expected {}", suffix.len(), layer.d_inner()),
        ));
    }
    let coeffs = layer.coeffs(suffix);
    let disc = discretize(&layer.a(), &coeffs.delta, &coeffs.b)?;
    if let Some(v) = disc.abar.iter().find(|&&v| v < ABAR_FLOOR) {
        return Err(Error::Numeric(format!("suffix Ā entry {v:e} is below {ABAR_FLOOR:e}")));
    }
    let input = disc.input_term(suffix);
    Ok((disc.abar, input))
}

/// The state offset an iterative suffix is equivalent to: `Ā_s⁻¹ B̄_s x_s`, `[D,H]`.
pub fn suffix_state_offset<L: SsmLayer + ?Sized>(layer: &L, suffix: &[f64]) -> Result<Tensor> {
    let (abar, input) = suffix_terms(layer, suffix)?;
    let h = layer.d_state();
    let vals = input.iter().zip(&abar).map(|(b, a)| b / a).collect();
    Tensor::new(&[layer.d_inner(), h], vals)
}

/// Iterative suffix with `t` as the current step: the suffix is appended
/// after `x_t`, the resulting state is shifted back by `Ā_s⁻¹`, and read out
/// with `C_t`.
///
/// `y_t = C_t Ā_s⁻¹ (Ā_s h_t + B̄_s x_s) + skip ⊙ x_t`
pub fn iterative_suffix_forward<L: SsmLayer + ?Sized>(layer: &L, x_seq: &Tensor, suffix: &[f64]) -> Result<Tensor> {
    let (abar_s, input_s) = suffix_terms(layer, suffix)?;
    let trace = scan(layer, x_seq, &ScanHooks::default())?;
    let (d, h) = (layer.d_inner(), layer.d_state());
    let skip = layer.skip();
    let mut out = Vec::with_capacity(trace.len() * d);
    for t in 0..trace.len() {
        let state = trace.state(t);
        let c = trace.c_seq.row(t);
        let x = x_seq.row(t);
        for dd in 0..d {
            let mut y = skip[dd] * x[dd];
            for n in 0..h {
                let k = dd * h + n;
                let appended = abar_s[k] * state[k] + input_s[k];
                y += c[n] * (appended / abar_s[k]);
            }
            out.push(y);
        }
    }
    Tensor::new(&[trace.len(), d], out)
}

/// Iterative suffix with the suffix position as the current step: the output
/// is read at the suffix with `C_s`, so the readout no longer depends on `x_t`.
///
/// `y_t = C_s (Ā_s h_t + B̄_s x_s) + skip ⊙ x_s`
pub fn naive_suffix_forward<L: SsmLayer + ?Sized>(layer: &L, x_seq: &Tensor, suffix: &[f64]) -> Result<Tensor> {
    let (abar_s, input_s) = suffix_terms(layer, suffix)?;
    let c_s = layer.coeffs(suffix).c;
    let trace = scan(layer, x_seq, &ScanHooks::default())?;
    let (d, h) = (layer.d_inner(), layer.d_state());
    let skip = layer.skip();
    let mut out = Vec::with_capacity(trace.len() * d);
    for t in 0..trace.len() {
        let state = trace.state(t);
        for dd in 0..d {
            let mut y = skip[dd] * suffix[dd];
            for n in 0..h {
                let k = dd * h + n;
                y += c_s[n] * (abar_s[k] * state[k] + input_s[k]);
            }
            out.push(y);
        }
    }
    Tensor::new(&[trace.len(), d], out)
}

/// Output change caused by a trained initial state, in closed form:
/// `C_t (∏_{i≤t} Ā_i) h'`, using the factors stored in a zero-state trace.
pub fn initial_state_closed_form(trace: &ScanTrace, h_prime: &Tensor) -> Result<Tensor> {
    let (d, h) = (trace.h_seq.shape()[1], trace.h_seq.shape()[2]);
    if h_prime.shape() != [d, h] {
        return Err(Error::dim("initial_state", format!("h' {:?}, expected [{d}, {h}]", h_prime.shape())));
    }
    let mut prod = vec![1.0; d * h];
    let mut out = Vec::with_capacity(trace.len() * d);
    for t in 0..trace.len() {
        prod.iter_mut().zip(trace.abar(t)).for_each(|(p, a)| *p *= a);
        let c = trace.c_seq.row(t);
        for dd in 0..d {
            let y: f64 = (0..h).map(|n| c[n] * prod[dd * h + n] * h_prime.data()[dd * h + n]).sum();
            out.push(y);
        }
    }
    Tensor::new(&[trace.len(), d], out)
}

/// Running products `∏_{i≤t} Ā_i`, shape `[T,D,H]`.
pub fn abar_products(trace: &ScanTrace) -> Tensor {
    let dh = trace.h_seq.shape()[1] * trace.h_seq.shape()[2];
    let mut prod = vec![1.0; dh];
    let mut out = Vec::with_capacity(trace.len() * dh);
    for t in 0..trace.len() {
        prod.iter_mut().zip(trace.abar(t)).for_each(|(p, a)| *p *= a);
        out.extend_from_slice(&prod);
    }
    Tensor::new(trace.h_seq.shape(), out).unwrap()
}

/// One position in a token layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Token {
    /// i-th virtual token, 1-based
    Virtual(usize),
    /// input `x_i`, 1-based
    Input(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutMode {
    Prefix,
    Suffix,
    IterativeSuffix,
}

/// Sequence seen by the model at step `T` and at step `T+1`.
pub fn token_layout(mode: LayoutMode, t: usize, v: usize) -> Result<[Vec<Token>; 2]> {
    if t == 0 || v == 0 {
        return Err(Error::contract(format!("token layout needs T >= 1 and V >= 1, got T={t}, V={v}")));
    }
    let virt: Vec<Token> = (1..=v).map(Token::Virtual).collect();
    let inputs = |n: usize| (1..=n).map(Token::Input).collect::<Vec<_>>();
    let join = |parts: &[&[Token]]| parts.concat();
    Ok(match mode {
        LayoutMode::Prefix => [join(&[&virt, &inputs(t)]), join(&[&virt, &inputs(t + 1)])],
        LayoutMode::Suffix => [
            join(&[&inputs(t), &virt]),
            join(&[&inputs(t), &virt, &[Token::Input(t + 1)]]),
        ],
        LayoutMode::IterativeSuffix => [join(&[&inputs(t), &virt]), join(&[&inputs(t + 1), &virt])],
    })
}

/// Per-step effect sizes of an initial state versus a state offset holding
/// the same `h'`.
#[derive(Clone, Debug, Serialize)]
pub struct DecayProfile {
    /// `‖ŷ_t − y_t‖` with `h0 = h'`
    pub initial_state: Vec<f64>,
    /// `‖ŷ_t − y_t‖` with offset `h'`
    pub state_offset: Vec<f64>,
    /// largest entry of `∏_{i≤t} Ā_i`
    pub coefficient: Vec<f64>,
}

pub fn effect_decay_profile<L: SsmLayer + ?Sized>(layer: &L, x_seq: &Tensor, h_prime: &Tensor) -> Result<DecayProfile> {
    let base = scan(layer, x_seq, &ScanHooks::default())?;
    let init = scan(
        layer,
        x_seq,
        &ScanHooks {
            h0: Some(h_prime),
            ..Default::default()
        },
    )?;
    let off = scan(
        layer,
        x_seq,
        &ScanHooks {
            offset_h: Some(h_prime),
            ..Default::default()
        },
    )?;
    let norms = |other: &ScanTrace| -> Vec<f64> {
        (0..base.len())
            .map(|t| {
                other
                    .output(t)
                    .iter()
                    .zip(base.output(t))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    };
    let prods = abar_products(&base);
    let dh = h_prime.len();
    let coefficient = prods
        .data()
        .chunks(dh.max(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    Ok(DecayProfile {
        initial_state: norms(&init),
        state_offset: norms(&off),
        coefficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::{S4Params, SsmLayerParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s4(abar: f64, bbar: f64, c: f64) -> S4Params {
        S4Params {
            a: Tensor::new(&[1, 1], vec![abar.ln()]).unwrap(),
            b: vec![bbar],
            c: vec![c],
            delta: vec![1.0],
            skip_d: vec![0.0],
        }
    }

    #[test]
    fn one_token_prefix_is_bbar_x() {
        let p = s4(0.6, 1.5, 1.0);
        let h = prefix_to_initial_state(&p, &Tensor::new(&[1, 1], vec![2.0]).unwrap()).unwrap();
        assert!((h.data()[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn two_token_prefix_sums_decayed_inputs() {
        let (abar, bbar) = (0.6, 1.5);
        let p = s4(abar, bbar, 1.0);
        // rows are x_{-1}, x_0
        let h = prefix_to_initial_state(&p, &Tensor::new(&[2, 1], vec![2.0, -0.5]).unwrap()).unwrap();
        let expect = abar * bbar * 2.0 + bbar * -0.5;
        assert!((h.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn three_token_prefix_matches_hand_unroll() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SsmLayerParams::random(&mut rng, 2, 3, 1, 0.5);
        let rows = [[0.3, -1.1], [0.9, 0.2], [-0.4, 0.7]];
        let prefix = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        let got = prefix_to_initial_state(&p, &prefix).unwrap();
        let a = p.a();
        let mut state = [[0.0; 3]; 2];
        for x in rows {
            let c = p.coeffs(&x);
            for d in 0..2 {
                for n in 0..3 {
                    let abar = (c.delta[d] * a.at(&[d, n])).exp();
                    state[d][n] = abar * state[d][n] + c.delta[d] * c.b[n] * x[d];
                }
            }
        }
        for d in 0..2 {
            for n in 0..3 {
                assert!((got.at(&[d, n]) - state[d][n]).abs() < 1e-15);
            }
        }
        assert!(prefix_to_initial_state(&p, &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn layouts_follow_generation_step() {
        use Token::{Input as I, Virtual as V};
        let [a, b] = token_layout(LayoutMode::Prefix, 2, 1).unwrap();
        assert_eq!(a, vec![V(1), I(1), I(2)]);
        assert_eq!(b, vec![V(1), I(1), I(2), I(3)]);
        let [a, b] = token_layout(LayoutMode::Suffix, 2, 1).unwrap();
        assert_eq!(a, vec![I(1), I(2), V(1)]);
        assert_eq!(b, vec![I(1), I(2), V(1), I(3)]);
        let [a, b] = token_layout(LayoutMode::IterativeSuffix, 2, 1).unwrap();
        assert_eq!(a, vec![I(1), I(2), V(1)]);
        assert_eq!(b, vec![I(1), I(2), I(3), V(1)]);
        assert!(token_layout(LayoutMode::Prefix, 0, 1).is_err());
    }

    #[test]
    fn vanishing_step_suffix_reduces_to_plain_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = SsmLayerParams::random(&mut rng, 3, 2, 1, 0.3);
        p.b_dt = Tensor::full(&[3], -60.0);
        let x = Tensor::new(&[5, 3], (0..15).map(|i| (i as f64).cos()).collect()).unwrap();
        let plain = crate::ssm::s6_scan(&p, &x, None).unwrap();
        let it = iterative_suffix_forward(&p, &x, &[0.0; 3]).unwrap();
        assert!(it.max_abs_diff(&plain.y_seq) < 1e-20);
    }

    #[test]
    fn s4_naive_is_shifted_iterative_for_one_state() {
        let p = S4Params {
            a: Tensor::new(&[1, 1], vec![-0.7]).unwrap(),
            b: vec![1.3],
            c: vec![0.8],
            delta: vec![0.4],
            skip_d: vec![0.5],
        };
        let x = Tensor::new(&[4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let s = [0.9];
        let it = iterative_suffix_forward(&p, &x, &s).unwrap();
        let nv = naive_suffix_forward(&p, &x, &s).unwrap();
        let abar = (0.4f64 * -0.7).exp();
        for t in 0..4 {
            let lhs = nv.data()[t] - 0.5 * s[0];
            let rhs = abar * (it.data()[t] - 0.5 * x.data()[t]);
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_input_initial_state_effect_is_geometric() {
        let (abar, c, h0) = (0.7, 1.5, 2.0);
        let mut p = s4(abar, 0.9, c);
        p.skip_d = vec![1.0];
        let x = Tensor::full(&[6, 1], 0.4);
        let prof = effect_decay_profile(&p, &x, &Tensor::new(&[1, 1], vec![h0]).unwrap()).unwrap();
        for t in 0..6 {
            let expect = (c * h0).abs() * abar.powi(t as i32 + 1);
            assert!((prof.initial_state[t] - expect).abs() < 1e-12);
            assert!((prof.state_offset[t] - (c * h0).abs()).abs() < 1e-12);
        }
    }
}
