use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    abar_products, initial_state_closed_form, iterative_suffix_forward, naive_suffix_forward, prefix_pair,
    suffix_state_offset,
};
use crate::diffmath::Tensor;
use crate::error::Result;
use crate::ssm::{scan, AnySsm, S4Params, ScanHooks, SsmLayer, SsmLayerParams};

/// Outcome of one randomized identity check. `passed` holds exactly when
/// `max_abs_error <= tolerance`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub name: String,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub instances: usize,
    pub passed: bool,
    /// seed of the instance with the largest error
    pub worst_seed: Option<u64>,
}

impl EquivalenceReport {
    fn from_errors(name: &str, tolerance: f64, errors: &[(u64, f64)]) -> Self {
        let mut worst: Option<(u64, f64)> = None;
        for &(seed, err) in errors {
            // NaN counts as the worst possible error
            let replace = match worst {
                None => true,
                Some((_, w)) => !w.is_nan() && (err.is_nan() || err > w),
            };
            if replace {
                worst = Some((seed, err));
            }
        }
        let max_abs_error = worst.map_or(0.0, |w| w.1);
        EquivalenceReport {
            name: name.to_string(),
            max_abs_error,
            tolerance,
            instances: errors.len(),
            passed: max_abs_error <= tolerance,
            worst_seed: worst.map(|w| w.0),
        }
    }
}

/// Demonstration that two computations differ by more than `threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub name: String,
    pub gap: f64,
    pub threshold: f64,
    pub passed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InstanceKind {
    S4,
    S6,
    /// S4 for even seeds, S6 for odd
    Mixed,
}

/// Random layer plus input: `D ∈ [1,4]`, `H ∈ [1,8]`, `T ∈ [1,16]`,
/// `A_log ~ N(0,1)`, S6 weights `~ N(0, 0.02²)`, `x ~ N(0,1)`.
#[derive(Clone, Debug)]
pub struct Instance {
    pub seed: u64,
    pub layer: AnySsm,
    pub x: Tensor,
}

pub fn random_instance(seed: u64, kind: InstanceKind) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(1..=4);
    let h = rng.random_range(1..=8);
    let t = rng.random_range(1..=16);
    let s6 = match kind {
        InstanceKind::S4 => false,
        InstanceKind::S6 => true,
        InstanceKind::Mixed => seed % 2 == 1,
    };
    let layer = if s6 {
        let r = rng.random_range(1..=d);
        AnySsm::S6(SsmLayerParams::random(&mut rng, d, h, r, 0.02))
    } else {
        AnySsm::S4(S4Params::random(&mut rng, d, h))
    };
    let x = normal(&mut rng, &[t, d], 1.0);
    Instance { seed, layer, x }
}

fn normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
}

/// Runs `check` on `n` seeds starting at `base`, in parallel, collecting in seed order.
fn sweep<F>(n: usize, base: u64, check: F) -> Result<Vec<(u64, f64)>>
where
    F: Fn(u64) -> Result<f64> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| check(base + i).map(|e| (base + i, e)))
        .collect()
}

/// Scanning `prefix ++ x` equals scanning `x` from the prefix's final state.
/// `V ∈ [1,4]`; every tenth instance uses `V = 0`.
pub fn verify_prefix_equivalence(n: usize, base_seed: u64) -> Result<EquivalenceReport> {
    let errors = sweep(n, base_seed, |seed| {
        let inst = random_instance(seed, InstanceKind::Mixed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let v = if seed % 10 == 9 { 0 } else { rng.random_range(1..=4) };
        let prefix = normal(&mut rng, &[v, inst.layer.d_inner()], 1.0);
        let (a, b) = prefix_pair(&inst.layer, &inst.x, &prefix)?;
        Ok(a.max_abs_diff(&b))
    })?;
    Ok(EquivalenceReport::from_errors("prefix_equals_initial_state", 1e-10, &errors))
}

/// The iterative suffix equals a state offset `h' = Ā_s⁻¹ B̄_s x_s`.
pub fn verify_suffix_equivalence(n: usize, base_seed: u64) -> Result<EquivalenceReport> {
    let errors = sweep(n, base_seed, |seed| {
        let inst = random_instance(seed, InstanceKind::Mixed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51f1_5eed);
        let suffix = normal(&mut rng, &[inst.layer.d_inner()], 1.0);
        let it = iterative_suffix_forward(&inst.layer, &inst.x, suffix.data())?;
        let h_prime = suffix_state_offset(&inst.layer, suffix.data())?;
        let off = scan(
            &inst.layer,
            &inst.x,
            &ScanHooks {
                offset_h: Some(&h_prime),
                ..Default::default()
            },
        )?;
        Ok(it.max_abs_diff(&off.y_seq))
    })?;
    Ok(EquivalenceReport::from_errors("iterative_suffix_equals_state_offset_h", 1e-10, &errors))
}

/// Largest gap between the two suffix readouts on an input-dependent layer
/// with unit-scale weights.
pub fn naive_suffix_separation(seed: u64) -> Result<SeparationReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layer = SsmLayerParams::random(&mut rng, 4, 4, 2, 1.0);
    let x = normal(&mut rng, &[8, 4], 1.0);
    let suffix = normal(&mut rng, &[4], 1.0);
    let it = iterative_suffix_forward(&layer, &x, suffix.data())?;
    let nv = naive_suffix_forward(&layer, &x, suffix.data())?;
    let gap = it.max_abs_diff(&nv);
    Ok(SeparationReport {
        name: "naive_suffix_differs_from_iterative".into(),
        gap,
        threshold: 1e-3,
        passed: gap > 1e-3,
    })
}

/// Scan with `h0 = h'` minus scan from zero equals `C_t (∏ Ā_i) h'`.
pub fn verify_initial_state_closed_form(n: usize, base_seed: u64) -> Result<EquivalenceReport> {
    let errors = sweep(n, base_seed, |seed| {
        let inst = random_instance(seed, InstanceKind::Mixed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1717);
        let h_prime = normal(&mut rng, &[inst.layer.d_inner(), inst.layer.d_state()], 1.0);
        let base = scan(&inst.layer, &inst.x, &ScanHooks::default())?;
        let seeded = scan(
            &inst.layer,
            &inst.x,
            &ScanHooks {
                h0: Some(&h_prime),
                ..Default::default()
            },
        )?;
        let closed = initial_state_closed_form(&base, &h_prime)?;
        let diff: Vec<f64> = seeded.y_seq.data().iter().zip(base.y_seq.data()).map(|(a, b)| a - b).collect();
        let diff = Tensor::new(closed.shape(), diff)?;
        Ok(diff.max_abs_diff(&closed))
    })?;
    Ok(EquivalenceReport::from_errors("initial_state_closed_form", 1e-10, &errors))
}

/// In a time-invariant layer, offset `y' = C h'` reproduces offset `h'`.
pub fn verify_offset_y_matches_h_s4(n: usize, base_seed: u64) -> Result<EquivalenceReport> {
    let errors = sweep(n, base_seed, |seed| {
        let inst = random_instance(seed, InstanceKind::S4);
        let AnySsm::S4(layer) = &inst.layer else { unreachable!() };
        let (d, h) = (layer.d_inner(), layer.d_state());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let h_prime = normal(&mut rng, &[d, h], 1.0);
        let y_prime: Vec<f64> = h_prime
            .data()
            .chunks(h)
            .map(|row| row.iter().zip(&layer.c).map(|(o, c)| o * c).sum())
            .collect();
        let with_h = scan(
            layer,
            &inst.x,
            &ScanHooks {
                offset_h: Some(&h_prime),
                ..Default::default()
            },
        )?;
        let with_y = scan(
            layer,
            &inst.x,
            &ScanHooks {
                offset_y: Some(&y_prime),
                ..Default::default()
            },
        )?;
        Ok(with_h.y_seq.max_abs_diff(&with_y.y_seq))
    })?;
    Ok(EquivalenceReport::from_errors("s4_offset_y_equals_offset_h", 1e-12, &errors))
}

/// `ŷ_t − y_t` under a state offset (`h` or `y` variant) does not move when
/// `x_1..x_{t-1}` are perturbed. Each instance draws a random `t` and
/// `perturbations` random perturbations.
pub fn verify_uniform_effect(n: usize, perturbations: usize, base_seed: u64, variant_y: bool) -> Result<EquivalenceReport> {
    let errors = sweep(n, base_seed, |seed| {
        let inst = random_instance(seed, InstanceKind::S6);
        let (d, h) = (inst.layer.d_inner(), inst.layer.d_state());
        let t_len = inst.x.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let h_prime = normal(&mut rng, &[d, h], 1.0);
        let y_prime = normal(&mut rng, &[d], 1.0);
        let hooks = if variant_y {
            ScanHooks {
                offset_y: Some(y_prime.data()),
                ..Default::default()
            }
        } else {
            ScanHooks {
                offset_h: Some(&h_prime),
                ..Default::default()
            }
        };
        let t = rng.random_range(0..t_len);
        let delta_at = |x: &Tensor| -> Result<Vec<f64>> {
            let base = scan(&inst.layer, x, &ScanHooks::default())?;
            let adapted = scan(&inst.layer, x, &hooks)?;
            Ok(adapted.output(t).iter().zip(base.output(t)).map(|(a, b)| a - b).collect())
        };
        let reference = delta_at(&inst.x)?;
        let mut worst: f64 = 0.0;
        for _ in 0..perturbations {
            let mut x = inst.x.clone();
            let noise = normal(&mut rng, &[t * d], 1.0);
            x.data_mut()[..t * d].iter_mut().zip(noise.data()).for_each(|(v, e)| *v += e);
            let delta = delta_at(&x)?;
            let err = delta.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
        Ok(worst)
    })?;
    let name = if variant_y {
        "uniform_effect_state_offset_y"
    } else {
        "uniform_effect_state_offset_h"
    };
    Ok(EquivalenceReport::from_errors(name, 1e-12, &errors))
}

/// `∏_{i≤t} Ā_i` decreases in `t` for every entry. The error is the largest
/// step `P_t − P_{t−1}` that fails to be negative (zero when every step is a
/// strict decrease), so the tolerance is zero and equality counts as failure
/// through `strict_failures`.
pub fn verify_decay_monotone(n: usize, base_seed: u64) -> Result<(EquivalenceReport, usize)> {
    let results: Vec<(u64, f64, usize)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i;
            let inst = random_instance(seed, InstanceKind::Mixed);
            let trace = scan(&inst.layer, &inst.x, &ScanHooks::default())?;
            let prods = abar_products(&trace);
            let dh = prods.shape()[1] * prods.shape()[2];
            let mut worst: f64 = 0.0;
            let mut strict_failures = 0;
            let mut prev = vec![1.0; dh];
            for chunk in prods.data().chunks(dh) {
                for (p, q) in chunk.iter().zip(&prev) {
                    if p >= q {
                        strict_failures += 1;
                        worst = worst.max(p - q);
                    }
                }
                prev = chunk.to_vec();
            }
            Ok((seed, worst, strict_failures))
        })
        .collect::<Result<_>>()?;
    let errors: Vec<(u64, f64)> = results.iter().map(|&(s, e, _)| (s, e)).collect();
    let failures = results.iter().map(|r| r.2).sum();
    let mut report = EquivalenceReport::from_errors("initial_state_decay_monotone", 0.0, &errors);
    if failures > 0 {
        report.passed = false;
        report.worst_seed = results.iter().find(|r| r.2 > 0).map(|r| r.0);
    }
    Ok((report, failures))
}

/// Everything `verify` prints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyOutput {
    pub equivalence: Vec<EquivalenceReport>,
    pub separation: Vec<SeparationReport>,
    pub passed: bool,
}

/// The full randomized suite: 100 instances per identity, 50 perturbations
/// per uniform-effect instance.
pub fn run_all(base_seed: u64) -> Result<VerifyOutput> {
    let (monotone, _) = verify_decay_monotone(100, base_seed)?;
    let equivalence = vec![
        verify_prefix_equivalence(100, base_seed)?,
        verify_suffix_equivalence(100, base_seed)?,
        verify_initial_state_closed_form(100, base_seed)?,
        verify_offset_y_matches_h_s4(100, base_seed)?,
        verify_uniform_effect(100, 50, base_seed, false)?,
        verify_uniform_effect(100, 50, base_seed, true)?,
        monotone,
    ];
    let separation = vec![naive_suffix_separation(base_seed)?];
    let passed = equivalence.iter().all(|r| r.passed) && separation.iter().all(|r| r.passed);
    Ok(VerifyOutput {
        equivalence,
        separation,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_tracks_worst_seed() {
        let r = EquivalenceReport::from_errors("x", 1e-3, &[(5, 1e-4), (6, 2e-3), (7, 0.0)]);
        assert_eq!(r.worst_seed, Some(6));
        assert!(!r.passed);
        assert_eq!(r.instances, 3);
        let nan = EquivalenceReport::from_errors("x", 1e-3, &[(1, 0.0), (2, f64::NAN), (3, 5.0)]);
        assert_eq!(nan.worst_seed, Some(2));
        assert!(!nan.passed);
    }

    #[test]
    fn instances_are_reproducible_and_mixed() {
        let a = random_instance(3, InstanceKind::Mixed);
        let b = random_instance(3, InstanceKind::Mixed);
        assert!(a.x.bit_eq(&b.x));
        assert!(matches!(a.layer, AnySsm::S6(_)));
        assert!(matches!(random_instance(4, InstanceKind::Mixed).layer, AnySsm::S4(_)));
    }

    #[test]
    fn small_suites_pass() {
        assert!(verify_prefix_equivalence(20, 0).unwrap().passed);
        assert!(verify_suffix_equivalence(20, 0).unwrap().passed);
        assert!(verify_initial_state_closed_form(20, 0).unwrap().passed);
        assert!(verify_offset_y_matches_h_s4(20, 0).unwrap().passed);
        assert!(naive_suffix_separation(0).unwrap().passed);
    }
}
