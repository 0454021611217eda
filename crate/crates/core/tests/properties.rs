use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use ssm_peft::diffmath::{finite_difference_check, Tape, Tensor};
use ssm_peft::error::{Error, Result};
use ssm_peft::ssm::{s4_scan, s6_scan, S4Params, SsmLayerParams};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect::<Vec<f64>>();
    Tensor::new(shape, v).unwrap()
}

/// Contracts `out` with a fixed random tensor so every output entry matters.
fn contract(tape: &mut Tape, out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = randn(&mut rng, out.shape(), 1.0);
    let prod = tape.mul(out, &w)?;
    tape.sum(&prod)
}

type Op = fn(&mut Tape, &[Tensor], &mut ChaCha8Rng) -> Result<Tensor>;

/// Draws inputs with `gen`, builds `op` on them and checks 100 instances.
fn sweep(name: &str, gen: fn(&mut ChaCha8Rng) -> Vec<Tensor>, op: Op) {
    let mut worst: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = gen(&mut rng);
        let op_seed: u64 = rng.random();
        let loss = |tape: &mut Tape, p: &[Tensor]| {
            let mut r = ChaCha8Rng::seed_from_u64(op_seed);
            let out = op(tape, p, &mut r)?;
            contract(tape, &out, op_seed)
        };
        let report = finite_difference_check(loss, &inputs, EPS).unwrap();
        worst = worst.max(report.max_rel_error);
        assert!(
            report.max_rel_error <= TOL,
            "{name} seed {seed}: rel error {:e} at {:?} (analytic {}, numeric {})",
            report.max_rel_error,
            report.worst,
            report.worst_analytic,
            report.worst_numeric
        );
    }
    eprintln!("{name:12} worst rel error {worst:.2e}");
}

fn dims(rng: &mut ChaCha8Rng) -> [usize; 2] {
    [rng.random_range(1..=4), rng.random_range(1..=5)]
}

fn one(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![randn(rng, &s, 1.5)]
}

fn two_same(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let s = dims(rng);
    vec![randn(rng, &s, 1.0), randn(rng, &s, 1.0)]
}

fn two_matmul(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    vec![randn(rng, &[m, k], 1.0), randn(rng, &[k, n], 1.0)]
}

fn two_matmul_t(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
    vec![randn(rng, &[m, k], 1.0), randn(rng, &[n, k], 1.0)]
}

fn wide(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    // a single-column norm is constant up to eps, so its gradient is pure roundoff
    let s = [rng.random_range(1..=4), rng.random_range(2..=5)];
    vec![randn(rng, &s, 1.5)]
}

fn row(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let n = rng.random_range(1..=5);
    vec![randn(rng, &[n], 1.0)]
}

#[test]
fn elementwise_primitives_match_central_differences() {
    sweep("add", two_same, |t, p, _| t.add(&p[0], &p[1]));
    sweep("sub", two_same, |t, p, _| t.sub(&p[0], &p[1]));
    sweep("mul", two_same, |t, p, _| t.mul(&p[0], &p[1]));
    sweep("scale", one, |t, p, r| t.scale(&p[0], r.random_range(-2.0..2.0)));
    sweep("exp", one, |t, p, _| t.exp(&p[0]));
    sweep("softplus", one, |t, p, _| t.softplus(&p[0]));
    sweep("silu", one, |t, p, _| t.silu(&p[0]));
    sweep("sigmoid", one, |t, p, _| t.sigmoid(&p[0]));
}

#[test]
fn structural_primitives_match_central_differences() {
    sweep("matmul", two_matmul, |t, p, _| t.matmul(&p[0], &p[1]));
    sweep("matmul_t", two_matmul_t, |t, p, _| t.matmul_t(&p[0], &p[1]));
    sweep("sum", one, |t, p, _| {
        let s = t.sum(&p[0])?;
        t.exp(&s)
    });
    sweep("slice", one, |t, p, r| {
        let axis = r.random_range(0..2);
        let n = p[0].shape()[axis];
        let start = r.random_range(0..n);
        let len = r.random_range(1..=n - start);
        t.slice(&p[0], axis, start, len)
    });
    sweep("concat", two_same, |t, p, r| t.concat(&[&p[0], &p[1]], r.random_range(0..2)));
    sweep("broadcast", row, |t, p, r| {
        let rows = r.random_range(1..=4);
        t.broadcast(&p[0], &[rows, p[0].len()])
    });
    sweep("transpose", one, |t, p, _| t.transpose(&p[0]));
    sweep("reshape", one, |t, p, _| t.reshape(&p[0], &[p[0].len()]));
    sweep("rms_norm", wide, |t, p, _| t.rms_norm(&p[0], 1e-5));
    sweep("log_softmax", wide, |t, p, _| t.log_softmax(&p[0]));
}

#[test]
fn backward_visits_each_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let a = tape.leaf(&randn(&mut rng, &[3, 4], 1.0).with_requires_grad(true));
    let b = tape.leaf(&randn(&mut rng, &[4, 2], 1.0).with_requires_grad(true));
    let mut x = tape.matmul(&a, &b).unwrap();
    for _ in 0..5 {
        let s = tape.silu(&x).unwrap();
        x = tape.add(&s, &x).unwrap();
    }
    let loss = tape.sum(&x).unwrap();
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.visits, tape.len());
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let a = tape.leaf(&randn(&mut rng, &[5, 3], 1.0).with_requires_grad(true));
        let n = tape.rms_norm(&a, 1e-5).unwrap();
        let l = tape.log_softmax(&n).unwrap();
        let loss = tape.sum(&l).unwrap();
        let g = tape.backward(&loss).unwrap();
        (loss.item().unwrap().to_bits(), g.of(&a).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

fn s6_layer(seed: u64, d: usize, h: usize) -> SsmLayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SsmLayerParams::random(&mut rng, d, h, d.div_ceil(2), 0.5)
}

fn inputs(seed: u64, t: usize, d: usize) -> Tensor {
    randn(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(99)), &[t, d], 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scan_is_causal(seed in any::<u64>(), d in 1usize..4, h in 1usize..6, t in 2usize..14, cut in 0usize..13) {
        let cut = cut % t;
        let layer = s6_layer(seed, d, h);
        let x = inputs(seed, t, d);
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[cut * d..] {
            *v += 3.0;
        }
        let y = s6_scan(&layer, &x, None).unwrap();
        let y2 = s6_scan(&layer, &x2, None).unwrap();
        for step in 0..cut {
            prop_assert_eq!(y.output(step), y2.output(step));
        }
    }

    #[test]
    fn scan_splits_at_any_point(seed in any::<u64>(), d in 1usize..4, h in 1usize..6, ta in 1usize..8, tb in 1usize..8) {
        let layer = s6_layer(seed, d, h);
        let x = inputs(seed, ta + tb, d);
        let whole = s6_scan(&layer, &x, None).unwrap();
        let xa = Tensor::new(&[ta, d], x.data()[..ta * d].to_vec()).unwrap();
        let xb = Tensor::new(&[tb, d], x.data()[ta * d..].to_vec()).unwrap();
        let first = s6_scan(&layer, &xa, None).unwrap();
        let second = s6_scan(&layer, &xb, Some(&first.final_state())).unwrap();
        for step in 0..tb {
            for (u, v) in whole.output(ta + step).iter().zip(second.output(step)) {
                prop_assert!((u - v).abs() <= 1e-12, "{} vs {}", u, v);
            }
        }
    }

    #[test]
    fn abar_stays_in_open_unit_interval(seed in any::<u64>(), d in 1usize..4, h in 1usize..6, t in 1usize..10, big in -5.0f64..5.0) {
        let layer = s6_layer(seed, d, h);
        let mut x = inputs(seed, t, d);
        x.data_mut()[0] = big;
        let tr = s6_scan(&layer, &x, None).unwrap();
        for step in 0..t {
            prop_assert!(tr.abar(step).iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn abar_saturates_but_never_leaves_unit_interval(seed in any::<u64>(), d in 1usize..4, h in 1usize..6, big in -1e3f64..1e3) {
        // exp(ΔA) rounds to exactly 1 or 0 once |ΔA| leaves the f64 range
        let layer = s6_layer(seed, d, h);
        let mut x = inputs(seed, 2, d);
        x.data_mut().iter_mut().for_each(|v| *v *= big);
        match s6_scan(&layer, &x, None) {
            Ok(tr) => {
                for step in 0..2 {
                    prop_assert!(tr.abar(step).iter().all(|&a| (0.0..=1.0).contains(&a)));
                }
            }
            // softplus underflowed to a zero step size
            Err(e) => prop_assert!(matches!(e, Error::Contract(_)), "{}", e),
        }
    }

    #[test]
    fn constant_input_reduces_s6_to_s4(seed in any::<u64>(), d in 1usize..4, h in 1usize..6, t in 1usize..10) {
        let layer = s6_layer(seed, d, h);
        let x0 = inputs(seed, 1, d);
        let x = Tensor::new(&[t, d], x0.data().repeat(t)).unwrap();
        let s4 = S4Params::frozen_from(&layer, x0.data());
        let a = s6_scan(&layer, &x, None).unwrap();
        let b = s4_scan(&s4, &x, None).unwrap();
        for step in 0..t {
            for (u, v) in a.output(step).iter().zip(b.output(step)) {
                prop_assert!((u - v).abs() <= 1e-12);
            }
        }
    }
}
