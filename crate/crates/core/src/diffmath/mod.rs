//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod gradcheck;
pub mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use ops::Primitive;
pub use tape::{Gradients, Tape};
pub use tensor::{numel, NodeRef, Tensor};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().with_requires_grad(true));
        let y = tape.mul(&x, &x).unwrap();
        let y = tape.sum(&y).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1], vec![0.0]).unwrap().with_requires_grad(true));
        let y = tape.softplus(&x).unwrap();
        let y = tape.sum(&y).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.of(&x).unwrap(), &[0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[2]).with_requires_grad(true));
        let y = tape.exp(&x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(crate::error::Error::Contract(_))
        ));
    }

    #[test]
    fn every_node_visited_once() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[3]).with_requires_grad(true));
        let unused = tape.leaf(&Tensor::ones(&[2]).with_requires_grad(true));
        let a = tape.exp(&x).unwrap();
        let b = tape.mul(&a, &x).unwrap();
        let c = tape.add(&b, &a).unwrap();
        let s = tape.sum(&c).unwrap();
        let g = tape.backward(&s).unwrap();
        assert_eq!(g.visits, tape.len());
        // unreachable leaves still get a (zero) gradient
        assert_eq!(g.of(&unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn inputs_precede_their_consumers() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::ones(&[2, 2]).with_requires_grad(true));
        let y = tape.matmul(&x, &x).unwrap();
        let z = tape.silu(&y).unwrap();
        let _ = tape.sum(&z).unwrap();
        for id in 0..tape.len() {
            assert!(tape.node_inputs(id).iter().all(|&i| i < id));
        }
    }

    #[test]
    fn operands_from_another_tape_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let x = t1.leaf(&Tensor::ones(&[1]).with_requires_grad(true));
        assert!(t2.exp(&x).is_err());
    }
}
