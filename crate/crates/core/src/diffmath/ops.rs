use super::kernels;
use super::tape::{Op, Tape};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Primitive selector for [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    MatMul,
    Exp,
    Softplus,
    Silu,
    Sigmoid,
    Sum,
    Slice { axis: usize, start: usize, len: usize },
    Concat { axis: usize },
    Broadcast { shape: Vec<usize> },
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn unary_arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::dim(op, format!("expected {n} operands, got {}", inputs.len())));
    }
    Ok(())
}

impl Tape {
    /// Generic entry point over the primitive set.
    pub fn apply(&mut self, kind: Primitive, inputs: &[&Tensor]) -> Result<Tensor> {
        match kind {
            Primitive::Add => {
                unary_arity("add", inputs, 2)?;
                self.add(inputs[0], inputs[1])
            }
            Primitive::Mul => {
                unary_arity("mul", inputs, 2)?;
                self.mul(inputs[0], inputs[1])
            }
            Primitive::MatMul => {
                unary_arity("matmul", inputs, 2)?;
                self.matmul(inputs[0], inputs[1])
            }
            Primitive::Exp => {
                unary_arity("exp", inputs, 1)?;
                self.exp(inputs[0])
            }
            Primitive::Softplus => {
                unary_arity("softplus", inputs, 1)?;
                self.softplus(inputs[0])
            }
            Primitive::Silu => {
                unary_arity("silu", inputs, 1)?;
                self.silu(inputs[0])
            }
            Primitive::Sigmoid => {
                unary_arity("sigmoid", inputs, 1)?;
                self.sigmoid(inputs[0])
            }
            Primitive::Sum => {
                unary_arity("sum", inputs, 1)?;
                self.sum(inputs[0])
            }
            Primitive::Slice { axis, start, len } => {
                unary_arity("slice", inputs, 1)?;
                self.slice(inputs[0], axis, start, len)
            }
            Primitive::Concat { axis } => self.concat(inputs, axis),
            Primitive::Broadcast { shape } => {
                unary_arity("broadcast", inputs, 1)?;
                self.broadcast(inputs[0], &shape)
            }
        }
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        self.record(Op::Add, &[a, b], a.shape().to_vec(), out)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        self.record(Op::Sub, &[a, b], a.shape().to_vec(), out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        self.record(Op::Mul, &[a, b], a.shape().to_vec(), out)
    }

    pub fn scale(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        let out = a.data().iter().map(|x| x * c).collect();
        self.record(Op::Scale(c), &[a], a.shape().to_vec(), out)
    }

    /// 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim(
                "matmul",
                format!("{:?} @ {:?}", a.shape(), b.shape()),
            ));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = kernels::matmul(a.data(), b.data(), m, k, n);
        self.record(Op::MatMul { m, k, n }, &[a, b], vec![m, n], out)
    }

    fn unary(&mut self, op: Op, a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = a.data().iter().map(|&x| f(x)).collect();
        self.record(op, &[a], a.shape().to_vec(), out)
    }

    pub fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn softplus(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Softplus, a, kernels::softplus)
    }

    pub fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Silu, a, kernels::silu)
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Result<Tensor> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid)
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, a: &Tensor) -> Result<Tensor> {
        let s = a.data().iter().sum();
        self.record(Op::Sum, &[a], Vec::new(), vec![s])
    }

    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= a.rank() || start + len > a.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("[{start}..{}] on axis {axis} of {:?}", start + len, a.shape()),
            ));
        }
        let out = kernels::slice(a.data(), a.shape(), axis, start, len);
        let mut shape = a.shape().to_vec();
        shape[axis] = len;
        self.record(Op::Slice { axis, start }, &[a], shape, out)
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        if axis >= first.rank() {
            return Err(Error::dim("concat", format!("axis {axis} on {:?}", first.shape())));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape(), first.shape()),
                ));
            }
            shape[axis] += p.shape()[axis];
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.record(Op::Concat { axis }, parts, shape, out)
    }

    /// Explicit broadcast with trailing-dimension alignment. Each source axis
    /// must equal the aligned target axis or be 1.
    pub fn broadcast(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let lead = shape.len().checked_sub(a.rank()).ok_or_else(|| {
            Error::dim("broadcast", format!("{:?} -> {:?}", a.shape(), shape))
        })?;
        let ok = a
            .shape()
            .iter()
            .zip(&shape[lead..])
            .all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(Error::dim("broadcast", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        let map = kernels::broadcast_map(a.shape(), shape);
        let src = a.data();
        let out = map.iter().map(|&i| src[i]).collect();
        self.record(Op::Broadcast, &[a], shape.to_vec(), out)
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::dim("transpose", format!("rank {} tensor", a.rank())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        let out = kernels::transpose(a.data(), r, c);
        self.record(Op::Transpose, &[a], vec![c, r], out)
    }

    pub fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != a.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", a.shape(), shape)));
        }
        self.record(Op::Reshape, &[a], shape.to_vec(), a.data().to_vec())
    }

    /// Normalizes each row (last axis) to unit root-mean-square.
    pub fn rms_norm(&mut self, a: &Tensor, eps: f64) -> Result<Tensor> {
        let cols = *a
            .shape()
            .last()
            .ok_or_else(|| Error::dim("rms_norm", "scalar input"))?;
        let out = kernels::rms_norm(a.data(), cols, eps);
        self.record(Op::RmsNorm { eps }, &[a], a.shape().to_vec(), out)
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: &Tensor) -> Result<Tensor> {
        let cols = *a
            .shape()
            .last()
            .ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        let out = kernels::log_softmax(a.data(), cols);
        self.record(Op::LogSoftmax, &[a], a.shape().to_vec(), out)
    }

    /// `a @ b^T` for 2-D operands.
    pub fn matmul_t(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let bt = self.transpose(b)?;
        self.matmul(a, &bt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut tape = Tape::new();
        let y = tape.apply(Primitive::Exp, &[&t(&[1], &[0.0])]).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let mut tape = Tape::new();
        let y = tape.apply(Primitive::Softplus, &[&t(&[1], &[0.0])]).unwrap();
        assert_eq!(y.data(), &[0.6931471805599453]);
    }

    #[test]
    fn matmul_with_identity() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = tape.apply(Primitive::MatMul, &[&a, &eye]).unwrap();
        assert_eq!(y, a);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = tape.matmul(&a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let err = tape.add(&a, &t(&[3], &[0.0; 3])).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
    }

    #[test]
    fn no_implicit_broadcast() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0; 4]);
        let row = t(&[2], &[1.0, 2.0]);
        assert!(tape.mul(&a, &row).is_err());
        let b = tape.broadcast(&row, &[2, 2]).unwrap();
        assert_eq!(tape.mul(&a, &b).unwrap().data(), &[1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let _ = tape.exp(&a).unwrap();
        assert!(tape.is_empty());
    }

    #[test]
    fn concat_and_slice_round_trip_along_inner_axis() {
        let mut tape = Tape::new();
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = tape.slice(&c, 1, 1, 2).unwrap();
        assert_eq!(back, b);
    }
}
