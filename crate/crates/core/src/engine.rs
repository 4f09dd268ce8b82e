//! Execution backends for the attention algorithms.
//!
//! Each algorithm is written once against [`Engine`] and can then run
//! numerically ([`Eval`]), on an autograd [`Tape`], or over shapes alone
//! ([`Symbolic`]) to tally multiplications at sizes too large to compute.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Axis, CounterChannel, Tensor};

pub trait Engine {
    type Value: Clone;

    /// Einsum over positionally labeled operands; `label` names the
    /// counter records.
    fn einsum(
        &mut self,
        label: &str,
        operands: &[(&Self::Value, &[&str])],
        out: &[&str],
    ) -> Result<Self::Value>;

    fn softmax(&mut self, x: &Self::Value, axis: &str) -> Result<Self::Value>;

    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Plain numeric evaluation with multiply tallying.
#[derive(Debug, Default)]
pub struct Eval {
    pub counter: CounterChannel,
}

impl Eval {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Engine for Eval {
    type Value = Tensor;

    fn einsum(
        &mut self,
        label: &str,
        operands: &[(&Tensor, &[&str])],
        out: &[&str],
    ) -> Result<Tensor> {
        tensor::einsum_tallied(operands, out, label, &mut self.counter)
    }

    fn softmax(&mut self, x: &Tensor, axis: &str) -> Result<Tensor> {
        tensor::softmax(x, axis)
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        tensor::add(a, b)
    }
}

impl Engine for Tape {
    type Value = Var;

    fn einsum(&mut self, label: &str, operands: &[(&Var, &[&str])], out: &[&str]) -> Result<Var> {
        let ops: Vec<(Var, &[&str])> = operands.iter().map(|(v, l)| (**v, *l)).collect();
        Tape::einsum(self, label, &ops, out)
    }

    fn softmax(&mut self, x: &Var, axis: &str) -> Result<Var> {
        Tape::softmax(self, *x, axis)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }
}

/// Named sizes standing in for a tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<Axis>);

impl Shape {
    pub fn new(spec: &[(&str, usize)]) -> Self {
        Shape(tensor::axes(spec))
    }
}

/// Size-only evaluation: validates shapes and tallies the multiplies each
/// einsum would perform, without touching data.
#[derive(Debug, Default)]
pub struct Symbolic {
    pub counter: CounterChannel,
}

impl Symbolic {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Engine for Symbolic {
    type Value = Shape;

    fn einsum(
        &mut self,
        label: &str,
        operands: &[(&Shape, &[&str])],
        out: &[&str],
    ) -> Result<Shape> {
        let shapes = operands
            .iter()
            .map(|(s, l)| {
                if s.0.len() != l.len() {
                    return Err(Error::LabelCount {
                        rank: s.0.len(),
                        labels: l.len(),
                    });
                }
                Ok(l.iter()
                    .zip(&s.0)
                    .map(|(n, a)| Axis::new(*n, a.size))
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let steps = tensor::plan(&shapes, out)?;
        for step in &steps {
            if let Some(n) = step.multiplies {
                self.counter.record(label, n);
            }
        }
        Ok(Shape(steps.last().expect("non-empty plan").out.clone()))
    }

    fn softmax(&mut self, x: &Shape, axis: &str) -> Result<Shape> {
        if x.0.iter().any(|a| a.name == axis) {
            Ok(x.clone())
        } else {
            Err(Error::AxisNotFound(axis.to_string()))
        }
    }

    fn add(&mut self, a: &Shape, b: &Shape) -> Result<Shape> {
        let same = a.0.len() == b.0.len() && a.0.iter().all(|x| b.0.contains(x));
        if same {
            Ok(a.clone())
        } else {
            Err(Error::Shape(format!("cannot add {:?} and {:?}", a.0, b.0)))
        }
    }
}
