//! Reverse-mode differentiation on an operation tape, and the
//! finite-difference oracle used to check it.
//!
//! Multi-operand einsums are recorded as their left-to-right pairwise steps,
//! so the tape replays exactly the schedule the forward engine runs. The
//! adjoint of an einsum input is another einsum of the upstream gradient with
//! the other operand, broadcast over any axis that only that input carried.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, labeled_axes, Axis, CounterChannel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Einsum {
        labels: Vec<Vec<String>>,
        out: Vec<String>,
    },
    Softmax(String),
    LogSoftmax(String),
    Add,
    Scale(f64),
    Relu,
    LayerNorm {
        axis: String,
        eps: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    label: String,
    requires_grad: bool,
}

/// Append-only record of a computation. Inputs always precede consumers.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: CounterChannel,
    corruptions: Vec<(usize, f64)>,
}

/// Gradients of a scalar with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads.iter().map(|(&k, t)| (Var(k), t))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor, label: &str) -> Var {
        let requires_grad = match op {
            Op::Leaf => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            label: label.to_string(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, label: &str, value: Tensor) -> Var {
        self.push(Op::Leaf, Vec::new(), value, label)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, label: &str, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, Vec::new(), value, label);
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn label(&self, v: Var) -> &str {
        &self.nodes[v.0].label
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &CounterChannel {
        &self.counter
    }

    /// Test hook: scale the gradient delivered to leaf `v` by `factor`.
    pub fn corrupt_adjoint(&mut self, v: Var, factor: f64) {
        self.corruptions.push((v.0, factor));
    }

    /// Label of the earliest node holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| n.label.as_str())
    }

    pub fn einsum(
        &mut self,
        label: &str,
        operands: &[(Var, &[&str])],
        out: &[&str],
    ) -> Result<Var> {
        let shapes = operands
            .iter()
            .map(|(v, l)| labeled_axes(&self.nodes[v.0].value, l))
            .collect::<Result<Vec<_>>>()?;
        let steps = tensor::plan(&shapes, out)?;
        let owned = |l: &[&str]| l.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let names = |axes: &[Axis]| axes.iter().map(|a| a.name.clone()).collect::<Vec<_>>();

        if operands.len() == 1 {
            let (v, l) = operands[0];
            let value = tensor::einsum(&[(&self.nodes[v.0].value, l)], out)?;
            let op = Op::Einsum {
                labels: vec![owned(l)],
                out: owned(out),
            };
            return Ok(self.push(op, vec![v.0], value, label));
        }

        let mut acc = operands[0].0;
        let mut acc_labels = owned(operands[0].1);
        for (i, step) in steps.iter().enumerate() {
            let (rhs, rhs_labels) = operands[i + 1];
            let out_labels = names(&step.out);
            let value = {
                let l: Vec<&str> = acc_labels.iter().map(String::as_str).collect();
                let o: Vec<&str> = out_labels.iter().map(String::as_str).collect();
                tensor::einsum(
                    &[
                        (&self.nodes[acc.0].value, &l),
                        (&self.nodes[rhs.0].value, rhs_labels),
                    ],
                    &o,
                )?
            };
            if let Some(n) = step.multiplies {
                self.counter.record(label, n);
            }
            let op = Op::Einsum {
                labels: vec![acc_labels, owned(rhs_labels)],
                out: out_labels.clone(),
            };
            acc = self.push(op, vec![acc.0, rhs.0], value, label);
            acc_labels = out_labels;
        }
        Ok(acc)
    }

    pub fn softmax(&mut self, x: Var, axis: &str) -> Result<Var> {
        let value = tensor::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax(axis.into()), vec![x.0], value, "softmax"))
    }

    pub fn log_softmax(&mut self, x: Var, axis: &str) -> Result<Var> {
        let value = tensor::log_softmax(self.value(x), axis)?;
        Ok(self.push(Op::LogSoftmax(axis.into()), vec![x.0], value, "log-softmax"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a.0, b.0], value, "add"))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = tensor::scale(self.value(x), c);
        self.push(Op::Scale(c), vec![x.0], value, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu, vec![x.0], value, "relu")
    }

    /// Normalizes to zero mean and unit variance along `axis`.
    pub fn layer_norm(&mut self, x: Var, axis: &str, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.size_of(axis)? as f64;
        let mean = tensor::scale(&tensor::sum_keep(xv, axis)?, 1.0 / n);
        let centered = tensor::add(xv, &tensor::scale(&mean, -1.0))?;
        let var = tensor::scale(&tensor::sum_keep(&centered.map(|v| v * v), axis)?, 1.0 / n);
        let data = centered
            .data()
            .iter()
            .zip(var.data())
            .map(|(c, v)| c / (v + eps).sqrt())
            .collect();
        let value = Tensor::new(xv.axes().to_vec(), data)?;
        let op = Op::LayerNorm {
            axis: axis.into(),
            eps,
        };
        Ok(self.push(op, vec![x.0], value, "layer-norm"))
    }

    /// Gradients of the rank-0 node `output` with respect to every
    /// differentiable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = self
            .nodes
            .get(output.0)
            .ok_or_else(|| Error::Autograd(format!("node {} is not on this tape", output.0)))?;
        if out_node.value.rank() != 0 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar output, `{}` has {} axes",
                out_node.label,
                out_node.value.rank()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::scalar(1.0));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (slot, input_grad) in self.vjp(node, &g)?.into_iter().enumerate() {
                let input = node.inputs[slot];
                let Some(ig) = input_grad else { continue };
                if !self.nodes[input].requires_grad {
                    continue;
                }
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => tensor::add(&acc, &ig)?,
                    None => ig,
                });
            }
        }

        let mut out = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                continue;
            }
            let mut g = match grads.get_mut(id).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(node.value.axes().to_vec())?,
            };
            for &(cid, factor) in &self.corruptions {
                if cid == id {
                    g = tensor::scale(&g, factor);
                }
            }
            out.grads.insert(id, g);
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input of `node`, each in the input
    /// tensor's own axis names and order.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Einsum { labels, out } => {
                let out: Vec<&str> = out.iter().map(String::as_str).collect();
                let lab: Vec<Vec<&str>> = labels
                    .iter()
                    .map(|l| l.iter().map(String::as_str).collect())
                    .collect();
                (0..node.inputs.len())
                    .map(|k| {
                        let target = labeled_axes(input(k), &lab[k])?;
                        let grad = if node.inputs.len() == 1 {
                            tensor::broadcast(g, &out, &target)?
                        } else {
                            let other = 1 - k;
                            let reachable: Vec<&str> = lab[k]
                                .iter()
                                .copied()
                                .filter(|a| out.contains(a) || lab[other].contains(a))
                                .collect();
                            let partial = tensor::einsum(
                                &[(g, &out), (input(other), &lab[other])],
                                &reachable,
                            )?;
                            tensor::broadcast(&partial, &reachable, &target)?
                        };
                        let own = input(k).names();
                        Ok(Some(grad.relabel(&own)?))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Softmax(axis) => {
                let w = &node.value;
                let gw = mul(g, w)?;
                let centered = tensor::add(g, &tensor::scale(&tensor::sum_keep(&gw, axis)?, -1.0))?;
                vec![Some(mul(w, &centered)?)]
            }
            Op::LogSoftmax(axis) => {
                let p = node.value.map(f64::exp);
                let s = tensor::sum_keep(g, axis)?;
                vec![Some(tensor::add(g, &tensor::scale(&mul(&p, &s)?, -1.0))?)]
            }
            Op::Add => {
                let b = tensor::align(g, input(1).axes())?;
                vec![Some(g.clone()), Some(b)]
            }
            Op::Scale(c) => vec![Some(tensor::scale(g, *c))],
            Op::Relu => {
                let x = input(0);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(x.axes().to_vec(), data)?)]
            }
            Op::LayerNorm { axis, eps } => {
                let x = input(0);
                let y = &node.value;
                let n = x.size_of(axis)? as f64;
                let mean = tensor::scale(&tensor::sum_keep(x, axis)?, 1.0 / n);
                let centered = tensor::add(x, &tensor::scale(&mean, -1.0))?;
                let var =
                    tensor::scale(&tensor::sum_keep(&centered.map(|v| v * v), axis)?, 1.0 / n);
                let g_mean = tensor::scale(&tensor::sum_keep(g, axis)?, 1.0 / n);
                let gy_mean = tensor::scale(&tensor::sum_keep(&mul(g, y)?, axis)?, 1.0 / n);
                let data = (0..x.len())
                    .map(|i| {
                        (g.data()[i] - g_mean.data()[i] - y.data()[i] * gy_mean.data()[i])
                            / (var.data()[i] + eps).sqrt()
                    })
                    .collect();
                vec![Some(Tensor::new(x.axes().to_vec(), data)?)]
            }
        })
    }
}

fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let b = tensor::align(b, a.axes())?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.axes().to_vec(), data)
}

/// Outcome of comparing tape gradients against central differences.
///
/// Each parameter's error is the max-norm relative error
/// `max|a - b| / max(max|a|, max|b|, 1e-8)` over its coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub per_parameter: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

impl GradientReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error <= tolerance
    }
}

/// Default relative finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Checks the tape gradient of `f` at every named input against central
/// differences with step `step * max(1, |x_i|)` per coordinate.
pub fn check_gradients<F>(inputs: &[(&str, &Tensor)], f: F, step: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::Autograd(format!(
            "step must be positive, got {step}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(values)
            .map(|((name, _), t)| tape.leaf(name, t.clone()))
            .collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(name, t)| tape.leaf(name, (*t).clone()))
        .collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| (*t).clone()).collect();
    let mut per_parameter = Vec::with_capacity(inputs.len());
    for (k, (name, _)) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).expect("leaf gradient");
        let mut max_diff: f64 = 0.0;
        let mut max_mag: f64 = 0.0;
        for i in 0..values[k].len() {
            let x0 = values[k].data()[i];
            let h = step * x0.abs().max(1.0);
            values[k].data_mut()[i] = x0 + h;
            let fp = eval(&values)?;
            values[k].data_mut()[i] = x0 - h;
            let fm = eval(&values)?;
            values[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
        }
        per_parameter.push((name.to_string(), max_diff / max_mag.max(1e-8)));
    }
    let max_relative_error = per_parameter.iter().fold(0.0, |m: f64, (_, e)| m.max(*e));
    Ok(GradientReport {
        per_parameter,
        max_relative_error,
    })
}

/// Single-input form of [`check_gradients`].
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(&[("x", x)], |tape, vars| f(tape, vars[0]), step)
}
