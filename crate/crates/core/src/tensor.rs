//! Named-axis dense tensors and the einsum contraction engine.
//!
//! Every operand of an [`einsum`] is paired with a list of axis labels, one
//! per tensor axis, in the tensor's own axis order. Labels shared between
//! operands are the same dimension; labels missing from the output are
//! summed over. The result carries the output labels as its axis names.
//!
//! Calls with more than two operands run as a left-to-right chain of
//! pairwise contractions. Each pairwise step multiplies once per element of
//! the union of the two operands' axes, and that count is what a
//! [`CounterChannel`] records.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named dimension of a tensor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub size: usize,
}

impl Axis {
    pub fn new(name: impl Into<String>, size: usize) -> Self {
        Self {
            name: name.into(),
            size,
        }
    }
}

/// Shorthand for building an axis list: `axes(&[("n", 2), ("d", 3)])`.
pub fn axes(spec: &[(&str, usize)]) -> Vec<Axis> {
    spec.iter().map(|&(n, s)| Axis::new(n, s)).collect()
}

/// Dense row-major array of `f64` with named axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    axes: Vec<Axis>,
    data: Vec<f64>,
}

/// An einsum operand: a tensor and one label per axis.
pub type Operand<'a> = (&'a Tensor, &'a [&'a str]);

impl Tensor {
    pub fn new(axes: Vec<Axis>, data: Vec<f64>) -> Result<Self> {
        validate_axes(&axes)?;
        let len = numel(&axes);
        if data.len() != len {
            return Err(Error::Shape(format!(
                "{} values supplied for {} elements",
                data.len(),
                len
            )));
        }
        Ok(Self { axes, data })
    }

    pub fn zeros(axes: Vec<Axis>) -> Result<Self> {
        let len = numel(&axes);
        Self::new(axes, vec![0.0; len])
    }

    pub fn filled(axes: Vec<Axis>, value: f64) -> Result<Self> {
        let len = numel(&axes);
        Self::new(axes, vec![value; len])
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major.
    pub fn from_fn(axes: Vec<Axis>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let sizes: Vec<usize> = axes.iter().map(|a| a.size).collect();
        let mut data = Vec::with_capacity(numel(&axes));
        let mut idx = vec![0usize; sizes.len()];
        for _ in 0..numel(&axes) {
            data.push(f(&idx));
            advance(&mut idx, &sizes);
        }
        Self::new(axes, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            axes: Vec::new(),
            data: vec![value],
        }
    }

    /// `rows x cols` matrix with ones on the leading diagonal. When the
    /// matrix is not square this is the zero-padded identity.
    pub fn eye(row_axis: &str, rows: usize, col_axis: &str, cols: usize) -> Result<Self> {
        Self::from_fn(axes(&[(row_axis, rows), (col_axis, cols)]), |i| {
            if i[0] == i[1] {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.size).collect()
    }

    pub fn names(&self) -> Vec<&str> {
        self.axes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn axis_index(&self, name: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| Error::AxisNotFound(name.to_string()))
    }

    pub fn size_of(&self, name: &str) -> Result<usize> {
        Ok(self.axes[self.axis_index(name)?].size)
    }

    /// Value at a multi-index given in axis order.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.axes.len(), "index rank mismatch");
        index.iter().zip(&self.axes).fold(0, |acc, (&i, a)| {
            assert!(i < a.size, "index {i} out of range for axis {}", a.name);
            acc * a.size + i
        })
    }

    /// The single value of a rank-0 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.axes.is_empty() {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected a scalar, found {} axes",
                self.axes.len()
            )))
        }
    }

    /// Same data, new axis names.
    pub fn relabel(&self, names: &[&str]) -> Result<Tensor> {
        if names.len() != self.axes.len() {
            return Err(Error::LabelCount {
                rank: self.axes.len(),
                labels: names.len(),
            });
        }
        let axes = names
            .iter()
            .zip(&self.axes)
            .map(|(n, a)| Axis::new(*n, a.size))
            .collect();
        Tensor::new(axes, self.data.clone())
    }

    /// Reorders axes to the given name order.
    pub fn permuted(&self, names: &[&str]) -> Result<Tensor> {
        let own = self.names();
        einsum(&[(self, &own)], names)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; both tensors must share
    /// axis names and sizes (in any order).
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        let other = align(other, &self.axes)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            axes: self.axes.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl fmt::Display for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self
            .axes
            .iter()
            .map(|a| format!("{}={}", a.name, a.size))
            .collect();
        write!(f, "Tensor[{}]", dims.join(", "))
    }
}

pub(crate) fn numel(axes: &[Axis]) -> usize {
    axes.iter().map(|a| a.size).product()
}

fn validate_axes(axes: &[Axis]) -> Result<()> {
    for (i, a) in axes.iter().enumerate() {
        if a.size == 0 {
            return Err(Error::ZeroSizedAxis(a.name.clone()));
        }
        if axes[..i].iter().any(|b| b.name == a.name) {
            return Err(Error::DuplicateAxis(a.name.clone()));
        }
    }
    Ok(())
}

fn advance(idx: &mut [usize], sizes: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < sizes[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Pairs a tensor's sizes with the caller's labels.
pub(crate) fn labeled_axes(t: &Tensor, labels: &[&str]) -> Result<Vec<Axis>> {
    if labels.len() != t.rank() {
        return Err(Error::LabelCount {
            rank: t.rank(),
            labels: labels.len(),
        });
    }
    let labeled: Vec<Axis> = labels
        .iter()
        .zip(t.axes())
        .map(|(l, a)| Axis::new(*l, a.size))
        .collect();
    validate_axes(&labeled)?;
    Ok(labeled)
}

/// One step of an einsum schedule: the axes it produces and, for pairwise
/// steps, the number of scalar multiplications it performs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct PlanStep {
    pub out: Vec<Axis>,
    pub multiplies: Option<u64>,
}

/// Validates an einsum over labeled shapes and lays out its left-to-right
/// pairwise schedule. Shared by the numeric and the size-only engines so
/// their tallies agree by construction.
pub(crate) fn plan(operands: &[Vec<Axis>], out: &[&str]) -> Result<Vec<PlanStep>> {
    if operands.is_empty() {
        return Err(Error::EmptyOperands);
    }
    let mut sizes: HashMap<&str, usize> = HashMap::new();
    for op in operands {
        validate_axes(op)?;
        for a in op {
            match sizes.get(a.name.as_str()) {
                Some(&s) if s != a.size => {
                    return Err(Error::AxisSizeMismatch {
                        axis: a.name.clone(),
                        left: s,
                        right: a.size,
                    })
                }
                _ => {
                    sizes.insert(a.name.as_str(), a.size);
                }
            }
        }
    }
    let mut out_axes = Vec::with_capacity(out.len());
    for (i, &name) in out.iter().enumerate() {
        if out[..i].contains(&name) {
            return Err(Error::DuplicateAxis(name.to_string()));
        }
        let size = *sizes
            .get(name)
            .ok_or_else(|| Error::AxisNotFound(name.to_string()))?;
        out_axes.push(Axis::new(name, size));
    }

    if operands.len() == 1 {
        return Ok(vec![PlanStep {
            out: out_axes,
            multiplies: None,
        }]);
    }

    let mut steps = Vec::with_capacity(operands.len() - 1);
    let mut acc: Vec<Axis> = operands[0].clone();
    for i in 1..operands.len() {
        let union = union_axes(&acc, &operands[i]);
        let multiplies = union.iter().map(|a| a.size as u64).product();
        let keep = if i == operands.len() - 1 {
            out_axes.clone()
        } else {
            union
                .into_iter()
                .filter(|a| {
                    out.contains(&a.name.as_str())
                        || operands[i + 1..]
                            .iter()
                            .any(|op| op.iter().any(|b| b.name == a.name))
                })
                .collect()
        };
        steps.push(PlanStep {
            out: keep.clone(),
            multiplies: Some(multiplies),
        });
        acc = keep;
    }
    Ok(steps)
}

fn union_axes(a: &[Axis], b: &[Axis]) -> Vec<Axis> {
    let mut u = a.to_vec();
    for ax in b {
        if !u.iter().any(|x| x.name == ax.name) {
            u.push(ax.clone());
        }
    }
    u
}

/// Append-only tally of scalar multiplications, one record per pairwise
/// contraction.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CounterChannel {
    records: Vec<(String, u64)>,
}

impl CounterChannel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, label: &str, multiplies: u64) {
        self.records.push((label.to_string(), multiplies));
    }

    pub fn records(&self) -> &[(String, u64)] {
        &self.records
    }

    pub fn total(&self) -> u64 {
        self.records.iter().map(|(_, n)| n).sum()
    }

    pub fn into_records(self) -> Vec<(String, u64)> {
        self.records
    }
}

/// Generalized contraction: broadcast every operand to the union of all
/// labels, multiply componentwise, sum over labels absent from `out`.
pub fn einsum(operands: &[Operand<'_>], out: &[&str]) -> Result<Tensor> {
    einsum_impl(operands, out, None)
}

/// [`einsum`] that appends one `(label, multiplies)` record per pairwise
/// step to `counter`.
pub fn einsum_tallied(
    operands: &[Operand<'_>],
    out: &[&str],
    label: &str,
    counter: &mut CounterChannel,
) -> Result<Tensor> {
    einsum_impl(operands, out, Some((label, counter)))
}

fn einsum_impl(
    operands: &[Operand<'_>],
    out: &[&str],
    mut counter: Option<(&str, &mut CounterChannel)>,
) -> Result<Tensor> {
    let shapes = operands
        .iter()
        .map(|(t, l)| labeled_axes(t, l))
        .collect::<Result<Vec<_>>>()?;
    let steps = plan(&shapes, out)?;

    if operands.len() == 1 {
        let data = contract(&[(operands[0].0.data(), &shapes[0])], &steps[0].out);
        return Tensor::new(steps[0].out.clone(), data);
    }

    let mut acc_axes = shapes[0].clone();
    let mut acc_data: Vec<f64> = Vec::new();
    for (i, step) in steps.iter().enumerate() {
        let rhs = operands[i + 1].0.data();
        let lhs: &[f64] = if i == 0 {
            operands[0].0.data()
        } else {
            &acc_data
        };
        let data = contract(&[(lhs, &acc_axes), (rhs, &shapes[i + 1])], &step.out);
        if let (Some((label, c)), Some(n)) = (counter.as_mut(), step.multiplies) {
            c.record(label, n);
        }
        acc_data = data;
        acc_axes = step.out.clone();
    }
    Tensor::new(acc_axes, acc_data)
}

/// Broadcasts `t` (with the given labels) to `target`; every labeled axis of
/// `t` must appear in `target` with the same size.
pub fn broadcast(t: &Tensor, labels: &[&str], target: &[Axis]) -> Result<Tensor> {
    let shape = labeled_axes(t, labels)?;
    for a in &shape {
        match target.iter().find(|b| b.name == a.name) {
            Some(b) if b.size == a.size => {}
            Some(b) => {
                return Err(Error::AxisSizeMismatch {
                    axis: a.name.clone(),
                    left: a.size,
                    right: b.size,
                })
            }
            None => return Err(Error::AxisNotFound(a.name.clone())),
        }
    }
    validate_axes(target)?;
    let data = contract(&[(t.data(), &shape)], target);
    Tensor::new(target.to_vec(), data)
}

/// Returns `t` with its axes reordered to match `target`, which must hold
/// the same names and sizes.
pub(crate) fn align(t: &Tensor, target: &[Axis]) -> Result<Tensor> {
    if t.axes() == target {
        return Ok(t.clone());
    }
    if t.rank() != target.len() {
        return Err(Error::Shape(format!(
            "axis sets differ: {:?} vs {:?}",
            t.names(),
            target.iter().map(|a| &a.name).collect::<Vec<_>>()
        )));
    }
    let names = t.names();
    broadcast(t, &names, target)
}

fn row_major_strides(shape: &[Axis]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for k in (0..shape.len()).rev() {
        strides[k] = s;
        s *= shape[k].size;
    }
    strides
}

/// Core kernel for one or two inputs. Iterates output cells row-major and,
/// for each, sums the product of inputs over every input axis absent from
/// `out`. Input axes missing from `out` are summed; `out` axes missing from
/// an input are broadcast.
fn contract(inputs: &[(&[f64], &[Axis])], out: &[Axis]) -> Vec<f64> {
    debug_assert!(!inputs.is_empty() && inputs.len() <= 2);
    // Summed axes, in order of first appearance.
    let mut summed: Vec<&Axis> = Vec::new();
    for (_, shape) in inputs {
        for a in shape.iter() {
            if !out.iter().any(|o| o.name == a.name) && !summed.iter().any(|s| s.name == a.name) {
                summed.push(a);
            }
        }
    }
    let stride_in = |shape: &[Axis], name: &str| -> usize {
        let strides = row_major_strides(shape);
        shape
            .iter()
            .position(|a| a.name == name)
            .map_or(0, |k| strides[k])
    };

    // Offsets of every summed-space point within each input.
    let summed_len: usize = summed.iter().map(|a| a.size).product();
    let mut inner: Vec<Vec<usize>> = Vec::with_capacity(inputs.len());
    for (_, shape) in inputs {
        let st: Vec<usize> = summed.iter().map(|a| stride_in(shape, &a.name)).collect();
        let mut offs = Vec::with_capacity(summed_len);
        let mut idx = vec![0usize; summed.len()];
        let sizes: Vec<usize> = summed.iter().map(|a| a.size).collect();
        for _ in 0..summed_len {
            offs.push(idx.iter().zip(&st).map(|(i, s)| i * s).sum());
            advance(&mut idx, &sizes);
        }
        inner.push(offs);
    }

    let out_sizes: Vec<usize> = out.iter().map(|a| a.size).collect();
    let out_len: usize = out_sizes.iter().product();
    let outer_strides: Vec<Vec<usize>> = inputs
        .iter()
        .map(|(_, shape)| out.iter().map(|a| stride_in(shape, &a.name)).collect())
        .collect();

    let mut result = Vec::with_capacity(out_len);
    let mut idx = vec![0usize; out.len()];
    let mut base = vec![0usize; inputs.len()];
    for _ in 0..out_len {
        let value = match inputs {
            [(a, _)] => {
                let b0 = base[0];
                inner[0].iter().map(|&o| a[b0 + o]).sum::<f64>()
            }
            [(a, _), (b, _)] => {
                let (b0, b1) = (base[0], base[1]);
                let mut acc = 0.0;
                for (&oa, &ob) in inner[0].iter().zip(&inner[1]) {
                    acc += a[b0 + oa] * b[b1 + ob];
                }
                acc
            }
            _ => unreachable!(),
        };
        result.push(value);
        // Odometer step with incremental base offsets.
        for k in (0..idx.len()).rev() {
            idx[k] += 1;
            for (j, b) in base.iter_mut().enumerate() {
                *b += outer_strides[j][k];
            }
            if idx[k] < out_sizes[k] {
                break;
            }
            for (j, b) in base.iter_mut().enumerate() {
                *b -= outer_strides[j][k] * out_sizes[k];
            }
            idx[k] = 0;
        }
    }
    result
}

/// Strides and extent for iterating the lines of `t` along one axis.
fn lines(t: &Tensor, axis: &str) -> Result<(usize, usize, Vec<usize>)> {
    let k = t.axis_index(axis)?;
    let strides = row_major_strides(t.axes());
    let len = t.axes()[k].size;
    let step = strides[k];
    // Start offset of every line: all indices with axis k fixed at 0.
    let starts = (0..t.len())
        .filter(|off| (off / step).is_multiple_of(len))
        .collect();
    Ok((len, step, starts))
}

/// Softmax along `axis`, with max subtraction.
pub fn softmax(t: &Tensor, axis: &str) -> Result<Tensor> {
    let (len, step, starts) = lines(t, axis)?;
    let mut out = t.clone();
    let d = out.data_mut();
    for s in starts {
        let max = (0..len)
            .map(|i| d[s + i * step])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for i in 0..len {
            let e = (d[s + i * step] - max).exp();
            d[s + i * step] = e;
            z += e;
        }
        for i in 0..len {
            d[s + i * step] /= z;
        }
    }
    Ok(out)
}

/// Log of [`softmax`] along `axis`, computed stably.
pub fn log_softmax(t: &Tensor, axis: &str) -> Result<Tensor> {
    let (len, step, starts) = lines(t, axis)?;
    let mut out = t.clone();
    let d = out.data_mut();
    for s in starts {
        let arg = (0..len)
            .max_by(|&a, &b| d[s + a * step].total_cmp(&d[s + b * step]))
            .unwrap_or(0);
        let max = d[s + arg * step];
        // The max term contributes exactly 1; ln_1p keeps confident rows accurate.
        let rest: f64 = (0..len)
            .filter(|&i| i != arg)
            .map(|i| (d[s + i * step] - max).exp())
            .sum();
        let tail = rest.ln_1p();
        for i in 0..len {
            d[s + i * step] = (d[s + i * step] - max) - tail;
        }
    }
    Ok(out)
}

/// Sums `t` along `axis` and broadcasts the sums back over it.
pub(crate) fn sum_keep(t: &Tensor, axis: &str) -> Result<Tensor> {
    let (len, step, starts) = lines(t, axis)?;
    let mut out = t.clone();
    let d = out.data_mut();
    for s in starts {
        let total: f64 = (0..len).map(|i| d[s + i * step]).sum();
        for i in 0..len {
            d[s + i * step] = total;
        }
    }
    Ok(out)
}

/// Componentwise operations on tensors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Scale(f64),
}

/// Applies an [`Elementwise`] op: `Add` takes two tensors with the same axis
/// set, `Scale` takes one.
pub fn elementwise(op: Elementwise, args: &[&Tensor]) -> Result<Tensor> {
    match (op, args) {
        (Elementwise::Add, [a, b]) => add(a, b),
        (Elementwise::Scale(c), [a]) => Ok(scale(a, c)),
        _ => Err(Error::Shape(format!(
            "{op:?} given {} arguments",
            args.len()
        ))),
    }
}

/// Componentwise sum. `b` may list the same axes as `a` in another order;
/// the result uses `a`'s order.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let b = align(b, a.axes())?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.axes.clone(), data)
}

pub fn scale(t: &Tensor, c: f64) -> Tensor {
    t.map(|v| v * c)
}
