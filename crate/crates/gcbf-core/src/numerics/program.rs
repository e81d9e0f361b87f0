//! Data-driven evaluation of a primitive graph.
//!
//! A [`Program`] is an explicit list of primitive applications over numbered
//! slots: slots `0..n_inputs` are the caller's input tensors, each step
//! appends one slot. `evaluate_and_backprop` runs the forward pass, seeds one
//! output with a gradient, and returns the outputs plus the gradient of the
//! seeded scalar with respect to every input. Primitives are named by string
//! so malformed graphs surface an `UnknownPrimitive` error instead of
//! panicking.

use super::tape::{Tape, VarId};
use super::{NumericsError, Tensor};

/// One primitive application. `args` index previously defined slots.
#[derive(Debug, Clone)]
pub struct Step {
    pub op: String,
    pub args: Vec<usize>,
    /// Scalar attribute: the factor for `scalar_mul`, the axis for
    /// `softmax`/`sum_axis`, ignored elsewhere.
    pub attr: f64,
    /// Row/column range for the slice primitives.
    pub range: Option<(usize, usize)>,
}

impl Step {
    pub fn unary(op: &str, a: usize) -> Self {
        Self { op: op.into(), args: vec![a], attr: 0.0, range: None }
    }

    pub fn binary(op: &str, a: usize, b: usize) -> Self {
        Self { op: op.into(), args: vec![a, b], attr: 0.0, range: None }
    }

    pub fn with_attr(op: &str, a: usize, attr: f64) -> Self {
        Self { op: op.into(), args: vec![a], attr, range: None }
    }
}

/// A straight-line graph of primitives over input slots.
#[derive(Debug, Clone, Default)]
pub struct Program {
    pub n_inputs: usize,
    pub steps: Vec<Step>,
    /// Slots to return as outputs; the first one is the backprop seed target.
    pub outputs: Vec<usize>,
}

/// Forward-evaluate `program` on `inputs`, then backpropagate `seed` through
/// the first output. Returns the output values and one gradient per input.
pub fn evaluate_and_backprop(
    program: &Program,
    inputs: &[Tensor],
    seed: &Tensor,
) -> Result<(Vec<Tensor>, Vec<Tensor>), NumericsError> {
    if inputs.len() != program.n_inputs {
        return Err(NumericsError::ShapeMismatch {
            op: "program",
            detail: format!("expected {} inputs, got {}", program.n_inputs, inputs.len()),
        });
    }
    let mut tape = Tape::new();
    let mut slots: Vec<VarId> = Vec::with_capacity(program.n_inputs + program.steps.len());
    for t in inputs {
        slots.push(tape.input(t.clone())?);
    }
    for step in &program.steps {
        let arg = |i: usize| -> Result<VarId, NumericsError> {
            step.args
                .get(i)
                .and_then(|&s| slots.get(s).copied())
                .ok_or_else(|| NumericsError::ShapeMismatch {
                    op: "program",
                    detail: format!("bad slot reference in `{}`", step.op),
                })
        };
        let out = match step.op.as_str() {
            "matmul" => tape.matmul(arg(0)?, arg(1)?)?,
            "add" => tape.add(arg(0)?, arg(1)?)?,
            "add_row" => tape.add_row(arg(0)?, arg(1)?)?,
            "sub" => tape.sub(arg(0)?, arg(1)?)?,
            "mul" => tape.mul(arg(0)?, arg(1)?)?,
            "mul_col" => tape.mul_col(arg(0)?, arg(1)?)?,
            "scalar_mul" => tape.scalar_mul(arg(0)?, step.attr)?,
            "relu" => tape.relu(arg(0)?)?,
            "hinge" => tape.hinge(arg(0)?)?,
            "tanh" => tape.tanh(arg(0)?)?,
            "exp" => tape.exp(arg(0)?)?,
            "log" => tape.log(arg(0)?)?,
            "sum" => tape.sum_all(arg(0)?)?,
            "sum_axis" => tape.sum_axis(arg(0)?, step.attr as usize)?,
            "max" => tape.max_all(arg(0)?)?,
            "softmax" => tape.softmax(arg(0)?, step.attr as usize)?,
            "concat_rows" => {
                let ids = collect_args(&step.args, &slots, &step.op)?;
                tape.concat_rows(&ids)?
            }
            "concat_cols" => {
                let ids = collect_args(&step.args, &slots, &step.op)?;
                tape.concat_cols(&ids)?
            }
            "slice_rows" => {
                let (s, e) = step.range.ok_or_else(|| missing_range(&step.op))?;
                tape.slice_rows(arg(0)?, s..e)?
            }
            "slice_cols" => {
                let (s, e) = step.range.ok_or_else(|| missing_range(&step.op))?;
                tape.slice_cols(arg(0)?, s..e)?
            }
            "norm2" => tape.norm2(arg(0)?)?,
            other => return Err(NumericsError::UnknownPrimitive { name: other.to_string() }),
        };
        slots.push(out);
    }

    let out_ids: Vec<VarId> = program
        .outputs
        .iter()
        .map(|&s| {
            slots.get(s).copied().ok_or_else(|| NumericsError::ShapeMismatch {
                op: "program",
                detail: format!("output slot {s} out of range"),
            })
        })
        .collect::<Result<_, _>>()?;
    let first = *out_ids.first().ok_or_else(|| NumericsError::ShapeMismatch {
        op: "program",
        detail: "no outputs".into(),
    })?;

    let grads = tape.backward(first, seed.clone())?;
    let outputs = out_ids.iter().map(|&id| tape.value(id).clone()).collect();
    let input_grads = slots[..program.n_inputs]
        .iter()
        .map(|&id| grads.get(&tape, id))
        .collect();
    Ok((outputs, input_grads))
}

fn collect_args(args: &[usize], slots: &[VarId], op: &str) -> Result<Vec<VarId>, NumericsError> {
    args.iter()
        .map(|&s| {
            slots.get(s).copied().ok_or_else(|| NumericsError::ShapeMismatch {
                op: "program",
                detail: format!("bad slot reference in `{op}`"),
            })
        })
        .collect()
}

fn missing_range(op: &str) -> NumericsError {
    NumericsError::ShapeMismatch { op: "program", detail: format!("`{op}` needs a range") }
}
