//! Small dense-tensor autodiff library in `f64`.
//!
//! A [`Graph`] records each op of a forward pass; [`Graph::backward`] sweeps it
//! in reverse and returns gradients for every parameter leaf. Parameters live in
//! a [`ParamStore`] and are updated by [`AdamW`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{log_softmax_at, softmax, Activation, Gradients, Graph, Var};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

use std::io::Write;

/// One row of a training curve.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Writes `step,loss,lr` rows.
pub fn write_curve_csv<W: Write>(mut w: W, points: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(w, "step,loss,lr")?;
    for p in points {
        writeln!(w, "{},{:.10},{:.10e}", p.step, p.loss, p.lr)?;
    }
    Ok(())
}
