//! Dense tensors, a reverse-mode tape, and a finite-difference gradient oracle.

mod dump;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use dump::{dump_bytes, parse_dump, read_dump, write_dump, Precision};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, DEFAULT_STEP};
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::attention::AttentionMask;
use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let out = tape.matmul(a, b)?;
    Ok(tape.value(out).clone())
}

pub fn softmax(scores: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let out = tape.softmax(s)?;
    Ok(tape.value(out).clone())
}

pub fn masked_softmax(scores: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    let (rows, cols) = scores.require_2d("masked_softmax")?;
    if (rows, cols) != (mask.n_query(), mask.n_key()) {
        return Err(Error::dim(format!(
            "scores {:?} vs mask {}x{}",
            scores.shape(),
            mask.n_query(),
            mask.n_key()
        )));
    }
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let out = tape.masked_softmax(s, mask.allow())?;
    Ok(tape.value(out).clone())
}

pub fn conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, k) = (tape.constant(x.clone()), tape.constant(kernel.clone()));
    let out = tape.conv1d(x, k)?;
    Ok(tape.value(out).clone())
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (x, g, b) = (tape.constant(x.clone()), tape.constant(gain.clone()), tape.constant(bias.clone()));
    let out = tape.layer_norm(x, g, b)?;
    Ok(tape.value(out).clone())
}
