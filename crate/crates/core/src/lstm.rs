//! The LSTM cell and its per-layer parameter bundle.
//!
//! Gates are packed along columns in the order input, forget, candidate,
//! output, so one matmul per operand computes all four.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Weight scale for uniform initialization; biases start at zero.
pub const INIT_SCALE: f64 = 0.1;

/// One LSTM layer's parameters.
#[derive(Debug, Clone)]
pub struct LstmParams {
    /// `[input_dim, 4*hidden]`
    pub w_ih: Tensor,
    /// `[hidden, 4*hidden]`
    pub w_hh: Tensor,
    /// `[4*hidden]`
    pub b: Tensor,
}

impl LstmParams {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        LstmParams {
            w_ih: Tensor::uniform(vec![input_dim, 4 * hidden], -INIT_SCALE, INIT_SCALE, rng)
                .with_grad(),
            w_hh: Tensor::uniform(vec![hidden, 4 * hidden], -INIT_SCALE, INIT_SCALE, rng)
                .with_grad(),
            b: Tensor::zeros(vec![4 * hidden]).with_grad(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    /// Watch this layer's weights on `tape`.
    pub fn vars(&self, tape: &Tape) -> LstmVars {
        LstmVars {
            w_ih: tape.leaf(&self.w_ih),
            w_hh: tape.leaf(&self.w_hh),
            b: tape.leaf(&self.b),
            hidden: self.hidden(),
        }
    }
}

/// Tape handles for one layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One step of the standard LSTM recurrence over a batch:
/// `x [B, d_in]`, `h_prev`/`c_prev` `[B, d]` → `(h, c)` each `[B, d]`.
pub fn lstm_cell(
    tape: &Tape,
    x: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmVars,
) -> Result<(Var, Var)> {
    let d = w.hidden;
    let pre = tape.add_bias(
        tape.add(tape.matmul(x, w.w_ih)?, tape.matmul(h_prev, w.w_hh)?)?,
        w.b,
    )?;
    let i = tape.sigmoid(tape.slice_cols(pre, 0, d)?);
    let f = tape.sigmoid(tape.slice_cols(pre, d, d)?);
    let g = tape.tanh(tape.slice_cols(pre, 2 * d, d)?);
    let o = tape.sigmoid(tape.slice_cols(pre, 3 * d, d)?);
    let c = tape.add(tape.mul(f, c_prev)?, tape.mul(i, g)?)?;
    let h = tape.mul(o, tape.tanh(c))?;
    Ok((h, c))
}

/// A fresh all-zero state pair for a batch of `bsz` rows.
pub fn zero_state(tape: &Tape, bsz: usize, hidden: usize) -> (Var, Var) {
    let z = Tensor::zeros(vec![bsz, hidden]);
    (tape.constant(&z), tape.constant(&z))
}
