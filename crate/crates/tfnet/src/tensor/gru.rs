//! Single GRU step built from tape primitives.
//!
//! Convention (Cho et al. 2014):
//!   z = sigma(W_z x + U_z h + b_z)
//!   r = sigma(W_r x + U_r h + b_r)
//!   hcand = tanh(W_h x + U_h (r .* h) + b_h)
//!   h_new = z .* h + (1 - z) .* hcand

use super::{Activation, Result, Tape, TensorId};

/// Tape ids for the nine GRU parameter blocks. W_* are (hidden, input),
/// U_* are (hidden, hidden), b_* are (hidden).
#[derive(Debug, Clone, Copy)]
pub struct GruParamIds {
    pub w_z: TensorId,
    pub w_r: TensorId,
    pub w_h: TensorId,
    pub u_z: TensorId,
    pub u_r: TensorId,
    pub u_h: TensorId,
    pub b_z: TensorId,
    pub b_r: TensorId,
    pub b_h: TensorId,
}

pub fn gru_cell(tape: &mut Tape, x: TensorId, h_prev: TensorId, p: &GruParamIds) -> Result<TensorId> {
    let gate = |tape: &mut Tape, w, u, b, x, h| -> Result<TensorId> {
        let wx = tape.matmul(w, x)?;
        let uh = tape.matmul(u, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, b)
    };
    let z_pre = gate(tape, p.w_z, p.u_z, p.b_z, x, h_prev)?;
    let z = tape.activation(z_pre, Activation::Sigmoid);
    let r_pre = gate(tape, p.w_r, p.u_r, p.b_r, x, h_prev)?;
    let r = tape.activation(r_pre, Activation::Sigmoid);

    let rh = tape.mul(r, h_prev)?;
    let hc_pre = gate(tape, p.w_h, p.u_h, p.b_h, x, rh)?;
    let hcand = tape.activation(hc_pre, Activation::Tanh);

    let zh = tape.mul(z, h_prev)?;
    let one_minus_z = tape.affine(z, -1.0, 1.0);
    let zc = tape.mul(one_minus_z, hcand)?;
    tape.add(zh, zc)
}
