use super::tape::{Tape, Var};
use super::NnError;

/// `x W + b` for row inputs `x` (`n x in`), `W` (`in x out`) and bias row `b`.
pub fn dense(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// `ReLU(Â H W)`.
pub fn gcn_layer(tape: &mut Tape, adjacency: Var, h: Var, w: Var) -> Result<Var, NnError> {
    let agg = tape.matmul(adjacency, h)?;
    let lin = tape.matmul(agg, w)?;
    Ok(tape.relu(lin))
}

/// LSTM weights bound on a tape; gates are packed as input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub hidden: usize,
}

/// One LSTM step on row vectors; returns `(h', c')`.
pub fn lstm_step(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmVars) -> Result<(Var, Var), NnError> {
    let n = w.hidden;
    let zx = tape.matmul(x, w.wx)?;
    let zh = tape.matmul(h, w.wh)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_row(z, w.b)?;
    let i = tape.slice_cols(z, 0, n)?;
    let f = tape.slice_cols(z, n, n)?;
    let g = tape.slice_cols(z, 2 * n, n)?;
    let o = tape.slice_cols(z, 3 * n, n)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let squashed = tape.tanh(c_next);
    let h_next = tape.mul(o, squashed)?;
    Ok((h_next, c_next))
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var, NnError> {
    let logp = tape.log_softmax(logits)?;
    let picked = tape.pick(logp, label)?;
    Ok(tape.scale(picked, -1.0))
}
