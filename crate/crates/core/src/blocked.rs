//! Multi-time-step execution.
//!
//! A sequence is cut into blocks of `T` steps. For SRU and QRNN every gate
//! depends only on inputs, so a whole block of gates is produced by a few
//! matrix-matrix products in which each weight row is read once and applied
//! to `T` input columns. What remains is the `c_t` recurrence, an elementwise
//! first-order scan carried across block boundaries, and an elementwise
//! output stage.
//!
//! LSTM gates also read `h_{t-1}`, so only the input products `W·x_t` can be
//! blocked; the four `U·h_{t-1}` products stay per-step.
//!
//! Phase contract: gate precompute and output finalisation are parallel over
//! output rows; the sweep is sequential in `t` and parallel over the `d_h`
//! lanes. Results are identical for every worker count.

use std::fmt;
use std::io::Write;

use crate::cells::{blend, highway, lstm_cell_update, CellKind, LayerWeights, LstmWeights, QrnnWeights, SruWeights};
use crate::error::{mismatch, Error, Result};
use crate::model::WeightSet;
use crate::numeric::{gemm, gemv_tiled, sigmoid, tanh_act, Matrix, Scalar, Vector};
use crate::par;

/// Rows handed to one worker by the elementwise phases.
const LANE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub start: usize,
    pub len: usize,
}

/// Tiling of `0..seq_len` into consecutive blocks of `block_size` steps; only
/// the last block may be shorter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPlan {
    pub seq_len: usize,
    pub block_size: usize,
    pub blocks: Vec<Block>,
}

impl BlockPlan {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn plan_blocks(seq_len: usize, block_size: usize) -> Result<BlockPlan> {
    if seq_len == 0 || block_size == 0 {
        return Err(Error::InvalidArgument(format!(
            "sequence length and block size must be positive (L = {seq_len}, T = {block_size})"
        )));
    }
    let blocks = (0..seq_len)
        .step_by(block_size)
        .map(|start| Block {
            start,
            len: block_size.min(seq_len - start),
        })
        .collect();
    Ok(BlockPlan {
        seq_len,
        block_size,
        blocks,
    })
}

/// Gates of one block, one column per time step. `third` holds `r` for SRU
/// and `o` for QRNN.
#[derive(Debug, Clone, PartialEq)]
pub struct GateBlock<S> {
    pub xhat: Matrix<S>,
    pub f: Matrix<S>,
    pub third: Matrix<S>,
}

impl<S: Scalar> GateBlock<S> {
    pub fn steps(&self) -> usize {
        self.xhat.cols()
    }

    fn check(&self) -> Result<()> {
        if self.f.shape() != self.xhat.shape() || self.third.shape() != self.xhat.shape() {
            return Err(mismatch(
                "GateBlock",
                format!("{:?}", self.xhat.shape()),
                format!("f {:?}, third {:?}", self.f.shape(), self.third.shape()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    /// Input-only products, blocked over time.
    GatePrecompute,
    /// Per-step products against `h_{t-1}` (LSTM only).
    Recurrent,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::GatePrecompute => "gate-precompute",
            Phase::Recurrent => "recurrent",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallKind {
    Gemm,
    Gemv,
}

/// One multiply issued by an executor. `bias` counts bias elements folded
/// into the result in the same phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEntry {
    pub layer: usize,
    pub phase: Phase,
    pub op: CallKind,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub bias: usize,
}

impl TraceEntry {
    /// Weight elements read by this call.
    pub fn weight_elements(&self) -> u64 {
        (self.m * self.k + self.bias) as u64
    }
}

/// Call log of one executor run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub entries: Vec<TraceEntry>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn gemm_count(&self) -> usize {
        self.entries.iter().filter(|e| e.op == CallKind::Gemm).count()
    }

    pub fn gemv_count(&self) -> usize {
        self.entries.iter().filter(|e| e.op == CallKind::Gemv).count()
    }

    /// Writes one `layer,phase,op,m,k,n,bias` line per call, after a header.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "layer,phase,op,m,k,n,bias")?;
        for e in &self.entries {
            let op = match e.op {
                CallKind::Gemm => "gemm",
                CallKind::Gemv => "gemv",
            };
            writeln!(out, "{},{},{},{},{},{},{}", e.layer, e.phase, op, e.m, e.k, e.n, e.bias)?;
        }
        Ok(())
    }
}

/// Options for the blocked executors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExecOptions {
    /// Fuse a block's gate products into one gemm over vertically stacked
    /// weights. Traces still report the unfused calls.
    pub stacked: bool,
}

/// Optional trace sink threaded through the executors.
struct Recorder<'a> {
    trace: Option<&'a mut Trace>,
    layer: usize,
}

impl Recorder<'_> {
    fn record(&mut self, phase: Phase, op: CallKind, m: usize, k: usize, n: usize, bias: usize) {
        if let Some(t) = self.trace.as_deref_mut() {
            t.entries.push(TraceEntry {
                layer: self.layer,
                phase,
                op,
                m,
                k,
                n,
                bias,
            });
        }
    }

    fn gemm<S: Scalar>(&mut self, a: &Matrix<S>, b: &Matrix<S>, bias: usize) -> Result<Matrix<S>> {
        let out = gemm(a, b)?;
        self.record(
            Phase::GatePrecompute,
            CallKind::Gemm,
            a.rows(),
            a.cols(),
            b.cols(),
            bias,
        );
        Ok(out)
    }
}

fn map_rows<S: Scalar>(m: &mut Matrix<S>, f: impl Fn(usize, S) -> S + Send + Sync) {
    let cols = m.cols();
    par::for_each_chunk_mut(m.data_mut(), LANE_CHUNK * cols, |chunk_idx, chunk| {
        let row0 = chunk_idx * LANE_CHUNK;
        for (r, row) in chunk.chunks_mut(cols).enumerate() {
            for v in row {
                *v = f(row0 + r, *v);
            }
        }
    });
}

fn add_bias_then<S: Scalar>(m: &mut Matrix<S>, bias: &Vector<S>, act: fn(S) -> S) {
    let b = bias.data();
    map_rows(m, |i, v| act(v + b[i]));
}

fn add_then<S: Scalar>(a: &mut Matrix<S>, b: &Matrix<S>, act: fn(S) -> S) {
    let cols = a.cols();
    let bd = b.data();
    par::for_each_chunk_mut(a.data_mut(), LANE_CHUNK * cols, |chunk_idx, chunk| {
        let off = chunk_idx * LANE_CHUNK * cols;
        let len = chunk.len();
        for (v, &w) in chunk.iter_mut().zip(&bd[off..off + len]) {
            *v = act(*v + w);
        }
    });
}

fn split_rows<S: Scalar>(m: Matrix<S>, parts: usize) -> Result<Vec<Matrix<S>>> {
    let rows = m.rows() / parts;
    let cols = m.cols();
    let data = m.into_data();
    data.chunks(rows * cols)
        .map(|c| Matrix::from_vec(rows, cols, c.to_vec()))
        .collect()
}

fn check_block_input<S: Scalar>(op: &'static str, d_in: usize, xb: &Matrix<S>) -> Result<()> {
    if xb.rows() != d_in {
        return Err(mismatch(
            op,
            format!("block with {d_in} rows"),
            format!("{} rows", xb.rows()),
        ));
    }
    Ok(())
}

/// SRU gates for a block of inputs (`d_in × T'`, one column per step):
/// three gemms, nothing recurrent.
pub fn precompute_gates_sru<S: Scalar>(w: &SruWeights<S>, xb: &Matrix<S>) -> Result<GateBlock<S>> {
    sru_gates_block(w, xb, None, &mut Recorder { trace: None, layer: 0 })
}

fn sru_gates_block<S: Scalar>(
    w: &SruWeights<S>,
    xb: &Matrix<S>,
    stacked: Option<&Matrix<S>>,
    rec: &mut Recorder<'_>,
) -> Result<GateBlock<S>> {
    w.validate()?;
    check_block_input("precompute_gates_sru", w.d_in(), xb)?;
    let d_h = w.d_h();
    let (xhat, mut f, mut r) = match stacked {
        Some(stack) => {
            let all = gemm(stack, xb)?;
            rec.record(Phase::GatePrecompute, CallKind::Gemm, d_h, w.d_in(), xb.cols(), 0);
            rec.record(Phase::GatePrecompute, CallKind::Gemm, d_h, w.d_in(), xb.cols(), d_h);
            rec.record(Phase::GatePrecompute, CallKind::Gemm, d_h, w.d_in(), xb.cols(), d_h);
            let mut parts = split_rows(all, 3)?.into_iter();
            (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap())
        }
        None => (
            rec.gemm(&w.w, xb, 0)?,
            rec.gemm(&w.w_f, xb, d_h)?,
            rec.gemm(&w.w_r, xb, d_h)?,
        ),
    };
    add_bias_then(&mut f, &w.b_f, sigmoid);
    add_bias_then(&mut r, &w.b_r, sigmoid);
    Ok(GateBlock { xhat, f, third: r })
}

/// Builds `[x_carry, x_{t0}, …, x_{t0+T'-2}]`, the previous-input tap of a block.
fn shifted_block<S: Scalar>(xb: &Matrix<S>, x_carry: &Vector<S>) -> Result<Matrix<S>> {
    let steps = xb.cols();
    Matrix::from_fn(
        xb.rows(),
        steps,
        |i, t| if t == 0 { x_carry[i] } else { xb.get(i, t - 1) },
    )
}

/// QRNN gates for a block. `x_carry` is the input just before the block
/// (zeros for the first block).
pub fn precompute_gates_qrnn<S: Scalar>(
    w: &QrnnWeights<S>,
    xb: &Matrix<S>,
    x_carry: &Vector<S>,
) -> Result<GateBlock<S>> {
    qrnn_gates_block(w, xb, x_carry, None, &mut Recorder { trace: None, layer: 0 })
}

fn qrnn_gates_block<S: Scalar>(
    w: &QrnnWeights<S>,
    xb: &Matrix<S>,
    x_carry: &Vector<S>,
    stacked: Option<&Matrix<S>>,
    rec: &mut Recorder<'_>,
) -> Result<GateBlock<S>> {
    w.validate()?;
    check_block_input("precompute_gates_qrnn", w.d_in(), xb)?;
    if x_carry.len() != w.d_in() {
        return Err(mismatch(
            "precompute_gates_qrnn",
            format!("x_carry of length {}", w.d_in()),
            x_carry.len(),
        ));
    }
    let prev = shifted_block(xb, x_carry)?;
    if let Some(stack) = stacked {
        let all = gemm(stack, &Matrix::vstack(&[xb, &prev])?)?;
        for _ in 0..6 {
            rec.record(Phase::GatePrecompute, CallKind::Gemm, w.d_h(), w.d_in(), xb.cols(), 0);
        }
        let mut parts = split_rows(all, 3)?.into_iter();
        let mut xhat = parts.next().unwrap();
        let mut f = parts.next().unwrap();
        let mut o = parts.next().unwrap();
        map_rows(&mut xhat, |_, v| tanh_act(v));
        map_rows(&mut f, |_, v| sigmoid(v));
        map_rows(&mut o, |_, v| sigmoid(v));
        return Ok(GateBlock { xhat, f, third: o });
    }
    let mut tap = |m0: &Matrix<S>, m1: &Matrix<S>, act: fn(S) -> S| -> Result<Matrix<S>> {
        let mut cur = rec.gemm(m0, xb, 0)?;
        let past = rec.gemm(m1, &prev, 0)?;
        add_then(&mut cur, &past, act);
        Ok(cur)
    };
    Ok(GateBlock {
        xhat: tap(&w.w0, &w.w1, tanh_act)?,
        f: tap(&w.wf0, &w.wf1, sigmoid)?,
        third: tap(&w.wo0, &w.wo1, sigmoid)?,
    })
}

/// Resolves `c_t = f_t ⊙ c_{t-1} + (1 − f_t) ⊙ x̂_t` over a block, starting
/// from `c_init`. Column `t` of the result is `c_t`.
pub fn recurrence_sweep<S: Scalar>(f: &Matrix<S>, xhat: &Matrix<S>, c_init: &Vector<S>) -> Result<Matrix<S>> {
    if f.shape() != xhat.shape() {
        return Err(mismatch(
            "recurrence_sweep",
            format!("{:?}", f.shape()),
            format!("{:?}", xhat.shape()),
        ));
    }
    if c_init.len() != f.rows() {
        return Err(mismatch(
            "recurrence_sweep",
            format!("c_init of length {}", f.rows()),
            c_init.len(),
        ));
    }
    let steps = f.cols();
    let mut out = Matrix::zeros(f.rows(), steps)?;
    let (fd, xd, c0) = (f.data(), xhat.data(), c_init.data());
    par::for_each_chunk_mut(out.data_mut(), LANE_CHUNK * steps, |chunk_idx, chunk| {
        let row0 = chunk_idx * LANE_CHUNK;
        for (r, lane) in chunk.chunks_mut(steps).enumerate() {
            let j = row0 + r;
            let base = j * steps;
            let mut c = c0[j];
            for (t, slot) in lane.iter_mut().enumerate() {
                c = blend(fd[base + t], c, xd[base + t]);
                *slot = c;
            }
        }
    });
    Ok(out)
}

/// Output stage: `h = r ⊙ tanh(c) + (1 − r) ⊙ x` for SRU (needs `xb`),
/// `h = o ⊙ tanh(c)` for QRNN. Fully elementwise.
pub fn finalize_outputs<S: Scalar>(
    kind: CellKind,
    gates: &GateBlock<S>,
    c: &Matrix<S>,
    xb: Option<&Matrix<S>>,
) -> Result<Matrix<S>> {
    gates.check()?;
    if c.shape() != gates.xhat.shape() {
        return Err(mismatch(
            "finalize_outputs",
            format!("{:?}", gates.xhat.shape()),
            format!("{:?}", c.shape()),
        ));
    }
    let mut out = c.clone();
    let gd = gates.third.data();
    let cols = out.cols();
    match kind {
        CellKind::Sru => {
            let xb = xb.ok_or_else(|| Error::InvalidArgument("SRU output stage needs the input block".into()))?;
            if xb.shape() != c.shape() {
                return Err(mismatch(
                    "finalize_outputs",
                    format!("input block {:?}", c.shape()),
                    format!("{:?}", xb.shape()),
                ));
            }
            let xd = xb.data();
            par::for_each_chunk_mut(out.data_mut(), LANE_CHUNK * cols, |ci, chunk| {
                let off = ci * LANE_CHUNK * cols;
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = highway(gd[off + k], *v, xd[off + k]);
                }
            });
        }
        CellKind::Qrnn => {
            par::for_each_chunk_mut(out.data_mut(), LANE_CHUNK * cols, |ci, chunk| {
                let off = ci * LANE_CHUNK * cols;
                for (k, v) in chunk.iter_mut().enumerate() {
                    *v = gd[off + k] * tanh_act(*v);
                }
            });
        }
        CellKind::Lstm => {
            return Err(Error::InvalidArgument(
                "LSTM has no blocked output stage; use lstm_run_precomputed".into(),
            ))
        }
    }
    Ok(out)
}

fn write_block_rows<S: Scalar>(out: &mut Matrix<S>, start: usize, h: &Matrix<S>) {
    for t in 0..h.cols() {
        let row = out.row_mut(start + t);
        for (j, v) in row.iter_mut().enumerate() {
            *v = h.get(j, t);
        }
    }
}

fn check_sequence<S: Scalar>(op: &'static str, d_in: usize, x: &Matrix<S>) -> Result<()> {
    if x.cols() != d_in {
        return Err(mismatch(op, format!("input width {d_in}"), x.cols()));
    }
    Ok(())
}

fn run_sru_layer<S: Scalar>(
    w: &SruWeights<S>,
    x: &Matrix<S>,
    plan: &BlockPlan,
    opts: ExecOptions,
    rec: &mut Recorder<'_>,
) -> Result<Matrix<S>> {
    w.validate()?;
    check_sequence("run_blocked", w.d_in(), x)?;
    let stacked = opts
        .stacked
        .then(|| Matrix::vstack(&[&w.w, &w.w_f, &w.w_r]))
        .transpose()?;
    let mut out = Matrix::zeros(x.rows(), w.d_h())?;
    let mut c = Vector::zeros(w.d_h());
    for block in &plan.blocks {
        let xb = x.rows_as_columns(block.start, block.len)?;
        let gates = sru_gates_block(w, &xb, stacked.as_ref(), rec)?;
        let cs = recurrence_sweep(&gates.f, &gates.xhat, &c)?;
        c = cs.column(block.len - 1);
        let h = finalize_outputs(CellKind::Sru, &gates, &cs, Some(&xb))?;
        write_block_rows(&mut out, block.start, &h);
    }
    Ok(out)
}

fn run_qrnn_layer<S: Scalar>(
    w: &QrnnWeights<S>,
    x: &Matrix<S>,
    plan: &BlockPlan,
    opts: ExecOptions,
    rec: &mut Recorder<'_>,
) -> Result<Matrix<S>> {
    w.validate()?;
    check_sequence("run_blocked", w.d_in(), x)?;
    let stacked = if opts.stacked {
        let rows = [
            Matrix::hstack(&[&w.w0, &w.w1])?,
            Matrix::hstack(&[&w.wf0, &w.wf1])?,
            Matrix::hstack(&[&w.wo0, &w.wo1])?,
        ];
        Some(Matrix::vstack(&[&rows[0], &rows[1], &rows[2]])?)
    } else {
        None
    };
    let mut out = Matrix::zeros(x.rows(), w.d_h())?;
    let mut c = Vector::zeros(w.d_h());
    let mut x_carry = Vector::zeros(w.d_in());
    for block in &plan.blocks {
        let xb = x.rows_as_columns(block.start, block.len)?;
        let gates = qrnn_gates_block(w, &xb, &x_carry, stacked.as_ref(), rec)?;
        let cs = recurrence_sweep(&gates.f, &gates.xhat, &c)?;
        c = cs.column(block.len - 1);
        x_carry = Vector::from_slice(x.row(block.start + block.len - 1));
        let h = finalize_outputs(CellKind::Qrnn, &gates, &cs, None)?;
        write_block_rows(&mut out, block.start, &h);
    }
    Ok(out)
}

fn run_lstm_layer<S: Scalar>(
    w: &LstmWeights<S>,
    x: &Matrix<S>,
    plan: &BlockPlan,
    rec: &mut Recorder<'_>,
) -> Result<Matrix<S>> {
    w.validate()?;
    check_sequence("lstm_run_precomputed", w.d_in(), x)?;
    let d_h = w.d_h();
    let mut out = Matrix::zeros(x.rows(), d_h)?;
    let mut c = vec![S::zero(); d_h];
    let mut h = Vector::zeros(d_h);
    for block in &plan.blocks {
        let xb = x.rows_as_columns(block.start, block.len)?;
        // Biases are added per step, after the recurrent term, to keep the
        // stepwise summation order.
        let pre = [
            rec.gemm(&w.w_f, &xb, d_h)?,
            rec.gemm(&w.w_i, &xb, d_h)?,
            rec.gemm(&w.w_o, &xb, d_h)?,
            rec.gemm(&w.w_c, &xb, d_h)?,
        ];
        let bias = [&w.b_f, &w.b_i, &w.b_o, &w.b_c];
        for t in 0..block.len {
            let mut rec_terms = Vec::with_capacity(4);
            for u in [&w.u_f, &w.u_i, &w.u_o, &w.u_c] {
                rec_terms.push(gemv_tiled(u, &h)?);
                rec.record(Phase::Recurrent, CallKind::Gemv, d_h, d_h, 1, 0);
            }
            let row = out.row_mut(block.start + t);
            for j in 0..d_h {
                let g = |q: usize| pre[q].get(j, t) + rec_terms[q][j] + bias[q][j];
                c[j] = lstm_cell_update(g(0), g(1), g(3), c[j]);
                row[j] = sigmoid(g(2)) * tanh_act(c[j]);
            }
            h = Vector::from_slice(row);
        }
    }
    Ok(out)
}

/// Blocked SRU/QRNN execution with block size `block_size`.
pub fn run_blocked<S: Scalar>(weights: &WeightSet<S>, x: &Matrix<S>, block_size: usize) -> Result<Matrix<S>> {
    run_blocked_with(weights, x, block_size, ExecOptions::default(), None)
}

pub fn run_blocked_with<S: Scalar>(
    weights: &WeightSet<S>,
    x: &Matrix<S>,
    block_size: usize,
    opts: ExecOptions,
    trace: Option<&mut Trace>,
) -> Result<Matrix<S>> {
    if weights.config().kind == CellKind::Lstm {
        return Err(Error::InvalidArgument(
            "run_blocked handles SRU and QRNN; use lstm_run_precomputed for LSTM".into(),
        ));
    }
    run_multistep(weights, x, block_size, opts, trace)
}

/// LSTM with the input products blocked and the recurrent products per step.
pub fn lstm_run_precomputed<S: Scalar>(w: &LstmWeights<S>, x: &Matrix<S>, block_size: usize) -> Result<Matrix<S>> {
    lstm_run_precomputed_with(w, x, block_size, None)
}

pub fn lstm_run_precomputed_with<S: Scalar>(
    w: &LstmWeights<S>,
    x: &Matrix<S>,
    block_size: usize,
    trace: Option<&mut Trace>,
) -> Result<Matrix<S>> {
    let plan = plan_blocks(x.rows(), block_size)?;
    run_lstm_layer(w, x, &plan, &mut Recorder { trace, layer: 0 })
}

/// Blocked execution for any cell kind and layer count: SRU and QRNN are
/// fully blocked, LSTM uses the partial precompute.
pub fn run_multistep<S: Scalar>(
    weights: &WeightSet<S>,
    x: &Matrix<S>,
    block_size: usize,
    opts: ExecOptions,
    mut trace: Option<&mut Trace>,
) -> Result<Matrix<S>> {
    let plan = plan_blocks(x.rows(), block_size)?;
    let mut input: Option<Matrix<S>> = None;
    for (l, layer) in weights.layers().iter().enumerate() {
        let mut rec = Recorder {
            trace: trace.as_deref_mut(),
            layer: l,
        };
        let src = input.as_ref().unwrap_or(x);
        let out = match layer {
            LayerWeights::Sru(w) => run_sru_layer(w, src, &plan, opts, &mut rec)?,
            LayerWeights::Qrnn(w) => run_qrnn_layer(w, src, &plan, opts, &mut rec)?,
            LayerWeights::Lstm(w) => run_lstm_layer(w, src, &plan, &mut rec)?,
        };
        input = Some(out);
    }
    input.ok_or_else(|| Error::InvalidConfig("weight set has no layers".into()))
}

#[cfg(test)]
// Golden values keep every digit the oracle printed.
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::cells::{qrnn_gates, run_stepwise, sru_gates, CellState};
    use crate::model::{generate_sequence, generate_weights, RnnConfig};
    use crate::numeric::Precision;

    fn setup<S: Scalar>(kind: CellKind, d: usize, len: usize, seed: u64) -> (WeightSet<S>, Matrix<S>) {
        let cfg = RnnConfig::square(kind, d, S::PRECISION);
        (
            generate_weights(&cfg, seed).unwrap(),
            generate_sequence(len, d, seed ^ 1).unwrap(),
        )
    }

    fn max_diff<S: Scalar>(a: &Matrix<S>, b: &Matrix<S>) -> f64 {
        a.max_abs_diff(b).unwrap()
    }

    #[test]
    fn plans() {
        let p = plan_blocks(1024, 32).unwrap();
        assert_eq!(p.len(), 32);
        assert!(p.blocks.iter().all(|b| b.len == 32));
        let lens: Vec<_> = plan_blocks(100, 32).unwrap().blocks.iter().map(|b| b.len).collect();
        assert_eq!(lens, [32, 32, 32, 4]);
        assert_eq!(plan_blocks(5, 8).unwrap().blocks, [Block { start: 0, len: 5 }]);
        assert!(plan_blocks(0, 4).is_err());
        assert!(plan_blocks(4, 0).is_err());
    }

    #[test]
    fn plan_tiles_sequence() {
        for len in 1..70 {
            for t in 1..20 {
                let p = plan_blocks(len, t).unwrap();
                assert_eq!(p.len(), len.div_ceil(t));
                let mut next = 0;
                for (i, b) in p.blocks.iter().enumerate() {
                    assert_eq!(b.start, next);
                    assert!(b.len >= 1 && b.len <= t);
                    if i + 1 < p.len() {
                        assert_eq!(b.len, t);
                    }
                    next += b.len;
                }
                assert_eq!(next, len);
            }
        }
    }

    #[test]
    fn single_column_gates_match_step_gates() {
        let (ws, x) = setup::<f64>(CellKind::Sru, 8, 1, 5);
        let LayerWeights::Sru(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let g = precompute_gates_sru(w, &x.rows_as_columns(0, 1).unwrap()).unwrap();
        let [xhat, f, r] = sru_gates(w, &Vector::from_slice(x.row(0))).unwrap();
        assert!(g.xhat.column(0).max_abs_diff(&xhat).unwrap() < 1e-15);
        assert!(g.f.column(0).max_abs_diff(&f).unwrap() < 1e-15);
        assert!(g.third.column(0).max_abs_diff(&r).unwrap() < 1e-15);

        let (ws, x) = setup::<f64>(CellKind::Qrnn, 8, 2, 5);
        let LayerWeights::Qrnn(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let carry = Vector::from_slice(x.row(0));
        let g = precompute_gates_qrnn(w, &x.rows_as_columns(1, 1).unwrap(), &carry).unwrap();
        let [xhat, f, o] = qrnn_gates(w, &Vector::from_slice(x.row(1)), &carry).unwrap();
        assert!(g.xhat.column(0).max_abs_diff(&xhat).unwrap() < 1e-15);
        assert!(g.f.column(0).max_abs_diff(&f).unwrap() < 1e-15);
        assert!(g.third.column(0).max_abs_diff(&o).unwrap() < 1e-15);
    }

    #[test]
    fn zero_weight_gates() {
        let w = SruWeights {
            w: Matrix::<f64>::zeros(2, 2).unwrap(),
            w_f: Matrix::zeros(2, 2).unwrap(),
            w_r: Matrix::zeros(2, 2).unwrap(),
            b_f: Vector::from_slice(&[1.0, -1.0]),
            b_r: Vector::from_slice(&[0.0, 2.0]),
        };
        let xb = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.5, 4.0]]).unwrap();
        let g = precompute_gates_sru(&w, &xb).unwrap();
        assert!(g.xhat.data().iter().all(|&v| v == 0.0));
        for t in 0..3 {
            assert_eq!(g.f.get(0, t), sigmoid(1.0));
            assert_eq!(g.f.get(1, t), sigmoid(-1.0));
            assert_eq!(g.third.get(1, t), sigmoid(2.0));
        }
    }

    #[test]
    fn golden_sru_gate_block() {
        let w = SruWeights {
            w: Matrix::from_rows(&[[0.5, -0.3], [0.2, 0.4]]).unwrap(),
            w_f: Matrix::from_rows(&[[0.1, 0.2], [-0.3, 0.1]]).unwrap(),
            w_r: Matrix::from_rows(&[[-0.2, 0.1], [0.3, 0.3]]).unwrap(),
            b_f: Vector::from_slice(&[0.1, -0.2]),
            b_r: Vector::from_slice(&[0.0, 0.3]),
        };
        let xb = Matrix::from_rows(&[[0.3, 0.9, -0.4], [-0.6, 0.1, 0.5]]).unwrap();
        let g = precompute_gates_sru(&w, &xb).unwrap();
        let xhat: [[f64; 3]; 2] = [[0.33, 0.42, -0.35], [-0.18, 0.22, 0.12]];
        let f: [[f64; 3]; 2] = [
            [0.50249997916687499803, 0.55230790957432527323, 0.53991488455556568313],
            [0.41338242108266993951, 0.38698582386066452914, 0.49250056244937960688],
        ];
        let r: [[f64; 3]; 2] = [
            [0.47003594823542824757, 0.45760205922564900578, 0.53245430638731875422],
            [0.55230790957432526842, 0.64565630622579544783, 0.58175937684183623733],
        ];
        for j in 0..2 {
            for t in 0..3 {
                assert!((g.xhat.get(j, t) - xhat[j][t]).abs() < 1e-12);
                assert!((g.f.get(j, t) - f[j][t]).abs() < 1e-12);
                assert!((g.third.get(j, t) - r[j][t]).abs() < 1e-12);
            }
        }
        // Chained through the remaining phases this reproduces the first three
        // stepwise outputs of the same sequence.
        let c = recurrence_sweep(&g.f, &g.xhat, &Vector::zeros(2)).unwrap();
        let h = finalize_outputs(CellKind::Sru, &g, &c, Some(&xb)).unwrap();
        let cfg = RnnConfig::square(CellKind::Sru, 2, Precision::F64);
        let ws = WeightSet::new(cfg, vec![LayerWeights::Sru(w)]).unwrap();
        let want = run_stepwise(&ws, &xb.transpose()).unwrap();
        assert!(max_diff(&h.transpose(), &want) < 1e-12);
    }

    #[test]
    fn qrnn_first_block_without_previous_tap() {
        let (ws, x) = setup::<f64>(CellKind::Qrnn, 4, 3, 9);
        let LayerWeights::Qrnn(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let mut w = w.clone();
        for m in [&mut w.w1, &mut w.wf1, &mut w.wo1] {
            *m = Matrix::zeros(4, 4).unwrap();
        }
        let xb = x.rows_as_columns(0, 3).unwrap();
        let g = precompute_gates_qrnn(&w, &xb, &Vector::zeros(4)).unwrap();
        let xhat = gemm(&w.w0, &xb).unwrap();
        let f = gemm(&w.wf0, &xb).unwrap();
        for (got, pre) in g.xhat.data().iter().zip(xhat.data()) {
            assert_eq!(*got, tanh_act(*pre));
        }
        for (got, pre) in g.f.data().iter().zip(f.data()) {
            assert_eq!(*got, sigmoid(*pre));
        }
    }

    #[test]
    fn qrnn_carry_crosses_block_boundary() {
        let (ws, x) = setup::<f64>(CellKind::Qrnn, 2, 6, 21);
        let want = run_stepwise(&ws, &x).unwrap();
        let got = run_blocked(&ws, &x, 3).unwrap();
        assert!(max_diff(&got, &want) <= 1e-12);
        // Dropping the carry changes the first output of the second block.
        let LayerWeights::Qrnn(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let xb = x.rows_as_columns(3, 3).unwrap();
        let with = precompute_gates_qrnn(w, &xb, &Vector::from_slice(x.row(2))).unwrap();
        let without = precompute_gates_qrnn(w, &xb, &Vector::zeros(2)).unwrap();
        assert_ne!(with.f.column(0), without.f.column(0));
        assert_eq!(with.f.column(1), without.f.column(1));
    }

    #[test]
    fn sweep_examples() {
        let xhat = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let c0 = Vector::from_slice(&[0.25, -0.5]);
        let ones = Matrix::filled(2, 3, 1.0).unwrap();
        let c = recurrence_sweep(&ones, &xhat, &c0).unwrap();
        for t in 0..3 {
            assert_eq!(c.column(t), c0);
        }
        let zeros = Matrix::zeros(2, 3).unwrap();
        assert_eq!(recurrence_sweep(&zeros, &xhat, &c0).unwrap(), xhat);

        let f = Matrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let x = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let c = recurrence_sweep(&f, &x, &Vector::zeros(1)).unwrap();
        assert_eq!(c.data(), &[0.5, 0.75]);

        assert!(recurrence_sweep(&f, &xhat, &c0).is_err());
        assert!(recurrence_sweep(&ones, &xhat, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn finalize_examples() {
        let c = Matrix::<f64>::from_rows(&[[0.1, -0.4], [0.7, 2.0]]).unwrap();
        let xb = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let gates = GateBlock {
            xhat: Matrix::zeros(2, 2).unwrap(),
            f: Matrix::zeros(2, 2).unwrap(),
            third: Matrix::filled(2, 2, 1.0).unwrap(),
        };
        let h = finalize_outputs(CellKind::Qrnn, &gates, &c, None).unwrap();
        for (got, c) in h.data().iter().zip(c.data()) {
            assert_eq!(*got, c.tanh());
        }
        let closed = GateBlock {
            third: Matrix::zeros(2, 2).unwrap(),
            ..gates.clone()
        };
        assert_eq!(finalize_outputs(CellKind::Sru, &closed, &c, Some(&xb)).unwrap(), xb);
        assert!(matches!(
            finalize_outputs(CellKind::Sru, &closed, &c, None),
            Err(Error::InvalidArgument(_))
        ));
        assert!(finalize_outputs(CellKind::Lstm, &gates, &c, None).is_err());
    }

    #[test]
    fn degenerate_block_sizes_match_oracle() {
        for kind in [CellKind::Sru, CellKind::Qrnn] {
            let (ws, x) = setup::<f64>(kind, 16, 40, 2);
            let want = run_stepwise(&ws, &x).unwrap();
            assert!(max_diff(&run_blocked(&ws, &x, 1).unwrap(), &want) <= 1e-12);
            assert!(max_diff(&run_blocked(&ws, &x, 40).unwrap(), &want) <= 1e-12);
            assert!(max_diff(&run_blocked(&ws, &x, 500).unwrap(), &want) <= 1e-12);
        }
    }

    #[test]
    fn sru_d64_matches_oracle() {
        let (ws, x) = setup::<f32>(CellKind::Sru, 64, 256, 42);
        let want = run_stepwise(&ws, &x).unwrap();
        assert!(max_diff(&run_blocked(&ws, &x, 32).unwrap(), &want) <= 1e-4);
    }

    #[test]
    fn result_independent_of_block_size() {
        for kind in [CellKind::Sru, CellKind::Qrnn] {
            let (ws, x) = setup::<f32>(kind, 32, 200, 8);
            let a = run_blocked(&ws, &x, 4).unwrap();
            let b = run_blocked(&ws, &x, 64).unwrap();
            assert!(max_diff(&a, &b) <= 2e-4);
        }
    }

    #[test]
    fn run_blocked_rejects_lstm() {
        let (ws, x) = setup::<f32>(CellKind::Lstm, 4, 4, 1);
        assert!(matches!(run_blocked(&ws, &x, 2), Err(Error::InvalidArgument(_))));
        let (ws, x) = setup::<f32>(CellKind::Sru, 4, 4, 1);
        assert!(run_blocked(&ws, &x, 0).is_err());
        let wrong = Matrix::zeros(4, 5).unwrap();
        assert!(matches!(
            run_blocked(&ws, &wrong, 2),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn lstm_of(ws: &WeightSet<f64>) -> &LstmWeights<f64> {
        match &ws.layers()[0] {
            LayerWeights::Lstm(w) => w,
            _ => unreachable!(),
        }
    }

    #[test]
    fn lstm_precompute_matches_oracle() {
        let (ws, x) = setup::<f64>(CellKind::Lstm, 12, 30, 4);
        let want = run_stepwise(&ws, &x).unwrap();
        assert!(max_diff(&lstm_run_precomputed(lstm_of(&ws), &x, 1).unwrap(), &want) <= 1e-12);

        let (ws, x) = setup::<f32>(CellKind::Lstm, 12, 30, 4);
        let LayerWeights::Lstm(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let want = run_stepwise(&ws, &x).unwrap();
        assert!(max_diff(&lstm_run_precomputed(w, &x, 1).unwrap(), &want) <= 1e-5);

        let (ws, x) = setup::<f32>(CellKind::Lstm, 64, 128, 4);
        let LayerWeights::Lstm(w) = &ws.layers()[0] else {
            unreachable!()
        };
        let want = run_stepwise(&ws, &x).unwrap();
        assert!(max_diff(&lstm_run_precomputed(w, &x, 16).unwrap(), &want) <= 1e-4);
    }

    #[test]
    fn lstm_without_recurrence_is_feed_forward() {
        let (ws, x) = setup::<f64>(CellKind::Lstm, 6, 10, 13);
        let mut w = lstm_of(&ws).clone();
        for u in [&mut w.u_f, &mut w.u_i, &mut w.u_o, &mut w.u_c] {
            *u = Matrix::zeros(6, 6).unwrap();
        }
        let full = lstm_run_precomputed(&w, &x, 4).unwrap();
        // With U = 0 nothing reads h, so a garbage h_{t-1} must not matter.
        let mut state = CellState::zeros(CellKind::Lstm, 6, 6);
        for t in 0..x.rows() {
            let mut scrambled = state.clone();
            scrambled.h = Vector::filled(6, 123.0);
            state = crate::cells::lstm_step(&w, &Vector::from_slice(x.row(t)), &scrambled).unwrap();
            let diff = Vector::from_slice(full.row(t)).max_abs_diff(&state.h).unwrap();
            assert!(diff <= 1e-12);
        }
    }

    #[test]
    fn call_counts() {
        for (len, t) in [(256usize, 32usize), (100, 32), (7, 1), (5, 8)] {
            let blocks = len.div_ceil(t);
            for (kind, per_block) in [(CellKind::Sru, 3), (CellKind::Qrnn, 6)] {
                let (ws, x) = setup::<f32>(kind, 8, len, 3);
                let mut trace = Trace::new();
                run_blocked_with(&ws, &x, t, ExecOptions::default(), Some(&mut trace)).unwrap();
                assert_eq!(trace.gemm_count(), per_block * blocks);
                assert_eq!(trace.gemv_count(), 0);
            }
            let (ws, x) = setup::<f32>(CellKind::Lstm, 8, len, 3);
            let LayerWeights::Lstm(w) = &ws.layers()[0] else {
                unreachable!()
            };
            let mut trace = Trace::new();
            lstm_run_precomputed_with(w, &x, t, Some(&mut trace)).unwrap();
            assert_eq!(trace.gemm_count(), 4 * blocks);
            assert_eq!(trace.gemv_count(), 4 * len);
        }
    }

    #[test]
    fn stacked_matches_unstacked() {
        for kind in [CellKind::Sru, CellKind::Qrnn] {
            let (ws, x) = setup::<f64>(kind, 24, 50, 6);
            let mut plain = Trace::new();
            let mut fused = Trace::new();
            let a = run_blocked_with(&ws, &x, 16, ExecOptions::default(), Some(&mut plain)).unwrap();
            let b = run_blocked_with(&ws, &x, 16, ExecOptions { stacked: true }, Some(&mut fused)).unwrap();
            assert!(max_diff(&a, &b) <= 1e-12);
            assert_eq!(plain, fused);
        }
    }

    #[test]
    fn multilayer_matches_oracle() {
        for kind in CellKind::ALL {
            let cfg = RnnConfig::square(kind, 10, Precision::F64).with_layers(3);
            let ws = generate_weights::<f64>(&cfg, 17).unwrap();
            let x = generate_sequence::<f64>(33, 10, 17).unwrap();
            let want = run_stepwise(&ws, &x).unwrap();
            let mut trace = Trace::new();
            let got = run_multistep(&ws, &x, 8, ExecOptions::default(), Some(&mut trace)).unwrap();
            assert!(max_diff(&got, &want) <= 1e-12);
            assert_eq!(trace.entries.iter().map(|e| e.layer).max(), Some(2));
        }
    }

    #[test]
    fn trace_csv_lines() {
        let (ws, x) = setup::<f32>(CellKind::Sru, 4, 4, 1);
        let mut trace = Trace::new();
        run_blocked_with(&ws, &x, 4, ExecOptions::default(), Some(&mut trace)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "layer,phase,op,m,k,n,bias");
        assert_eq!(lines[1], "0,gate-precompute,gemm,4,4,4,0");
        assert_eq!(lines[2], "0,gate-precompute,gemm,4,4,4,4");
        assert_eq!(lines.len(), 4);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn identical_for_any_worker_count() {
        for kind in [CellKind::Sru, CellKind::Qrnn] {
            let (ws, x) = setup::<f32>(kind, 200, 70, 12);
            let one = crate::with_threads(1, || run_blocked(&ws, &x, 16).unwrap());
            let four = crate::with_threads(4, || run_blocked(&ws, &x, 16).unwrap());
            assert_eq!(one.data(), four.data());
        }
    }
}
