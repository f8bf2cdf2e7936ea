//! Single-time-step LSTM, SRU and QRNN cells and the stepwise executor.
//!
//! Everything here uses the ascending-order [`gemv`] so that
//! [`run_stepwise`] is a deterministic oracle for the blocked executors.

use std::fmt;

use crate::error::{mismatch, Error, Result};
use crate::model::WeightSet;
use crate::numeric::{gemv, sigmoid, tanh_act, Matrix, Scalar, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum CellKind {
    #[serde(rename = "LSTM")]
    Lstm,
    #[serde(rename = "SRU")]
    Sru,
    #[serde(rename = "QRNN")]
    Qrnn,
}

impl CellKind {
    pub const ALL: [CellKind; 3] = [CellKind::Lstm, CellKind::Sru, CellKind::Qrnn];

    pub fn label(self) -> &'static str {
        match self {
            CellKind::Lstm => "LSTM",
            CellKind::Sru => "SRU",
            CellKind::Qrnn => "QRNN",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            CellKind::Lstm => 0,
            CellKind::Sru => 1,
            CellKind::Qrnn => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.code() == code)
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" => Ok(CellKind::Lstm),
            "sru" => Ok(CellKind::Sru),
            "qrnn" => Ok(CellKind::Qrnn),
            other => Err(Error::InvalidArgument(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<S> {
    pub w_f: Matrix<S>,
    pub w_i: Matrix<S>,
    pub w_o: Matrix<S>,
    pub w_c: Matrix<S>,
    pub u_f: Matrix<S>,
    pub u_i: Matrix<S>,
    pub u_o: Matrix<S>,
    pub u_c: Matrix<S>,
    pub b_f: Vector<S>,
    pub b_i: Vector<S>,
    pub b_o: Vector<S>,
    pub b_c: Vector<S>,
}

/// SRU weights. The highway term mixes `x_t` into `h_t`, so `d_in == d_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct SruWeights<S> {
    pub w: Matrix<S>,
    pub w_f: Matrix<S>,
    pub w_r: Matrix<S>,
    pub b_f: Vector<S>,
    pub b_r: Vector<S>,
}

/// QRNN weights: two taps per gate (current and previous input), no biases.
#[derive(Debug, Clone, PartialEq)]
pub struct QrnnWeights<S> {
    pub w0: Matrix<S>,
    pub w1: Matrix<S>,
    pub wf0: Matrix<S>,
    pub wf1: Matrix<S>,
    pub wo0: Matrix<S>,
    pub wo1: Matrix<S>,
}

fn expect_shape<S: Scalar>(name: &'static str, m: &Matrix<S>, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(mismatch(
            name,
            format!("{rows}x{cols}"),
            format!("{}x{}", m.rows(), m.cols()),
        ));
    }
    Ok(())
}

fn expect_len<S: Scalar>(name: &'static str, v: &Vector<S>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(mismatch(name, len, v.len()));
    }
    Ok(())
}

impl<S: Scalar> LstmWeights<S> {
    pub fn d_in(&self) -> usize {
        self.w_f.cols()
    }

    pub fn d_h(&self) -> usize {
        self.w_f.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.d_h(), self.d_in());
        for (name, m) in [("W_i", &self.w_i), ("W_o", &self.w_o), ("W_c", &self.w_c)] {
            expect_shape(name, m, h, i)?;
        }
        for (name, m) in [
            ("U_f", &self.u_f),
            ("U_i", &self.u_i),
            ("U_o", &self.u_o),
            ("U_c", &self.u_c),
        ] {
            expect_shape(name, m, h, h)?;
        }
        for (name, v) in [
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ] {
            expect_len(name, v, h)?;
        }
        Ok(())
    }
}

impl<S: Scalar> SruWeights<S> {
    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_h(&self) -> usize {
        self.w.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.d_h(), self.d_in());
        if h != i {
            return Err(mismatch(
                "SRU highway width",
                format!("d_in == d_h == {h}"),
                format!("d_in = {i}"),
            ));
        }
        expect_shape("W_f", &self.w_f, h, i)?;
        expect_shape("W_r", &self.w_r, h, i)?;
        expect_len("b_f", &self.b_f, h)?;
        expect_len("b_r", &self.b_r, h)
    }
}

impl<S: Scalar> QrnnWeights<S> {
    pub fn d_in(&self) -> usize {
        self.w0.cols()
    }

    pub fn d_h(&self) -> usize {
        self.w0.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, i) = (self.d_h(), self.d_in());
        for (name, m) in [
            ("W1", &self.w1),
            ("Wf0", &self.wf0),
            ("Wf1", &self.wf1),
            ("Wo0", &self.wo0),
            ("Wo1", &self.wo1),
        ] {
            expect_shape(name, m, h, i)?;
        }
        Ok(())
    }
}

/// Recurrent carriers of one layer. `x_prev` is only populated for QRNN.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState<S> {
    pub c: Vector<S>,
    pub h: Vector<S>,
    pub x_prev: Vector<S>,
}

impl<S: Scalar> CellState<S> {
    pub fn zeros(kind: CellKind, d_in: usize, d_h: usize) -> Self {
        Self {
            c: Vector::zeros(d_h),
            h: Vector::zeros(d_h),
            x_prev: Vector::zeros(if kind == CellKind::Qrnn { d_in } else { 0 }),
        }
    }
}

fn check_state<S: Scalar>(
    op: &'static str,
    x: &Vector<S>,
    state: &CellState<S>,
    d_in: usize,
    d_h: usize,
) -> Result<()> {
    if x.len() != d_in {
        return Err(mismatch(op, format!("x_t of length {d_in}"), x.len()));
    }
    if state.c.len() != d_h || state.h.len() != d_h {
        return Err(mismatch(
            op,
            format!("state of width {d_h}"),
            format!("c: {}, h: {}", state.c.len(), state.h.len()),
        ));
    }
    Ok(())
}

#[inline]
fn add3<'a, S: Scalar>(
    a: &'a Vector<S>,
    b: &'a Vector<S>,
    bias: Option<&'a Vector<S>>,
) -> impl Iterator<Item = S> + 'a {
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(move |(j, (&x, &y))| x + y + bias.map_or(S::zero(), |b| b[j]))
}

pub fn lstm_step<S: Scalar>(w: &LstmWeights<S>, x: &Vector<S>, state: &CellState<S>) -> Result<CellState<S>> {
    check_state("lstm_step", x, state, w.d_in(), w.d_h())?;
    let h_prev = &state.h;
    let pre = |wm: &Matrix<S>, um: &Matrix<S>, b: &Vector<S>| -> Result<Vec<S>> {
        let wx = gemv(wm, x)?;
        let uh = gemv(um, h_prev)?;
        Ok(add3(&wx, &uh, Some(b)).collect())
    };
    let f = pre(&w.w_f, &w.u_f, &w.b_f)?;
    let i = pre(&w.w_i, &w.u_i, &w.b_i)?;
    let o = pre(&w.w_o, &w.u_o, &w.b_o)?;
    let g = pre(&w.w_c, &w.u_c, &w.b_c)?;
    let mut c = Vec::with_capacity(f.len());
    let mut h = Vec::with_capacity(f.len());
    for j in 0..f.len() {
        let c_t = lstm_cell_update(f[j], i[j], g[j], state.c[j]);
        c.push(c_t);
        h.push(sigmoid(o[j]) * tanh_act(c_t));
    }
    Ok(CellState {
        c: Vector::from_vec(c),
        h: Vector::from_vec(h),
        x_prev: Vector::zeros(0),
    })
}

/// `c_t` from pre-activation gate values.
#[inline]
pub(crate) fn lstm_cell_update<S: Scalar>(f_pre: S, i_pre: S, g_pre: S, c_prev: S) -> S {
    sigmoid(f_pre) * c_prev + sigmoid(i_pre) * tanh_act(g_pre)
}

/// Input-only SRU gates: `(x̂, f, r)`.
pub fn sru_gates<S: Scalar>(w: &SruWeights<S>, x: &Vector<S>) -> Result<[Vector<S>; 3]> {
    let xhat = gemv(&w.w, x)?;
    let f = gemv(&w.w_f, x)?;
    let r = gemv(&w.w_r, x)?;
    let f = Vector::from_vec(
        f.data()
            .iter()
            .zip(w.b_f.data())
            .map(|(&a, &b)| sigmoid(a + b))
            .collect(),
    );
    let r = Vector::from_vec(
        r.data()
            .iter()
            .zip(w.b_r.data())
            .map(|(&a, &b)| sigmoid(a + b))
            .collect(),
    );
    Ok([xhat, f, r])
}

pub fn sru_step<S: Scalar>(w: &SruWeights<S>, x: &Vector<S>, state: &CellState<S>) -> Result<CellState<S>> {
    w.validate()?;
    check_state("sru_step", x, state, w.d_in(), w.d_h())?;
    let [xhat, f, r] = sru_gates(w, x)?;
    let mut c = Vec::with_capacity(xhat.len());
    let mut h = Vec::with_capacity(xhat.len());
    for j in 0..xhat.len() {
        let c_t = blend(f[j], state.c[j], xhat[j]);
        c.push(c_t);
        h.push(highway(r[j], c_t, x[j]));
    }
    Ok(CellState {
        c: Vector::from_vec(c),
        h: Vector::from_vec(h),
        x_prev: Vector::zeros(0),
    })
}

/// Two-tap QRNN gates from `x_t` and `x_{t-1}`: `(x̂, f, o)`.
pub fn qrnn_gates<S: Scalar>(w: &QrnnWeights<S>, x: &Vector<S>, x_prev: &Vector<S>) -> Result<[Vector<S>; 3]> {
    let tap = |m0: &Matrix<S>, m1: &Matrix<S>, act: fn(S) -> S| -> Result<Vector<S>> {
        let a = gemv(m0, x)?;
        let b = gemv(m1, x_prev)?;
        Ok(Vector::from_vec(add3(&a, &b, None).map(act).collect()))
    };
    Ok([
        tap(&w.w0, &w.w1, tanh_act)?,
        tap(&w.wf0, &w.wf1, sigmoid)?,
        tap(&w.wo0, &w.wo1, sigmoid)?,
    ])
}

pub fn qrnn_step<S: Scalar>(w: &QrnnWeights<S>, x: &Vector<S>, state: &CellState<S>) -> Result<CellState<S>> {
    check_state("qrnn_step", x, state, w.d_in(), w.d_h())?;
    if state.x_prev.len() != w.d_in() {
        return Err(mismatch(
            "qrnn_step",
            format!("x_prev of length {}", w.d_in()),
            state.x_prev.len(),
        ));
    }
    let [xhat, f, o] = qrnn_gates(w, x, &state.x_prev)?;
    let mut c = Vec::with_capacity(xhat.len());
    let mut h = Vec::with_capacity(xhat.len());
    for j in 0..xhat.len() {
        let c_t = blend(f[j], state.c[j], xhat[j]);
        c.push(c_t);
        h.push(o[j] * tanh_act(c_t));
    }
    Ok(CellState {
        c: Vector::from_vec(c),
        h: Vector::from_vec(h),
        x_prev: x.clone(),
    })
}

/// `f ⊙ c_prev + (1 − f) ⊙ x̂`, shared by SRU and QRNN.
#[inline]
pub(crate) fn blend<S: Scalar>(f: S, c_prev: S, xhat: S) -> S {
    f * c_prev + (S::one() - f) * xhat
}

/// SRU output with highway: `r ⊙ tanh(c) + (1 − r) ⊙ x`.
#[inline]
pub(crate) fn highway<S: Scalar>(r: S, c: S, x: S) -> S {
    r * tanh_act(c) + (S::one() - r) * x
}

/// Weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerWeights<S> {
    Lstm(LstmWeights<S>),
    Sru(SruWeights<S>),
    Qrnn(QrnnWeights<S>),
}

impl<S: Scalar> LayerWeights<S> {
    pub fn kind(&self) -> CellKind {
        match self {
            LayerWeights::Lstm(_) => CellKind::Lstm,
            LayerWeights::Sru(_) => CellKind::Sru,
            LayerWeights::Qrnn(_) => CellKind::Qrnn,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            LayerWeights::Lstm(w) => w.d_in(),
            LayerWeights::Sru(w) => w.d_in(),
            LayerWeights::Qrnn(w) => w.d_in(),
        }
    }

    pub fn d_h(&self) -> usize {
        match self {
            LayerWeights::Lstm(w) => w.d_h(),
            LayerWeights::Sru(w) => w.d_h(),
            LayerWeights::Qrnn(w) => w.d_h(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerWeights::Lstm(w) => w.validate(),
            LayerWeights::Sru(w) => w.validate(),
            LayerWeights::Qrnn(w) => w.validate(),
        }
    }

    pub fn step(&self, x: &Vector<S>, state: &CellState<S>) -> Result<CellState<S>> {
        match self {
            LayerWeights::Lstm(w) => lstm_step(w, x, state),
            LayerWeights::Sru(w) => sru_step(w, x, state),
            LayerWeights::Qrnn(w) => qrnn_step(w, x, state),
        }
    }

    /// Parameter buffers in canonical (file) order.
    pub fn buffers(&self) -> Vec<&[S]> {
        match self {
            LayerWeights::Lstm(w) => vec![
                w.w_f.data(),
                w.w_i.data(),
                w.w_o.data(),
                w.w_c.data(),
                w.u_f.data(),
                w.u_i.data(),
                w.u_o.data(),
                w.u_c.data(),
                w.b_f.data(),
                w.b_i.data(),
                w.b_o.data(),
                w.b_c.data(),
            ],
            LayerWeights::Sru(w) => vec![w.w.data(), w.w_f.data(), w.w_r.data(), w.b_f.data(), w.b_r.data()],
            LayerWeights::Qrnn(w) => vec![
                w.w0.data(),
                w.w1.data(),
                w.wf0.data(),
                w.wf1.data(),
                w.wo0.data(),
                w.wo1.data(),
            ],
        }
    }

    /// Shapes of [`Self::buffers`] for a layer of the given kind; vectors
    /// are reported as `(len, 1)`.
    pub fn buffer_shapes(kind: CellKind, d_in: usize, d_h: usize) -> Vec<(usize, usize)> {
        let w = (d_h, d_in);
        let u = (d_h, d_h);
        let b = (d_h, 1);
        match kind {
            CellKind::Lstm => vec![w, w, w, w, u, u, u, u, b, b, b, b],
            CellKind::Sru => vec![w, w, w, b, b],
            CellKind::Qrnn => vec![w; 6],
        }
    }

    /// Rebuilds a layer from buffers laid out as in [`Self::buffer_shapes`].
    pub fn from_buffers(kind: CellKind, d_in: usize, d_h: usize, buffers: Vec<Vec<S>>) -> Result<Self> {
        let shapes = Self::buffer_shapes(kind, d_in, d_h);
        if buffers.len() != shapes.len() {
            return Err(mismatch("LayerWeights::from_buffers", shapes.len(), buffers.len()));
        }
        let mut it = buffers.into_iter();
        let mut next_m =
            |cols: usize| -> Result<Matrix<S>> { Matrix::from_vec(d_h, cols, it.next().unwrap_or_default()) };
        let layer = match kind {
            CellKind::Lstm => {
                let (w_f, w_i, w_o, w_c) = (next_m(d_in)?, next_m(d_in)?, next_m(d_in)?, next_m(d_in)?);
                let (u_f, u_i, u_o, u_c) = (next_m(d_h)?, next_m(d_h)?, next_m(d_h)?, next_m(d_h)?);
                let mut next_v = || next_m(1).map(|m| Vector::from_vec(m.into_data()));
                let (b_f, b_i, b_o, b_c) = (next_v()?, next_v()?, next_v()?, next_v()?);
                LayerWeights::Lstm(LstmWeights {
                    w_f,
                    w_i,
                    w_o,
                    w_c,
                    u_f,
                    u_i,
                    u_o,
                    u_c,
                    b_f,
                    b_i,
                    b_o,
                    b_c,
                })
            }
            CellKind::Sru => {
                let (w, w_f, w_r) = (next_m(d_in)?, next_m(d_in)?, next_m(d_in)?);
                let b_f = Vector::from_vec(next_m(1)?.into_data());
                let b_r = Vector::from_vec(next_m(1)?.into_data());
                LayerWeights::Sru(SruWeights { w, w_f, w_r, b_f, b_r })
            }
            CellKind::Qrnn => LayerWeights::Qrnn(QrnnWeights {
                w0: next_m(d_in)?,
                w1: next_m(d_in)?,
                wf0: next_m(d_in)?,
                wf1: next_m(d_in)?,
                wo0: next_m(d_in)?,
                wo1: next_m(d_in)?,
            }),
        };
        layer.validate()?;
        Ok(layer)
    }
}

/// Runs one layer over the rows of `x` from a zero state.
pub fn run_layer_stepwise<S: Scalar>(layer: &LayerWeights<S>, x: &Matrix<S>) -> Result<Matrix<S>> {
    if x.cols() != layer.d_in() {
        return Err(mismatch(
            "run_stepwise",
            format!("input width {}", layer.d_in()),
            x.cols(),
        ));
    }
    let mut out = Matrix::zeros(x.rows(), layer.d_h())?;
    let mut state = CellState::zeros(layer.kind(), layer.d_in(), layer.d_h());
    for t in 0..x.rows() {
        let x_t = Vector::from_slice(x.row(t));
        state = layer.step(&x_t, &state)?;
        out.row_mut(t).copy_from_slice(state.h.data());
    }
    Ok(out)
}

/// Row `t` of the result is `h_t` of the last layer. This is the oracle the
/// blocked executors are checked against.
pub fn run_stepwise<S: Scalar>(weights: &WeightSet<S>, x: &Matrix<S>) -> Result<Matrix<S>> {
    let mut input = None;
    for layer in weights.layers() {
        let out = run_layer_stepwise(layer, input.as_ref().unwrap_or(x))?;
        input = Some(out);
    }
    input.ok_or_else(|| Error::InvalidConfig("weight set has no layers".into()))
}
