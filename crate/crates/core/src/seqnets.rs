//! Unidirectional sequence encoders: per-step dense (LIN), LSTM, GRU and
//! single-head causal self-attention.
//!
//! All encoders use row vectors: an input sequence is an n×d matrix whose
//! row t is `x_t`, and every output row t depends only on input rows `≤ t`.
//! Recurrent weights act on the stacked `[h_{t-1}, x_t]`, so e.g. the LSTM
//! forget-gate weight is `(H + d) × H` with the recurrent block on top.

use nalgebra::DMatrix;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Lin,
    Lstm,
    Gru,
    Attn,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Lin => "lin",
            EncoderKind::Lstm => "lstm",
            EncoderKind::Gru => "gru",
            EncoderKind::Attn => "attn",
        }
    }
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lin" => Ok(EncoderKind::Lin),
            "lstm" => Ok(EncoderKind::Lstm),
            "gru" => Ok(EncoderKind::Gru),
            "attn" => Ok(EncoderKind::Attn),
            other => Err(Error::invalid("encoder", format!("unknown kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub input_dim: usize,
    pub hidden_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(kind: EncoderKind, input_dim: usize, hidden_size: usize, seed: u64) -> Result<Self> {
        if hidden_size == 0 {
            return Err(Error::invalid("hidden_size", "must be at least 1"));
        }
        if input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        Ok(Self {
            kind,
            input_dim,
            hidden_size,
            seed,
        })
    }
}

/// One named parameter matrix. Weights are spectrally normalized; biases are not.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: DMatrix<f64>,
    pub is_weight: bool,
}

/// Encoder parameters: an input dense layer (`enc.in.*`) followed by the
/// kind-specific core (`enc.core.*`).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: Vec<NamedTensor>,
}

fn core_shapes(kind: EncoderKind, h: usize) -> Vec<(&'static str, usize, usize, bool)> {
    match kind {
        EncoderKind::Lin => vec![("w", h, h, true), ("b", 1, h, false)],
        EncoderKind::Lstm => vec![
            ("wf", 2 * h, h, true),
            ("wi", 2 * h, h, true),
            ("wc", 2 * h, h, true),
            ("wo", 2 * h, h, true),
            ("bf", 1, h, false),
            ("bi", 1, h, false),
            ("bc", 1, h, false),
            ("bo", 1, h, false),
        ],
        EncoderKind::Gru => vec![
            ("wz", 2 * h, h, true),
            ("wr", 2 * h, h, true),
            ("wh", 2 * h, h, true),
            ("bz", 1, h, false),
            ("br", 1, h, false),
            ("bh", 1, h, false),
        ],
        EncoderKind::Attn => vec![("wq", h, h, true), ("wk", h, h, true), ("wv", h, h, true)],
    }
}

fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> DMatrix<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl EncoderParams {
    /// Uniform(±1/√fan_in) initialization from the config seed.
    pub fn init(config: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, h) = (config.input_dim, config.hidden_size);
        let mut tensors = vec![
            NamedTensor {
                name: "enc.in.w".into(),
                value: uniform_init(&mut rng, d, h, d),
                is_weight: true,
            },
            NamedTensor {
                name: "enc.in.b".into(),
                value: uniform_init(&mut rng, 1, h, d),
                is_weight: false,
            },
        ];
        for (name, r, c, is_weight) in core_shapes(config.kind, h) {
            let fan_in = if config.kind == EncoderKind::Lin || config.kind == EncoderKind::Attn {
                h
            } else {
                2 * h
            };
            tensors.push(NamedTensor {
                name: format!("enc.core.{name}"),
                value: uniform_init(&mut rng, r, c, fan_in),
                is_weight,
            });
        }
        Self { config, tensors }
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.tensors.iter_mut().find(|t| t.name == name).map(|t| &mut t.value)
    }

    /// Replace every weight matrix by its spectrally normalized version.
    pub fn spectral_normalize(&mut self) {
        for t in self.tensors.iter_mut().filter(|t| t.is_weight) {
            t.value = kernels::spectral_normalize(std::slice::from_ref(&t.value)).remove(0);
        }
    }

    pub fn to_tape(&self, t: &mut Tape) -> EncoderVars {
        EncoderVars {
            kind: self.config.kind,
            hidden: self.config.hidden_size,
            vars: self
                .tensors
                .iter()
                .map(|x| (x.name.clone(), t.leaf(x.value.clone())))
                .collect(),
        }
    }

    /// Full feature map on plain values: layer norm, input layer, core.
    pub fn features(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut t = Tape::new();
        let vars = self.to_tape(&mut t);
        let x = t.constant(layer_norm(inputs));
        let h = vars.features(&mut t, x)?;
        Ok(t.value(h).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Encoder parameters as tape leaves.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub kind: EncoderKind,
    pub hidden: usize,
    pub vars: Vec<(String, Var)>,
}

impl EncoderVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::invalid(name, "missing encoder parameter"))
    }

    fn core(&self, name: &str) -> Result<Var> {
        self.get(&format!("enc.core.{name}"))
    }

    /// Input dense + ReLU followed by the core; `x` is already layer-normed.
    pub fn features(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = self.get("enc.in.w")?;
        let b = self.get("enc.in.b")?;
        let a = t.affine(x, w, b)?;
        let z = t.relu(a)?;
        match self.kind {
            EncoderKind::Lin => forward_lin(t, self.core("w")?, self.core("b")?, z),
            EncoderKind::Lstm => forward_lstm(t, &LstmVars::from_vars(self)?, z),
            EncoderKind::Gru => forward_gru(t, &GruVars::from_vars(self)?, z),
            EncoderKind::Attn => forward_attention(t, &AttnVars::from_vars(self)?, z),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| *v).collect()
    }
}

/// Row-wise standardization without affine parameters; constant rows map to zero.
pub fn layer_norm(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    let c = x.ncols() as f64;
    for mut row in out.row_iter_mut() {
        let mean = row.sum() / c;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

fn step_err(kind: &str, step: usize) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{kind} step {} ({context})", step + 1),
        },
        other => other,
    }
}

/// Per-step dense + ReLU.
pub fn forward_lin(t: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let a = t.affine(x, w, b)?;
    t.relu(a)
}

/// Split a stacked `(H + d) × H` weight into its recurrent and input blocks.
fn split_stacked(t: &mut Tape, w: Var, hidden: usize) -> Result<(Var, Var)> {
    let (r, c) = t.shape(w);
    if r <= hidden || c != hidden {
        return Err(Error::ShapeMismatch {
            op: "stacked weight",
            lhs: (r, c),
            rhs: (hidden, hidden),
        });
    }
    let wh = t.slice(w, 0, 0, hidden, hidden)?;
    let wx = t.slice(w, hidden, 0, r - hidden, hidden)?;
    Ok((wh, wx))
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wf: Var,
    pub wi: Var,
    pub wc: Var,
    pub wo: Var,
    pub bf: Var,
    pub bi: Var,
    pub bc: Var,
    pub bo: Var,
}

impl LstmVars {
    fn from_vars(v: &EncoderVars) -> Result<Self> {
        Ok(Self {
            wf: v.core("wf")?,
            wi: v.core("wi")?,
            wc: v.core("wc")?,
            wo: v.core("wo")?,
            bf: v.core("bf")?,
            bi: v.core("bi")?,
            bc: v.core("bc")?,
            bo: v.core("bo")?,
        })
    }
}

/// LSTM with `h_t = o_t ⊙ tanh(c_t)`, `h_0 = c_0 = 0`.
pub fn forward_lstm(t: &mut Tape, p: &LstmVars, x: Var) -> Result<Var> {
    let hidden = t.shape(p.bf).1;
    let n = t.shape(x).0;
    let mut gates = Vec::with_capacity(4);
    for (w, b) in [(p.wf, p.bf), (p.wi, p.bi), (p.wc, p.bc), (p.wo, p.bo)] {
        let (wh, wx) = split_stacked(t, w, hidden)?;
        let xin = t.affine(x, wx, b)?;
        gates.push((wh, xin));
    }
    let mut h = t.constant(DMatrix::zeros(1, hidden));
    let mut c = t.constant(DMatrix::zeros(1, hidden));
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let step = |t: &mut Tape, h: Var, c: Var| -> Result<(Var, Var)> {
            let mut pre = [h; 4];
            for (g, (wh, xin)) in gates.iter().enumerate() {
                let rec = t.matmul(h, *wh)?;
                let xr = t.row(*xin, s)?;
                pre[g] = t.add(rec, xr)?;
            }
            let f = t.sigmoid(pre[0])?;
            let i = t.sigmoid(pre[1])?;
            let cand = t.tanh(pre[2])?;
            let o = t.sigmoid(pre[3])?;
            let fc = t.mul(f, c)?;
            let ic = t.mul(i, cand)?;
            let c_new = t.add(fc, ic)?;
            let tc = t.tanh(c_new)?;
            let h_new = t.mul(o, tc)?;
            Ok((h_new, c_new))
        };
        let (hn, cn) = step(t, h, c).map_err(step_err("lstm", s))?;
        h = hn;
        c = cn;
        rows.push(h);
    }
    t.concat(&rows, Axis::Rows)
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub wr: Var,
    pub wh: Var,
    pub bz: Var,
    pub br: Var,
    pub bh: Var,
}

impl GruVars {
    fn from_vars(v: &EncoderVars) -> Result<Self> {
        Ok(Self {
            wz: v.core("wz")?,
            wr: v.core("wr")?,
            wh: v.core("wh")?,
            bz: v.core("bz")?,
            br: v.core("br")?,
            bh: v.core("bh")?,
        })
    }
}

/// GRU with `h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ h̃_t`, `h_0 = 0`.
pub fn forward_gru(t: &mut Tape, p: &GruVars, x: Var) -> Result<Var> {
    let hidden = t.shape(p.bz).1;
    let n = t.shape(x).0;
    let (wzh, wzx) = split_stacked(t, p.wz, hidden)?;
    let (wrh, wrx) = split_stacked(t, p.wr, hidden)?;
    let (whh, whx) = split_stacked(t, p.wh, hidden)?;
    let xz = t.affine(x, wzx, p.bz)?;
    let xr = t.affine(x, wrx, p.br)?;
    let xh = t.affine(x, whx, p.bh)?;
    let mut h = t.constant(DMatrix::zeros(1, hidden));
    let mut rows = Vec::with_capacity(n);
    for s in 0..n {
        let step = |t: &mut Tape, h: Var| -> Result<Var> {
            let zr = t.matmul(h, wzh)?;
            let zx = t.row(xz, s)?;
            let zpre = t.add(zr, zx)?;
            let z = t.sigmoid(zpre)?;
            let rr = t.matmul(h, wrh)?;
            let rx = t.row(xr, s)?;
            let rpre = t.add(rr, rx)?;
            let r = t.sigmoid(rpre)?;
            let rh = t.mul(r, h)?;
            let cr = t.matmul(rh, whh)?;
            let cx = t.row(xh, s)?;
            let cpre = t.add(cr, cx)?;
            let cand = t.tanh(cpre)?;
            let zh = t.mul(z, h)?;
            let keep = t.sub(h, zh)?;
            let zc = t.mul(z, cand)?;
            t.add(keep, zc)
        };
        h = step(t, h).map_err(step_err("gru", s))?;
        rows.push(h);
    }
    t.concat(&rows, Axis::Rows)
}

#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl AttnVars {
    fn from_vars(v: &EncoderVars) -> Result<Self> {
        Ok(Self {
            wq: v.core("wq")?,
            wk: v.core("wk")?,
            wv: v.core("wv")?,
        })
    }
}

/// Single-head causal self-attention, `h_t = Σ_{s≤t} a_{ts} v_s`.
pub fn forward_attention(t: &mut Tape, p: &AttnVars, x: Var) -> Result<Var> {
    let w = attention_weights(t, p, x)?;
    let v = t.matmul(x, p.wv)?;
    t.matmul(w, v)
}

/// The n×n causal attention matrix `a_{ts}`.
pub fn attention_weights(t: &mut Tape, p: &AttnVars, x: Var) -> Result<Var> {
    let q = t.matmul(x, p.wq)?;
    let k = t.matmul(x, p.wk)?;
    let dk = t.shape(k).1 as f64;
    let kt = t.transpose(k)?;
    let logits = t.matmul(q, kt)?;
    let scaled = t.scale(logits, 1.0 / dk.sqrt())?;
    t.causal_softmax_rows(scaled)
}
