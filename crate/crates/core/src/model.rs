//! Controller model families. Every model maps the previous control and a
//! short state sequence to the next control:
//!
//! * Category A — single-head self-attention over the states, then a
//!   Dense/LSTM/BiLSTM cell, a dense control branch, and two hidden dense
//!   layers before the relu output.
//! * Category AM — multi-head attention variant; the output projection is
//!   reshaped back into a length-t sequence for recurrent cells.
//! * AM simple — the shallow multi-head LSTM: one hidden dense layer and
//!   the previous control wired straight into the concat junction.
//! * Category B — as A but without the attention layer.
//! * Category C — as B but with no control input at all.
//!
//! Hidden activations are tanh; the output layer is relu, which pairs
//! with the non-negative control encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Activation, Tensor};
use crate::dataset::FeatureNorm;
use crate::feeder::{ControlVector, StateVector};
use crate::layers::{
    bilstm_sequence_forward, lstm_all_hidden, multi_head_attention, single_head_attention,
    AttentionParams, DenseParams, LstmParams,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("input mismatch: {0}")]
    InputMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AdError),
    #[error("checkpoint {path} line {line}: {detail}")]
    Checkpoint {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    A,
    AM,
    AmSimple,
    B,
    C,
}

impl Category {
    pub fn label(self) -> &'static str {
        match self {
            Category::A => "A",
            Category::AM => "AM",
            Category::AmSimple => "AM_simple",
            Category::B => "B",
            Category::C => "C",
        }
    }

    pub fn parse(s: &str) -> Option<Category> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Some(Category::A),
            "AM" => Some(Category::AM),
            "AM_SIMPLE" | "AMSIMPLE" | "AM-SIMPLE" => Some(Category::AmSimple),
            "B" => Some(Category::B),
            "C" => Some(Category::C),
            _ => None,
        }
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Category::A | Category::AM | Category::AmSimple)
    }

    pub fn has_control_input(self) -> bool {
        !matches!(self, Category::C)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Dense,
    Lstm,
    BiLstm,
}

impl CellKind {
    pub fn label(self) -> &'static str {
        match self {
            CellKind::Dense => "Dense",
            CellKind::Lstm => "LSTM",
            CellKind::BiLstm => "BiLSTM",
        }
    }

    pub fn parse(s: &str) -> Option<CellKind> {
        match s.to_ascii_lowercase().as_str() {
            "dense" => Some(CellKind::Dense),
            "lstm" => Some(CellKind::Lstm),
            "bilstm" => Some(CellKind::BiLstm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub category: Category,
    pub cell: CellKind,
    pub t: usize,
    pub d_x: usize,
    pub d_u: usize,
    pub hidden: usize,
    pub d_k: usize,
    pub heads: usize,
    pub recurrent_layers: usize,
    pub delta_max: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(category: Category, cell: CellKind, d_x: usize) -> ModelSpec {
        ModelSpec {
            category,
            cell,
            t: 2,
            d_x,
            d_u: 3,
            hidden: 64,
            d_k: 32,
            heads: if category == Category::A { 1 } else { 4 },
            recurrent_layers: 1,
            delta_max: 30f64.to_radians(),
            seed: 42,
        }
    }

    /// Architecture name as used in reports, e.g. `A-LSTM`, `AM_simple-LSTM`.
    pub fn arch_name(&self) -> String {
        let mut name = format!("{}-{}", self.category.label(), self.cell.label());
        if self.cell == CellKind::Lstm && self.recurrent_layers > 1 {
            name.push_str(&format!("{}", self.recurrent_layers));
        }
        name
    }

    fn validate(&self) -> Result<()> {
        if self.category == Category::AmSimple && self.cell != CellKind::Lstm {
            return Err(ModelError::InvalidSpec(
                "AM_simple is defined only with the LSTM cell".into(),
            ));
        }
        if self.t < 2 {
            return Err(ModelError::InvalidSpec("sequence length t must be ≥ 2".into()));
        }
        if self.d_x == 0 || self.d_u == 0 || self.hidden == 0 || self.d_k == 0 {
            return Err(ModelError::InvalidSpec("widths must be positive".into()));
        }
        if self.category.has_attention() && self.heads == 0 {
            return Err(ModelError::InvalidSpec("head count must be ≥ 1".into()));
        }
        if self.category == Category::A && self.heads != 1 {
            return Err(ModelError::InvalidSpec(
                "Category A uses single-head attention (heads = 1)".into(),
            ));
        }
        if self.recurrent_layers == 0 || self.recurrent_layers > 2 {
            return Err(ModelError::InvalidSpec(
                "recurrent_layers must be 1 or 2".into(),
            ));
        }
        if self.recurrent_layers > 1 && self.cell != CellKind::Lstm {
            return Err(ModelError::InvalidSpec(
                "stacked recurrence is only defined for the LSTM cell".into(),
            ));
        }
        Ok(())
    }
}

enum CellLayer {
    Dense(DenseParams),
    Lstm(Vec<LstmParams>),
    BiLstm { fwd: LstmParams, bwd: LstmParams },
}

impl CellLayer {
    fn out_width(&self, hidden: usize) -> usize {
        match self {
            CellLayer::Dense(_) | CellLayer::Lstm(_) => hidden,
            CellLayer::BiLstm { .. } => 2 * hidden,
        }
    }

    fn params(&self) -> Vec<Tensor> {
        match self {
            CellLayer::Dense(d) => d.params(),
            CellLayer::Lstm(stack) => stack.iter().flat_map(|l| l.params()).collect(),
            CellLayer::BiLstm { fwd, bwd } => {
                let mut p = fwd.params();
                p.extend(bwd.params());
                p
            }
        }
    }
}

/// A built controller model: parameter tensors plus the forward wiring.
pub struct Model {
    pub spec: ModelSpec,
    attention: Option<AttentionParams>,
    cell: CellLayer,
    control_dense: Option<DenseParams>,
    hidden_layers: Vec<DenseParams>,
    output: DenseParams,
    /// Train-time feature statistics, applied to raw states at inference.
    pub norm: Option<FeatureNorm>,
}

/// Deterministic construction from the spec; the same seed builds the
/// same parameters.
pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sp = *spec;

    let attention = if sp.category.has_attention() {
        Some(if sp.category == Category::A {
            AttentionParams::init_single(&mut rng, sp.d_x, sp.d_k, sp.t)
        } else {
            // W_O projects back onto a t×d_k sequence so recurrent cells
            // keep a per-step input.
            AttentionParams::init_multi(&mut rng, sp.d_x, sp.d_k, sp.t, sp.heads, sp.t * sp.d_k)
        })
    } else {
        None
    };

    let cell_in = if attention.is_some() { sp.d_k } else { sp.d_x };
    let cell = match sp.cell {
        CellKind::Dense => CellLayer::Dense(DenseParams::init(
            &mut rng,
            sp.t * cell_in,
            sp.hidden,
            Activation::Tanh,
        )),
        CellKind::Lstm => {
            let mut stack = vec![LstmParams::init(&mut rng, cell_in, sp.hidden)];
            for _ in 1..sp.recurrent_layers {
                stack.push(LstmParams::init(&mut rng, sp.hidden, sp.hidden));
            }
            CellLayer::Lstm(stack)
        }
        CellKind::BiLstm => CellLayer::BiLstm {
            fwd: LstmParams::init(&mut rng, cell_in, sp.hidden),
            bwd: LstmParams::init(&mut rng, cell_in, sp.hidden),
        },
    };

    let control_dense = if sp.category.has_control_input() && sp.category != Category::AmSimple {
        Some(DenseParams::init(&mut rng, sp.d_u, sp.hidden, Activation::Tanh))
    } else {
        None
    };

    let mut concat_width = cell.out_width(sp.hidden);
    if let Some(cd) = &control_dense {
        concat_width += cd.d_out();
    } else if sp.category == Category::AmSimple {
        concat_width += sp.d_u;
    }

    let n_hidden = if sp.category == Category::AmSimple { 1 } else { 2 };
    let mut hidden_layers = Vec::with_capacity(n_hidden);
    let mut w = concat_width;
    for _ in 0..n_hidden {
        hidden_layers.push(DenseParams::init(&mut rng, w, sp.hidden, Activation::Tanh));
        w = sp.hidden;
    }
    let output = DenseParams::init(&mut rng, w, sp.d_u, Activation::Relu);

    Ok(Model {
        spec: sp,
        attention,
        cell,
        control_dense,
        hidden_layers,
        output,
        norm: None,
    })
}

impl Model {
    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.extend(a.params());
        }
        out.extend(self.cell.params());
        if let Some(cd) = &self.control_dense {
            out.extend(cd.params());
        }
        for h in &self.hidden_layers {
            out.extend(h.params());
        }
        out.extend(self.output.params());
        out
    }

    /// Named parameters in a stable order; the checkpoint format keys
    /// blocks by these names.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            for (i, h) in a.heads.iter().enumerate() {
                out.push((format!("attn.h{i}.wq"), h.wq.clone()));
                out.push((format!("attn.h{i}.wk"), h.wk.clone()));
                out.push((format!("attn.h{i}.wv"), h.wv.clone()));
            }
            if let Some(w) = &a.w_out {
                out.push(("attn.w_out".to_string(), w.clone()));
            }
        }
        let gate_names = ["i", "f", "g", "o"];
        match &self.cell {
            CellLayer::Dense(d) => {
                out.push(("cell.dense.w".to_string(), d.weight.clone()));
                out.push(("cell.dense.b".to_string(), d.bias.clone()));
            }
            CellLayer::Lstm(stack) => {
                for (l, p) in stack.iter().enumerate() {
                    for (g, gate) in gate_names.iter().enumerate() {
                        out.push((format!("cell.lstm{l}.wx_{gate}"), p.wx[g].clone()));
                        out.push((format!("cell.lstm{l}.wh_{gate}"), p.wh[g].clone()));
                        out.push((format!("cell.lstm{l}.b_{gate}"), p.b[g].clone()));
                    }
                }
            }
            CellLayer::BiLstm { fwd, bwd } => {
                for (tag, p) in [("fwd", fwd), ("bwd", bwd)] {
                    for (g, gate) in gate_names.iter().enumerate() {
                        out.push((format!("cell.{tag}.wx_{gate}"), p.wx[g].clone()));
                        out.push((format!("cell.{tag}.wh_{gate}"), p.wh[g].clone()));
                        out.push((format!("cell.{tag}.b_{gate}"), p.b[g].clone()));
                    }
                }
            }
        }
        if let Some(cd) = &self.control_dense {
            out.push(("control.w".to_string(), cd.weight.clone()));
            out.push(("control.b".to_string(), cd.bias.clone()));
        }
        for (i, h) in self.hidden_layers.iter().enumerate() {
            out.push((format!("hidden{i}.w"), h.weight.clone()));
            out.push((format!("hidden{i}.b"), h.bias.clone()));
        }
        out.push(("output.w".to_string(), self.output.weight.clone()));
        out.push(("output.b".to_string(), self.output.bias.clone()));
        out
    }

    /// Exact number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Forward pass on already-encoded inputs: `u_prev_enc` is the
    /// non-negative control triple, `states` is the t×d_x sequence in the
    /// model's (normalized) feature space. Returns a `[1×d_u]` tensor.
    pub fn forward_encoded(&self, u_prev_enc: &[f64], states: &[Vec<f64>]) -> Result<Tensor> {
        let sp = &self.spec;
        if states.len() != sp.t {
            return Err(ModelError::InputMismatch(format!(
                "expected {} states, got {}",
                sp.t,
                states.len()
            )));
        }
        for s in states {
            if s.len() != sp.d_x {
                return Err(ModelError::InputMismatch(format!(
                    "state width {} does not match d_x {}",
                    s.len(),
                    sp.d_x
                )));
            }
        }
        if sp.category.has_control_input() && u_prev_enc.len() != sp.d_u {
            return Err(ModelError::InputMismatch(format!(
                "control width {} does not match d_u {}",
                u_prev_enc.len(),
                sp.d_u
            )));
        }

        let state_rows: Vec<Tensor> = states
            .iter()
            .map(|s| Tensor::leaf(&[1, sp.d_x], s.clone()))
            .collect::<std::result::Result<_, _>>()?;

        // Attention stage: a per-step sequence for recurrent cells, or a
        // flat vector for the dense cell.
        let (cell_seq, cell_flat): (Vec<Tensor>, Option<Tensor>) = match &self.attention {
            Some(attn) if sp.category == Category::A => {
                let seq = single_head_attention(attn, &state_rows)?;
                (seq, None)
            }
            Some(attn) => {
                let flat = multi_head_attention(attn, &state_rows)?;
                match sp.cell {
                    CellKind::Dense => (Vec::new(), Some(flat)),
                    _ => {
                        let grid = flat.reshape(&[sp.t, sp.d_k])?;
                        let seq: Vec<Tensor> = (0..sp.t)
                            .map(|i| grid.row(i))
                            .collect::<std::result::Result<_, _>>()?;
                        (seq, None)
                    }
                }
            }
            None => (state_rows.clone(), None),
        };

        let cell_out = match &self.cell {
            CellLayer::Dense(d) => {
                let flat = match cell_flat {
                    Some(f) => f,
                    None => {
                        let width: usize = cell_seq.iter().map(|t| t.shape()[1]).sum();
                        Tensor::concat(&cell_seq)?.reshape(&[1, width])?
                    }
                };
                d.forward(&flat)?
            }
            CellLayer::Lstm(stack) => {
                let mut seq = cell_seq;
                for (l, p) in stack.iter().enumerate() {
                    let hs = lstm_all_hidden(p, &seq)?;
                    if l + 1 == stack.len() {
                        seq = vec![hs.last().expect("non-empty").clone()];
                    } else {
                        seq = hs;
                    }
                }
                seq.pop().expect("non-empty")
            }
            CellLayer::BiLstm { fwd, bwd } => bilstm_sequence_forward(fwd, bwd, &cell_seq)?,
        };

        let mut junction = vec![cell_out];
        if let Some(cd) = &self.control_dense {
            let u = Tensor::leaf(&[1, sp.d_u], u_prev_enc.to_vec())?;
            junction.push(cd.forward(&u)?);
        } else if sp.category == Category::AmSimple {
            junction.push(Tensor::leaf(&[1, sp.d_u], u_prev_enc.to_vec())?);
        }
        let mut h = Tensor::concat(&junction)?;
        for layer in &self.hidden_layers {
            h = layer.forward(&h)?;
        }
        Ok(self.output.forward(&h)?)
    }

    /// Predict the next control from raw physical inputs. States are
    /// normalized with the stored train statistics when present; the
    /// output stays in the non-negative encoded space (relu output).
    pub fn predict_controls(&self, u_prev: &ControlVector, states: &[StateVector]) -> Result<Tensor> {
        let enc = u_prev.encode(self.spec.delta_max);
        let feats: Vec<Vec<f64>> = states
            .iter()
            .map(|s| {
                let mut f = s.features();
                if let Some(n) = &self.norm {
                    n.apply(&mut f);
                }
                f
            })
            .collect();
        self.forward_encoded(&enc, &feats)
    }

    /// Encoded prediction as a plain triple.
    pub fn predict_encoded(&self, u_prev: &ControlVector, states: &[StateVector]) -> Result<[f64; 3]> {
        let out = self.predict_controls(u_prev, states)?;
        let v = out.to_vec();
        Ok([v[0], v[1], v[2]])
    }
}

// ── Checkpoints ────────────────────────────────────────────────────────

fn fmt_exact(v: f64) -> String {
    // Shortest representation that parses back to the identical bits.
    format!("{v}")
}

impl Model {
    /// Decimal-text checkpoint: versioned spec header, optional feature
    /// statistics, then one named block per parameter tensor. Round-trips
    /// bit-exactly.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        use std::fmt::Write as _;
        let sp = &self.spec;
        let mut s = String::new();
        s.push_str("adsmpc-model v1\n");
        writeln!(
            s,
            "spec category={} cell={} t={} d_x={} d_u={} hidden={} d_k={} heads={} recurrent_layers={} delta_max={} seed={}",
            sp.category.label(),
            sp.cell.label(),
            sp.t,
            sp.d_x,
            sp.d_u,
            sp.hidden,
            sp.d_k,
            sp.heads,
            sp.recurrent_layers,
            fmt_exact(sp.delta_max),
            sp.seed
        )
        .expect("write to string");
        if let Some(n) = &self.norm {
            s.push_str("norm_mean");
            for v in &n.mean {
                s.push(' ');
                s.push_str(&fmt_exact(*v));
            }
            s.push('\n');
            s.push_str("norm_std");
            for v in &n.std {
                s.push(' ');
                s.push_str(&fmt_exact(*v));
            }
            s.push('\n');
        }
        for (name, tensor) in self.named_parameters() {
            write!(s, "tensor {name}").expect("write to string");
            for d in tensor.shape() {
                write!(s, " {d}").expect("write to string");
            }
            s.push('\n');
            let vals = tensor.to_vec();
            let mut first = true;
            for v in vals {
                if !first {
                    s.push(' ');
                }
                s.push_str(&fmt_exact(v));
                first = false;
            }
            s.push('\n');
        }
        s.push_str("end\n");
        std::fs::write(path, s).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let err = |line: usize, detail: String| ModelError::Checkpoint {
            path: path.display().to_string(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, "adsmpc-model v1")) => {}
            other => {
                return Err(err(
                    1,
                    format!("bad magic line {:?}", other.map(|(_, l)| l)),
                ))
            }
        }
        let (_, spec_line) = lines
            .next()
            .ok_or_else(|| err(2, "missing spec line".into()))?;
        let mut fields = std::collections::HashMap::new();
        let spec_body = spec_line
            .strip_prefix("spec ")
            .ok_or_else(|| err(2, "expected `spec ...`".into()))?;
        for tok in spec_body.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| err(2, format!("bad spec token `{tok}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| err(2, format!("missing spec field `{k}`")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| err(2, format!("bad `{k}`")))
        };
        let spec = ModelSpec {
            category: Category::parse(&get("category")?)
                .ok_or_else(|| err(2, "bad category".into()))?,
            cell: CellKind::parse(&get("cell")?).ok_or_else(|| err(2, "bad cell".into()))?,
            t: parse_usize("t")?,
            d_x: parse_usize("d_x")?,
            d_u: parse_usize("d_u")?,
            hidden: parse_usize("hidden")?,
            d_k: parse_usize("d_k")?,
            heads: parse_usize("heads")?,
            recurrent_layers: parse_usize("recurrent_layers")?,
            delta_max: get("delta_max")?
                .parse()
                .map_err(|_| err(2, "bad delta_max".into()))?,
            seed: get("seed")?.parse().map_err(|_| err(2, "bad seed".into()))?,
        };

        let mut model = build_model(&spec)?;

        let parse_values = |line: usize, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| err(line, format!("bad value `{tok}`")))
                })
                .collect()
        };

        let mut norm_mean: Option<Vec<f64>> = None;
        let mut norm_std: Option<Vec<f64>> = None;
        let mut blocks: std::collections::HashMap<String, Vec<f64>> =
            std::collections::HashMap::new();
        while let Some((idx, line)) = lines.next() {
            let lineno = idx + 1;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("norm_mean") {
                norm_mean = Some(parse_values(lineno, rest)?);
            } else if let Some(rest) = line.strip_prefix("norm_std") {
                norm_std = Some(parse_values(lineno, rest)?);
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut toks = rest.split_whitespace();
                let name = toks
                    .next()
                    .ok_or_else(|| err(lineno, "tensor block missing name".into()))?
                    .to_string();
                let dims: Vec<usize> = toks
                    .map(|d| d.parse().map_err(|_| err(lineno, format!("bad dim `{d}`"))))
                    .collect::<Result<_>>()?;
                let (vidx, vline) = lines
                    .next()
                    .ok_or_else(|| err(lineno, "tensor block missing values".into()))?;
                let values = parse_values(vidx + 1, vline)?;
                let expect: usize = dims.iter().product();
                if values.len() != expect {
                    return Err(err(
                        vidx + 1,
                        format!("tensor {name}: {} values for shape {:?}", values.len(), dims),
                    ));
                }
                blocks.insert(name, values);
            } else {
                return Err(err(lineno, format!("unexpected line `{line}`")));
            }
        }

        for (name, tensor) in model.named_parameters() {
            let vals = blocks.remove(&name).ok_or_else(|| {
                err(0, format!("checkpoint missing parameter block `{name}`"))
            })?;
            if vals.len() != tensor.numel() {
                return Err(err(0, format!("parameter `{name}` has wrong size")));
            }
            tensor.set_values(&vals);
        }
        if let Some(stray) = blocks.keys().next() {
            return Err(err(0, format!("unknown parameter block `{stray}`")));
        }
        model.norm = match (norm_mean, norm_std) {
            (Some(mean), Some(std)) => Some(FeatureNorm { mean, std }),
            (None, None) => None,
            _ => return Err(err(0, "norm_mean/norm_std must appear together".into())),
        };
        Ok(model)
    }
}
