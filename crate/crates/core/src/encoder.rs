//! Miniature transformer encoder with task heads.
//!
//! The feature extractor is a post-norm transformer: token, position and
//! segment embeddings summed and layer-normalised, followed by `n_layers`
//! blocks of multi-head self-attention and a GELU feed-forward network, each
//! wrapped in a residual connection and a layer norm.
//!
//! Parameters are grouped into four components, always flattened in this
//! order:
//!
//! 1. `token_embeddings`: token table, position table, segment table,
//!    embedding layer-norm gain and bias.
//! 2. per layer `l` in `0..n_layers`:
//!    * `attention`: `wq bq wk bk wv bv wo bo` and the post-attention
//!      layer-norm gain and bias;
//!    * `feed_forward`: `w1 b1 w2 b2`;
//!    * `layer_output`: the post-feed-forward layer-norm gain and bias.
//!
//! Task heads live outside the extractor and never contribute to a
//! flattened extractor vector.

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tasks::Target;

pub const CLS_ID: usize = 0;
pub const SEP_ID: usize = 1;
pub const MASK_ID: usize = 2;
/// Ids below this value are special symbols; ordinary tokens map above it.
pub const RESERVED_IDS: usize = 3;

pub const GELU_TANH: &str = "gelu_tanh";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    /// Append `[SEP]` after the second segment.
    pub trailing_sep: bool,
    pub nonlinearity: String,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 64,
            max_len: 64,
            trailing_sep: true,
            nonlinearity: GELU_TANH.to_string(),
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} must be divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 3 {
            return Err(Error::validation("max_len must be at least 3"));
        }
        if self.vocab_size <= RESERVED_IDS {
            return Err(Error::validation(format!(
                "vocab_size must exceed the {RESERVED_IDS} reserved ids"
            )));
        }
        if self.d_model == 0 || self.d_ffn == 0 || self.n_layers == 0 {
            return Err(Error::validation("dimensions must be positive"));
        }
        if self.nonlinearity != GELU_TANH {
            return Err(Error::validation(format!(
                "unsupported nonlinearity {:?}",
                self.nonlinearity
            )));
        }
        Ok(())
    }

    /// Vocabulary id of an ordinary token.
    pub fn token_id(&self, tok: u32) -> usize {
        RESERVED_IDS + tok as usize % (self.vocab_size - RESERVED_IDS)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Every field except the seed, which only governs initialisation.
    pub fn same_architecture(&self, other: &EncoderConfig) -> bool {
        let mut a = self.clone();
        a.seed = other.seed;
        &a == other
    }
}

/// Token ids with `[CLS]` first and `[SEP]` closing each segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Positions occupied by each segment's own tokens.
    pub segments: Vec<Range<usize>>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn encode_input(cfg: &EncoderConfig, segments: &[Vec<u32>]) -> Result<EncodedInput> {
    if segments.is_empty() || segments.len() > 2 {
        return Err(Error::validation(format!(
            "expected 1 or 2 segments, got {}",
            segments.len()
        )));
    }
    if let Some(i) = segments.iter().position(|s| s.is_empty()) {
        return Err(Error::validation(format!("segment {i} is empty")));
    }
    let specials = if segments.len() == 1 {
        2
    } else if cfg.trailing_sep {
        3
    } else {
        2
    };
    let required = specials + segments.iter().map(Vec::len).sum::<usize>();
    if required > cfg.max_len {
        return Err(Error::InputTooLong {
            required,
            max_len: cfg.max_len,
            overflow: required - cfg.max_len,
        });
    }
    let mut ids = vec![CLS_ID];
    let mut segment_ids = vec![0];
    let mut spans = Vec::new();
    for (s, seg) in segments.iter().enumerate() {
        let start = ids.len();
        ids.extend(seg.iter().map(|&t| cfg.token_id(t)));
        segment_ids.extend(std::iter::repeat_n(s, seg.len()));
        spans.push(start..ids.len());
        if s == 0 || cfg.trailing_sep {
            ids.push(SEP_ID);
            segment_ids.push(s);
        }
    }
    Ok(EncodedInput {
        ids,
        segment_ids,
        segments: spans,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TokenEmbeddings,
    Attention,
    FeedForward,
    LayerOutput,
}

impl Component {
    pub const ALL: [Component; 4] = [
        Component::TokenEmbeddings,
        Component::Attention,
        Component::FeedForward,
        Component::LayerOutput,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::TokenEmbeddings => "token_embeddings",
            Component::Attention => "attention",
            Component::FeedForward => "feed_forward",
            Component::LayerOutput => "layer_output",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Component::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub component: Component,
    pub layer: Option<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    /// Key used for the parameter block in model files.
    pub fn key(&self) -> String {
        match self.layer {
            Some(l) => format!("{}/{}/{}", self.component.name(), l, self.name),
            None => format!("{}/{}", self.component.name(), self.name),
        }
    }
}

const TOKEN_BLOCK: usize = 5;
const PER_LAYER: usize = 16;

/// Parameter layout in flattening order.
pub fn param_layout(cfg: &EncoderConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let p = |name: &str, component, layer, rows, cols| ParamSpec {
        name: name.to_string(),
        component,
        layer,
        rows,
        cols,
    };
    use Component::*;
    let mut v = vec![
        p("tok", TokenEmbeddings, None, cfg.vocab_size, d),
        p("pos", TokenEmbeddings, None, cfg.max_len, d),
        p("seg", TokenEmbeddings, None, 2, d),
        p("ln_g", TokenEmbeddings, None, 1, d),
        p("ln_b", TokenEmbeddings, None, 1, d),
    ];
    for l in 0..cfg.n_layers {
        let l = Some(l);
        v.extend([
            p("wq", Attention, l, d, d),
            p("bq", Attention, l, 1, d),
            p("wk", Attention, l, d, d),
            p("bk", Attention, l, 1, d),
            p("wv", Attention, l, d, d),
            p("bv", Attention, l, 1, d),
            p("wo", Attention, l, d, d),
            p("bo", Attention, l, 1, d),
            p("ln_g", Attention, l, 1, d),
            p("ln_b", Attention, l, 1, d),
            p("w1", FeedForward, l, d, f),
            p("b1", FeedForward, l, 1, f),
            p("w2", FeedForward, l, f, d),
            p("b2", FeedForward, l, 1, d),
            p("ln_g", LayerOutput, l, 1, d),
            p("ln_b", LayerOutput, l, 1, d),
        ]);
    }
    v
}

/// Per-component ranges into the flattened extractor vector. Repeated
/// components hold one range per layer, and those ranges are congruent.
pub fn component_slices(cfg: &EncoderConfig) -> BTreeMap<Component, Vec<Range<usize>>> {
    let mut out: BTreeMap<Component, Vec<Range<usize>>> = BTreeMap::new();
    let mut offset = 0;
    let mut current: Option<(Component, Option<usize>)> = None;
    for spec in param_layout(cfg) {
        let key = (spec.component, spec.layer);
        let ranges = out.entry(spec.component).or_default();
        if current == Some(key) {
            ranges.last_mut().unwrap().end += spec.numel();
        } else {
            ranges.push(offset..offset + spec.numel());
            current = Some(key);
        }
        offset += spec.numel();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub config: EncoderConfig,
    pub params: Vec<Tensor>,
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect()).expect("sized")
}

fn filled(rows: usize, cols: usize, v: f64) -> Tensor {
    Tensor::new(rows, cols, vec![v; rows * cols]).expect("sized")
}

impl FeatureExtractor {
    /// Seeded random initialisation from `config.seed`.
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = param_layout(config)
            .iter()
            .map(|s| match (s.component, s.name.as_str()) {
                (_, "ln_g") => filled(s.rows, s.cols, 1.0),
                (_, n) if n.starts_with('b') || n == "ln_b" => filled(s.rows, s.cols, 0.0),
                (Component::TokenEmbeddings, "tok") => normal_tensor(&mut rng, s.rows, s.cols, 1.0),
                (Component::TokenEmbeddings, _) => normal_tensor(&mut rng, s.rows, s.cols, 0.3),
                _ => normal_tensor(&mut rng, s.rows, s.cols, 1.0 / (s.rows as f64).sqrt()),
            })
            .collect();
        Ok(FeatureExtractor {
            config: config.clone(),
            params,
        })
    }

    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let params = param_layout(config)
            .iter()
            .map(|s| Tensor::zeros(s.rows, s.cols))
            .collect();
        Ok(FeatureExtractor {
            config: config.clone(),
            params,
        })
    }

    pub fn from_flat(config: &EncoderConfig, flat: &[f64]) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(config);
        let total: usize = layout.iter().map(ParamSpec::numel).sum();
        if total != flat.len() {
            return Err(Error::Shape {
                op: "from_flat",
                left: vec![total],
                right: vec![flat.len()],
            });
        }
        let mut offset = 0;
        let params = layout
            .iter()
            .map(|s| {
                let t = Tensor::new(s.rows, s.cols, flat[offset..offset + s.numel()].to_vec());
                offset += s.numel();
                t
            })
            .collect::<Result<_>>()?;
        Ok(FeatureExtractor {
            config: config.clone(),
            params,
        })
    }

    pub fn layout(&self) -> Vec<ParamSpec> {
        param_layout(&self.config)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for p in &self.params {
            v.extend_from_slice(p.data());
        }
        v
    }

    /// SHA-256 over the architecture and every parameter's bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let mut cfg = self.config.clone();
        cfg.seed = 0;
        h.update(serde_json::to_vec(&cfg).expect("config serialises"));
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    Classifier { classes: usize },
    Regressor,
    Span,
    Tagger { tags: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub kind: HeadKind,
    pub params: Vec<Tensor>,
}

impl TaskHead {
    fn shapes(kind: &HeadKind, d: usize) -> Vec<(usize, usize)> {
        match kind {
            HeadKind::Classifier { classes } => vec![(d, *classes), (1, *classes)],
            HeadKind::Regressor => vec![(d, 1), (1, 1)],
            // A bias would shift every position's score equally and cancel.
            HeadKind::Span => vec![(d, 2)],
            HeadKind::Tagger { tags } => vec![(d, *tags), (1, *tags)],
        }
    }

    fn check_kind(kind: &HeadKind) -> Result<()> {
        match kind {
            HeadKind::Classifier { classes: k } | HeadKind::Tagger { tags: k } if *k < 2 => Err(
                Error::validation(format!("a head needs at least 2 labels, got {k}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn init(kind: HeadKind, d_model: usize, seed: u64) -> Result<Self> {
        Self::check_kind(&kind)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Self::shapes(&kind, d_model)
            .into_iter()
            .map(|(r, c)| {
                if r == 1 {
                    Tensor::zeros(r, c)
                } else {
                    normal_tensor(&mut rng, r, c, 0.1)
                }
            })
            .collect();
        Ok(TaskHead { kind, params })
    }

    pub fn zeros(kind: HeadKind, d_model: usize) -> Result<Self> {
        Self::check_kind(&kind)?;
        let params = Self::shapes(&kind, d_model)
            .into_iter()
            .map(|(r, c)| Tensor::zeros(r, c))
            .collect();
        Ok(TaskHead { kind, params })
    }

    pub fn d_model(&self) -> usize {
        self.params[0].rows()
    }
}

/// Extractor plus head, the unit that is fine-tuned.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub fe: FeatureExtractor,
    pub head: TaskHead,
}

/// Tape handles for a bound model.
#[derive(Debug, Clone)]
pub struct Bound {
    pub fe: Vec<Var>,
    pub head: Vec<Var>,
}

pub fn bind(tape: &mut Tape, fe: &FeatureExtractor, head: &TaskHead, grad_fe: bool, grad_head: bool) -> Bound {
    let leaf = |tape: &mut Tape, t: &Tensor, g: bool| {
        if g {
            tape.param(t.clone())
        } else {
            tape.constant(t.clone())
        }
    };
    Bound {
        fe: fe.params.iter().map(|t| leaf(tape, t, grad_fe)).collect(),
        head: head.params.iter().map(|t| leaf(tape, t, grad_head)).collect(),
    }
}

pub fn bind_extractor(tape: &mut Tape, fe: &FeatureExtractor, grad: bool) -> Vec<Var> {
    fe.params
        .iter()
        .map(|t| if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) })
        .collect()
}

/// Tape handles for the extractor's output and every layer's output.
#[derive(Debug, Clone)]
pub struct FeatureVars {
    pub output: Var,
    pub layers: Vec<Var>,
}

/// Records the extractor's forward pass on `tape`.
pub fn features_on_tape(tape: &mut Tape, cfg: &EncoderConfig, p: &[Var], input: &EncodedInput) -> Result<FeatureVars> {
    let len = input.len();
    if len > cfg.max_len {
        return Err(Error::InputTooLong {
            required: len,
            max_len: cfg.max_len,
            overflow: len - cfg.max_len,
        });
    }
    let tok = tape.gather(p[0], &input.ids)?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather(p[1], &positions)?;
    let seg = tape.gather(p[2], &input.segment_ids)?;
    let x = tape.add(tok, pos)?;
    let x = tape.add(x, seg)?;
    let mut x = tape.layer_norm(x, p[3], p[4])?;

    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let w = &p[TOKEN_BLOCK + l * PER_LAYER..TOKEN_BLOCK + (l + 1) * PER_LAYER];
        let q = tape.matmul(x, w[0])?;
        let q = tape.add_row(q, w[1])?;
        let k = tape.matmul(x, w[2])?;
        let k = tape.add_row(k, w[3])?;
        let v = tape.matmul(x, w[4])?;
        let v = tape.add_row(v, w[5])?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv_sqrt);
            let a = tape.softmax(s);
            heads.push(tape.matmul(a, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let o = tape.matmul(cat, w[6])?;
        let o = tape.add_row(o, w[7])?;
        let r = tape.add(x, o)?;
        x = tape.layer_norm(r, w[8], w[9])?;

        let h = tape.matmul(x, w[10])?;
        let h = tape.add_row(h, w[11])?;
        let h = tape.gelu(h);
        let f = tape.matmul(h, w[12])?;
        let f = tape.add_row(f, w[13])?;
        let r = tape.add(x, f)?;
        x = tape.layer_norm(r, w[14], w[15])?;
        layers.push(x);
    }
    Ok(FeatureVars { output: x, layers })
}

/// Final token vectors and per-layer outputs, as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub tokens: Tensor,
    pub layers: Vec<Tensor>,
}

pub fn forward_features(fe: &FeatureExtractor, input: &EncodedInput) -> Result<Features> {
    let mut tape = Tape::new();
    let p = bind_extractor(&mut tape, fe, false);
    let fv = features_on_tape(&mut tape, &fe.config, &p, input)?;
    Ok(Features {
        tokens: tape.value(fv.output).clone(),
        layers: fv.layers.iter().map(|v| tape.value(*v).clone()).collect(),
    })
}

/// Raw head outputs: classifier logits `1 x K`, regression value `1 x 1`,
/// span scores `P x 2` over passage positions (start, end), tagger logits
/// `n x K` over first-segment positions.
pub fn head_outputs(tape: &mut Tape, head: &HeadKind, hp: &[Var], feats: Var, input: &EncodedInput) -> Result<Var> {
    match head {
        HeadKind::Classifier { .. } | HeadKind::Regressor => {
            let cls = tape.slice_rows(feats, 0, 1)?;
            let z = tape.matmul(cls, hp[0])?;
            tape.add_row(z, hp[1])
        }
        HeadKind::Span => {
            let passage = input
                .segments
                .get(1)
                .ok_or_else(|| Error::validation("span head needs a second (passage) segment"))?;
            let rows = tape.slice_rows(feats, passage.start, passage.len())?;
            tape.matmul(rows, hp[0])
        }
        HeadKind::Tagger { .. } => {
            let s1 = &input.segments[0];
            let rows = tape.slice_rows(feats, s1.start, s1.len())?;
            let z = tape.matmul(rows, hp[0])?;
            tape.add_row(z, hp[1])
        }
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log P(target | input)` recorded on the tape.
pub fn log_likelihood_on_tape(
    tape: &mut Tape,
    head: &HeadKind,
    out: Var,
    input: &EncodedInput,
    target: &Target,
) -> Result<Var> {
    match (head, target) {
        (HeadKind::Classifier { classes }, Target::Class(y)) => {
            if y >= classes {
                return Err(Error::validation(format!("label {y} outside {classes} classes")));
            }
            let lp = tape.log_softmax(out);
            let picked = tape.pick(lp, &[(0, *y)])?;
            Ok(tape.sum(picked))
        }
        (HeadKind::Regressor, Target::Real(y)) => {
            if !y.is_finite() {
                return Err(Error::validation("non-finite regression target"));
            }
            let c = tape.constant(Tensor::scalar(*y));
            let d = tape.sub(out, c)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            let s = tape.scale(s, -0.5);
            Ok(tape.add_scalar(s, -HALF_LN_2PI))
        }
        (HeadKind::Span, Target::Span(start, end)) => {
            let p = input.segments[1].len();
            // Start and end are scored independently, so any in-passage pair
            // has a likelihood; ordering is a dataset invariant.
            if *start >= p || *end >= p {
                return Err(Error::validation(format!(
                    "span ({start},{end}) outside passage of {p} tokens"
                )));
            }
            let t = tape.transpose(out);
            let lp = tape.log_softmax(t);
            let picked = tape.pick(lp, &[(0, *start), (1, *end)])?;
            Ok(tape.sum(picked))
        }
        (HeadKind::Tagger { tags }, Target::Tags(ys)) => {
            let n = input.segments[0].len();
            if ys.len() != n {
                return Err(Error::validation(format!("{} tags for {n} tokens", ys.len())));
            }
            if let Some(bad) = ys.iter().find(|&&y| y >= *tags) {
                return Err(Error::validation(format!("tag {bad} outside {tags} tags")));
            }
            let lp = tape.log_softmax(out);
            let at: Vec<(usize, usize)> = ys.iter().enumerate().map(|(i, &y)| (i, y)).collect();
            let picked = tape.pick(lp, &at)?;
            Ok(tape.sum(picked))
        }
        (h, t) => Err(Error::validation(format!(
            "head {h:?} cannot score target {}",
            t.kind_name()
        ))),
    }
}

/// Decodes a prediction from raw head outputs.
pub fn decode(head: &HeadKind, out: &Tensor) -> Target {
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    };
    match head {
        HeadKind::Classifier { .. } => Target::Class(argmax(out.row_slice(0))),
        HeadKind::Regressor => Target::Real(out.data()[0]),
        HeadKind::Span => {
            let p = out.rows();
            let mut best = (0, 0, f64::NEG_INFINITY);
            for s in 0..p {
                for e in s..p {
                    let v = out.get(s, 0) + out.get(e, 1);
                    if v > best.2 {
                        best = (s, e, v);
                    }
                }
            }
            Target::Span(best.0, best.1)
        }
        HeadKind::Tagger { .. } => Target::Tags((0..out.rows()).map(|r| argmax(out.row_slice(r))).collect()),
    }
}

/// Which gradients [`example_gradients`] should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradRequest {
    pub extractor: bool,
    pub head: bool,
    pub activations: bool,
}

/// Gradients of `log P(y|x)` for one example.
#[derive(Debug, Clone, Default)]
pub struct ExampleGrad {
    pub log_likelihood: f64,
    pub extractor: Vec<Tensor>,
    pub head: Vec<Tensor>,
    /// `L x d_model` gradient with respect to the final token vectors.
    pub activations: Option<Tensor>,
}

impl Model {
    pub fn new(fe: FeatureExtractor, head: TaskHead) -> Result<Self> {
        if head.d_model() != fe.config.d_model {
            return Err(Error::validation(format!(
                "head input {} differs from d_model {}",
                head.d_model(),
                fe.config.d_model
            )));
        }
        Ok(Model { fe, head })
    }

    pub fn encode(&self, segments: &[Vec<u32>]) -> Result<EncodedInput> {
        encode_input(&self.fe.config, segments)
    }

    pub fn log_likelihood(&self, input: &EncodedInput, target: &Target) -> Result<f64> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &self.fe, &self.head, false, false);
        let fv = features_on_tape(&mut tape, &self.fe.config, &b.fe, input)?;
        let out = head_outputs(&mut tape, &self.head.kind, &b.head, fv.output, input)?;
        let ll = log_likelihood_on_tape(&mut tape, &self.head.kind, out, input, target)?;
        Ok(tape.value(ll).data()[0])
    }

    pub fn head_output(&self, input: &EncodedInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &self.fe, &self.head, false, false);
        let fv = features_on_tape(&mut tape, &self.fe.config, &b.fe, input)?;
        let out = head_outputs(&mut tape, &self.head.kind, &b.head, fv.output, input)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, input: &EncodedInput) -> Result<Target> {
        Ok(decode(&self.head.kind, &self.head_output(input)?))
    }

    pub fn example_gradients(&self, input: &EncodedInput, target: &Target, req: GradRequest) -> Result<ExampleGrad> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, &self.fe, &self.head, req.extractor, req.head);
        let fv = features_on_tape(&mut tape, &self.fe.config, &b.fe, input)?;
        let mut feats = fv.output;
        if req.activations {
            // A zero offset leaf makes the token vectors differentiable even
            // when the extractor itself is frozen.
            let [r, c] = tape.value(feats).shape();
            let zero = tape.param(Tensor::zeros(r, c));
            feats = tape.add(feats, zero)?;
        }
        let out = head_outputs(&mut tape, &self.head.kind, &b.head, feats, input)?;
        let ll = log_likelihood_on_tape(&mut tape, &self.head.kind, out, input, target)?;
        tape.backward(ll)?;
        let grads = |vars: &[Var], want: bool| -> Vec<Tensor> {
            if !want {
                return Vec::new();
            }
            vars.iter()
                .map(|v| {
                    tape.grad(*v).cloned().unwrap_or_else(|| {
                        let [r, c] = tape.value(*v).shape();
                        Tensor::zeros(r, c)
                    })
                })
                .collect()
        };
        Ok(ExampleGrad {
            log_likelihood: tape.value(ll).data()[0],
            extractor: grads(&b.fe, req.extractor),
            head: grads(&b.head, req.head),
            activations: if req.activations {
                Some(tape.grad(feats).cloned().unwrap_or_else(|| {
                    let [r, c] = tape.value(feats).shape();
                    Tensor::zeros(r, c)
                }))
            } else {
                None
            },
        })
    }
}

/// Gradient of `log P(y|x)` over every extractor parameter, flattened in
/// layout order (see the module docs).
pub fn per_example_grad(model: &Model, input: &EncodedInput, target: &Target) -> Result<Vec<f64>> {
    let g = model.example_gradients(
        input,
        target,
        GradRequest {
            extractor: true,
            ..Default::default()
        },
    )?;
    let mut flat = Vec::with_capacity(model.fe.num_params());
    for t in &g.extractor {
        flat.extend_from_slice(t.data());
    }
    Ok(flat)
}

const MAGIC: &[u8; 8] = b"TTMODEL\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileHeader {
    encoder: EncoderConfig,
    head: Option<HeadKind>,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Writes the extractor (and optionally a head) to a versioned binary file:
/// magic, version, JSON header, named parameter blocks of little-endian
/// `f64`, then a SHA-256 of everything before it.
pub fn save_model(path: &Path, fe: &FeatureExtractor, head: Option<&TaskHead>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&FileHeader {
        encoder: fe.config.clone(),
        head: head.map(|h| h.kind.clone()),
    })?;
    put_u64(&mut buf, header.len() as u64);
    buf.extend_from_slice(&header);
    let mut blocks: Vec<(String, &Tensor)> = fe
        .layout()
        .into_iter()
        .zip(&fe.params)
        .map(|(s, t)| (s.key(), t))
        .collect();
    if let Some(h) = head {
        blocks.extend(h.params.iter().enumerate().map(|(i, t)| (format!("head/{i}"), t)));
    }
    put_u64(&mut buf, blocks.len() as u64);
    for (name, t) in blocks {
        put_u64(&mut buf, name.len() as u64);
        buf.extend_from_slice(name.as_bytes());
        put_u64(&mut buf, t.rows() as u64);
        put_u64(&mut buf, t.cols() as u64);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    crate::experiment::write_atomic(path, &buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Parse {
                path: self.path.clone(),
                line: 0,
                message: format!("truncated model file at byte {}", self.at),
            });
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Loads a model file, verifying its hash and, when given, that its
/// architecture matches `expected`.
pub fn load_model(path: &Path, expected: Option<&EncoderConfig>) -> Result<(FeatureExtractor, Option<TaskHead>)> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::HashMismatch(name));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::HashMismatch(name));
    }
    let mut r = Reader {
        buf: body,
        at: 0,
        path: name.clone(),
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Parse {
            path: name,
            line: 0,
            message: "not a model file".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: name,
            line: 0,
            message: format!("unsupported model format version {version}"),
        });
    }
    let hlen = r.u64()? as usize;
    let header: FileHeader = serde_json::from_slice(r.take(hlen)?)?;
    if let Some(exp) = expected {
        if !exp.same_architecture(&header.encoder) {
            return Err(Error::ConfigMismatch(format!(
                "{name} was saved with {:?}, expected {:?}",
                header.encoder, exp
            )));
        }
    }
    header.encoder.validate()?;
    let n_blocks = r.u64()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..n_blocks {
        let nlen = r.u64()? as usize;
        let key = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| Error::Parse {
            path: name.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        blocks.insert(key, Tensor::new(rows, cols, data)?);
    }
    let missing = |k: &str| Error::Parse {
        path: name.clone(),
        line: 0,
        message: format!("missing parameter block {k}"),
    };
    let params = param_layout(&header.encoder)
        .iter()
        .map(|s| {
            let t = blocks.remove(&s.key()).ok_or_else(|| missing(&s.key()))?;
            if t.shape() != [s.rows, s.cols] {
                return Err(Error::ConfigMismatch(format!("block {} has shape {:?}", s.key(), t.shape())));
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let fe = FeatureExtractor {
        config: header.encoder,
        params,
    };
    let head = match header.head {
        Some(kind) => {
            let shapes = TaskHead::shapes(&kind, fe.config.d_model);
            let params = (0..shapes.len())
                .map(|i| blocks.remove(&format!("head/{i}")).ok_or_else(|| missing(&format!("head/{i}"))))
                .collect::<Result<Vec<_>>>()?;
            Some(TaskHead { kind, params })
        }
        None => None,
    };
    Ok((fe, head))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 6,
            max_len: 10,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn single_segment_layout() {
        let cfg = EncoderConfig::default();
        let e = encode_input(&cfg, &[vec![10, 11]]).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, cfg.token_id(10), cfg.token_id(11), SEP_ID]);
        assert_eq!(e.segment_ids, vec![0, 0, 0, 0]);
        assert_eq!(e.segments, vec![1..3]);
    }

    #[test]
    fn pair_layout_with_and_without_trailing_sep() {
        let mut cfg = EncoderConfig::default();
        let e = encode_input(&cfg, &[vec![4], vec![5, 6]]).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, cfg.token_id(4), SEP_ID, cfg.token_id(5), cfg.token_id(6), SEP_ID]);
        assert_eq!(e.segment_ids, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(e.segments, vec![1..2, 3..5]);
        cfg.trailing_sep = false;
        let e = encode_input(&cfg, &[vec![4], vec![5, 6]]).unwrap();
        assert_eq!(e.ids.len(), 5);
        assert_eq!(e.segment_ids, vec![0, 0, 0, 1, 1]);
    }

    #[test]
    fn overlong_and_empty_inputs_are_rejected() {
        let cfg = EncoderConfig::default();
        match encode_input(&cfg, &[vec![7; 70]]) {
            Err(Error::InputTooLong { required, overflow, .. }) => {
                assert_eq!(required, 72);
                assert_eq!(overflow, 8);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(encode_input(&cfg, &[vec![]]), Err(Error::Validation(_))));
        assert!(matches!(encode_input(&cfg, &[]), Err(Error::Validation(_))));
    }

    #[test]
    fn component_slices_partition_the_extractor() {
        let cfg = EncoderConfig::default();
        let fe = FeatureExtractor::init(&cfg).unwrap();
        let slices = component_slices(&cfg);
        let mut covered: Vec<Range<usize>> = slices.values().flatten().cloned().collect();
        covered.sort_by_key(|r| r.start);
        let mut at = 0;
        for r in &covered {
            assert_eq!(r.start, at);
            at = r.end;
        }
        assert_eq!(at, fe.num_params());
        for c in [Component::Attention, Component::FeedForward, Component::LayerOutput] {
            let rs = &slices[&c];
            assert_eq!(rs.len(), cfg.n_layers);
            assert!(rs.iter().all(|r| r.len() == rs[0].len()));
        }
        assert_eq!(slices[&Component::TokenEmbeddings].len(), 1);
    }

    #[test]
    fn zero_model_gives_identical_token_vectors() {
        let cfg = tiny();
        let fe = FeatureExtractor::zeros(&cfg).unwrap();
        let a = forward_features(&fe, &encode_input(&cfg, &[vec![1, 2, 3]]).unwrap()).unwrap();
        let b = forward_features(&fe, &encode_input(&cfg, &[vec![3, 1, 2]]).unwrap()).unwrap();
        assert_eq!(a.tokens, b.tokens);
        for r in 1..a.tokens.rows() {
            assert_eq!(a.tokens.row_slice(r), a.tokens.row_slice(0));
        }
    }

    #[test]
    fn forward_is_deterministic_and_recording_invariant() {
        let cfg = tiny();
        let fe = FeatureExtractor::init(&cfg).unwrap();
        let input = encode_input(&cfg, &[vec![1, 5], vec![2, 7, 3]]).unwrap();
        let a = forward_features(&fe, &input).unwrap();
        let b = forward_features(&fe, &input).unwrap();
        assert_eq!(a, b);
        let mut tape = Tape::new();
        let p = bind_extractor(&mut tape, &fe, true);
        let fv = features_on_tape(&mut tape, &cfg, &p, &input).unwrap();
        assert_eq!(tape.value(fv.output), &a.tokens);
        assert_eq!(a.layers.len(), cfg.n_layers);
        assert_eq!(a.layers.last().unwrap(), &a.tokens);
    }

    /// Plain nested-loop transformer, written without the tape.
    fn straight_line_forward(fe: &FeatureExtractor, input: &EncodedInput) -> Vec<Vec<f64>> {
        let cfg = &fe.config;
        let d = cfg.d_model;
        let p = |i: usize| fe.params[i].data();
        let at = |i: usize, r: usize, c: usize| fe.params[i].get(r, c);
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        };
        let lin = |x: &[f64], w: usize, b: usize, out: usize| -> Vec<f64> {
            (0..out)
                .map(|c| x.iter().enumerate().map(|(r, v)| v * at(w, r, c)).sum::<f64>() + p(b)[c])
                .collect()
        };
        let mut xs: Vec<Vec<f64>> = (0..input.len())
            .map(|i| {
                let e: Vec<f64> = (0..d)
                    .map(|j| at(0, input.ids[i], j) + at(1, i, j) + at(2, input.segment_ids[i], j))
                    .collect();
                ln(&e, p(3), p(4))
            })
            .collect();
        let dh = d / cfg.n_heads;
        for l in 0..cfg.n_layers {
            let base = 5 + 16 * l;
            let q: Vec<_> = xs.iter().map(|x| lin(x, base, base + 1, d)).collect();
            let k: Vec<_> = xs.iter().map(|x| lin(x, base + 2, base + 3, d)).collect();
            let v: Vec<_> = xs.iter().map(|x| lin(x, base + 4, base + 5, d)).collect();
            let n = xs.len();
            let mut cat = vec![vec![0.0; d]; n];
            for h in 0..cfg.n_heads {
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for j in 0..n {
                        let a = (scores[j] - m).exp() / z;
                        for c in 0..dh {
                            cat[i][h * dh + c] += a * v[j][h * dh + c];
                        }
                    }
                }
            }
            for i in 0..n {
                let o = lin(&cat[i], base + 6, base + 7, d);
                let r: Vec<f64> = xs[i].iter().zip(&o).map(|(a, b)| a + b).collect();
                let x1 = ln(&r, p(base + 8), p(base + 9));
                let hdn: Vec<f64> = lin(&x1, base + 10, base + 11, cfg.d_ffn)
                    .into_iter()
                    .map(|u| 0.5 * u * (1.0 + (0.7978845608028654 * (u + 0.044715 * u.powi(3))).tanh()))
                    .collect();
                let f = lin(&hdn, base + 12, base + 13, d);
                let r: Vec<f64> = x1.iter().zip(&f).map(|(a, b)| a + b).collect();
                xs[i] = ln(&r, p(base + 14), p(base + 15));
            }
        }
        xs
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        for seed in 0..5 {
            let mut cfg = tiny();
            cfg.seed = seed;
            let fe = FeatureExtractor::init(&cfg).unwrap();
            let input = encode_input(&cfg, &[vec![1, 5, seed as u32], vec![2, 7]]).unwrap();
            let got = forward_features(&fe, &input).unwrap().tokens;
            let want = straight_line_forward(&fe, &input);
            for (r, row) in want.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    assert!((got.get(r, c) - v).abs() < 1e-12, "seed {seed} ({r},{c})");
                }
            }
        }
    }

    fn zero_head_model(kind: HeadKind) -> Model {
        let cfg = tiny();
        Model::new(FeatureExtractor::init(&cfg).unwrap(), TaskHead::zeros(kind, cfg.d_model).unwrap()).unwrap()
    }

    #[test]
    fn uniform_heads_give_closed_form_log_likelihoods() {
        let m = zero_head_model(HeadKind::Classifier { classes: 2 });
        let x = m.encode(&[vec![1, 2]]).unwrap();
        assert!((m.log_likelihood(&x, &Target::Class(1)).unwrap() - 0.5f64.ln()).abs() < 1e-12);

        let m = zero_head_model(HeadKind::Tagger { tags: 5 });
        let x = m.encode(&[vec![1, 2, 3]]).unwrap();
        let ll = m.log_likelihood(&x, &Target::Tags(vec![0, 4, 2])).unwrap();
        assert!((ll - 3.0 * 0.2f64.ln()).abs() < 1e-12);
        assert!((ll + 4.8283).abs() < 1e-4);

        let mut cfg = tiny();
        cfg.max_len = 16;
        let m = Model::new(FeatureExtractor::init(&cfg).unwrap(), TaskHead::zeros(HeadKind::Span, 4).unwrap()).unwrap();
        let x = m.encode(&[vec![1], vec![2; 10]]).unwrap();
        let ll = m.log_likelihood(&x, &Target::Span(3, 5)).unwrap();
        assert!((ll - 2.0 * 0.1f64.ln()).abs() < 1e-12);
        assert!((ll + 4.6052).abs() < 1e-4);
    }

    #[test]
    fn labels_outside_label_space_are_rejected() {
        let m = zero_head_model(HeadKind::Classifier { classes: 2 });
        let x = m.encode(&[vec![1, 2]]).unwrap();
        assert!(matches!(m.log_likelihood(&x, &Target::Class(2)), Err(Error::Validation(_))));
        assert!(matches!(m.log_likelihood(&x, &Target::Real(1.0)), Err(Error::Validation(_))));
        let m = zero_head_model(HeadKind::Tagger { tags: 3 });
        assert!(matches!(m.log_likelihood(&x, &Target::Tags(vec![0])), Err(Error::Validation(_))));
    }

    #[test]
    fn per_example_grad_is_deterministic_and_sized() {
        let cfg = tiny();
        let m = Model::new(
            FeatureExtractor::init(&cfg).unwrap(),
            TaskHead::init(HeadKind::Classifier { classes: 3 }, 4, 9).unwrap(),
        )
        .unwrap();
        let x = m.encode(&[vec![1, 2], vec![3]]).unwrap();
        let a = per_example_grad(&m, &x, &Target::Class(2)).unwrap();
        let b = per_example_grad(&m, &x, &Target::Class(2)).unwrap();
        assert_eq!(a.len(), m.fe.num_params());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn model_file_round_trip_and_guards() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let cfg = tiny();
        let fe = FeatureExtractor::init(&cfg).unwrap();
        let head = TaskHead::init(HeadKind::Span, 4, 1).unwrap();
        save_model(&path, &fe, Some(&head)).unwrap();
        let (fe2, head2) = load_model(&path, Some(&cfg)).unwrap();
        assert_eq!(fe2, fe);
        assert_eq!(head2.unwrap(), head);

        let mut other = cfg.clone();
        other.d_model = 6;
        other.d_ffn = 6;
        assert!(matches!(load_model(&path, Some(&other)), Err(Error::ConfigMismatch(_))));

        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path, None), Err(Error::HashMismatch(_))));
    }


    proptest::proptest! {
        #[test]
        fn component_slices_partition_any_configuration(heads in 1usize..4, per_head in 1usize..4, layers in 1usize..4, ffn in 1usize..10) {
            let cfg = EncoderConfig {
                d_model: heads * per_head,
                n_heads: heads,
                n_layers: layers,
                d_ffn: ffn,
                ..tiny()
            };
            let total: usize = param_layout(&cfg).iter().map(|p| p.numel()).sum();
            let mut covered: Vec<Range<usize>> = component_slices(&cfg).into_values().flatten().collect();
            covered.sort_by_key(|r| r.start);
            proptest::prop_assert_eq!(covered.iter().map(|r| r.len()).sum::<usize>(), total);
            for w in covered.windows(2) {
                proptest::prop_assert_eq!(w[0].end, w[1].start);
            }
            for (c, ranges) in component_slices(&cfg) {
                let expect = if c == Component::TokenEmbeddings { 1 } else { layers };
                proptest::prop_assert_eq!(ranges.len(), expect);
                proptest::prop_assert!(ranges.iter().all(|r| r.len() == ranges[0].len()));
            }
        }
    }
}
