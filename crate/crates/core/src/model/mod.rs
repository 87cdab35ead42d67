//! Causal transformer over lattice prefixes.
//!
//! Each prefix position `t` holding cell `p` is embedded as
//!
//! ```text
//! e_t = E_coord(p) + E_task(C) + E_seq(t)
//! ```
//!
//! where `E_coord` sums three per-axis tables sized to the configured box,
//! `E_task` is a linear projection of the task features plus per-axis goal
//! tables (zero when the context has no target), and `E_seq` is a learned
//! position table. Pre-norm attention/feed-forward blocks follow, then a
//! final norm and the head `W h + b` over the 7-way move vocabulary.
//!
//! Picking the best legal *move* is equivalent to picking the best legal
//! neighbour cell, since each legal neighbour corresponds to exactly one unit
//! move from the current cell; the head therefore stays 7 wide whatever the
//! lattice size.

mod loss;
mod optim;

pub use loss::{composite_loss, example_gradients, Example, LossBreakdown, LossConfig, LossTarget, LossTerm};
pub use optim::{apply_update, train_step, train_step_with, Gradients, OptimizerConfig, OptimizerKind, OptimizerState};

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::lattice::{in_bounds, move_mask, CellBox, LatticeCoord, Workspace, MOVE_VOCAB};
use crate::rng::rng_from_seed;
use crate::taskgrid::{TaskContext, CONTEXT_WIDTH};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("prefix is empty")]
    EmptyPrefix,
    #[error("prefix of length {len} exceeds max_seq_len {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("position {t} is not below max_seq_len {max}")]
    PositionOutOfRange { t: usize, max: usize },
    #[error("cell {0} lies outside the model's lattice box")]
    OutsideModelBox(LatticeCoord),
    #[error("prefix cell {0} is outside the workspace or blocked")]
    OutsideWorkspace(LatticeCoord),
    #[error("context has {got} features, model expects {expected}")]
    ContextWidth { expected: usize, got: usize },
    #[error("no legal entry in the move mask")]
    NoLegalMove,
    #[error("gold trajectory is illegal at index {0}")]
    IllegalGold(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("parameter tensors do not match the config layout")]
    LayoutMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Longest prefix the model accepts (`T_max`).
    pub max_seq_len: usize,
    pub task_feature_width: usize,
    /// Cells the coordinate tables cover.
    pub lattice_box: CellBox,
    /// Feed-forward hidden width as a multiple of `embed_dim`.
    pub ffn_multiplier: usize,
}

impl ModelConfig {
    pub fn new(embed_dim: usize, num_layers: usize, num_heads: usize, max_seq_len: usize, lattice_box: CellBox) -> Self {
        Self {
            embed_dim,
            num_layers,
            num_heads,
            max_seq_len,
            task_feature_width: CONTEXT_WIDTH,
            lattice_box,
            ffn_multiplier: 4,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(ModelError::InvalidConfig("embed_dim, num_layers and num_heads must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(ModelError::InvalidConfig("embed_dim must be divisible by num_heads"));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig("max_seq_len must be at least 2"));
        }
        if self.task_feature_width == 0 || self.ffn_multiplier == 0 {
            return Err(ModelError::InvalidConfig("task_feature_width and ffn_multiplier must be positive"));
        }
        Ok(())
    }

    pub fn move_vocab(&self) -> usize {
        MOVE_VOCAB
    }

    fn ffn_dim(&self) -> usize {
        self.embed_dim * self.ffn_multiplier
    }
}

/// Name and shape of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    kind: InitKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum InitKind {
    Uniform,
    Ones,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Positions of every tensor in the declared parameter order.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    coord: [usize; 3],
    goal: [usize; 3],
    task_w: usize,
    task_b: usize,
    pos: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let mut specs = Vec::new();
    let mut add = |name: String, rows: usize, cols: usize, kind: InitKind| {
        specs.push(ParamSpec { name, rows, cols, kind });
        specs.len() - 1
    };
    let d = cfg.embed_dim;
    let ext = cfg.lattice_box.extents();
    let axes = ["x", "y", "z"];
    let coord = [0, 1, 2].map(|a| add(format!("coord_{}", axes[a]), ext[a], d, InitKind::Uniform));
    let goal = [0, 1, 2].map(|a| add(format!("goal_{}", axes[a]), ext[a], d, InitKind::Uniform));
    let task_w = add("task_proj".into(), cfg.task_feature_width, d, InitKind::Uniform);
    let task_b = add("task_bias".into(), 1, d, InitKind::Uniform);
    let pos = add("position".into(), cfg.max_seq_len, d, InitKind::Uniform);
    let f = cfg.ffn_dim();
    let layers = (0..cfg.num_layers)
        .map(|l| {
            let mut p = |n: &str, r, c, k| add(format!("layer{l}.{n}"), r, c, k);
            LayerIdx {
                ln1_g: p("ln1_gain", 1, d, InitKind::Ones),
                ln1_b: p("ln1_bias", 1, d, InitKind::Zeros),
                wq: p("wq", d, d, InitKind::Uniform),
                bq: p("bq", 1, d, InitKind::Uniform),
                wk: p("wk", d, d, InitKind::Uniform),
                bk: p("bk", 1, d, InitKind::Uniform),
                wv: p("wv", d, d, InitKind::Uniform),
                bv: p("bv", 1, d, InitKind::Uniform),
                wo: p("wo", d, d, InitKind::Uniform),
                bo: p("bo", 1, d, InitKind::Uniform),
                ln2_g: p("ln2_gain", 1, d, InitKind::Ones),
                ln2_b: p("ln2_bias", 1, d, InitKind::Zeros),
                w1: p("ffn_w1", d, f, InitKind::Uniform),
                b1: p("ffn_b1", 1, f, InitKind::Uniform),
                w2: p("ffn_w2", f, d, InitKind::Uniform),
                b2: p("ffn_b2", 1, d, InitKind::Uniform),
            }
        })
        .collect();
    let lnf_g = add("final_ln_gain".into(), 1, d, InitKind::Ones);
    let lnf_b = add("final_ln_bias".into(), 1, d, InitKind::Zeros);
    let head_w = add("head_w".into(), d, MOVE_VOCAB, InitKind::Uniform);
    let head_b = add("head_b".into(), 1, MOVE_VOCAB, InitKind::Uniform);
    (
        Layout {
            coord,
            goal,
            task_w,
            task_b,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
        },
        specs,
    )
}

/// Raw, masked and legality views of one step's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLogits {
    pub raw: [f64; MOVE_VOCAB],
    /// `raw` on legal entries, `-inf` elsewhere.
    pub masked: [f64; MOVE_VOCAB],
    pub legal_mask: [bool; MOVE_VOCAB],
}

impl StepLogits {
    pub fn new(raw: [f64; MOVE_VOCAB], legal_mask: [bool; MOVE_VOCAB]) -> Self {
        let mut masked = [f64::NEG_INFINITY; MOVE_VOCAB];
        for i in 0..MOVE_VOCAB {
            if legal_mask[i] {
                masked[i] = raw[i];
            }
        }
        Self { raw, masked, legal_mask }
    }
}

/// Softmax over legal entries; illegal entries get exactly zero.
pub fn masked_softmax(s: &StepLogits) -> Result<[f64; MOVE_VOCAB], ModelError> {
    let max = s.masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ModelError::NoLegalMove);
    }
    let mut out = [0.0; MOVE_VOCAB];
    let mut sum = 0.0;
    for i in 0..MOVE_VOCAB {
        if s.legal_mask[i] {
            out[i] = libm::exp(s.masked[i] - max);
            sum += out[i];
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Log-probabilities over legal entries (`-inf` on illegal ones).
pub fn masked_log_softmax(s: &StepLogits) -> Result<[f64; MOVE_VOCAB], ModelError> {
    let max = s.masked.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ModelError::NoLegalMove);
    }
    let sum: f64 = (0..MOVE_VOCAB)
        .filter(|&i| s.legal_mask[i])
        .map(|i| libm::exp(s.masked[i] - max))
        .sum();
    let lse = max + libm::log(sum);
    let mut out = [f64::NEG_INFINITY; MOVE_VOCAB];
    for i in 0..MOVE_VOCAB {
        if s.legal_mask[i] {
            out[i] = s.masked[i] - lse;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathModel {
    config: ModelConfig,
    specs: Vec<ParamSpec>,
    layout: Layout,
    params: Vec<Tensor>,
}

impl PathModel {
    /// Fresh model; weights uniform in `[-1/sqrt(d), 1/sqrt(d)]`, norm gains 1
    /// and norm shifts 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let bound = 1.0 / libm::sqrt(config.embed_dim as f64);
        let mut rng = rng_from_seed(seed);
        let params = specs
            .iter()
            .map(|s| {
                let data = match s.kind {
                    InitKind::Uniform => (0..s.rows * s.cols).map(|_| rng.random_range(-bound..=bound)).collect(),
                    InitKind::Ones => vec![1.0; s.rows * s.cols],
                    InitKind::Zeros => vec![0.0; s.rows * s.cols],
                };
                Tensor::from_vec(s.rows, s.cols, data)
            })
            .collect();
        Ok(Self {
            config,
            specs,
            layout,
            params,
        })
    }

    /// Rebuild from tensors in declared order (checkpoint loading).
    pub fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if params.len() != specs.len() || params.iter().zip(&specs).any(|(t, s)| t.rows != s.rows || t.cols != s.cols) {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(Self {
            config,
            specs,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn axis_rows(&self, p: LatticeCoord) -> Result<[usize; 3], ModelError> {
        let b = &self.config.lattice_box;
        if !b.contains(p) {
            return Err(ModelError::OutsideModelBox(p));
        }
        Ok([(p.x - b.min.x) as usize, (p.y - b.min.y) as usize, (p.z - b.min.z) as usize])
    }

    fn check_context(&self, ctx: &TaskContext) -> Result<(), ModelError> {
        if ctx.features.len() != self.config.task_feature_width {
            return Err(ModelError::ContextWidth {
                expected: self.config.task_feature_width,
                got: ctx.features.len(),
            });
        }
        if let Some(t) = ctx.target {
            self.axis_rows(t)?;
        }
        Ok(())
    }

    /// `E_coord(p) + E_task(C) + E_seq(t)` for a single position.
    pub fn embed_step(&self, p: LatticeCoord, ctx: &TaskContext, t: usize) -> Result<Vec<f64>, ModelError> {
        if t >= self.config.max_seq_len {
            return Err(ModelError::PositionOutOfRange {
                t,
                max: self.config.max_seq_len,
            });
        }
        self.check_context(ctx)?;
        let d = self.config.embed_dim;
        let rows = self.axis_rows(p)?;
        let mut e = vec![0.0; d];
        for (axis, &r) in rows.iter().enumerate() {
            add_row(&mut e, self.params[self.layout.coord[axis]].row(r));
        }
        for (j, e) in e.iter_mut().enumerate() {
            *e += self.task_embedding_entry(ctx, j);
        }
        if let Some(target) = ctx.target {
            for (axis, &r) in self.axis_rows(target)?.iter().enumerate() {
                add_row(&mut e, self.params[self.layout.goal[axis]].row(r));
            }
        }
        add_row(&mut e, self.params[self.layout.pos].row(t));
        Ok(e)
    }

    fn task_embedding_entry(&self, ctx: &TaskContext, j: usize) -> f64 {
        let w = &self.params[self.layout.task_w];
        let b = &self.params[self.layout.task_b];
        let mut acc = 0.0;
        for (i, f) in ctx.features.iter().enumerate() {
            acc += f * w.data[i * w.cols + j];
        }
        acc + b.data[j]
    }

    /// Validate a prefix against the model and the workspace.
    fn check_prefix(&self, prefix: &[LatticeCoord], ctx: &TaskContext, w: Option<&Workspace>) -> Result<(), ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix);
        }
        if prefix.len() > self.config.max_seq_len {
            return Err(ModelError::PrefixTooLong {
                len: prefix.len(),
                max: self.config.max_seq_len,
            });
        }
        self.check_context(ctx)?;
        for &p in prefix {
            self.axis_rows(p)?;
            if let Some(w) = w {
                if !in_bounds(p, w) {
                    return Err(ModelError::OutsideWorkspace(p));
                }
            }
        }
        Ok(())
    }

    /// Record the forward pass for `points` on `tape`; returns logits `[T, 7]`.
    ///
    /// Callers validate the prefix first.
    pub(crate) fn forward_tape(&self, tape: &mut Tape<'_>, points: &[LatticeCoord], ctx: &TaskContext) -> Var {
        let cfg = &self.config;
        let l = &self.layout;
        let t_len = points.len();
        let d = cfg.embed_dim;

        let rows: Vec<[usize; 3]> = points.iter().map(|p| self.axis_rows(*p).expect("checked")).collect();
        let mut x: Option<Var> = None;
        for axis in 0..3 {
            let table = tape.param(l.coord[axis]);
            let g = tape.gather_rows(table, rows.iter().map(|r| r[axis]).collect());
            x = Some(match x {
                None => g,
                Some(acc) => tape.add(acc, g),
            });
        }
        let pos_table = tape.param(l.pos);
        let pos = tape.gather_rows(pos_table, (0..t_len).collect());
        let mut x = tape.add(x.expect("three axes"), pos);

        let feats = tape.constant(1, ctx.features.len(), ctx.features.clone());
        let tw = tape.param(l.task_w);
        let tb = tape.param(l.task_b);
        let c = tape.matmul(feats, tw);
        let mut c = tape.add(c, tb);
        if let Some(target) = ctx.target {
            let gr = self.axis_rows(target).expect("checked");
            for axis in 0..3 {
                let table = tape.param(l.goal[axis]);
                let g = tape.gather_rows(table, vec![gr[axis]]);
                c = tape.add(c, g);
            }
        }
        x = tape.add_row(x, c);

        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        for layer in &l.layers {
            let (g1, b1) = (tape.param(layer.ln1_g), tape.param(layer.ln1_b));
            let h = tape.layer_norm(x, g1, b1);
            let q = linear(tape, h, layer.wq, layer.bq);
            let k = linear(tape, h, layer.wk, layer.bk);
            let v = linear(tape, h, layer.wv, layer.bv);
            let mut outs = Vec::with_capacity(heads);
            for head in 0..heads {
                let qh = tape.slice_cols(q, head * dh, dh);
                let kh = tape.slice_cols(k, head * dh, dh);
                let vh = tape.slice_cols(v, head * dh, dh);
                let scores = tape.matmul_bt(qh, kh);
                let attn = tape.causal_softmax(scores, scale);
                outs.push(tape.matmul(attn, vh));
            }
            let o = if heads == 1 { outs[0] } else { tape.concat_cols(outs) };
            let o = linear(tape, o, layer.wo, layer.bo);
            x = tape.add(x, o);

            let (g2, b2) = (tape.param(layer.ln2_g), tape.param(layer.ln2_b));
            let h = tape.layer_norm(x, g2, b2);
            let f = linear(tape, h, layer.w1, layer.b1);
            let f = tape.gelu(f);
            let f = linear(tape, f, layer.w2, layer.b2);
            x = tape.add(x, f);
        }
        let (gf, bf) = (tape.param(l.lnf_g), tape.param(l.lnf_b));
        let h = tape.layer_norm(x, gf, bf);
        linear(tape, h, l.head_w, l.head_b)
    }

    /// Raw logits at every prefix position (teacher-forced view).
    pub fn position_logits(&self, points: &[LatticeCoord], ctx: &TaskContext) -> Result<Vec<[f64; MOVE_VOCAB]>, ModelError> {
        self.check_prefix(points, ctx, None)?;
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_tape(&mut tape, points, ctx);
        Ok(tape
            .value(logits)
            .chunks(MOVE_VOCAB)
            .map(|r| r.try_into().expect("7 columns"))
            .collect())
    }

    /// Logits for the step after the last prefix cell, masked to the legal
    /// moves from that cell in `w`.
    pub fn forward(&self, prefix: &[LatticeCoord], ctx: &TaskContext, w: &Workspace) -> Result<StepLogits, ModelError> {
        self.check_prefix(prefix, ctx, Some(w))?;
        let mut tape = Tape::new(&self.params);
        let logits = self.forward_tape(&mut tape, prefix, ctx);
        let v = tape.value(logits);
        let last = &v[(prefix.len() - 1) * MOVE_VOCAB..];
        let raw: [f64; MOVE_VOCAB] = last.try_into().expect("7 columns");
        Ok(StepLogits::new(raw, move_mask(*prefix.last().expect("non-empty"), w)))
    }

    pub(crate) fn check_example(&self, points: &[LatticeCoord], ctx: &TaskContext, w: &Workspace) -> Result<(), ModelError> {
        self.check_prefix(points, ctx, None)?;
        for (i, &p) in points.iter().enumerate() {
            if !in_bounds(p, w) || (i > 0 && crate::lattice::manhattan(points[i - 1], p) != 1) {
                return Err(ModelError::IllegalGold(i));
            }
        }
        Ok(())
    }
}

fn linear(tape: &mut Tape<'_>, x: Var, w: usize, b: usize) -> Var {
    let wv = tape.param(w);
    let bv = tape.param(b);
    let y = tape.matmul(x, wv);
    tape.add_row(y, bv)
}

fn add_row(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
