use super::config::ModelConfig;
use super::weights::{BoundBlock, BoundLm, BoundVision, BoundWeights, ModelWeights};
use crate::data::tokenizer::{PAD, STOP};
use crate::data::Image;
use crate::error::{Error, Result};
use crate::prompts::bank::{BoundPrompts, LayerPrompts, PromptBank, PromptFlags};
use crate::tensor::{Tape, Tensor, Var};

/// Flattens an image into `[N_v × C·p·p]` patch rows, row-major over the
/// patch grid. Within a patch, features run channel, then y, then x.
pub fn patchify(cfg: &ModelConfig, image: &Image) -> Result<Tensor> {
    if image.channels != cfg.image_channels
        || image.height != cfg.image_size
        || image.width != cfg.image_size
    {
        return Err(Error::Shape {
            op: "patchify",
            lhs: vec![image.channels, image.height, image.width],
            rhs: vec![cfg.image_channels, cfg.image_size, cfg.image_size],
        });
    }
    let (g, p) = (cfg.patch_grid, cfg.patch_size());
    let mut data = Vec::with_capacity(cfg.n_visual() * cfg.patch_dim());
    for pr in 0..g {
        for pc in 0..g {
            for c in 0..image.channels {
                for y in 0..p {
                    for x in 0..p {
                        data.push(image.get(c, pr * p + y, pc * p + x) as f64);
                    }
                }
            }
        }
    }
    Tensor::new(&[cfg.n_visual(), cfg.patch_dim()], data)
}

/// `X·W_eᵀ + b`, before position embeddings.
pub fn patch_embed(tape: &mut Tape, vision: &BoundVision, patches: Var) -> Result<Var> {
    let x = tape.matmul_nt(patches, vision.patch_w)?;
    tape.add_row(x, vision.patch_b)
}

/// Causal mask over `n_prefix` always-visible columns followed by `s`
/// sequence columns.
pub fn causal_mask(s: usize, n_prefix: usize) -> Vec<f64> {
    let k = n_prefix + s;
    let mut m = vec![0.0; s * k];
    for i in 0..s {
        for j in (n_prefix + i + 1)..k {
            m[i * k + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Scaled dot-product attention per head; returns heads concatenated
/// along columns (before the output projection).
fn multi_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&[f64]>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let s = match mask {
            Some(m) => tape.add_const(s, m)?,
            None => s,
        };
        let a = tape.softmax_rows(s)?;
        heads.push(tape.matmul(a, vh)?);
    }
    tape.concat_cols(&heads)
}

/// Self-attention over `h: [S×D_L]` with optional prefix key/value rows and
/// an optional gated adaption branch.
///
/// Main branch: keys and values are `[P^K; H·W_Kᵀ]` and `[P^V; H·W_Vᵀ]`,
/// prefix columns visible to every query, sequence columns causal.
/// Adaption branch: `A = P^a + g̃` is projected by the same `W_K`, `W_V`,
/// attended without a mask under its own softmax, and scaled by `tanh(α)`.
pub fn attention_with_prompts(
    tape: &mut Tape,
    h: Var,
    block: &BoundBlock,
    n_heads: usize,
    prompts: &LayerPrompts,
    global: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(h)[0];
    let q = tape.matmul_nt(h, block.wq)?;
    let k = tape.matmul_nt(h, block.wk)?;
    let v = tape.matmul_nt(h, block.wv)?;
    let (k, v, n_prefix) = match prompts.prefix {
        Some((pk, pv)) => {
            let n = tape.shape(pk)[0];
            (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?, n)
        }
        None => (k, v, 0),
    };
    let mask = causal_mask(s, n_prefix);
    let mut out = multi_head(tape, q, k, v, n_heads, Some(&mask))?;

    if let Some((pa, gate)) = prompts.adaption {
        let g = global.ok_or_else(|| {
            Error::Contract("adaption prompts active without a global visual feature".into())
        })?;
        let a = tape.add_row(pa, g)?;
        let ka = tape.matmul_nt(a, block.wk)?;
        let va = tape.matmul_nt(a, block.wv)?;
        let oa = multi_head(tape, q, ka, va, n_heads, None)?;
        let t = tape.tanh(gate);
        let oa = tape.scale_by(oa, t)?;
        out = tape.add(out, oa)?;
    }
    tape.matmul_nt(out, block.wo)
}

/// `LN(x + FFN(x))` with a GELU hidden layer.
fn ffn_sublayer(tape: &mut Tape, x: Var, b: &BoundBlock, eps: f64) -> Result<Var> {
    let f = tape.matmul_nt(x, b.ffn_w1)?;
    let f = tape.add_row(f, b.ffn_b1)?;
    let f = tape.gelu(f);
    let f = tape.matmul_nt(f, b.ffn_w2)?;
    let f = tape.add_row(f, b.ffn_b2)?;
    let y = tape.add(x, f)?;
    tape.layer_norm(y, b.ln2.0, b.ln2.1, eps)
}

/// `Z^v: [N_v×D]` for one image.
pub fn encode_image(
    tape: &mut Tape,
    vision: &BoundVision,
    cfg: &ModelConfig,
    image: &Image,
) -> Result<Var> {
    let patches = patchify(cfg, image)?;
    let shape = patches.shape().to_vec();
    let patches = tape.constant(&shape, patches.into_data())?;
    let x = patch_embed(tape, vision, patches)?;
    let mut x = tape.add(x, vision.pos)?;
    for b in &vision.blocks {
        let q = tape.matmul_nt(x, b.wq)?;
        let k = tape.matmul_nt(x, b.wk)?;
        let v = tape.matmul_nt(x, b.wv)?;
        let a = multi_head(tape, q, k, v, cfg.vision_heads, None)?;
        let a = tape.matmul_nt(a, b.wo)?;
        let y = tape.add(x, a)?;
        let y = tape.layer_norm(y, b.ln1.0, b.ln1.1, cfg.ln_eps)?;
        x = ffn_sublayer(tape, y, b, cfg.ln_eps)?;
    }
    Ok(x)
}

/// `Z̃^v = Z^v·W_pᵀ`.
pub fn project_visual(tape: &mut Tape, proj: Var, zv: Var) -> Result<Var> {
    tape.matmul_nt(zv, proj)
}

/// Mean over visual tokens.
pub fn pool_global(tape: &mut Tape, z: Var) -> Result<Var> {
    tape.mean_rows(z)
}

/// Token embeddings plus position embeddings starting at `start_pos`.
pub fn embed_text(tape: &mut Tape, lm: &BoundLm, ids: &[usize], start_pos: usize) -> Result<Var> {
    let e = tape.embedding(lm.tok_emb, ids)?;
    let positions: Vec<usize> = (start_pos..start_pos + ids.len()).collect();
    let p = tape.embedding(lm.pos_emb, &positions)?;
    tape.add(e, p)
}

/// Runs the decoder stack over `x: [S×D_L]` and returns `[S×V]` logits from
/// the tied head.
pub fn decoder_forward(
    tape: &mut Tape,
    cfg: &ModelConfig,
    lm: &BoundLm,
    prompts: Option<&BoundPrompts>,
    x: Var,
    flags: PromptFlags,
    global: Option<Var>,
) -> Result<Var> {
    let s = tape.shape(x)[0];
    if s > cfg.max_seq_len {
        return Err(Error::Length {
            len: s,
            max: cfg.max_seq_len,
        });
    }
    let mut h = x;
    for (l, b) in lm.blocks.iter().enumerate() {
        let lp = match prompts {
            Some(p) => p.for_layer(tape, cfg, l, flags),
            None => LayerPrompts::default(),
        };
        let a = attention_with_prompts(tape, h, b, cfg.n_heads, &lp, global)?;
        let y = tape.add(h, a)?;
        let y = tape.layer_norm(y, b.ln1.0, b.ln1.1, cfg.ln_eps)?;
        h = ffn_sublayer(tape, y, b, cfg.ln_eps)?;
    }
    tape.matmul_nt(h, lm.tok_emb)
}

/// Text-only forward through the LM with no prompts.
pub fn lm_forward(tape: &mut Tape, cfg: &ModelConfig, lm: &BoundLm, ids: &[usize], start_pos: usize) -> Result<Var> {
    if ids.is_empty() || start_pos + ids.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: start_pos + ids.len(),
            max: cfg.max_seq_len,
        });
    }
    let x = embed_text(tape, lm, ids, start_pos)?;
    decoder_forward(tape, cfg, lm, None, x, PromptFlags::default(), None)
}

/// Spans of a multimodal input sequence: visual tokens, an optional
/// summary token, the question, then the answer (without STOP).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_visual: usize,
    pub n_summary: usize,
    pub question_len: usize,
    pub answer_len: usize,
}

impl SequenceLayout {
    pub fn new(
        cfg: &ModelConfig,
        n_summary: usize,
        question_len: usize,
        answer_len: usize,
    ) -> Result<Self> {
        let l = Self {
            n_visual: cfg.n_visual(),
            n_summary,
            question_len,
            answer_len,
        };
        if l.len() > cfg.max_seq_len {
            return Err(Error::Length {
                len: l.len(),
                max: cfg.max_seq_len,
            });
        }
        Ok(l)
    }

    pub fn len(&self) -> usize {
        self.n_visual + self.n_summary + self.question_len + self.answer_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn text_start(&self) -> usize {
        self.n_visual + self.n_summary
    }

    pub fn answer_start(&self) -> usize {
        self.text_start() + self.question_len
    }

    /// Next-token targets; the last position predicts STOP and positions
    /// before the text carry PAD.
    pub fn targets(&self, question: &[usize], answer: &[usize]) -> Vec<usize> {
        let text: Vec<usize> = question.iter().chain(answer).copied().collect();
        let ts = self.text_start();
        (0..self.len())
            .map(|p| {
                if p + 1 == self.len() {
                    STOP
                } else if p + 1 >= ts {
                    text[p + 1 - ts]
                } else {
                    PAD
                }
            })
            .collect()
    }

    /// True exactly where the target is an answer token or the final STOP.
    pub fn loss_mask(&self) -> Vec<bool> {
        let first = self.answer_start() - 1;
        (0..self.len()).map(|p| p >= first).collect()
    }
}

/// Handles produced while encoding one image.
#[derive(Clone, Copy, Debug)]
pub struct VisualVars {
    /// `Z^v: [N_v×D]`.
    pub zv: Var,
    /// `Z̃^v: [N_v×D_L]`.
    pub projected: Var,
    /// `g̃`: mean of the projected rows.
    pub global: Var,
}

pub fn visual_vars(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BoundWeights,
    image: &Image,
) -> Result<VisualVars> {
    let zv = encode_image(tape, &w.vision, cfg, image)?;
    let projected = project_visual(tape, w.proj, zv)?;
    let global = pool_global(tape, projected)?;
    Ok(VisualVars {
        zv,
        projected,
        global,
    })
}

/// Builds `[Z̃^v + pos; summary + pos; text + pos]`.
pub fn assemble_inputs(
    tape: &mut Tape,
    lm: &BoundLm,
    visual: Var,
    summary: Option<Var>,
    text: &[usize],
) -> Result<Var> {
    let nv = tape.shape(visual)[0];
    let ns = usize::from(summary.is_some());
    let vpos: Vec<usize> = (0..nv).collect();
    let vp = tape.embedding(lm.pos_emb, &vpos)?;
    let mut parts = vec![tape.add(visual, vp)?];
    if let Some(sv) = summary {
        let d = tape.shape(sv).iter().product::<usize>();
        let sp = tape.embedding(lm.pos_emb, &[nv])?;
        let s = tape.add_row(sp, sv).map_err(|_| Error::Shape {
            op: "summary",
            lhs: vec![d],
            rhs: tape.shape(sp).to_vec(),
        })?;
        parts.push(s);
    }
    if !text.is_empty() {
        parts.push(embed_text(tape, lm, text, nv + ns)?);
    }
    tape.concat_rows(&parts)
}

/// Output of a full multimodal forward pass for one sample.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub logits: Var,
    pub layout: SequenceLayout,
    pub visual: VisualVars,
}

/// Encodes the image, assembles the sequence and runs the decoder.
#[allow(clippy::too_many_arguments)]
pub fn forward_sample(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BoundWeights,
    prompts: &BoundPrompts,
    image: &Image,
    summary: Option<Var>,
    question: &[usize],
    answer: &[usize],
    flags: PromptFlags,
) -> Result<SampleForward> {
    let layout = SequenceLayout::new(
        cfg,
        usize::from(summary.is_some()),
        question.len(),
        answer.len(),
    )?;
    let visual = visual_vars(tape, cfg, w, image)?;
    let text: Vec<usize> = question.iter().chain(answer).copied().collect();
    let x = assemble_inputs(tape, &w.lm, visual.projected, summary, &text)?;
    let logits = decoder_forward(tape, cfg, &w.lm, Some(prompts), x, flags, Some(visual.global))?;
    Ok(SampleForward {
        logits,
        layout,
        visual,
    })
}

/// Binds weights and prompts to a fresh tape, returning the trainable leaves.
pub fn bind_all(
    tape: &mut Tape,
    weights: &ModelWeights,
    bank: &PromptBank,
) -> (BoundWeights, BoundPrompts, Vec<(String, Var)>) {
    let mut leaves = Vec::new();
    let w = BoundWeights::bind(tape, weights, &mut leaves);
    let p = BoundPrompts::bind(tape, bank, &mut leaves);
    (w, p, leaves)
}

/// Lowest-index argmax of the last row of `[S×V]` logits.
pub fn argmax_last(tape: &Tape, logits: Var) -> usize {
    let v = tape.shape(logits)[1];
    let vals = tape.value(logits);
    let row = &vals[vals.len() - v..];
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding: recomputes the full sequence each step, picks the
/// lowest-id argmax and stops at STOP or after `max_new` tokens. The
/// returned ids exclude STOP.
#[allow(clippy::too_many_arguments)]
pub fn generate_greedy(
    weights: &ModelWeights,
    bank: &PromptBank,
    image: &Image,
    question: &[usize],
    summary: Option<&[f64]>,
    flags: PromptFlags,
    max_new: usize,
) -> Result<Vec<usize>> {
    let cfg = &weights.config;
    let mut tape = Tape::new();
    let (w, p, _) = bind_all(&mut tape, weights, bank);
    let visual = visual_vars(&mut tape, cfg, &w, image)?;
    let summary = summary
        .map(|s| tape.constant(&[s.len()], s.to_vec()))
        .transpose()?;
    let base = tape.len();
    let ns = usize::from(summary.is_some());
    let mut out = Vec::new();
    let mut text = question.to_vec();
    while out.len() < max_new && cfg.n_visual() + ns + text.len() < cfg.max_seq_len {
        tape.truncate(base);
        let x = assemble_inputs(&mut tape, &w.lm, visual.projected, summary, &text)?;
        let logits =
            decoder_forward(&mut tape, cfg, &w.lm, Some(&p), x, flags, Some(visual.global))?;
        let next = argmax_last(&tape, logits);
        if next == STOP {
            break;
        }
        out.push(next);
        text.push(next);
    }
    Ok(out)
}

/// Number of scalar parameters with `requires_grad` set.
pub fn count_trainable_params(weights: &ModelWeights, bank: &PromptBank) -> usize {
    weights
        .tensors()
        .into_iter()
        .chain(bank.tensors())
        .filter(|(_, t)| t.requires_grad())
        .map(|(_, t)| t.numel())
        .sum()
}

pub fn count_all_params(weights: &ModelWeights, bank: &PromptBank) -> usize {
    weights
        .tensors()
        .into_iter()
        .chain(bank.tensors())
        .map(|(_, t)| t.numel())
        .sum()
}
