use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use crate::data::generate::{mix, CaptionSample, VqaSample};
use crate::data::tokenizer::STOP;
use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::forward::{bind_all, forward_sample, lm_forward};
use crate::model::weights::BoundWeights;
use crate::model::{ModelConfig, ModelWeights};
use crate::parallel::{self, Execution};
use crate::prompts::bank::BoundPrompts;
use crate::prompts::{PromptBank, PromptFlags};
use crate::tensor::{Tape, Var};

/// Training phases in the order they run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    /// Text-only LM training before the LM is frozen.
    Warmup = 0,
    /// Caption alignment with the LM frozen.
    Stage1 = 1,
    /// VQA fine-tuning with the LM frozen.
    Stage2 = 2,
}

impl Phase {
    pub fn from_index(i: u64) -> Result<Self> {
        match i {
            0 => Ok(Phase::Warmup),
            1 => Ok(Phase::Stage1),
            2 => Ok(Phase::Stage2),
            _ => Err(Error::Format {
                offset: 0,
                reason: format!("unknown training phase {i}"),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Stage1 => "stage1",
            Phase::Stage2 => "stage2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// 1 runs the text warmup (if any) then caption alignment; 2 runs VQA
    /// fine-tuning.
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Text-only LM steps before freezing; only read when `stage = 1`.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub dataset: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 400,
            batch_size: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            warmup_steps: 2000,
            warmup_lr: 1e-3,
            checkpoint_every: 0,
            dataset: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.stage) {
            return Err(Error::Config(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.warmup_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// One training sequence. Text-only examples (no image) are used by the
/// warmup, where every token is a target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: Option<Arc<Image>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

impl Example {
    pub fn caption(c: &CaptionSample) -> Self {
        Self {
            image: Some(c.image.clone()),
            question: Vec::new(),
            answer: c.caption_ids.clone(),
        }
    }

    pub fn vqa(s: &VqaSample) -> Self {
        Self {
            image: Some(s.image.clone()),
            question: s.question_ids.clone(),
            answer: s.answer_ids.clone(),
        }
    }

    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            image: None,
            question: Vec::new(),
            answer: ids,
        }
    }
}

/// Warmup corpus: every caption, and every `caption question answer`
/// string built from a VQA sample and its image's caption. The second kind
/// is what lets the frozen LM answer from a description of the image.
pub fn warmup_texts(captions: &[CaptionSample], samples: &[VqaSample]) -> Vec<Example> {
    let by_image: HashMap<&str, &CaptionSample> =
        captions.iter().map(|c| (c.image_id.as_str(), c)).collect();
    captions
        .iter()
        .map(|c| Example::text(c.caption_ids.clone()))
        .chain(samples.iter().filter_map(|s| {
            let c = by_image.get(s.image_id.as_str())?;
            let mut ids = c.caption_ids.clone();
            ids.extend_from_slice(&s.question_ids);
            ids.extend_from_slice(&s.answer_ids);
            Some(Example::text(ids))
        }))
        .collect()
}

/// `(1/B)·Σ_b Σ_i mask_bi · NLL_bi` over a batch of `(logits, targets, mask)`.
pub fn lm_loss_masked(tape: &mut Tape, batch: &[(Var, Vec<usize>, Vec<bool>)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::DegenerateLoss);
    }
    let mut total: Option<Var> = None;
    let mut any = false;
    for (logits, targets, mask) in batch {
        if !mask.iter().any(|&m| m) {
            continue;
        }
        any = true;
        let l = tape.cross_entropy(*logits, targets, mask)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    if !any {
        return Err(Error::DegenerateLoss);
    }
    Ok(tape.scale(total.unwrap(), 1.0 / batch.len() as f64))
}

/// Summed masked NLL of one example on an already-bound tape.
fn example_loss(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BoundWeights,
    p: &BoundPrompts,
    ex: &Example,
    offset: usize,
) -> Result<Var> {
    match &ex.image {
        None => {
            let ids: Vec<usize> = ex.question.iter().chain(&ex.answer).copied().collect();
            let logits = lm_forward(tape, cfg, &w.lm, &ids, offset)?;
            let mut targets = ids[1..].to_vec();
            targets.push(STOP);
            let mask = vec![true; ids.len()];
            lm_loss_masked(tape, &[(logits, targets, mask)])
        }
        Some(img) => {
            let f = forward_sample(
                tape,
                cfg,
                w,
                p,
                img,
                None,
                &ex.question,
                &ex.answer,
                PromptFlags::default(),
            )?;
            let targets = f.layout.targets(&ex.question, &ex.answer);
            let mask = f.layout.loss_mask();
            lm_loss_masked(tape, &[(f.logits, targets, mask)])
        }
    }
}

/// Loss and gradients of every tensor in `trainable` (indices into the
/// canonical leaf order) for one example.
pub fn example_gradients(
    weights: &ModelWeights,
    bank: &PromptBank,
    ex: &Example,
    offset: usize,
    trainable: &[usize],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let (w, p, leaves) = bind_all(&mut tape, weights, bank);
    let loss = example_loss(&mut tape, &weights.config, &w, &p, ex, offset)?;
    tape.backward(loss)?;
    let grads = trainable
        .iter()
        .map(|&i| {
            let v = leaves[i].1;
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
        })
        .collect();
    Ok((tape.scalar_value(loss), grads))
}

/// Model, prompts, optimiser and position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub weights: ModelWeights,
    pub bank: PromptBank,
    pub optim: Adam,
    pub phase: Phase,
    /// Completed steps in the current phase.
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    /// Fresh random initialisation, positioned at the start of the warmup.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = ModelWeights::new(cfg, &mut rng)?;
        let bank = PromptBank::new(cfg, &mut rng);
        let mut s = Self {
            weights,
            bank,
            optim: Adam::new(0.0, 0.9, 0.999, 1e-8, &[]),
            phase: Phase::Warmup,
            step: 0,
            seed,
        };
        s.apply_phase_flags();
        Ok(s)
    }

    /// Canonical names of every tensor, weights first, then prompts.
    pub fn all_names(&self) -> Vec<String> {
        self.weights
            .tensors()
            .into_iter()
            .chain(self.bank.tensors())
            .map(|(n, _)| n)
            .collect()
    }

    fn apply_phase_flags(&mut self) {
        let warm = self.phase == Phase::Warmup;
        for (name, t) in self.weights.tensors_mut() {
            t.set_requires_grad(name.starts_with("lm.") == warm);
        }
        for (_, t) in self.bank.tensors_mut() {
            t.set_requires_grad(!warm);
        }
    }

    /// Indices (canonical order) and sizes of the trainable tensors.
    pub fn trainable(&self) -> Vec<(usize, String, usize)> {
        self.weights
            .tensors()
            .into_iter()
            .chain(self.bank.tensors())
            .enumerate()
            .filter(|(_, (_, t))| t.requires_grad())
            .map(|(i, (n, t))| (i, n, t.numel()))
            .collect()
    }

    /// Moves to `phase` with a fresh optimiser.
    pub fn begin_phase(&mut self, phase: Phase, lr: f64, tc: &TrainConfig) {
        self.phase = phase;
        self.step = 0;
        self.apply_phase_flags();
        let params: Vec<(String, usize)> =
            self.trainable().into_iter().map(|(_, n, k)| (n, k)).collect();
        self.optim = Adam::new(lr, tc.beta1, tc.beta2, tc.eps, &params);
    }

    fn trainable_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        self.weights
            .tensors_mut()
            .into_iter()
            .chain(self.bank.tensors_mut())
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t)
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in self.weights.config.to_pairs() {
            c.push_scalar(format!("config.{k}"), v);
        }
        for (n, t) in self.weights.tensors().into_iter().chain(self.bank.tensors()) {
            c.push(n, t.clone().with_requires_grad(false));
        }
        let o = &self.optim;
        for (k, v) in [
            ("optim.lr", o.lr),
            ("optim.beta1", o.beta1),
            ("optim.beta2", o.beta2),
            ("optim.eps", o.eps),
            ("optim.t", o.t as f64),
        ] {
            c.push_scalar(k, v);
        }
        for (i, n) in o.names.iter().enumerate() {
            let len = o.m[i].len();
            c.push(format!("optim.m.{n}"), crate::tensor::Tensor::new(&[len], o.m[i].clone()).unwrap());
            c.push(format!("optim.v.{n}"), crate::tensor::Tensor::new(&[len], o.v[i].clone()).unwrap());
        }
        c.push(
            "train.seed",
            crate::tensor::Tensor::new(&[2], vec![(self.seed >> 32) as f64, (self.seed & 0xffff_ffff) as f64])
                .unwrap(),
        );
        c.push_scalar("train.stage", self.phase as u8 as f64);
        c.push_scalar("train.step", self.step as f64);
        c
    }

    /// Rebuilds a state from a checkpoint, taking the configuration from
    /// the stored `config.*` scalars.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let pairs = ck
            .tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix("config.").map(|k| (k, t.item())))
            .collect::<Vec<_>>();
        let cfg = ModelConfig::from_pairs(pairs)?;
        cfg.validate()?;
        let mut s = Self::new(&cfg, 0)?;
        s.restore_from(ck)?;
        Ok(s)
    }

    /// Overwrites this state with the checkpoint's contents. A tensor whose
    /// stored shape differs from this state's is a dimension error naming
    /// that tensor.
    pub fn restore_from(&mut self, ck: &Checkpoint) -> Result<()> {
        for (n, t) in self.weights.tensors_mut() {
            ck.restore_into(&n, t)?;
        }
        for (n, t) in self.bank.tensors_mut() {
            ck.restore_into(&n, t)?;
        }
        let seed = ck.get("train.seed")?;
        if seed.numel() != 2 {
            return Err(Error::Dimension {
                name: "train.seed".into(),
                expected: vec![2],
                found: seed.shape().to_vec(),
            });
        }
        self.seed = ((seed.data()[0] as u64) << 32) | seed.data()[1] as u64;
        self.phase = Phase::from_index(ck.scalar("train.stage")? as u64)?;
        self.step = ck.scalar("train.step")? as usize;
        self.apply_phase_flags();
        // The optimiser covers exactly the tensors it held when saved: none
        // before the first phase began, otherwise the trainable set.
        let stored: Vec<&str> = ck
            .tensors
            .iter()
            .filter_map(|(n, _)| n.strip_prefix("optim.m."))
            .collect();
        let params: Vec<(String, usize)> = if stored.is_empty() {
            Vec::new()
        } else {
            self.trainable().into_iter().map(|(_, n, k)| (n, k)).collect()
        };
        if !stored.is_empty() && !stored.iter().copied().eq(params.iter().map(|(n, _)| n.as_str())) {
            return Err(Error::Dimension {
                name: "optim".into(),
                expected: vec![params.len()],
                found: vec![stored.len()],
            });
        }
        let mut optim = Adam::new(
            ck.scalar("optim.lr")?,
            ck.scalar("optim.beta1")?,
            ck.scalar("optim.beta2")?,
            ck.scalar("optim.eps")?,
            &params,
        );
        optim.t = ck.scalar("optim.t")? as u64;
        for (i, (n, len)) in params.iter().enumerate() {
            let mut m = crate::tensor::Tensor::zeros(&[*len]);
            let mut v = crate::tensor::Tensor::zeros(&[*len]);
            ck.restore_into(&format!("optim.m.{n}"), &mut m)?;
            ck.restore_into(&format!("optim.v.{n}"), &mut v)?;
            optim.m[i] = m.into_data();
            optim.v[i] = v.into_data();
        }
        self.optim = optim;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Batch indices and warmup position offsets for `(seed, phase, step)`.
pub fn draw_batch(
    seed: u64,
    phase: Phase,
    step: usize,
    n: usize,
    batch: usize,
) -> Vec<(usize, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed ^ ((phase as u64 + 1) << 56)) ^ step as u64));
    (0..batch)
        .map(|_| (rng.random_range(0..n), rng.random::<u64>()))
        .collect()
}

/// Position offset for a warmup sequence, uniform over every start that
/// fits, so the frozen positional embeddings are all trained.
fn warmup_offset(cfg: &ModelConfig, len: usize, draw: u64) -> usize {
    let slots = cfg.max_seq_len.saturating_sub(len) + 1;
    (draw % slots as u64) as usize
}

/// One optimiser step on a batch drawn from `data`; returns the batch loss.
pub fn train_step(state: &mut TrainState, data: &[Example], batch_size: usize, exec: Execution) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let draws = draw_batch(state.seed, state.phase, state.step, data.len(), batch_size);
    let trainable = state.trainable();
    let idx: Vec<usize> = trainable.iter().map(|(i, _, _)| *i).collect();
    let cfg = &state.weights.config;
    let results = parallel::map(exec, &draws, |&(i, d)| {
        let ex = &data[i];
        let offset = warmup_offset(cfg, ex.question.len() + ex.answer.len(), d);
        example_gradients(&state.weights, &state.bank, ex, offset, &idx)
    });
    let inv = 1.0 / batch_size as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Vec<f64>> = trainable.iter().map(|(_, _, n)| vec![0.0; *n]).collect();
    for r in results {
        let (l, g) = r?;
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b;
            }
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g *= inv);
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("{} loss at step {}", state.phase.name(), state.step)));
    }
    let mut optim = std::mem::replace(&mut state.optim, Adam::new(0.0, 0.0, 0.0, 1.0, &[]));
    let res = optim.step(&mut state.trainable_mut(), &grads);
    state.optim = optim;
    res?;
    state.step += 1;
    Ok(loss)
}

/// Runs the current phase until `total` steps are complete. `on_step`
/// sees the state after every step, e.g. to write checkpoints.
pub fn run_phase(
    state: &mut TrainState,
    data: &[Example],
    total: usize,
    batch_size: usize,
    exec: Execution,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<Vec<(usize, f64)>> {
    let mut curve = Vec::new();
    while state.step < total {
        let s = state.step;
        let loss = train_step(state, data, batch_size, exec)?;
        curve.push((s, loss));
        on_step(state, loss)?;
    }
    Ok(curve)
}

/// Warmup (if the state has not finished it) followed by Stage 1. Returns
/// the warmup and Stage 1 loss curves.
pub fn train_stage1(
    state: &mut TrainState,
    tc: &TrainConfig,
    texts: &[Example],
    captions: &[Example],
    exec: Execution,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<(Vec<(usize, f64)>, Vec<(usize, f64)>)> {
    tc.validate()?;
    let mut warm = Vec::new();
    if state.phase == Phase::Warmup {
        if state.step == 0 && state.optim.names.is_empty() {
            state.begin_phase(Phase::Warmup, tc.warmup_lr, tc);
        }
        if tc.warmup_steps > 0 {
            warm = run_phase(state, texts, tc.warmup_steps, tc.batch_size, exec, &mut on_step)?;
        }
        state.begin_phase(Phase::Stage1, tc.lr, tc);
    }
    if state.phase != Phase::Stage1 {
        return Err(Error::Config(format!(
            "stage 1 cannot resume a {} checkpoint",
            state.phase.name()
        )));
    }
    let curve = run_phase(state, captions, tc.steps, tc.batch_size, exec, on_step)?;
    Ok((warm, curve))
}

/// Stage 2 on VQA examples. A state coming out of Stage 1 keeps its
/// prompts and starts a fresh optimiser; a Stage 2 state resumes.
pub fn train_stage2(
    state: &mut TrainState,
    tc: &TrainConfig,
    data: &[Example],
    exec: Execution,
    on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<Vec<(usize, f64)>> {
    tc.validate()?;
    match state.phase {
        Phase::Stage1 => state.begin_phase(Phase::Stage2, tc.lr, tc),
        Phase::Stage2 => {}
        Phase::Warmup => {
            return Err(Error::Config("stage 2 needs a model that finished warmup".into()))
        }
    }
    run_phase(state, data, tc.steps, tc.batch_size, exec, on_step)
}

/// `step,loss` lines; losses use the shortest exact decimal form.
pub fn write_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "step,loss").map_err(|e| Error::io(path, e))?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Appends to an existing curve file (used when resuming).
pub fn append_loss_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    if !path.exists() {
        return write_loss_csv(path, curve);
    }
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for (s, l) in curve {
        writeln!(f, "{s},{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (s, v) = l
                .split_once(',')
                .ok_or_else(|| Error::Input(format!("bad loss line {l:?}")))?;
            Ok((
                s.parse().map_err(|_| Error::Input(format!("bad step {s:?}")))?,
                v.parse().map_err(|_| Error::Input(format!("bad loss {v:?}")))?,
            ))
        })
        .collect()
}
