use rand_chacha::ChaCha8Rng;

use super::blocks::{cross_block_params, init_cross_block, init_self_block, self_block_params, AttnTag, Ctx, Part};
use super::AttentionMap;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::preprocess::{SignalWindow, WINDOW_LEN};
use crate::rng::{substream, trunc_normal};
use crate::spa::{
    depatchify, embed, init_linear, init_stem, patch_merge, patch_split, window_input, ShiftLayout, StageConfig,
    TokenSequence, Tokens, INIT_STD,
};

const INFER_CHUNK: usize = 16;

/// Hierarchical encoder/decoder mapping a PPG window to an ECG window.
#[derive(Clone, Debug)]
pub struct ReconstructorModel<T = f32> {
    config: StageConfig,
    params: ParamStore<T>,
}

/// Tape handles of one batched forward pass.
pub struct Forward {
    /// `[groups, 512]` reconstruction.
    pub output: Var,
    pub memories: Vec<Tokens>,
    pub attention: Vec<(AttnTag, Var)>,
}

fn is_shifted_block(config: &StageConfig, i: usize) -> bool {
    config.shifted && i % 2 == 1
}

/// Cross-attention follows every self-attention pair and a trailing odd block.
fn cross_after(depth: usize, i: usize) -> bool {
    i % 2 == 1 || i + 1 == depth
}

fn cross_count(depth: usize) -> usize {
    depth.div_ceil(2)
}

impl<T: Scalar> ReconstructorModel<T> {
    pub fn new(config: StageConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "reconstructor/init");
        let params = Self::init_params(&config, &mut rng)?;
        Ok(Self { config, params })
    }

    /// Every parameter set to zero.
    pub fn zeroed(config: StageConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for n in names {
            let len = m.params.get(&n).unwrap().len();
            m.params.set(&n, &vec![T::zero(); len])?;
        }
        Ok(m)
    }

    /// Wraps an existing parameter store after checking it against the layout of `config`.
    pub fn from_params(config: StageConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Parameter(format!(
                "store holds {} tensors, model needs {}",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Parameter(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Parameter(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    fn init_params(cfg: &StageConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore<T>> {
        let d = cfg.d_model;
        let stages = cfg.stages();
        let mut store = ParamStore::new();
        init_stem(&mut store, "enc.", cfg.patch_sizes[0], cfg, rng)?;
        for s in 0..stages {
            if s > 0 {
                init_linear(&mut store, &format!("enc.merge.s{s}"), 2 * d, d, rng)?;
                store.insert(format!("enc.pos.s{s}"), trunc_normal(rng, &[cfg.token_count(s), d], INIT_STD))?;
            }
            for i in 0..cfg.depths[s] {
                init_self_block(&mut store, &format!("enc.s{s}.b{i}"), d, is_shifted_block(cfg, i), rng)?;
            }
        }
        store.insert("dec.query", trunc_normal(rng, &[cfg.token_count(stages - 1), d], INIT_STD))?;
        for s in (0..stages).rev() {
            if s + 1 < stages {
                init_linear(&mut store, &format!("dec.split.s{s}"), d, 2 * d, rng)?;
                store.insert(format!("dec.pos.s{s}"), trunc_normal(rng, &[cfg.token_count(s), d], INIT_STD))?;
            }
            let depth = cfg.depths[s];
            for i in 0..depth {
                init_self_block(&mut store, &format!("dec.s{s}.b{i}"), d, is_shifted_block(cfg, i), rng)?;
                if cross_after(depth, i) {
                    init_cross_block(&mut store, &format!("dec.s{s}.x{}", i / 2), d, rng)?;
                }
            }
        }
        store.insert("dec.ln_f.g", Tensor::full(&[d], T::one()))?;
        store.insert("dec.ln_f.b", Tensor::zeros(&[d]))?;
        init_linear(&mut store, "head", d, cfg.patch_sizes[0], rng)?;
        Ok(store)
    }

    /// Number of scalar parameters, computed from the configuration alone.
    pub fn param_count(cfg: &StageConfig) -> usize {
        let d = cfg.d_model;
        let (c, k, p0) = (cfg.stem_channels, cfg.stem_kernel, cfg.patch_sizes[0]);
        let stages = cfg.stages();
        let mut n = k * c + c + p0 * c * d + d + cfg.token_count(0) * d;
        let blocks = |depth: usize| -> usize { (0..depth).map(|i| self_block_params(d, is_shifted_block(cfg, i))).sum() };
        for s in 0..stages {
            if s > 0 {
                n += 2 * d * d + d + cfg.token_count(s) * d;
            }
            n += blocks(cfg.depths[s]);
        }
        n += cfg.token_count(stages - 1) * d;
        for s in 0..stages {
            if s + 1 < stages {
                n += 2 * d * d + 2 * d + cfg.token_count(s) * d;
            }
            n += blocks(cfg.depths[s]) + cross_count(cfg.depths[s]) * cross_block_params(d);
        }
        n + 2 * d + d * p0 + p0
    }

    pub fn config(&self) -> &StageConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn layout(count: usize) -> ShiftLayout {
        ShiftLayout::single(count)
    }

    fn run_self_blocks(&self, ctx: &mut Ctx<'_, T>, part: Part, s: usize, mut x: Tokens, memory: Option<Tokens>) -> Result<Tokens> {
        let root = if part == Part::Encoder { "enc" } else { "dec" };
        let depth = self.config.depths[s];
        let layout = Self::layout(x.count);
        for i in 0..depth {
            let tag = AttnTag { part, stage: s, block: i };
            let shifted = is_shifted_block(&self.config, i);
            x = ctx.self_block(&format!("{root}.s{s}.b{i}"), x, shifted.then_some(&layout), tag)?;
            if let Some(mem) = memory {
                if cross_after(depth, i) {
                    let tag = AttnTag {
                        part: Part::Cross,
                        stage: s,
                        block: i / 2,
                    };
                    x = ctx.cross_block(&format!("dec.s{s}.x{}", i / 2), x, mem, tag)?;
                }
            }
        }
        Ok(x)
    }

    fn encode_batch(&self, ctx: &mut Ctx<'_, T>, windows: &[&[T]]) -> Result<Vec<Tokens>> {
        let input = window_input(ctx.tape, windows)?;
        let mut x = embed(ctx.tape, ctx.store, "enc.", input, self.config.patch_sizes[0])?;
        let mut memories = Vec::with_capacity(self.config.stages());
        for s in 0..self.config.stages() {
            if s > 0 {
                x = patch_merge(ctx.tape, ctx.store, &format!("enc.merge.s{s}"), x, Some(&format!("enc.pos.s{s}")))?;
            }
            x = self.run_self_blocks(ctx, Part::Encoder, s, x, None)?;
            memories.push(x);
        }
        Ok(memories)
    }

    fn decode_batch(&self, ctx: &mut Ctx<'_, T>, memories: &[Tokens]) -> Result<Tokens> {
        let stages = self.config.stages();
        self.check_memories(ctx.tape, memories)?;
        let groups = memories[0].groups;
        let last = stages - 1;
        let n_last = self.config.token_count(last);
        let zeros = ctx.tape.constant(Tensor::zeros(&[groups * n_last, self.config.d_model]));
        let query = ctx.tape.param(ctx.store, "dec.query")?;
        let start = ctx.tape.embedding_add(zeros, query)?;
        let mut x = Tokens::new(start, last, self.config.patch_sizes[last], groups)?;
        x.stage = last;
        for s in (0..stages).rev() {
            if s < last {
                x = patch_split(ctx.tape, ctx.store, &format!("dec.split.s{s}"), x, Some(&format!("dec.pos.s{s}")))?;
            }
            x = self.run_self_blocks(ctx, Part::Decoder, s, x, Some(memories[s]))?;
        }
        let g = ctx.tape.param(ctx.store, "dec.ln_f.g")?;
        let b = ctx.tape.param(ctx.store, "dec.ln_f.b")?;
        let y = ctx.tape.layer_norm(x.var, g, b, T::lit(crate::numerics::LAYER_NORM_EPS))?;
        Ok(x.with_var(y))
    }

    fn check_memories(&self, tape: &Tape<T>, memories: &[Tokens]) -> Result<()> {
        let stages = self.config.stages();
        if memories.len() != stages {
            return Err(Error::dim("decode", format!("{} memories for {stages} stages", memories.len())));
        }
        let groups = memories[0].groups;
        for (s, m) in memories.iter().enumerate() {
            let want = (groups * self.config.token_count(s), self.config.d_model);
            if tape.dims(m.var) != want || m.shifted || m.groups != groups {
                return Err(Error::dim(
                    "decode",
                    format!("stage {s} memory is {:?}, expected {:?}", tape.dims(m.var), want),
                ));
            }
        }
        Ok(())
    }

    /// Records a batched forward pass of `windows` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, windows: &[&[T]]) -> Result<Forward> {
        let mut ctx = Ctx::new(tape, &self.params, self.config.heads);
        let memories = self.encode_batch(&mut ctx, windows)?;
        let out = self.decode_batch(&mut ctx, &memories)?;
        let output = depatchify(ctx.tape, ctx.store, "head", out)?;
        let attention = std::mem::take(&mut ctx.attn);
        Ok(Forward {
            output,
            memories,
            attention,
        })
    }

    /// Mean over the batch of per-window `Σ |ŷ − y|`.
    pub fn batch_loss(&self, tape: &mut Tape<T>, ppg: &[&[T]], ecg: &[&[T]]) -> Result<Var> {
        if ppg.len() != ecg.len() {
            return Err(Error::dim("batch_loss", format!("{} inputs, {} targets", ppg.len(), ecg.len())));
        }
        let f = self.forward(tape, ppg)?;
        let target = window_input(tape, ecg)?;
        let target = tape.reshape(target, &[ecg.len(), WINDOW_LEN])?;
        let total = tape.l1_loss(f.output, target)?;
        tape.scale(total, T::one() / T::from_usize(ppg.len()).unwrap())
    }

    /// Per-stage encoder outputs for one window.
    pub fn encode(&self, window: &SignalWindow<T>) -> Result<Vec<TokenSequence<T>>> {
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &self.params, self.config.heads);
        let memories = self.encode_batch(&mut ctx, &[window.values()])?;
        Ok(memories.iter().map(|m| m.sequence(&tape, 0)).collect())
    }

    /// Stage-0 decoder tokens (before the output head) for one window's memories.
    pub fn decode(&self, memories: &[TokenSequence<T>]) -> Result<TokenSequence<T>> {
        let stages = self.config.stages();
        if memories.len() != stages {
            return Err(Error::dim("decode", format!("{} memories for {stages} stages", memories.len())));
        }
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(stages);
        for (s, m) in memories.iter().enumerate() {
            if m.stage_index != s || m.patch_size != self.config.patch_sizes[s] || m.shifted {
                return Err(Error::dim(
                    "decode",
                    format!(
                        "memory {s} is stage {} with patch {} (shifted: {})",
                        m.stage_index, m.patch_size, m.shifted
                    ),
                ));
            }
            let v = tape.constant(m.tokens.clone());
            vars.push(Tokens::new(v, s, m.patch_size, 1)?);
        }
        let mut ctx = Ctx::new(&mut tape, &self.params, self.config.heads);
        let out = self.decode_batch(&mut ctx, &vars)?;
        Ok(out.sequence(&tape, 0))
    }

    /// 512-sample ECG estimate for one PPG window.
    pub fn reconstruct(&self, window: &SignalWindow<T>) -> Result<Vec<T>> {
        let mut out = self.reconstruct_batch(&[window.values()])?;
        Ok(out.pop().expect("one window"))
    }

    /// Reconstructs many windows, batching them internally.
    pub fn reconstruct_batch(&self, windows: &[&[T]]) -> Result<Vec<Vec<T>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let f = self.forward(&mut tape, chunk)?;
            let y = tape.value(f.output);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    op: "reconstruct",
                    detail: "non-finite output".into(),
                });
            }
            out.extend(y.chunks(WINDOW_LEN).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// All heads of the last attention block of every (part, stage).
    pub fn extract_attention(&self, window: &SignalWindow<T>) -> Result<Vec<AttentionMap<T>>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, &[window.values()])?;
        let mut last: std::collections::BTreeMap<(Part, usize), (usize, Var)> = Default::default();
        for (tag, v) in f.attention {
            let e = last.entry((tag.part, tag.stage)).or_insert((tag.block, v));
            if tag.block >= e.0 {
                *e = (tag.block, v);
            }
        }
        let mut maps = Vec::new();
        for ((part, stage), (block, v)) in last {
            let (probs, _, heads, nq, nk) = tape
                .attention_probs(v)
                .ok_or_else(|| Error::State("attention probabilities were not recorded".into()))?;
            for h in 0..heads {
                let w = probs[h * nq * nk..(h + 1) * nq * nk].to_vec();
                maps.push(AttentionMap {
                    part,
                    stage_index: stage,
                    block_index: block,
                    head_index: h,
                    weights: Tensor::new(&[nq, nk], w)?,
                });
            }
        }
        Ok(maps)
    }
}
