//! Patch tokenization for the shifted-patch attention hierarchy: stage
//! geometry, the convolutional embedding stem, patch merging and splitting,
//! the cyclic half-patch shift, and the waveform output head.

mod config;
pub mod geometry;

pub use config::StageConfig;
pub use geometry::ShiftLayout;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::preprocess::{SignalWindow, WINDOW_LEN};
use crate::rng::trunc_normal;

pub const INIT_STD: f64 = 0.02;

/// Embedded tokens of one stage for a single window.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T = f32> {
    pub tokens: Tensor<T>,
    pub stage_index: usize,
    pub patch_size: usize,
    pub shifted: bool,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, stage_index: usize, patch_size: usize, shifted: bool) -> Result<Self> {
        let (count, _) = tokens.dims2();
        if count * patch_size != WINDOW_LEN {
            return Err(Error::dim(
                "token_sequence",
                format!("{count} tokens of {patch_size} samples do not cover {WINDOW_LEN}"),
            ));
        }
        Ok(Self {
            tokens,
            stage_index,
            patch_size,
            shifted,
        })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.dims2().0
    }
}

/// Stage tokens for a batch of `groups` windows recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub var: Var,
    pub stage: usize,
    pub count: usize,
    pub patch_size: usize,
    pub groups: usize,
    pub shifted: bool,
}

impl Tokens {
    pub fn new(var: Var, stage: usize, patch_size: usize, groups: usize) -> Result<Self> {
        if patch_size == 0 || WINDOW_LEN % patch_size != 0 {
            return Err(Error::dim("tokens", format!("patch size {patch_size} does not tile {WINDOW_LEN}")));
        }
        Ok(Self {
            var,
            stage,
            count: WINDOW_LEN / patch_size,
            patch_size,
            groups,
            shifted: false,
        })
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }

    /// Rows `[g * count, (g + 1) * count)` as a single-window sequence.
    pub fn sequence<T: Scalar>(&self, tape: &Tape<T>, g: usize) -> TokenSequence<T> {
        let (_, d) = tape.dims(self.var);
        let rows = &tape.value(self.var)[g * self.count * d..(g + 1) * self.count * d];
        TokenSequence::new(
            Tensor::new(&[self.count, d], rows.to_vec()).expect("valid rows"),
            self.stage,
            self.patch_size,
            self.shifted,
        )
        .expect("tokens cover the window")
    }
}

/// Parameter names of one embedding stem under `prefix`.
pub struct StemNames {
    pub kernel: String,
    pub bias: String,
    pub proj_w: String,
    pub proj_b: String,
    pub pos: String,
}

impl StemNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            kernel: format!("{prefix}stem.kernel"),
            bias: format!("{prefix}stem.bias"),
            proj_w: format!("{prefix}embed.w"),
            proj_b: format!("{prefix}embed.b"),
            pos: format!("{prefix}pos.s0"),
        }
    }
}

/// Registers a stem: conv kernel `[k, 1, C]`, projection `[patch * C, d]`, positional table `[n, d]`.
pub fn init_stem<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    patch: usize,
    cfg: &StageConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = StemNames::new(prefix);
    let (c, d) = (cfg.stem_channels, cfg.d_model);
    store.insert(n.kernel, trunc_normal(rng, &[cfg.stem_kernel, 1, c], INIT_STD))?;
    store.insert(n.bias, Tensor::zeros(&[c]))?;
    store.insert(n.proj_w, trunc_normal(rng, &[patch * c, d], INIT_STD))?;
    store.insert(n.proj_b, Tensor::zeros(&[d]))?;
    store.insert(n.pos, trunc_normal(rng, &[WINDOW_LEN / patch, d], INIT_STD))?;
    Ok(())
}

/// Stacks windows into a `[groups * 512, 1]` constant.
pub fn window_input<T: Scalar>(tape: &mut Tape<T>, windows: &[&[T]]) -> Result<Var> {
    if windows.is_empty() {
        return Err(Error::Input("no windows".into()));
    }
    let mut data = Vec::with_capacity(windows.len() * WINDOW_LEN);
    for w in windows {
        if w.len() != WINDOW_LEN {
            return Err(Error::Input(format!("window holds {} samples, expected {WINDOW_LEN}", w.len())));
        }
        data.extend_from_slice(w);
    }
    Ok(tape.constant(Tensor::new(&[windows.len() * WINDOW_LEN, 1], data)?))
}

/// Convolutional stem, patch partition, linear projection, positional embedding.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    input: Var,
    patch: usize,
) -> Result<Tokens> {
    let (rows, _) = tape.dims(input);
    let groups = rows / WINDOW_LEN;
    let n = StemNames::new(prefix);
    let kernel = tape.param(store, &n.kernel)?;
    let bias = tape.param(store, &n.bias)?;
    let conv = tape.conv1d(input, kernel, Some(bias), groups)?;
    let (_, c) = tape.dims(conv);
    let patches = tape.reshape(conv, &[rows / patch, patch * c])?;
    let w = tape.param(store, &n.proj_w)?;
    let b = tape.param(store, &n.proj_b)?;
    let proj = tape.linear(patches, w, Some(b))?;
    let pos = tape.param(store, &n.pos)?;
    let out = tape.embedding_add(proj, pos)?;
    Tokens::new(out, 0, patch, groups)
}

/// Concatenates adjacent token pairs and projects `2d → d`; adds `pos` when given.
pub fn patch_merge<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    seq: Tokens,
    pos: Option<&str>,
) -> Result<Tokens> {
    if seq.count < 2 || seq.count % 2 != 0 {
        return Err(Error::State(format!(
            "stage {} has {} token(s); no further merge possible",
            seq.stage, seq.count
        )));
    }
    if seq.shifted {
        return Err(Error::State("patch_merge on a shifted sequence".into()));
    }
    let (rows, d) = tape.dims(seq.var);
    let pairs = tape.reshape(seq.var, &[rows / 2, 2 * d])?;
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let mut out = tape.linear(pairs, w, Some(b))?;
    if let Some(pos) = pos {
        let p = tape.param(store, pos)?;
        out = tape.embedding_add(out, p)?;
    }
    let mut t = Tokens::new(out, seq.stage + 1, seq.patch_size * 2, seq.groups)?;
    t.shifted = false;
    Ok(t)
}

/// Projects each token `d → 2d` and splits it into two tokens; adds `pos` when given.
pub fn patch_split<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    seq: Tokens,
    pos: Option<&str>,
) -> Result<Tokens> {
    if seq.stage == 0 {
        return Err(Error::State("patch_split at stage 0".into()));
    }
    if seq.shifted {
        return Err(Error::State("patch_split on a shifted sequence".into()));
    }
    let (rows, d) = tape.dims(seq.var);
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let wide = tape.linear(seq.var, w, Some(b))?;
    let mut out = tape.reshape(wide, &[rows * 2, d])?;
    if let Some(pos) = pos {
        let p = tape.param(store, pos)?;
        out = tape.embedding_add(out, p)?;
    }
    Tokens::new(out, seq.stage - 1, seq.patch_size / 2, seq.groups)
}

pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), trunc_normal(rng, &[fan_in, fan_out], INIT_STD))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Rotates each window's tokens for the shifted blocks.
pub fn cyclic_shift<T: Scalar>(tape: &mut Tape<T>, seq: Tokens, layout: &ShiftLayout) -> Result<Tokens> {
    if seq.shifted {
        return Err(Error::State("sequence is already shifted".into()));
    }
    let perm = layout.permutation(seq.groups);
    let v = tape.permute_rows(seq.var, &perm)?;
    Ok(Tokens {
        var: v,
        shifted: true,
        ..seq
    })
}

/// Exact inverse of [`cyclic_shift`].
pub fn unshift<T: Scalar>(tape: &mut Tape<T>, seq: Tokens, layout: &ShiftLayout) -> Result<Tokens> {
    if !seq.shifted {
        return Err(Error::State("sequence is not shifted".into()));
    }
    let perm = layout.inverse_permutation(seq.groups);
    let v = tape.permute_rows(seq.var, &perm)?;
    Ok(Tokens {
        var: v,
        shifted: false,
        ..seq
    })
}

/// Linear head `d → patch` per stage-0 token, concatenated to `[groups, 512]`.
pub fn depatchify<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, seq: Tokens) -> Result<Var> {
    if seq.stage != 0 || seq.shifted {
        return Err(Error::State(format!(
            "depatchify needs unshifted stage-0 tokens, got stage {} (shifted: {})",
            seq.stage, seq.shifted
        )));
    }
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let b = tape.param(store, &format!("{prefix}.b"))?;
    let samples = tape.linear(seq.var, w, Some(b))?;
    tape.reshape(samples, &[seq.groups, WINDOW_LEN])
}

/// Convenience: stage-0 tokens of one window.
pub fn embed_window<T: Scalar>(
    store: &ParamStore<T>,
    prefix: &str,
    window: &SignalWindow<T>,
    patch: usize,
) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let x = window_input(&mut tape, &[window.values()])?;
    let t = embed(&mut tape, store, prefix, x, patch)?;
    Ok(t.sequence(&tape, 0))
}
