use serde::{Deserialize, Serialize};

use super::LabelSet;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::preprocess::WINDOW_LEN;
use crate::reconstructor::blocks::{init_self_block, AttnTag, Ctx, Part};
use crate::rng::{substream, trunc_normal};
use crate::spa::{embed, init_linear, init_stem, window_input, ShiftLayout, StageConfig, INIT_STD};

const INFER_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultimodalConfig {
    pub d_model: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Encoder blocks, run in (unshifted, shifted) pairs.
    pub depth: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub shifted: bool,
    /// One stem for every modality instead of one each.
    pub shared_stem: bool,
    /// Input waveforms per example: 2 for fused PPG + ECG, 1 for a single signal.
    pub modalities: usize,
}

impl Default for MultimodalConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            patch_size: 32,
            depth: 4,
            stem_channels: 8,
            stem_kernel: 7,
            shifted: true,
            shared_stem: false,
            modalities: 2,
        }
    }
}

impl MultimodalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || WINDOW_LEN % self.patch_size != 0 {
            return bad(format!("patch size {} must divide {WINDOW_LEN}", self.patch_size));
        }
        if self.depth % 2 != 0 {
            return bad(format!("depth {} must be even", self.depth));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.stem_channels == 0 || self.stem_kernel % 2 == 0 {
            return bad("stem needs channels > 0 and an odd kernel".into());
        }
        if !(1..=2).contains(&self.modalities) {
            return bad(format!("modalities must be 1 or 2, got {}", self.modalities));
        }
        Ok(())
    }

    pub fn tokens_per_modality(&self) -> usize {
        WINDOW_LEN / self.patch_size
    }

    /// Class token plus every modality's tokens.
    pub fn sequence_len(&self) -> usize {
        1 + self.modalities * self.tokens_per_modality()
    }

    pub fn layout(&self) -> ShiftLayout {
        ShiftLayout {
            pinned: 1,
            segments: vec![self.tokens_per_modality(); self.modalities],
        }
    }

    fn stem_config(&self) -> StageConfig {
        StageConfig {
            patch_sizes: vec![self.patch_size],
            depths: vec![self.depth],
            d_model: self.d_model,
            heads: self.heads,
            stem_channels: self.stem_channels,
            stem_kernel: self.stem_kernel,
            shifted: self.shifted,
        }
    }

    /// Hash of the configuration together with its label set.
    pub fn hash(&self, labels: LabelSet) -> String {
        use sha2::{Digest, Sha256};
        let text = format!("labels = \"{labels}\"\n{}", toml::to_string(self).expect("plain struct serializes"));
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Fused PPG + ECG encoder with a class-token classification head.
#[derive(Clone, Debug)]
pub struct MultimodalModel<T = f32> {
    config: MultimodalConfig,
    labels: LabelSet,
    params: ParamStore<T>,
}

impl<T: Scalar> MultimodalModel<T> {
    pub fn new(config: MultimodalConfig, labels: LabelSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, "multimodal/init");
        let d = config.d_model;
        let stem_cfg = config.stem_config();
        let mut store = ParamStore::new();
        let stems = if config.shared_stem { 1 } else { config.modalities };
        for m in 0..stems {
            init_stem(&mut store, &Self::stem_prefix(&config, m), config.patch_size, &stem_cfg, &mut rng)?;
        }
        for m in 0..config.modalities {
            store.insert(format!("mm.type.{m}"), trunc_normal(&mut rng, &[d], INIT_STD))?;
        }
        store.insert("mm.cls", trunc_normal(&mut rng, &[1, d], INIT_STD))?;
        for i in 0..config.depth {
            init_self_block(&mut store, &format!("mm.enc.b{i}"), d, config.shifted && i % 2 == 1, &mut rng)?;
        }
        store.insert("mm.head.ln.g", Tensor::full(&[d], T::one()))?;
        store.insert("mm.head.ln.b", Tensor::zeros(&[d]))?;
        init_linear(&mut store, "mm.head", d, labels.len(), &mut rng)?;
        Ok(Self {
            config,
            labels,
            params: store,
        })
    }

    pub fn zeroed(config: MultimodalConfig, labels: LabelSet) -> Result<Self> {
        let mut m = Self::new(config, labels, 0)?;
        let names: Vec<String> = m.params.names().map(str::to_string).collect();
        for n in names {
            let len = m.params.get(&n).unwrap().len();
            m.params.set(&n, &vec![T::zero(); len])?;
        }
        Ok(m)
    }

    pub fn from_params(config: MultimodalConfig, labels: LabelSet, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config.clone(), labels, 0)?;
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
                _ => return Err(Error::Parameter(format!("parameter `{name}` missing or misshapen"))),
            }
        }
        Ok(Self { config, labels, params })
    }

    fn stem_prefix(config: &MultimodalConfig, m: usize) -> String {
        if config.shared_stem {
            "mm.stem.".into()
        } else {
            format!("mm.m{m}.")
        }
    }

    pub fn config(&self) -> &MultimodalConfig {
        &self.config
    }

    pub fn labels(&self) -> LabelSet {
        self.labels
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    fn check_inputs(&self, inputs: &[Vec<&[T]>]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::Input("no examples".into()));
        }
        for ex in inputs {
            if ex.len() != self.config.modalities {
                return Err(Error::Input(format!(
                    "{} waveform(s) given, model takes {}",
                    ex.len(),
                    self.config.modalities
                )));
            }
            if let Some(w) = ex.iter().find(|w| w.len() != WINDOW_LEN) {
                return Err(Error::Input(format!("waveform holds {} samples, expected {WINDOW_LEN}", w.len())));
            }
        }
        Ok(())
    }

    /// Fused token rows, `sequence_len` per example: class token, then each modality's tokens.
    pub fn fuse(&self, tape: &mut Tape<T>, inputs: &[Vec<&[T]>]) -> Result<Var> {
        self.check_inputs(inputs)?;
        let b = inputs.len();
        let n = self.config.tokens_per_modality();
        let zeros = tape.constant(Tensor::zeros(&[b, self.config.d_model]));
        let cls = tape.param(&self.params, "mm.cls")?;
        let mut parts = vec![tape.embedding_add(zeros, cls)?];
        for m in 0..self.config.modalities {
            let windows: Vec<&[T]> = inputs.iter().map(|ex| ex[m]).collect();
            let x = window_input(tape, &windows)?;
            let tokens = embed(tape, &self.params, &Self::stem_prefix(&self.config, m), x, self.config.patch_size)?;
            let ty = tape.param(&self.params, &format!("mm.type.{m}"))?;
            parts.push(tape.add_row(tokens.var, ty)?);
        }
        let stacked = tape.concat(&parts, 0)?;
        let mut perm = Vec::with_capacity(b * self.config.sequence_len());
        for g in 0..b {
            perm.push(g);
            for m in 0..self.config.modalities {
                let base = b + m * b * n + g * n;
                perm.extend(base..base + n);
            }
        }
        tape.permute_rows(stacked, &perm)
    }

    /// Encoder output rows for every example.
    pub fn encode(&self, ctx: &mut Ctx<'_, T>, fused: Var, groups: usize) -> Result<Var> {
        let layout = self.config.layout();
        let mut x = fused;
        for i in 0..self.config.depth {
            let shifted = self.config.shifted && i % 2 == 1;
            let tag = AttnTag {
                part: Part::Encoder,
                stage: 0,
                block: i,
            };
            x = ctx.self_block_grouped(&format!("mm.enc.b{i}"), x, groups, shifted.then_some(&layout), tag)?;
        }
        Ok(x)
    }

    /// Class-token rows `[groups, d]` of encoded sequences.
    pub fn class_rows(&self, tape: &mut Tape<T>, encoded: Var, groups: usize) -> Result<Var> {
        let len = self.config.sequence_len();
        let mut perm: Vec<usize> = (0..groups).map(|g| g * len).collect();
        perm.extend((0..groups * len).filter(|r| r % len != 0));
        let moved = tape.permute_rows(encoded, &perm)?;
        tape.slice_rows(moved, 0, groups)
    }

    /// Logits `[examples, classes]`.
    pub fn logits(&self, tape: &mut Tape<T>, inputs: &[Vec<&[T]>]) -> Result<Var> {
        let fused = self.fuse(tape, inputs)?;
        let mut ctx = Ctx::new(tape, &self.params, self.config.heads);
        let encoded = self.encode(&mut ctx, fused, inputs.len())?;
        let cls = self.class_rows(tape, encoded, inputs.len())?;
        let g = tape.param(&self.params, "mm.head.ln.g")?;
        let b = tape.param(&self.params, "mm.head.ln.b")?;
        let h = tape.layer_norm(cls, g, b, T::lit(LAYER_NORM_EPS))?;
        let w = tape.param(&self.params, "mm.head.w")?;
        let bias = tape.param(&self.params, "mm.head.b")?;
        tape.linear(h, w, Some(bias))
    }

    /// Fused `(sequence_len, d_model)` tokens of one example.
    pub fn fused_tokens(&self, windows: &[&[T]]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let v = self.fuse(&mut tape, &[windows.to_vec()])?;
        Ok(tape.tensor(v))
    }

    /// Class distribution for one example (`[ppg, ecg_hat]`, or one waveform for single-modality models).
    pub fn classify(&self, windows: &[&[T]]) -> Result<Vec<T>> {
        let mut out = self.classify_batch(&[windows.to_vec()])?;
        Ok(out.pop().expect("one example"))
    }

    pub fn classify_batch(&self, inputs: &[Vec<&[T]>]) -> Result<Vec<Vec<T>>> {
        let c = self.labels.len();
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFER_CHUNK) {
            let mut tape = Tape::new();
            let logits = self.logits(&mut tape, chunk)?;
            let probs = tape.softmax(logits)?;
            out.extend(tape.value(probs).chunks(c).map(<[T]>::to_vec));
        }
        Ok(out)
    }

    /// Argmax class indices.
    pub fn predict_batch(&self, inputs: &[Vec<&[T]>]) -> Result<Vec<usize>> {
        Ok(self.classify_batch(inputs)?.iter().map(|p| argmax(p)).collect())
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
