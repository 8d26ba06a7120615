//! Pre-norm transformer blocks shared by the reconstructor and the classifier.
//!
//! Unshifted block: `ẑ = PA(LN(z)) + z`, `z' = MLP(LN(ẑ)) + ẑ`.
//! Shifted block: the same with `SPA = shift → attention (+ wrap marker) → unshift`.
//! Cross block: attention from the tokens to a memory sequence, then MLP.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng::trunc_normal;
use crate::spa::{init_linear, ShiftLayout, Tokens, INIT_STD};

pub const MLP_RATIO: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Part {
    Encoder,
    Decoder,
    Cross,
}

impl Part {
    pub fn as_str(self) -> &'static str {
        match self {
            Part::Encoder => "encoder",
            Part::Decoder => "decoder",
            Part::Cross => "cross",
        }
    }
}

/// Identifies one attention call inside a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AttnTag {
    pub part: Part,
    pub stage: usize,
    pub block: usize,
}

/// Tape, parameters, and the attention calls seen so far in one forward pass.
pub struct Ctx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub heads: usize,
    pub attn: Vec<(AttnTag, Var)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, heads: usize) -> Self {
        Self {
            tape,
            store,
            heads,
            attn: Vec::new(),
        }
    }

    fn p(&mut self, name: String) -> Result<Var> {
        self.tape.param(self.store, &name)
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.p(format!("{prefix}.g"))?;
        let b = self.p(format!("{prefix}.b"))?;
        self.tape.layer_norm(x, g, b, T::lit(LAYER_NORM_EPS))
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(format!("{prefix}.w"))?;
        let b = self.p(format!("{prefix}.b"))?;
        self.tape.linear(x, w, Some(b))
    }

    fn mlp(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(x, &format!("{prefix}.ln2"))?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc1"))?;
        let h = self.tape.gelu(h)?;
        let h = self.linear(h, &format!("{prefix}.mlp.fc2"))?;
        self.tape.add(x, h)
    }

    /// One unshifted (`layout = None`) or shifted self-attention block.
    pub fn self_block(&mut self, prefix: &str, x: Tokens, layout: Option<&ShiftLayout>, tag: AttnTag) -> Result<Tokens> {
        if x.shifted {
            return Err(Error::State(format!("block `{prefix}` received a shifted sequence")));
        }
        let v = self.self_block_grouped(prefix, x.var, x.groups, layout, tag)?;
        Ok(x.with_var(v))
    }

    /// Self-attention block over `groups` stacked sequences held in `x`.
    pub fn self_block_grouped(
        &mut self,
        prefix: &str,
        x: Var,
        groups: usize,
        layout: Option<&ShiftLayout>,
        tag: AttnTag,
    ) -> Result<Var> {
        let mut h = self.layer_norm(x, &format!("{prefix}.ln1"))?;
        if let Some(layout) = layout {
            let (rows, _) = self.tape.dims(h);
            let perm = layout.permutation(groups);
            if perm.len() != rows {
                return Err(Error::dim("self_block", format!("shift layout covers {} rows, input has {rows}", perm.len())));
            }
            h = self.tape.permute_rows(h, &perm)?;
            let mut mask = vec![T::zero(); rows];
            for r in layout.wrap_rows(groups) {
                mask[r] = T::one();
            }
            let mask = self.tape.constant(Tensor::new(&[rows, 1], mask)?);
            let marker = self.p(format!("{prefix}.marker"))?;
            let marks = self.tape.matmul(mask, marker)?;
            h = self.tape.add(h, marks)?;
        }
        let q = self.linear(h, &format!("{prefix}.attn.q"))?;
        let k = self.linear(h, &format!("{prefix}.attn.k"))?;
        let v = self.linear(h, &format!("{prefix}.attn.v"))?;
        let a = self.tape.attention(q, k, v, self.heads, groups)?;
        self.attn.push((tag, a));
        let mut o = self.linear(a, &format!("{prefix}.attn.o"))?;
        if let Some(layout) = layout {
            let inv = layout.inverse_permutation(groups);
            o = self.tape.permute_rows(o, &inv)?;
        }
        let x = self.tape.add(x, o)?;
        self.mlp(x, prefix)
    }

    /// Cross-attention from `x` to `memory` followed by an MLP.
    pub fn cross_block(&mut self, prefix: &str, x: Tokens, memory: Tokens, tag: AttnTag) -> Result<Tokens> {
        if x.groups != memory.groups {
            return Err(Error::dim("cross_block", format!("{} query groups, {} memory groups", x.groups, memory.groups)));
        }
        let h = self.layer_norm(x.var, &format!("{prefix}.ln1"))?;
        let m = self.layer_norm(memory.var, &format!("{prefix}.lnm"))?;
        let q = self.linear(h, &format!("{prefix}.attn.q"))?;
        let k = self.linear(m, &format!("{prefix}.attn.k"))?;
        let v = self.linear(m, &format!("{prefix}.attn.v"))?;
        let a = self.tape.attention(q, k, v, self.heads, x.groups)?;
        self.attn.push((tag, a));
        let o = self.linear(a, &format!("{prefix}.attn.o"))?;
        let y = self.tape.add(x.var, o)?;
        let y = self.mlp(y, prefix)?;
        Ok(x.with_var(y))
    }

    /// Unshifted block followed by its shifted partner; input and output are unshifted.
    pub fn pa_spa_pair(
        &mut self,
        prefixes: (&str, &str),
        x: Tokens,
        layout: Option<&ShiftLayout>,
        tags: (AttnTag, AttnTag),
    ) -> Result<Tokens> {
        if x.shifted {
            return Err(Error::State("pa_spa_pair expects an unshifted sequence".into()));
        }
        let x = self.self_block(prefixes.0, x, None, tags.0)?;
        self.self_block(prefixes.1, x, layout, tags.1)
    }
}

fn init_ln<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], T::one()))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
}

fn init_attn_mlp<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.attn.{p}"), d, d, rng)?;
    }
    init_ln(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d, rng)
}

pub fn init_self_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    shifted: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_ln(store, &format!("{prefix}.ln1"), d)?;
    init_attn_mlp(store, prefix, d, rng)?;
    if shifted {
        store.insert(format!("{prefix}.marker"), trunc_normal(rng, &[1, d], INIT_STD))?;
    }
    Ok(())
}

pub fn init_cross_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    init_ln(store, &format!("{prefix}.ln1"), d)?;
    init_ln(store, &format!("{prefix}.lnm"), d)?;
    init_attn_mlp(store, prefix, d, rng)
}

/// Scalar parameters of one block of width `d`.
pub fn self_block_params(d: usize, shifted: bool) -> usize {
    let ln = 2 * d;
    let attn = 4 * (d * d + d);
    let mlp = d * MLP_RATIO * d + MLP_RATIO * d + MLP_RATIO * d * d + d;
    2 * ln + attn + mlp + if shifted { d } else { 0 }
}

pub fn cross_block_params(d: usize) -> usize {
    self_block_params(d, false) + 2 * d
}

/// Zeroes every attention and MLP output projection so each block is the identity.
pub fn zero_output_projections<T: Scalar>(store: &mut ParamStore<T>) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.contains(".attn.o.") || n.contains(".mlp.fc2."))
        .map(str::to_string)
        .collect();
    for n in names {
        let len = store.get(&n).unwrap().len();
        store.set(&n, &vec![T::zero(); len]).unwrap();
    }
}
