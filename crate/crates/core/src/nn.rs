//! Transformer building blocks shared by the backbone and the side adapter.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Named-tensor traversal with a caller-supplied prefix.
pub trait Module<T: Float> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Float> Linear<T> {
    pub fn new(input: usize, output: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn([input, output], INIT_STD, rng),
            bias: with_bias.then(|| Tensor::zeros([output])),
        }
    }

    pub fn zeros(input: usize, output: usize, with_bias: bool) -> Self {
        Linear {
            weight: Tensor::zeros([input, output]),
            bias: with_bias.then(|| Tensor::zeros([output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = x.matmul(tape.leaf(&self.weight))?;
        match &self.bias {
            Some(b) => y.add_bias(tape.leaf(b)),
            None => Ok(y),
        }
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Layer norm over the last axis. `weight` is gamma, `bias` is beta.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Float> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Float> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            weight: Tensor::ones([dim]),
            bias: Tensor::zeros([dim]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let axis = x.shape().len().saturating_sub(1);
        x.layer_norm(tape.leaf(&self.weight), tape.leaf(&self.bias), axis, LN_EPS)
    }
}

impl<T: Float> Module<T> for LayerNorm<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Three linear layers with GELU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp3<T: Float> {
    pub layers: [Linear<T>; 3],
}

impl<T: Float> Mlp3<T> {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp3 {
            layers: [
                Linear::new(input, hidden, true, rng),
                Linear::new(hidden, hidden, true, rng),
                Linear::new(hidden, output, true, rng),
            ],
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.layers[0].forward(tape, x)?.gelu();
        let h = self.layers[1].forward(tape, h)?.gelu();
        self.layers[2].forward(tape, h)
    }
}

impl<T: Float> Module<T> for Mlp3<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&join(prefix, &format!("fc{}", i + 1)), f);
        }
    }
}

/// `[T, heads*d] -> [heads, T, d]`.
pub fn split_heads<'t, T: Float>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    if s.len() != 2 || !s[1].is_multiple_of(heads) {
        return Err(Error::dim(format!("cannot split {s:?} into {heads} heads")));
    }
    x.reshape([s[0], heads, s[1] / heads])?.permute(&[1, 0, 2])
}

/// `[heads, T, d] -> [T, heads*d]`.
pub fn merge_heads<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    x.permute(&[1, 0, 2])?.reshape([s[1], s[0] * s[2]])
}

/// Scaled dot-product attention over per-head `[K, Tq, d]` queries and
/// `[K, Tk, d]` keys/values, with an optional additive `[K, Tq, Tk]` bias.
/// Returns the `[K, Tq, d]` output and the number of query-key scores formed.
pub fn attention<'t, T: Float>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
    bias: Option<Var<'t, T>>,
) -> Result<(Var<'t, T>, u64)> {
    let (qs, ks) = (q.shape(), k.shape());
    let d = qs[2];
    let mut logits = q.bmm(k, false, true)?.scale(1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    let probs = logits.softmax(2)?;
    let scores = (qs[0] * qs[1] * ks[1]) as u64;
    Ok((probs.bmm(v, false, false)?, scores))
}

/// Pre-norm transformer block: LN, multi-head self-attention, residual, LN,
/// GELU MLP with 4x hidden width, residual.
#[derive(Clone, Debug)]
pub struct Block<T: Float> {
    pub heads: usize,
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Keys and values of one block's self-attention, reusable by cross-attention.
pub struct KeyValues<'t, T: Float> {
    pub k: Var<'t, T>,
    pub v: Var<'t, T>,
}

impl<T: Float> Block<T> {
    /// `key_bias: false` drops the key projection bias, which only shifts
    /// every logit of a softmax row by the same amount.
    pub fn new(width: usize, heads: usize, key_bias: bool, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(Block {
            heads,
            ln1: LayerNorm::new(width),
            q: Linear::new(width, width, true, rng),
            k: Linear::new(width, width, key_bias, rng),
            v: Linear::new(width, width, true, rng),
            proj: Linear::new(width, width, true, rng),
            ln2: LayerNorm::new(width),
            fc1: Linear::new(width, 4 * width, true, rng),
            fc2: Linear::new(4 * width, width, true, rng),
        })
    }

    pub fn width(&self) -> usize {
        self.q.input_dim()
    }

    fn mlp_residual<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.ln2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?.gelu();
        x.add(self.fc2.forward(tape, h)?)
    }

    /// Self-attention over `x` (`[T, width]`), also returning the keys and
    /// values formed from the block input and the score count.
    pub fn forward_with_kv<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<(Var<'t, T>, KeyValues<'t, T>, u64)> {
        let a = self.ln1.forward(tape, x)?;
        let q = split_heads(self.q.forward(tape, a)?, self.heads)?;
        let k = split_heads(self.k.forward(tape, a)?, self.heads)?;
        let v = split_heads(self.v.forward(tape, a)?, self.heads)?;
        let (att, scores) = attention(q, k, v, None)?;
        let x = x.add(self.proj.forward(tape, merge_heads(att)?)?)?;
        let x = self.mlp_residual(tape, x)?;
        Ok((x, KeyValues { k, v }, scores))
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_with_kv(tape, x)?.0)
    }

    /// Cross-attention of `queries` (`[N, width]`) onto previously formed keys
    /// and values, sharing this block's projections, norms and MLP.
    pub fn cross_forward<'t>(
        &self,
        tape: &'t Tape<T>,
        queries: Var<'t, T>,
        kv: &KeyValues<'t, T>,
        bias: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, u64)> {
        let a = self.ln1.forward(tape, queries)?;
        let q = split_heads(self.q.forward(tape, a)?, self.heads)?;
        let (att, scores) = attention(q, kv.k, kv.v, bias)?;
        let x = queries.add(self.proj.forward(tape, merge_heads(att)?)?)?;
        Ok((self.mlp_residual(tape, x)?, scores))
    }
}

impl<T: Float> Module<T> for Block<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.ln1.visit_named(&join(prefix, "ln1"), f);
        self.q.visit_named(&join(prefix, "attn.q"), f);
        self.k.visit_named(&join(prefix, "attn.k"), f);
        self.v.visit_named(&join(prefix, "attn.v"), f);
        self.proj.visit_named(&join(prefix, "attn.proj"), f);
        self.ln2.visit_named(&join(prefix, "ln2"), f);
        self.fc1.visit_named(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_named(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.ln1.visit_named_mut(&join(prefix, "ln1"), f);
        self.q.visit_named_mut(&join(prefix, "attn.q"), f);
        self.k.visit_named_mut(&join(prefix, "attn.k"), f);
        self.v.visit_named_mut(&join(prefix, "attn.v"), f);
        self.proj.visit_named_mut(&join(prefix, "attn.proj"), f);
        self.ln2.visit_named_mut(&join(prefix, "ln2"), f);
        self.fc1.visit_named_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_named_mut(&join(prefix, "mlp.fc2"), f);
    }
}

/// Splits an `[S, S, 3]` image into row-major `[(S/p)^2, p*p*3]` patches.
pub fn patchify<T: Float>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 || s[0] != s[1] {
        return Err(Error::dim(format!("expected a square [S, S, 3] image, got {s:?}")));
    }
    let side = s[0];
    if patch == 0 || !side.is_multiple_of(patch) {
        return Err(Error::config(format!(
            "image side {side} is not divisible by patch {patch}"
        )));
    }
    let g = side / patch;
    let dim = patch * patch * 3;
    let src = image.data();
    let mut out = Vec::with_capacity(g * g * dim);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                let row = ((gy * patch + py) * side + gx * patch) * 3;
                out.extend_from_slice(&src[row..row + patch * 3]);
            }
        }
    }
    Tensor::new([g * g, dim], out)
}
