//! Frozen ViT encoder with feature taps and a shadow-token recognition stage.
//!
//! Token layout is `[cls; visual]` throughout: row 0 is the class token and
//! rows `1..=h*w` are the visual tokens in row-major grid order.

use std::fmt;

use rand::{Rng, SeedableRng};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::nn::{self, join, patchify, Block, LayerNorm, Linear, Module};
use crate::tensor::{Float, Parameters, Tape, Tensor, Var};

/// A feature tap point, counted in blocks already applied: `Stem` is the
/// post-embedding state and `Layer(i)` the output of the `i`-th block
/// (1-based). Serialized as `"stem"` or an integer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tap {
    Stem,
    Layer(usize),
}

impl Tap {
    pub fn index(self) -> usize {
        match self {
            Tap::Stem => 0,
            Tap::Layer(i) => i,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Tap::Stem
        } else {
            Tap::Layer(i)
        }
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tap::Stem => f.write_str("stem"),
            Tap::Layer(i) => write!(f, "{i}"),
        }
    }
}

impl Serialize for Tap {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tap::Stem => s.serialize_str("stem"),
            Tap::Layer(i) => s.serialize_u64(*i as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Tap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = Tap;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("\"stem\" or a non-negative layer index")
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Tap, E> {
                Ok(Tap::from_index(v as usize))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Tap, E> {
                usize::try_from(v)
                    .map(Tap::from_index)
                    .map_err(|_| E::custom(format!("negative tap index {v}")))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Tap, E> {
                match v {
                    "stem" => Ok(Tap::Stem),
                    other => other
                        .parse::<usize>()
                        .map(Tap::from_index)
                        .map_err(|_| E::custom(format!("unknown tap {other:?}"))),
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub native_resolution: usize,
    pub embed_dim: usize,
    pub tap_layers: Vec<Tap>,
    pub split_layer: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::config(msg));
        if self.depth == 0 || self.width == 0 || self.embed_dim == 0 || self.patch == 0 {
            return c("backbone depth, width, patch and embed_dim must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return c(format!(
                "backbone width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        if self.native_resolution == 0 || !self.native_resolution.is_multiple_of(self.patch) {
            return c(format!(
                "native resolution {} is not a positive multiple of patch {}",
                self.native_resolution, self.patch
            ));
        }
        if self.split_layer > self.depth {
            return c(format!("split layer {} exceeds depth {}", self.split_layer, self.depth));
        }
        for pair in self.tap_layers.windows(2) {
            if pair[0] >= pair[1] {
                return c(format!(
                    "tap layers must be strictly increasing, got {} then {}",
                    pair[0], pair[1]
                ));
            }
        }
        if let Some(t) = self.tap_layers.iter().find(|t| t.index() > self.split_layer) {
            return c(format!("tap {t} lies beyond split layer {}", self.split_layer));
        }
        Ok(())
    }

    pub fn native_grid(&self) -> usize {
        self.native_resolution / self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Tokens flowing through the backbone on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BackboneState<'t, T: Float> {
    /// `[1 + h*w, width]`, class token first.
    pub tokens: Var<'t, T>,
    pub grid: usize,
    pub layer_index: usize,
}

impl<'t, T: Float> BackboneState<'t, T> {
    pub fn cls(&self) -> Result<Var<'t, T>> {
        self.tokens.slice(0, 0, 1)
    }

    pub fn visual(&self) -> Result<Var<'t, T>> {
        self.tokens.slice(0, 1, self.grid * self.grid)
    }
}

/// Output of the recognition stage.
#[derive(Clone, Debug)]
pub struct DeepOutput<'t, T: Float> {
    /// `[1, width]` after the last block, before the final norm.
    pub cls: Var<'t, T>,
    /// `[h*w, width]`.
    pub visual: Var<'t, T>,
    /// `[N, width]`; `None` when no shadow tokens were attached.
    pub sls: Option<Var<'t, T>>,
    /// Query-key scores formed on the shadow-token path, one entry per block.
    pub sls_scores: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Backbone<T: Float> {
    pub config: BackboneConfig,
    pub patch_embed: Linear<T>,
    /// `[1 + g*g, width]` for the native grid `g`; row 0 belongs to the class token.
    pub pos_embed: Tensor<T>,
    /// `[1, width]`.
    pub cls_token: Tensor<T>,
    pub layers: Vec<Block<T>>,
    pub final_ln: LayerNorm<T>,
    /// `[width, embed_dim]`, no bias.
    pub proj: Linear<T>,
}

impl<T: Float> Backbone<T> {
    /// Seeded Gaussian weights (std 0.02), unit norms; everything frozen.
    pub fn random(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (w, p, g) = (config.width, config.patch, config.native_grid());
        let patch_embed = Linear::new(p * p * 3, w, true, rng);
        let pos_embed = Tensor::randn([1 + g * g, w], nn::INIT_STD, rng);
        let cls_token = Tensor::randn([1, w], nn::INIT_STD, rng);
        let layers = (0..config.depth)
            .map(|_| Block::new(w, config.heads, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::new(w, config.embed_dim, false, rng);
        let mut b = Backbone {
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            final_ln: LayerNorm::new(w),
            proj,
            config,
        };
        b.set_trainable(false, false);
        Ok(b)
    }

    /// Every weight is zero, norms are identity-affine.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let mut b = Self::random(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        b.visit_mut(&mut |name, t| {
            if !name.contains("ln") {
                t.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        });
        Ok(b)
    }

    /// Gradient routing: the position embedding follows `finetune_pos`; all
    /// other weights follow `full`.
    pub fn set_trainable(&mut self, finetune_pos: bool, full: bool) {
        self.visit_mut(&mut |name, t| {
            let on = if name == "backbone.pos_embed" {
                finetune_pos || full
            } else {
                full
            };
            t.set_requires_grad(on);
        });
    }

    /// Position embedding for a `grid x grid` token layout: the class row as
    /// is, the spatial rows bilinearly resized when the grid differs.
    pub fn position_embedding<'t>(&self, tape: &'t Tape<T>, grid: usize) -> Result<Var<'t, T>> {
        let pos = tape.leaf(&self.pos_embed);
        let g = self.config.native_grid();
        if grid == g {
            return Ok(pos);
        }
        let w = self.config.width;
        let spatial = pos
            .slice(0, 1, g * g)?
            .reshape([g, g, w])?
            .bilinear_resize(grid, grid)?
            .reshape([grid * grid, w])?;
        Var::concat(&[pos.slice(0, 0, 1)?, spatial], 0)
    }

    pub fn patchify_embed<'t>(&self, tape: &'t Tape<T>, image: &Tensor<T>) -> Result<BackboneState<'t, T>> {
        let side = image.shape().first().copied().unwrap_or(0);
        let grid = side / self.config.patch.max(1);
        let patches = tape.constant(patchify(image, self.config.patch)?);
        let visual = self.patch_embed.forward(tape, patches)?;
        let tokens = Var::concat(&[tape.leaf(&self.cls_token), visual], 0)?;
        let tokens = tokens.add(self.position_embedding(tape, grid)?)?;
        Ok(BackboneState {
            tokens,
            grid,
            layer_index: 0,
        })
    }

    /// Runs blocks `[0, split_layer)`, returning the state at the split and
    /// the visual tokens at every configured tap.
    pub fn forward_shallow<'t>(
        &self,
        tape: &'t Tape<T>,
        state: BackboneState<'t, T>,
    ) -> Result<(BackboneState<'t, T>, Vec<Var<'t, T>>)> {
        if state.layer_index != 0 {
            return Err(Error::usage(format!(
                "forward_shallow expects a fresh state, got layer {}",
                state.layer_index
            )));
        }
        let taps = &self.config.tap_layers;
        let mut out = Vec::with_capacity(taps.len());
        let mut state = state;
        if taps.contains(&Tap::Stem) {
            out.push(state.visual()?);
        }
        for l in 0..self.config.split_layer {
            state.tokens = self.layers[l].forward(tape, state.tokens)?;
            state.layer_index = l + 1;
            if taps.contains(&Tap::Layer(l + 1)) {
                out.push(state.visual()?);
            }
        }
        Ok((state, out))
    }

    /// `n` copies of the current class token.
    pub fn init_sls<'t>(&self, state: &BackboneState<'t, T>, n: usize) -> Result<Var<'t, T>> {
        if n == 0 {
            return Err(Error::usage("at least one shadow token is required"));
        }
        state.cls()?.repeat_rows(n)
    }

    /// Converts `[h, w, K_b, N]` biases into per-head `[K, N, 1 + h*w]`
    /// logit offsets with a zero column for the class key.
    pub fn bias_logits<'t>(&self, biases: Var<'t, T>, grid: usize) -> Result<Var<'t, T>> {
        let s = biases.shape();
        let heads = self.config.heads;
        if s.len() != 4 || s[0] != grid || s[1] != grid || (s[2] != 1 && s[2] != heads) {
            return Err(Error::dim(format!(
                "attention biases {s:?} do not fit grid {grid}x{grid} with {heads} heads"
            )));
        }
        let (kb, n) = (s[2], s[3]);
        let b = biases.reshape([grid * grid, kb, n])?.permute(&[1, 2, 0])?;
        let zero = biases.tape().zeros([kb, n, 1]);
        let b = Var::concat(&[zero, b], 2)?;
        if kb == heads {
            Ok(b)
        } else {
            Var::concat(&vec![b; heads], 0)
        }
    }

    /// Runs blocks `[split_layer, depth)`. Visual and class tokens use plain
    /// self-attention; shadow tokens cross-attend to the block input under the
    /// same bias at every block and never attend to one another.
    pub fn forward_deep_with_sls<'t>(
        &self,
        tape: &'t Tape<T>,
        state: BackboneState<'t, T>,
        sls: Option<Var<'t, T>>,
        biases: Option<Var<'t, T>>,
    ) -> Result<DeepOutput<'t, T>> {
        let bias = match (&sls, biases) {
            (Some(_), Some(b)) => Some(self.bias_logits(b, state.grid)?),
            _ => None,
        };
        if let (Some(s), Some(b)) = (&sls, &bias) {
            if s.shape()[0] != b.shape()[1] {
                return Err(Error::dim(format!(
                    "{} shadow tokens but biases for {}",
                    s.shape()[0],
                    b.shape()[1]
                )));
            }
        }
        let mut tokens = state.tokens;
        let mut sls = sls;
        let mut sls_scores = Vec::new();
        for block in &self.layers[state.layer_index.max(self.config.split_layer)..] {
            let (next, kv, _) = block.forward_with_kv(tape, tokens)?;
            if let Some(s) = sls {
                let (s, scores) = block.cross_forward(tape, s, &kv, bias)?;
                sls = Some(s);
                sls_scores.push(scores);
            }
            tokens = next;
        }
        Ok(DeepOutput {
            cls: tokens.slice(0, 0, 1)?,
            visual: tokens.slice(0, 1, state.grid * state.grid)?,
            sls,
            sls_scores,
        })
    }

    /// Final norm then projection to the embedding space, row-wise.
    pub fn project_embed<'t>(&self, tape: &'t Tape<T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.final_ln.forward(tape, tokens)?;
        self.proj.forward(tape, h)
    }

    /// Full frozen pass of one image to its projected class embedding `[1, embed_dim]`.
    pub fn encode_image<'t>(&self, tape: &'t Tape<T>, image: &Tensor<T>) -> Result<Var<'t, T>> {
        let state = self.patchify_embed(tape, image)?;
        let (state, _) = self.forward_shallow(tape, state)?;
        let out = self.forward_deep_with_sls(tape, state, None, None)?;
        self.project_embed(tape, out.cls)
    }
}

impl<T: Float> Module<T> for Backbone<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_embed.visit_named(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "cls_token"), &self.cls_token);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&join(prefix, &format!("layer{i}")), f);
        }
        self.final_ln.visit_named(&join(prefix, "final_ln"), f);
        self.proj.visit_named(&join(prefix, "proj"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_embed.visit_named_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "cls_token"), &mut self.cls_token);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&join(prefix, &format!("layer{i}")), f);
        }
        self.final_ln.visit_named_mut(&join(prefix, "final_ln"), f);
        self.proj.visit_named_mut(&join(prefix, "proj"), f);
    }
}

impl<T: Float> Parameters<T> for Backbone<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_named("backbone", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_named_mut("backbone", f);
    }
}
