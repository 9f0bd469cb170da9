//! The side network: a small ViT over the high-resolution image with learnable
//! query tokens, fused backbone features, and mask and bias heads.
//!
//! Token layout is `[queries; visual]`. The position table holds one row per
//! query followed by the spatial grid it was built for.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Tap;
use crate::error::{Error, Result};
use crate::nn::{self, join, patchify, Block, Linear, Mlp3, Module};
use crate::tensor::{Float, Parameters, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SanConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub n_queries: usize,
    /// `(backbone tap, side layer)` pairs; a side index `t` fuses into the
    /// visual tokens after `t` side blocks.
    pub fusion_map: Vec<(Tap, Tap)>,
    pub share_query_proj: bool,
    pub bias_per_head: bool,
    pub proj_dim: usize,
}

impl SanConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::config(msg));
        if self.width == 0 || self.patch == 0 || self.proj_dim == 0 || self.n_queries == 0 {
            return c("side width, patch, proj_dim and n_queries must be positive".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return c(format!(
                "side width {} is not divisible by {} heads",
                self.width, self.heads
            ));
        }
        for pair in self.fusion_map.windows(2) {
            if pair[0].0 >= pair[1].0 || pair[0].1 >= pair[1].1 {
                return c("fusion map must be strictly increasing on both sides".into());
            }
        }
        if let Some((_, s)) = self.fusion_map.iter().find(|(_, s)| s.index() >= self.depth) {
            return c(format!(
                "fusion into side layer {s} needs depth > {}, have {}",
                s.index(),
                self.depth
            ));
        }
        Ok(())
    }

    /// Head count of the bias output given the backbone's head count.
    pub fn bias_heads(&self, backbone_heads: usize) -> usize {
        if self.bias_per_head {
            backbone_heads
        } else {
            1
        }
    }
}

/// Final query and visual features of the side network.
#[derive(Clone, Copy, Debug)]
pub struct SanFeatures<'t, T: Float> {
    /// `[N, width]`.
    pub queries: Var<'t, T>,
    /// `[g*g, width]`.
    pub visual: Var<'t, T>,
    /// Mask-head query embeddings `[N, proj_dim]`, reused by the bias head
    /// when the projection is shared.
    pub mask_queries: Var<'t, T>,
    pub grid: usize,
}

#[derive(Clone, Debug)]
pub struct SideAdapter<T: Float> {
    pub config: SanConfig,
    /// Grid the position table was built for.
    pub grid: usize,
    pub backbone_heads: usize,
    pub patch_embed: Linear<T>,
    /// `[N + grid*grid, width]`.
    pub pos_embed: Tensor<T>,
    /// `[N, width]`.
    pub queries: Tensor<T>,
    pub layers: Vec<Block<T>>,
    /// One 1x1 projection per fusion pair, backbone width to side width.
    pub fusion: Vec<Linear<T>>,
    pub mask_q: Mlp3<T>,
    pub mask_v: Mlp3<T>,
    /// `None` when the bias head reuses `mask_q`.
    pub attn_q: Option<Mlp3<T>>,
    pub attn_v: Mlp3<T>,
}

impl<T: Float> SideAdapter<T> {
    /// Gaussian init (std 0.02) with zero fusion projections, so fusion starts
    /// as the identity. All tensors are trainable.
    pub fn random(
        config: SanConfig,
        input_side: usize,
        backbone_width: usize,
        backbone_heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if !input_side.is_multiple_of(config.patch) {
            return Err(Error::config(format!(
                "side input {input_side} is not divisible by patch {}",
                config.patch
            )));
        }
        let (w, p, n, d) = (config.width, config.patch, config.n_queries, config.proj_dim);
        let grid = input_side / p;
        let kb = config.bias_heads(backbone_heads);
        let mut san = SideAdapter {
            grid,
            backbone_heads,
            patch_embed: Linear::new(p * p * 3, w, true, rng),
            pos_embed: Tensor::randn([n + grid * grid, w], nn::INIT_STD, rng),
            queries: Tensor::randn([n, w], nn::INIT_STD, rng),
            layers: (0..config.depth)
                .map(|_| Block::new(w, config.heads, false, rng))
                .collect::<Result<Vec<_>>>()?,
            fusion: config
                .fusion_map
                .iter()
                .map(|_| Linear::zeros(backbone_width, w, true))
                .collect(),
            mask_q: Mlp3::new(w, w, d, rng),
            mask_v: Mlp3::new(w, w, d, rng),
            attn_q: (!config.share_query_proj).then(|| Mlp3::new(w, w, d, rng)),
            attn_v: Mlp3::new(w, w, kb * d, rng),
            config,
        };
        san.visit_mut(&mut |_, t| t.set_requires_grad(true));
        Ok(san)
    }

    pub fn bias_heads(&self) -> usize {
        self.config.bias_heads(self.backbone_heads)
    }

    /// Position rows for a `grid x grid` layout: query rows unchanged, the
    /// spatial part resized when the grid differs from the built one.
    pub fn position_embedding<'t>(&self, tape: &'t Tape<T>, grid: usize) -> Result<Var<'t, T>> {
        let pos = tape.leaf(&self.pos_embed);
        if grid == self.grid {
            return Ok(pos);
        }
        let (n, g, w) = (self.config.n_queries, self.grid, self.config.width);
        let spatial = pos
            .slice(0, n, g * g)?
            .reshape([g, g, w])?
            .bilinear_resize(grid, grid)?
            .reshape([grid * grid, w])?;
        Var::concat(&[pos.slice(0, 0, n)?, spatial], 0)
    }

    /// Adds the projected, resized backbone tokens to the side visual tokens.
    pub fn fuse_features<'t>(
        &self,
        tape: &'t Tape<T>,
        fusion: usize,
        san_visual: Var<'t, T>,
        clip_tokens: Var<'t, T>,
        grid: usize,
    ) -> Result<Var<'t, T>> {
        let hw = clip_tokens.shape()[0];
        let h = (hw as f64).sqrt().round() as usize;
        if h * h != hw {
            return Err(Error::dim(format!("{hw} backbone tokens do not form a square grid")));
        }
        let w = self.config.width;
        let projected = self.fusion[fusion]
            .forward(tape, clip_tokens)?
            .reshape([h, h, w])?
            .bilinear_resize(grid, grid)?
            .reshape([grid * grid, w])?;
        san_visual.add(projected)
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        image: &Tensor<T>,
        clip_taps: &[Var<'t, T>],
    ) -> Result<SanFeatures<'t, T>> {
        if clip_taps.len() != self.config.fusion_map.len() {
            return Err(Error::config(format!(
                "{} backbone taps supplied for {} fusion points",
                clip_taps.len(),
                self.config.fusion_map.len()
            )));
        }
        let side = image.shape().first().copied().unwrap_or(0);
        let grid = side / self.config.patch;
        let n = self.config.n_queries;
        let patches = tape.constant(patchify(image, self.config.patch)?);
        let mut visual = self.patch_embed.forward(tape, patches)?;
        let mut queries = tape.leaf(&self.queries);
        let pos = self.position_embedding(tape, grid)?;
        for (l, block) in self.layers.iter().enumerate() {
            for (j, (_, s)) in self.config.fusion_map.iter().enumerate() {
                if s.index() == l {
                    visual = self.fuse_features(tape, j, visual, clip_taps[j], grid)?;
                }
            }
            let x = Var::concat(&[queries, visual], 0)?.add(pos)?;
            let x = block.forward(tape, x)?;
            queries = x.slice(0, 0, n)?;
            visual = x.slice(0, n, grid * grid)?;
        }
        Ok(SanFeatures {
            mask_queries: self.mask_q.forward(tape, queries)?,
            queries,
            visual,
            grid,
        })
    }

    /// Mask logits `[g, g, N]`: inner products of per-pixel and per-query embeddings.
    pub fn predict_masks<'t>(&self, tape: &'t Tape<T>, f: &SanFeatures<'t, T>) -> Result<Var<'t, T>> {
        let q = f.mask_queries;
        let v = self.mask_v.forward(tape, f.visual)?;
        let n = q.shape()[0];
        v.matmul_t(q)?.reshape([f.grid, f.grid, n])
    }

    /// Attention biases `[h, w, K_b, N]` resized to the backbone grid.
    pub fn predict_biases<'t>(
        &self,
        tape: &'t Tape<T>,
        f: &SanFeatures<'t, T>,
        target_grid: usize,
    ) -> Result<Var<'t, T>> {
        let q = match &self.attn_q {
            Some(a) => a.forward(tape, f.queries)?,
            None => f.mask_queries,
        };
        let v = self.attn_v.forward(tape, f.visual)?;
        let (kb, d, n, g) = (self.bias_heads(), self.config.proj_dim, q.shape()[0], f.grid);
        v.reshape([g * g * kb, d])?
            .matmul_t(q)?
            .reshape([g, g, kb * n])?
            .bilinear_resize(target_grid, target_grid)?
            .reshape([target_grid, target_grid, kb, n])
    }
}

impl<T: Float> Module<T> for SideAdapter<T> {
    fn visit_named(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.patch_embed.visit_named(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &self.pos_embed);
        f(&join(prefix, "queries"), &self.queries);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_named(&join(prefix, &format!("layer{i}")), f);
        }
        for (i, l) in self.fusion.iter().enumerate() {
            l.visit_named(&join(prefix, &format!("fusion{i}")), f);
        }
        self.mask_q.visit_named(&join(prefix, "mask_q"), f);
        self.mask_v.visit_named(&join(prefix, "mask_v"), f);
        if let Some(a) = &self.attn_q {
            a.visit_named(&join(prefix, "attn_q"), f);
        }
        self.attn_v.visit_named(&join(prefix, "attn_v"), f);
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.patch_embed.visit_named_mut(&join(prefix, "patch_embed"), f);
        f(&join(prefix, "pos_embed"), &mut self.pos_embed);
        f(&join(prefix, "queries"), &mut self.queries);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_named_mut(&join(prefix, &format!("layer{i}")), f);
        }
        for (i, l) in self.fusion.iter_mut().enumerate() {
            l.visit_named_mut(&join(prefix, &format!("fusion{i}")), f);
        }
        self.mask_q.visit_named_mut(&join(prefix, "mask_q"), f);
        self.mask_v.visit_named_mut(&join(prefix, "mask_v"), f);
        if let Some(a) = &mut self.attn_q {
            a.visit_named_mut(&join(prefix, "attn_q"), f);
        }
        self.attn_v.visit_named_mut(&join(prefix, "attn_v"), f);
    }
}

impl<T: Float> Parameters<T> for SideAdapter<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.visit_named("san", f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.visit_named_mut("san", f);
    }
}
