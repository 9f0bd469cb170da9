//! The assembled model: frozen backbone, side adapter and recognizer.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::recognizer::{ClassEmbeddings, Recognizer};
use crate::side_adapter::{SanConfig, SideAdapter};
use crate::tensor::{Float, Parameters, Tape, Tensor, Var};

/// How the recognition branch is steered and which gradients reach the side network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Decoupled bias head, gradients flow from recognition into the side network.
    #[default]
    E2e,
    /// Mask logits, detached, serve as the bias; the side network learns from
    /// mask losses only.
    TwoStage,
    /// Mask logits, with gradients, serve as the bias.
    SingleHead,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::E2e => "e2e",
            Mode::TwoStage => "two_stage",
            Mode::SingleHead => "single_head",
        })
    }
}

/// Checks that the backbone taps line up with the side network's fusion map.
pub fn validate_pair(backbone: &BackboneConfig, san: &SanConfig) -> Result<()> {
    backbone.validate()?;
    san.validate()?;
    let fused: Vec<_> = san.fusion_map.iter().map(|(b, _)| *b).collect();
    if fused != backbone.tap_layers {
        return Err(Error::config(format!(
            "fusion map reads backbone taps {:?} but the backbone exposes {:?}",
            fused.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
            backbone.tap_layers.iter().map(|t| t.to_string()).collect::<Vec<_>>()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct SanModel<T: Float> {
    pub backbone: Backbone<T>,
    pub san: SideAdapter<T>,
    pub recognizer: Recognizer<T>,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ForwardOutput<'t, T: Float> {
    /// Class logits `[C(+1), N]`.
    pub p: Var<'t, T>,
    /// Mask logits `[g, g, N]` on the side grid.
    pub m: Var<'t, T>,
    /// Biases `[h, w, K_b, N]` on the backbone grid, as injected.
    pub bias: Var<'t, T>,
    pub final_cls: Var<'t, T>,
    pub sls_scores: Vec<u64>,
}

impl<T: Float> SanModel<T> {
    pub fn new(
        backbone: Backbone<T>,
        san_config: SanConfig,
        san_input_side: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        validate_pair(&backbone.config, &san_config)?;
        let san = SideAdapter::random(
            san_config,
            san_input_side,
            backbone.config.width,
            backbone.config.heads,
            rng,
        )?;
        let recognizer = Recognizer::new(backbone.config.embed_dim, rng);
        Ok(SanModel {
            backbone,
            san,
            recognizer,
        })
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        clip_image: &Tensor<T>,
        san_image: &Tensor<T>,
        bank: &ClassEmbeddings<T>,
        mode: Mode,
        train_mode: bool,
    ) -> Result<ForwardOutput<'t, T>> {
        let state = self.backbone.patchify_embed(tape, clip_image)?;
        let (state, taps) = self.backbone.forward_shallow(tape, state)?;
        let feats = self.san.forward(tape, san_image, &taps)?;
        let m = self.san.predict_masks(tape, &feats)?;
        let h = state.grid;
        let n = self.san.config.n_queries;
        let bias = match mode {
            Mode::E2e => self.san.predict_biases(tape, &feats, h)?,
            Mode::SingleHead => m.bilinear_resize(h, h)?.reshape([h, h, 1, n])?,
            Mode::TwoStage => m.detach().bilinear_resize(h, h)?.reshape([h, h, 1, n])?,
        };
        let sls = self.backbone.init_sls(&state, n)?;
        let deep = self
            .backbone
            .forward_deep_with_sls(tape, state, Some(sls), Some(bias))?;
        let sls = deep.sls.expect("shadow tokens were attached");
        let p = self.recognizer.recognize(tape, &self.backbone, sls, bank, train_mode)?;
        Ok(ForwardOutput {
            p,
            m,
            bias,
            final_cls: deep.cls,
            sls_scores: deep.sls_scores,
        })
    }

    /// Same weights in another precision; tensor identities are fresh.
    pub fn cast<U: Float>(&self) -> Result<SanModel<U>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let backbone = Backbone::<U>::zeros(self.backbone.config.clone())?;
        let mut out = SanModel::<U>::new(
            backbone,
            self.san.config.clone(),
            self.san.grid * self.san.config.patch,
            &mut rng,
        )?;
        let mut src = Vec::new();
        self.visit(&mut |name, t| src.push((name.to_string(), t.cast::<U>())));
        let mut it = src.into_iter();
        out.visit_mut(&mut |name, t| {
            let (n, v) = it.next().expect("same layout");
            debug_assert_eq!(n, name);
            *t = v;
        });
        Ok(out)
    }
}

impl<T: Float> Parameters<T> for SanModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.backbone.visit(f);
        self.san.visit(f);
        self.recognizer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.backbone.visit_mut(f);
        self.san.visit_mut(f);
        self.recognizer.visit_mut(f);
    }
}
