#![allow(dead_code)]

pub mod reference;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use san::backbone::{Backbone, BackboneConfig, Tap};
use san::commands::seeded_backbone;
use san::config::{RunConfig, Split};
use san::loss::{matched_loss, LossWeights, TargetSet};
use san::model::{Mode, SanModel};
use san::recognizer::ClassEmbeddings;
use san::side_adapter::SanConfig;
use san::synth::{generate_prototypes, generate_synthetic};
use san::tensor::DType;
use san::tensor::{Float, Parameters, Tape, Tensor, Var};
use san::trainer::Trainer;
use san::Result;

/// Backbone depth 4 / width 32 / heads 4, side depth 2 / width 16, four
/// queries, 32x32 inputs on both branches.
pub fn grad_desk_configs() -> (BackboneConfig, SanConfig) {
    let b = BackboneConfig {
        depth: 4,
        width: 32,
        heads: 4,
        patch: 16,
        native_resolution: 32,
        embed_dim: 16,
        tap_layers: vec![Tap::Stem, Tap::Layer(2)],
        split_layer: 2,
    };
    let s = SanConfig {
        depth: 2,
        width: 16,
        heads: 2,
        patch: 16,
        n_queries: 4,
        fusion_map: vec![(Tap::Stem, Tap::Stem), (Tap::Layer(2), Tap::Layer(1))],
        share_query_proj: false,
        bias_per_head: true,
        proj_dim: 16,
    };
    (b, s)
}

pub struct GradProblem<T: Float> {
    pub model: SanModel<T>,
    pub clip_image: Tensor<T>,
    pub san_image: Tensor<T>,
    pub bank: ClassEmbeddings<T>,
    pub targets: TargetSet,
    pub mode: Mode,
}

pub fn grad_problem(seed: u64, mode: Mode) -> GradProblem<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bc, sc) = grad_desk_configs();
    let mut backbone = Backbone::<f64>::random(bc, &mut rng).unwrap();
    backbone.set_trainable(true, false);
    let mut model = SanModel::new(backbone, sc, 32, &mut rng).unwrap();
    condition(&mut model, &mut rng);
    let clip_image = Tensor::randn([32, 32, 3], 0.5, &mut rng);
    let san_image = clip_image.clone();
    let bank = ClassEmbeddings::new(
        Tensor::randn([3, 16], 1.0, &mut rng),
        vec!["a".into(), "b".into(), "c".into()],
    )
    .unwrap();
    let targets = TargetSet {
        grid: 2,
        masks: vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]],
        labels: vec![0, 2],
    };
    GradProblem {
        model,
        clip_image,
        san_image,
        bank,
        targets,
        mode,
    }
}

/// Redraws trainable tensors at unit scale (fan-in-scaled matrices, unit-ish
/// norms, nonzero fusion) so that gradients are O(1) and proposals distinct.
pub fn condition(model: &mut impl Parameters<f64>, rng: &mut ChaCha8Rng) {
    use rand_distr::{Distribution, StandardNormal};
    model.visit_mut(&mut |name, t| {
        if name.ends_with("logit_scale") {
            return;
        }
        let shape = t.shape().to_vec();
        let is_norm = name.contains(".ln");
        let (mean, std) = if is_norm && name.ends_with("weight") {
            (1.0, 0.1)
        } else if shape.len() == 2 && name.ends_with("weight") {
            (0.0, 1.0 / (shape[0] as f64).sqrt())
        } else if name.ends_with("bias") {
            (0.0, 0.1)
        } else {
            (0.0, 0.5)
        };
        for v in t.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = mean + std * z;
        }
    });
}

impl<T: Float> GradProblem<T> {
    pub fn cast<U: Float>(&self) -> GradProblem<U> {
        GradProblem {
            model: self.model.cast().unwrap(),
            clip_image: self.clip_image.cast(),
            san_image: self.san_image.cast(),
            bank: ClassEmbeddings::new(self.bank.e.cast(), self.bank.names.clone()).unwrap(),
            targets: self.targets.clone(),
            mode: self.mode,
        }
    }

    pub fn loss<'t>(&self, tape: &'t Tape<T>, model: &SanModel<T>) -> Result<Var<'t, T>> {
        let out = model.forward(tape, &self.clip_image, &self.san_image, &self.bank, self.mode, true)?;
        Ok(matched_loss(out.p, out.m, &self.targets, &LossWeights::default())?
            .0
            .total)
    }
}

/// Exhaustive minimum over all injective assignments of the shorter side,
/// enumerated in lexicographic order, so the first minimum found is the
/// lexicographically smallest one. Returns `(total, pairs sorted by proposal)`.
pub fn brute_force_assignment(cost: &[f64], n: usize, g: usize) -> (f64, Vec<(usize, usize)>) {
    let (rows, cols) = if n <= g { (n, g) } else { (g, n) };
    let at = |r: usize, c: usize| if n <= g { (r, c) } else { (c, r) };
    fn rec(
        r: usize,
        rows: usize,
        cols: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        visit: &mut dyn FnMut(&[usize]),
    ) {
        if r == rows {
            visit(cur);
            return;
        }
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                rec(r + 1, rows, cols, used, cur, visit);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    rec(0, rows, cols, &mut vec![false; cols], &mut Vec::new(), &mut |seq| {
        let mut pairs: Vec<(usize, usize)> = seq.iter().enumerate().map(|(r, &c)| at(r, c)).collect();
        pairs.sort_unstable();
        let total = san::matcher::assignment_cost(cost, g, &pairs);
        if best.as_ref().is_none_or(|(b, _)| total < *b) {
            best = Some((total, pairs));
        }
    });
    best.unwrap_or((0.0, Vec::new()))
}

/// Desk preset shrunk to the gradient-check networks: 32px backbone input,
/// 64px side input and data, float64, eight training images.
pub fn tiny_run_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::desk();
    let (b, s) = grad_desk_configs();
    c.backbone = b;
    c.san = s;
    c.train.clip_input_side = 32;
    c.train.san_input_side = 64;
    c.train.batch_size = 2;
    c.train.total_iters = 10;
    c.train.seed = seed;
    c.train.dtype = DType::Float64;
    c.data.seed = seed;
    c.data.side = 64;
    c.data.n_train = 8;
    c.data.n_val = 4;
    c.data.prototype_samples = 2;
    c.profile.latency_runs = 0;
    c
}

/// Trainer on freshly generated data for `config`, without touching disk.
pub fn in_memory_trainer(config: &RunConfig) -> Trainer<f64> {
    let backbone = seeded_backbone::<f64>(config).unwrap();
    let bank = generate_prototypes(
        &backbone,
        &config.data.classes,
        config.train.clip_input_side,
        config.data.prototype_samples,
        config.data.seed,
    )
    .unwrap();
    let samples = generate_synthetic(&config.data.synth(Split::Train)).unwrap();
    Trainer::new(config.clone(), backbone, bank, samples).unwrap()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `S[x, c] = Σ_n sigmoid(m[x, n]) · softmax_c(p[:, n])`, one pixel at a time,
/// dropping the last row after the softmax when `no_object`.
pub fn brute_scores(m: &[f64], p: &[f64], rows: usize, n: usize, cells: usize, no_object: bool) -> Vec<f64> {
    let c = if no_object { rows - 1 } else { rows };
    let mut out = vec![0.0; cells * c];
    for x in 0..cells {
        for k in 0..c {
            let mut s = 0.0;
            for q in 0..n {
                let z: f64 = (0..rows).map(|r| p[r * n + q].exp()).sum();
                s += sigmoid(m[x * n + q]) * p[k * n + q].exp() / z;
            }
            out[x * c + k] = s;
        }
    }
    out
}
