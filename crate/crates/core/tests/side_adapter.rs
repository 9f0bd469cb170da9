mod common;

use common::reference::{self, max_abs_diff};
use common::{condition, grad_desk_configs};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use san::backbone::Backbone;
use san::side_adapter::{SanConfig, SideAdapter};
use san::tensor::{bilinear_resize_slice, Parameters, Tape, Tensor};

struct Setup {
    bb: Backbone<f64>,
    san: SideAdapter<f64>,
    clip: Tensor<f64>,
    image: Tensor<f64>,
}

fn setup(seed: u64, edit: impl FnOnce(&mut SanConfig)) -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bc, mut sc) = grad_desk_configs();
    edit(&mut sc);
    let mut bb = Backbone::random(bc, &mut rng).unwrap();
    condition(&mut bb, &mut rng);
    let mut san = SideAdapter::random(sc, 64, 32, 4, &mut rng).unwrap();
    condition(&mut san, &mut rng);
    Setup {
        bb,
        san,
        clip: Tensor::randn([32, 32, 3], 0.5, &mut rng),
        image: Tensor::randn([64, 64, 3], 0.5, &mut rng),
    }
}

#[test]
fn forward_masks_and_biases_match_loop_reference() {
    for seed in 0..3 {
        let s = setup(seed, |_| {});
        let r_bb = reference::backbone_fused(&s.bb, &s.clip, 0, &|_, _, _| 0.0);
        let r = reference::san_forward(&s.san, &s.image, &r_bb.taps);
        let tape = Tape::new();
        let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
        let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
        let f = s.san.forward(&tape, &s.image, &taps).unwrap();
        assert!(max_abs_diff(&r.queries, &f.queries.value()) < 1e-9);
        assert!(max_abs_diff(&r.visual, &f.visual.value()) < 1e-9);
        let m = s.san.predict_masks(&tape, &f).unwrap();
        assert_eq!(m.shape(), vec![4, 4, 4]);
        assert!(max_abs_diff(&r.masks, &m.value()) < 1e-9);
        // Same grid: no resampling.
        let b = s.san.predict_biases(&tape, &f, 4).unwrap();
        assert_eq!(b.shape(), vec![4, 4, 4, 4]);
        assert!(max_abs_diff(&r.biases, &b.value()) < 1e-9);
        // Backbone grid: bilinear resample of the same map.
        let b2 = s.san.predict_biases(&tape, &f, 2).unwrap();
        let flat: Vec<f64> = r.biases.iter().flatten().copied().collect();
        let want = bilinear_resize_slice(&flat, 4, 4, 16, 2, 2);
        assert!(max_abs_diff(&vec![want], &b2.value()) < 1e-9);
    }
}

#[test]
fn zero_fusion_weights_make_fusion_the_identity() {
    let s = setup(3, |_| {});
    let mut san = s.san.clone();
    for l in &mut san.fusion {
        l.weight.data_mut().fill(0.0);
        l.bias.as_mut().unwrap().data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let visual = tape.constant(Tensor::randn([16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
    let clip = tape.constant(Tensor::randn([4, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
    let fused = san.fuse_features(&tape, 1, visual, clip, 4).unwrap();
    assert_eq!(fused.value(), visual.value());
}

#[test]
fn fusion_adds_projected_and_upsampled_tokens() {
    let s = setup(4, |_| {});
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let visual = Tensor::<f64>::randn([16, 16], 1.0, &mut rng);
    let clip = Tensor::<f64>::randn([4, 32], 1.0, &mut rng);
    let fused = s
        .san
        .fuse_features(&tape, 0, tape.constant(visual.clone()), tape.constant(clip.clone()), 4)
        .unwrap();
    let proj = reference::linear(&reference::rows(&clip), &s.san.fusion[0]);
    let flat: Vec<f64> = proj.iter().flatten().copied().collect();
    let up = bilinear_resize_slice(&flat, 2, 2, 16, 4, 4);
    let want: Vec<f64> = up.iter().zip(visual.data()).map(|(a, b)| a + b).collect();
    assert!(max_abs_diff(&vec![want], &fused.value()) < 1e-12);
}

#[test]
fn bias_head_is_decoupled_from_mask_head() {
    let s = setup(6, |_| {});
    let run = |san: &SideAdapter<f64>| {
        let tape = Tape::new();
        let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
        let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
        let f = san.forward(&tape, &s.image, &taps).unwrap();
        (
            san.predict_masks(&tape, &f).unwrap().value().to_vec(),
            san.predict_biases(&tape, &f, 2).unwrap().value().to_vec(),
        )
    };
    let (m0, b0) = run(&s.san);
    let mut edited = s.san.clone();
    edited.attn_v.layers[2]
        .weight
        .data_mut()
        .iter_mut()
        .for_each(|v| *v *= -1.5);
    let (m1, b1) = run(&edited);
    assert_eq!(m0, m1);
    assert_ne!(b0, b1);
}

#[test]
fn shared_query_projection_reuses_mask_head() {
    let s = setup(7, |c| c.share_query_proj = true);
    assert!(s.san.attn_q.is_none());
    let own = setup(7, |_| {});
    assert!(own.san.trainable_count() > s.san.trainable_count());
    let r_bb = reference::backbone_fused(&s.bb, &s.clip, 0, &|_, _, _| 0.0);
    let r = reference::san_forward(&s.san, &s.image, &r_bb.taps);
    let tape = Tape::new();
    let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
    let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
    let f = s.san.forward(&tape, &s.image, &taps).unwrap();
    assert!(max_abs_diff(&r.biases, &s.san.predict_biases(&tape, &f, 4).unwrap().value()) < 1e-9);
}

#[test]
fn one_bias_head_when_not_per_head() {
    let s = setup(8, |c| c.bias_per_head = false);
    let tape = Tape::new();
    let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
    let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
    let f = s.san.forward(&tape, &s.image, &taps).unwrap();
    assert_eq!(s.san.predict_biases(&tape, &f, 2).unwrap().shape(), vec![2, 2, 1, 4]);
}

#[test]
fn permuting_query_slots_permutes_mask_columns() {
    let s = setup(9, |_| {});
    let order = [2usize, 0, 3, 1];
    let mut p = s.san.clone();
    let w = p.config.width;
    let perm_rows = |t: &Tensor<f64>| {
        let mut d = t.data().to_vec();
        for (i, &o) in order.iter().enumerate() {
            d[i * w..(i + 1) * w].copy_from_slice(&t.data()[o * w..(o + 1) * w]);
        }
        Tensor::new(t.shape().to_vec(), d).unwrap()
    };
    p.queries = perm_rows(&s.san.queries);
    p.pos_embed = perm_rows(&s.san.pos_embed);
    let masks = |san: &SideAdapter<f64>| {
        let tape = Tape::new();
        let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
        let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
        let f = san.forward(&tape, &s.image, &taps).unwrap();
        san.predict_masks(&tape, &f).unwrap().value().to_vec()
    };
    let (a, b) = (masks(&s.san), masks(&p));
    for cell in 0..16 {
        for (i, &o) in order.iter().enumerate() {
            assert!((b[cell * 4 + i] - a[cell * 4 + o]).abs() < 1e-10);
        }
    }
}

#[test]
fn input_off_the_built_grid_resizes_positions() {
    let s = setup(10, |_| {});
    let tape = Tape::new();
    let st = s.bb.patchify_embed(&tape, &s.clip).unwrap();
    let (_, taps) = s.bb.forward_shallow(&tape, st).unwrap();
    let image = Tensor::<f64>::randn([96, 96, 3], 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    let f = s.san.forward(&tape, &image, &taps).unwrap();
    assert_eq!(f.grid, 6);
    assert_eq!(s.san.predict_masks(&tape, &f).unwrap().shape(), vec![6, 6, 4]);
}
