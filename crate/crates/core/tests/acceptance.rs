//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p san-core --test acceptance -- --nocapture` to see the table.

mod common;

use common::reference::{self, max_abs_diff};
use common::tiny_run_config;
use common::{brute_force_assignment, brute_scores, condition, grad_desk_configs, grad_problem, in_memory_trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use san::archive::{Archive, Stored};
use san::backbone::Backbone;
use san::commands::{cmd_eval, cmd_profile, cmd_synth, cmd_train, load_bank, load_model, load_split};
use san::config::{RunConfig, Split};
use san::matcher::{assignment_cost, hungarian_match};
use san::metrics::segmentation_map;
use san::model::Mode;
use san::tensor::{autodiff_grads, finite_difference_grads, GradCheckReport, Parameters, Stencil, Tape, Tensor};
use san::trainer::{evaluate, routing_table, Group};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    soft: bool,
    detail: String,
}

#[derive(Default)]
struct Suite {
    rows: Vec<Outcome>,
}

impl Suite {
    fn record(&mut self, id: u32, name: &'static str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name}: {detail}");
        self.rows.push(Outcome {
            id,
            name,
            pass,
            soft: false,
            detail,
        });
    }

    fn soft(&mut self, id: u32, name: &'static str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id} {name} (soft): {detail}");
        self.rows.push(Outcome {
            id,
            name,
            pass,
            soft: true,
            detail,
        });
    }
}

const TARGET_PARAMS: f64 = 8.4e6;
const TARGET_GMACS: f64 = 64.3;

fn accounting(s: &mut Suite) {
    let mut cfg = RunConfig::paper_vitb16();
    cfg.profile.latency_runs = 0;
    let r = cmd_profile(&cfg).unwrap();
    let p = r.trainable_params as f64;
    s.record(
        1,
        "parameter accounting",
        (p - TARGET_PARAMS).abs() <= 0.15 * TARGET_PARAMS,
        format!(
            "{} trainable, {:+.1}% from 8.4M (limit 15%)",
            r.trainable_params,
            100.0 * (p / TARGET_PARAMS - 1.0)
        ),
    );
    s.record(
        2,
        "FLOP accounting",
        (r.gmacs - TARGET_GMACS).abs() <= 0.25 * TARGET_GMACS,
        format!(
            "{:.2} G multiply-accumulates, {:+.1}% from 64.3 (limit 25%); {:.2} GFLOPs counting 2 per MAC plus elementwise",
            r.gmacs,
            100.0 * (r.gmacs / TARGET_GMACS - 1.0),
            r.gflops
        ),
    );
}

fn hungarian(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = Vec::new();
    for case in 0..200 {
        let n = rng.random_range(1..=6);
        let g = rng.random_range(1..=6);
        let cost: Vec<f64> = (0..n * g).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pairs = hungarian_match(&cost, n, g).unwrap();
        let (best, _) = brute_force_assignment(&cost, n, g);
        if pairs.len() != n.min(g) || assignment_cost(&cost, g, &pairs) != best {
            bad.push(case);
        }
    }
    s.record(
        3,
        "Hungarian oracle",
        bad.is_empty(),
        format!("200 matrices up to 6x6, mismatches {bad:?}"),
    );
}

fn gradients(s: &mut Suite) {
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    let mut where32 = String::new();
    for seed in [7, 8] {
        let p = grad_problem(seed, Mode::E2e);
        let analytic = autodiff_grads(&p.model, |t, m| p.loss(t, m)).unwrap();
        let mut m = p.model.clone();
        let numeric = finite_difference_grads(&mut m, |t, mm| p.loss(t, mm), 1e-3, Stencil::Richardson).unwrap();
        let r64 = GradCheckReport::compare(&analytic, &numeric);
        let p32 = p.cast::<f32>();
        let a32 = autodiff_grads(&p32.model, |t, m| p32.loss(t, m)).unwrap();
        let r32 = GradCheckReport::compare(&a32, &numeric);
        worst64 = worst64.max(r64.max_rel_err);
        if r32.max_rel_err > worst32 {
            worst32 = r32.max_rel_err;
            if let Some((name, i, a, n)) = &r32.worst {
                where32 = format!(" at {name}[{i}] analytic {a:.3e} vs numeric {n:.3e}");
            }
        }
    }
    s.record(
        4,
        "gradient integrity, float64",
        worst64 < 1e-5,
        format!("max rel err {worst64:.2e} (limit 1e-5)"),
    );
    s.record(
        4,
        "gradient integrity, float32",
        worst32 < 1e-3,
        format!("max rel err {worst32:.2e} (limit 1e-3){where32}"),
    );
}

fn backbone_nonzero(model: &san::model::SanModel<f64>) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    model.visit(&mut |name, t| {
        if name.starts_with("backbone.") {
            out.push((name.to_string(), t.grad().is_some_and(|g| g.iter().any(|&v| v != 0.0))));
        }
    });
    out
}

fn routing(s: &mut Suite) {
    let mut cfg = tiny_run_config(1);
    cfg.train.finetune_pos_embed = false;
    cfg.train.backbone_lr_mult = 0.0;
    let mut tr = in_memory_trainer(&cfg);
    let routed = !routing_table(&tr.model, &cfg.train).contains_key(&Group::Backbone);
    let mut leaked = Vec::new();
    for _ in 0..10 {
        let r = tr.step().unwrap();
        if r.grad_norms.contains_key(&Group::Backbone) {
            leaked.push("backbone group".to_string());
        }
        leaked.extend(backbone_nonzero(&tr.model).into_iter().filter(|x| x.1).map(|x| x.0));
    }

    let mut cfg = tiny_run_config(2);
    cfg.train.finetune_pos_embed = true;
    let mut tr = in_memory_trainer(&cfg);
    tr.step().unwrap();
    let touched: Vec<String> = backbone_nonzero(&tr.model)
        .into_iter()
        .filter(|x| x.1)
        .map(|x| x.0)
        .collect();
    s.record(
        5,
        "frozen routing",
        routed && leaked.is_empty() && touched == ["backbone.pos_embed"],
        format!("frozen run leaks {leaked:?} over 10 steps; with position finetuning nonzero grads on {touched:?}"),
    );
}

fn shadow_backbone(seed: u64) -> (Backbone<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bb = Backbone::random(grad_desk_configs().0, &mut rng).unwrap();
    condition(&mut bb, &mut rng);
    let image = Tensor::randn([32, 32, 3], 0.5, &mut rng);
    (bb, image)
}

fn shadow_tokens(s: &mut Suite) {
    let mut identity = 0.0f64;
    let mut identical = true;
    for seed in 0..3 {
        let (bb, image) = shadow_backbone(seed);
        let (g, heads, n) = (bb.config.native_grid(), bb.config.heads, 4);
        let tape = Tape::new();
        let st = bb.patchify_embed(&tape, &image).unwrap();
        let (st, _) = bb.forward_shallow(&tape, st).unwrap();
        let plain = bb.forward_deep_with_sls(&tape, st, None, None).unwrap();
        let zeros = tape.constant(Tensor::zeros([g, g, heads, n]));
        let out = bb
            .forward_deep_with_sls(&tape, st, Some(bb.init_sls(&st, n).unwrap()), Some(zeros))
            .unwrap();
        let cls = out.cls.value();
        for row in out.sls.unwrap().value().chunks(cls.len()) {
            identity = identity.max(
                row.iter()
                    .zip(cls.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let bias = tape.constant(Tensor::randn([g, g, heads, n], 3.0, &mut rng));
        let with = bb
            .forward_deep_with_sls(&tape, st, Some(bb.init_sls(&st, n).unwrap()), Some(bias))
            .unwrap();
        identical &= plain.cls.value() == with.cls.value() && plain.visual.value() == with.visual.value();
    }
    s.record(
        6,
        "shadow token identity and non-interference",
        identity < 1e-6 && identical,
        format!("max |SLS - CLS| {identity:.2e} (limit 1e-6); class and visual outputs bit-identical: {identical}"),
    );
}

fn fused_equivalence(s: &mut Suite) {
    let n = 4;
    let mut err = 0.0f64;
    let mut counts_ok = true;
    let mut detail = String::new();
    for seed in 0..3 {
        let (bb, image) = shadow_backbone(10 + seed);
        let (g, heads) = (bb.config.native_grid(), bb.config.heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = Tensor::<f64>::randn([g, g, heads, n], 2.0, &mut rng);
        let b = bias.clone();
        let r = reference::backbone_fused(&bb, &image, n, &move |h, q, j| b.at(&[j / g, j % g, h, q]));
        let tape = Tape::new();
        let st = bb.patchify_embed(&tape, &image).unwrap();
        let (st, _) = bb.forward_shallow(&tape, st).unwrap();
        let sls = bb.init_sls(&st, n).unwrap();
        let out = bb
            .forward_deep_with_sls(&tape, st, Some(sls), Some(tape.constant(bias)))
            .unwrap();
        err = err.max(max_abs_diff(r.sls.as_ref().unwrap(), &out.sls.unwrap().value()));
        let tv = (g * g) as u64;
        let per_head_layer = n as u64 * (tv + 1);
        let fused = (tv + 1 + n as u64).pow(2);
        let deep = bb.config.depth - bb.config.split_layer;
        counts_ok &= out.sls_scores == vec![heads as u64 * per_head_layer; deep] && per_head_layer < fused;
        detail = format!("{per_head_layer} scores per head and layer vs {fused} fused");
    }
    s.record(
        7,
        "fused-equivalence oracle",
        err < 1e-5 && counts_ok,
        format!("max abs err {err:.2e} (limit 1e-5); {detail}"),
    );
}

fn segmentation_oracle(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut err = 0.0f64;
    for case in 0..100 {
        let grid = rng.random_range(1..=4);
        let n = rng.random_range(1..=5);
        let rows = rng.random_range(2..=5);
        let no_object = case % 2 == 0;
        let side = grid * rng.random_range(1..=3);
        let cells = grid * grid;
        let m: Vec<f64> = (0..cells * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p: Vec<f64> = (0..rows * n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let got = segmentation_map(&m, grid, &p, rows, no_object, side).unwrap();
        let want = brute_scores(&m, &p, rows, n, cells, no_object);
        err = err.max(
            got.scores
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    s.record(
        8,
        "segmentation map oracle",
        err < 1e-6,
        format!("100 cases, max abs err {err:.2e} (limit 1e-6)"),
    );
}

struct Trained {
    val: f64,
    train: f64,
}

fn train_and_eval(cfg: &RunConfig, mode: Mode, root: &std::path::Path) -> Trained {
    let mut cfg = cfg.clone();
    cfg.train.mode = mode;
    let out = root.join(mode.to_string());
    cmd_train(&cfg, &out, None).unwrap();
    let ckpt = out.join("final.sant");
    let val = cmd_eval(&cfg, &ckpt, None).unwrap().miou;
    let model = load_model::<f32>(&cfg, &ckpt).unwrap();
    let bank = load_bank::<f32>(&cfg).unwrap();
    let samples = load_split(&cfg, Split::Train).unwrap();
    let train = evaluate(&model, &bank, &samples, &cfg.train, false).unwrap().0.miou;
    Trained { val, train }
}

fn synthetic_training(s: &mut Suite) {
    let mut e2e = Vec::new();
    let mut two = Vec::new();
    for seed in 0..3 {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::desk();
        cfg.data.seed = seed;
        cfg.train.seed = seed;
        cfg.data.dir = tmp.path().join("data");
        cmd_synth(&cfg).unwrap();
        let t0 = std::time::Instant::now();
        let a = train_and_eval(&cfg, Mode::E2e, tmp.path());
        let secs = t0.elapsed().as_secs_f64();
        let b = train_and_eval(&cfg, Mode::TwoStage, tmp.path());
        println!(
            "    seed {seed}: e2e val {:.3} train {:.3} ({secs:.0}s); two_stage val {:.3} train {:.3}",
            a.val, a.train, b.val, b.train
        );
        e2e.push(a);
        two.push(b);
    }
    let mean = |v: &[Trained], f: fn(&Trained) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    let (val, train) = (mean(&e2e, |t| t.val), mean(&e2e, |t| t.train));
    s.record(
        9,
        "end-to-end synthetic training",
        val >= 0.60,
        format!("mean e2e val mIoU {val:.3} over 3 seeds (limit 0.60); train mIoU {train:.3}"),
    );
    let two_val = mean(&two, |t| t.val);
    s.soft(
        10,
        "ablation direction",
        val >= two_val,
        format!("mean val mIoU e2e {val:.3} vs two_stage {two_val:.3}"),
    );
}

fn bits(s: &Stored) -> Vec<u64> {
    match s {
        Stored::F32(t) => t.data().iter().map(|v| u64::from(v.to_bits())).collect(),
        Stored::F64(t) => t.data().iter().map(|v| v.to_bits()).collect(),
    }
}

fn archive_round_trip(s: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut a = Archive::new();
    for i in 0..1000 {
        let rank = rng.random_range(0..=3);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..5)).collect();
        let n: usize = shape.iter().product();
        let t = if rng.random_bool(0.5) {
            Stored::F64(Tensor::new(shape, (0..n).map(|_| f64::from_bits(rng.random())).collect()).unwrap())
        } else {
            Stored::F32(Tensor::new(shape, (0..n).map(|_| f32::from_bits(rng.random())).collect()).unwrap())
        };
        a.tensors.insert(format!("tensor.{i}"), t);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("round.sant");
    a.save(&path).unwrap();
    let b = Archive::load(&path).unwrap();
    let same = a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|((na, ta), (nb, tb))| {
            na == nb && ta.dtype() == tb.dtype() && ta.shape() == tb.shape() && bits(ta) == bits(tb)
        });
    s.record(
        11,
        "archive round trip",
        same,
        format!("{} tensors, bit-identical: {same}", b.tensors.len()),
    );
}

fn determinism(s: &mut Suite) {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::desk();
    cfg.train.dtype = san::tensor::DType::Float64;
    cfg.train.total_iters = 40;
    cfg.data.n_train = 40;
    cfg.data.n_val = 4;
    cfg.data.dir = tmp.path().join("data");
    cmd_synth(&cfg).unwrap();
    let curves: Vec<Vec<u64>> = ["a", "b"]
        .iter()
        .map(|run| {
            cmd_train(&cfg, &tmp.path().join(run), None)
                .unwrap()
                .iter()
                .map(|r| r.loss.to_bits())
                .collect()
        })
        .collect();
    s.record(
        12,
        "determinism",
        curves[0] == curves[1] && curves[0].len() == 40,
        format!(
            "two float64 runs of {} steps, identical loss curves: {}",
            curves[0].len(),
            curves[0] == curves[1]
        ),
    );
}

#[test]
fn acceptance() {
    let mut s = Suite::default();
    accounting(&mut s);
    hungarian(&mut s);
    gradients(&mut s);
    routing(&mut s);
    shadow_tokens(&mut s);
    fused_equivalence(&mut s);
    segmentation_oracle(&mut s);
    archive_round_trip(&mut s);
    determinism(&mut s);
    synthetic_training(&mut s);
    let failed: Vec<String> = s
        .rows
        .iter()
        .filter(|o| !o.pass && !o.soft)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    let hard = s.rows.iter().filter(|o| !o.soft).count();
    println!("{} of {hard} criteria passed", hard - failed.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
