mod common;

use common::{in_memory_trainer, tiny_run_config};
use san::config::Split;
use san::synth::generate_synthetic;
use san::trainer::evaluate;

#[test]
fn permuting_the_class_bank_leaves_miou_unchanged() {
    let cfg = tiny_run_config(6);
    let mut tr = in_memory_trainer(&cfg);
    for _ in 0..5 {
        tr.step().unwrap();
    }
    let val = generate_synthetic(&cfg.data.synth(Split::Val)).unwrap();
    let (base, maps) = evaluate(&tr.model, &tr.bank, &val, &cfg.train, true).unwrap();
    let order = [2usize, 0, 3, 1];
    let mut new_of = [0u8; 4];
    for (i, &o) in order.iter().enumerate() {
        new_of[o] = i as u8;
    }
    let relabelled: Vec<_> = val
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.label.data.iter_mut().for_each(|l| *l = new_of[*l as usize]);
            s
        })
        .collect();
    let bank = tr.bank.permuted(&order).unwrap();
    let (permuted, maps2) = evaluate(&tr.model, &bank, &relabelled, &cfg.train, true).unwrap();
    assert_eq!(permuted.miou, base.miou);
    assert_eq!(permuted.pixel_accuracy, base.pixel_accuracy);
    for (a, b) in maps.iter().zip(&maps2) {
        assert!(a.iter().zip(b).all(|(&x, &y)| new_of[x] as usize == y));
    }
}
