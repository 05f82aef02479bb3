use proptest::prelude::*;

use learngene::collective::{
    assign_pseudo_label, open_world_probability, ClassRegistry, PseudoLabel,
};
use learngene::datasets::ClassId;
use learngene::netgraph::{HeadSpec, LayerSpec, NetworkGraph};
use learngene::nn::ImageShape;
use learngene::seed::rng_for;
use rand::Rng;

fn random_net(seed: u64, depth: usize, width: usize, classes: usize) -> NetworkGraph {
    let mut rng = rng_for(seed, "net");
    let layers: Vec<LayerSpec> = (0..depth)
        .map(|i| LayerSpec::conv3(width, i == 0))
        .collect();
    NetworkGraph::new(
        ImageShape::new(3, 8, 8),
        &layers,
        &HeadSpec {
            hidden: vec![12],
            classes,
        },
        &mut rng,
    )
    .unwrap()
}

fn batch(seed: u64, n: usize) -> Vec<f32> {
    let mut rng = rng_for(seed, "batch");
    (0..n * 3 * 8 * 8)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn widening_any_layer_preserves_logits(seed in any::<u64>(), depth in 2usize..5, width in 2usize..6, pick in 0usize..8, jitter in 0.0f32..0.45) {
        let mut g = random_net(seed, depth, width, 4);
        let x = batch(seed ^ 1, 4);
        let before = g.forward(&x).unwrap();
        let layer = 1 + pick % depth;
        let mut rng = rng_for(seed, "widen");
        g.widen_jittered(layer, 1, jitter, &mut rng).unwrap();
        let after = g.forward(&x).unwrap();
        prop_assert!(max_abs_diff(&before, &after) <= 1e-5);
        prop_assert!(g.replay_check().is_ok());
    }

    #[test]
    fn deepening_keeps_shape_log_consistent(seed in any::<u64>(), depth in 2usize..5, pick in 1usize..8) {
        let mut g = random_net(seed, depth, 4, 3);
        let before = g.param_count();
        let layer = 2 + pick % (depth - 1);
        let added = g.net.convs[layer - 1].param_count();
        g.deepen(layer, 2).unwrap();
        prop_assert_eq!(g.depth(), depth + 1);
        prop_assert_eq!(g.param_count(), before + added);
        prop_assert_eq!(&g.net.convs[layer - 1], &g.net.convs[layer]);
        prop_assert!(g.replay_check().is_ok());
    }

    #[test]
    fn head_expansion_keeps_old_logits(seed in any::<u64>(), old in 2usize..6, new in 1usize..5) {
        let mut g = random_net(seed, 2, 3, old);
        let x = batch(seed ^ 2, 3);
        let before = g.forward(&x).unwrap();
        g.expand_head(new, 1).unwrap();
        let after = g.forward(&x).unwrap();
        let total = old + new;
        for i in 0..3 {
            prop_assert_eq!(&before[i * old..(i + 1) * old], &after[i * total..i * total + old]);
        }
    }

    #[test]
    fn open_probability_is_bounded(logits in proptest::collection::vec(-30.0f32..30.0, 2..12)) {
        let p = open_world_probability(&logits).unwrap();
        let n = logits.len() as f64;
        prop_assert!(p >= 0.0 && p <= 1.0 - 1.0 / n + 1e-9);
    }

    #[test]
    fn lowering_the_threshold_never_unflags(p in 0.0f64..1.0, hi in 0.0f64..1.0, lo_frac in 0.0f64..1.0, close in 0usize..10) {
        let lo = hi * lo_frac;
        let at_hi = assign_pseudo_label(p, hi, close);
        let at_lo = assign_pseudo_label(p, lo, close);
        if at_hi == PseudoLabel::Open {
            prop_assert_eq!(at_lo, PseudoLabel::Open);
        }
        match at_hi {
            PseudoLabel::Open => prop_assert!(p > hi),
            PseudoLabel::Known(c) => prop_assert!(c == close && p <= hi),
        }
    }

    #[test]
    fn registry_indices_are_stable(classes in proptest::collection::vec(0u32..40, 1..30)) {
        let mut reg = ClassRegistry::new(0.9587).unwrap();
        let mut seen = Vec::new();
        for c in classes {
            let before: Vec<usize> = seen.iter().map(|&s| reg.index_of(ClassId(s)).unwrap()).collect();
            if seen.contains(&c) {
                prop_assert!(reg.register(ClassId(c)).is_err());
            } else {
                prop_assert_eq!(reg.register(ClassId(c)).unwrap(), seen.len());
                seen.push(c);
            }
            let after: Vec<usize> = seen.iter().take(before.len()).map(|&s| reg.index_of(ClassId(s)).unwrap()).collect();
            prop_assert_eq!(before, after);
            prop_assert_eq!(reg.len(), seen.len());
        }
    }
}

#[test]
fn uniform_logits_for_two_to_ten_classes() {
    for n in 2..=10usize {
        let p = open_world_probability(&vec![0.7; n]).unwrap();
        assert!((p - (1.0 - 1.0 / n as f64)).abs() < 1e-12, "n={n}: {p}");
    }
}
