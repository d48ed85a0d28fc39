//! Drives the core pieces by hand: synth data, bags, loss, model and Adam.

use proptest::prelude::*;
use tightbox_core::metrics::dice;
use tightbox_core::milloss::{total_loss, PreparedBags};
use tightbox_core::optim::adam_step;
use tightbox_core::segmodel::forward;
use tightbox_core::synth::{generate, DatasetSpec};
use tightbox_core::{AdamState, BagReduce, AngleSet, BagScheme, BoxLabel, CategoryBags, Graph, LossConfig, ModelKind, ModelParams, OptimConfig};

fn fit(scheme: &BagScheme) -> (f64, f64, f64) {
    let spec = DatasetSpec { n_train: 1, n_val: 0, height: 32, width: 32, radius: (6.0, 9.0), ..DatasetSpec::default() };
    let sample = generate(&spec).unwrap().remove(0);
    let (h, w) = (sample.image.height, sample.image.width);
    let bags = vec![PreparedBags::new(&CategoryBags::build(&sample.boxes, 1, h, w, scheme).unwrap(), w)];
    let cfg = LossConfig { bag_reduce: BagReduce::AlphaSoftmax, alpha: Some(6.0), ..LossConfig::default() };
    let opt = OptimConfig { lr: 0.05, ..OptimConfig::default() };
    let mut params = ModelParams::init(ModelKind::DirectLogit, 1, h, w, 0).unwrap();
    let mut state = AdamState::new(params.tensors());
    let mut losses = Vec::new();
    for _ in 0..300 {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let probs = forward(&mut g, &params, &vars, &sample.image).unwrap();
        let loss = total_loss(&mut g, probs, &bags, &cfg).unwrap().total;
        losses.push(g.value(loss).item());
        g.backward(loss).unwrap();
        let grads: Vec<Vec<f64>> = vars.iter().map(|v| g.grad(*v).unwrap().to_vec()).collect();
        adam_step(&mut params.tensors_mut(), &grads, &mut state, &opt).unwrap();
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let probs = forward(&mut g, &params, &vars, &sample.image).unwrap();
    let pred: Vec<bool> = g.value(probs).data().iter().map(|p| *p >= 0.5).collect();
    (losses[0], *losses.last().unwrap(), dice(&pred, &sample.masks[0]).unwrap())
}

#[test]
fn baseline_bags_fit_one_sample() {
    let (first, last, d) = fit(&BagScheme::Baseline);
    assert!(last < first * 0.5, "{first} -> {last}");
    assert!(d > 0.7, "dice {d}");
}

#[test]
fn angled_bags_fit_one_sample() {
    let (first, last, d) = fit(&BagScheme::Generalized { angles: AngleSet::new(-40.0, 40.0, 20.0).unwrap() });
    assert!(last < first * 0.5, "{first} -> {last}");
    assert!(d > 0.7, "dice {d}");
}

proptest! {
    #[test]
    fn positive_bags_stay_inside_their_box(
        x0 in 0usize..20, y0 in 0usize..20, bw in 1usize..12, bh in 1usize..12,
        lo in -80.0f64..0.0, span in 0.0f64..80.0, step in 5.0f64..40.0,
    ) {
        let b = BoxLabel::new(x0, y0, x0 + bw - 1, y0 + bh - 1, 1);
        let angles = AngleSet::new(lo, (lo + span).min(80.0), step).unwrap();
        let cb = CategoryBags::build(&[b], 1, 32, 32, &BagScheme::Generalized { angles }).unwrap();
        for bag in &cb.positives {
            prop_assert!(!bag.is_empty());
            prop_assert!(bag.pixels.iter().all(|p| b.contains(p.row, p.col)));
        }
        prop_assert_eq!(cb.negatives.len(), 32 * 32 - bw * bh);
    }
}
