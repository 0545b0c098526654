mod common;

use common::*;
use dicl_core::embedding::Embedding;
use dicl_core::losses::*;
use ndarray::Array2;
use proptest::prelude::*;
use rand::seq::SliceRandom;

const DIM: usize = 8;
const TAU: f64 = 0.05;

fn no_det() -> DetInputs {
    DetInputs {
        cls_logits: Array2::zeros((0, 2)),
        reg: Array2::zeros((0, 4)),
        labels: vec![],
        reg_targets: vec![],
    }
}

#[test]
fn losses_match_oracles_on_200_batches() {
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let mut rng = rng(seed);
        let (b, c) = random_batch(&mut rng, DIM, 5);
        let pairs = [
            (many_to_one_loss(&b).value, consistency_oracle(&b, false)),
            (occlusion_loss(&b).value, consistency_oracle(&b, true)),
            (triplet_loss(&b, 0.3, true).value, triplet_oracle(&b, 0.3, true)),
            (triplet_loss(&b, 0.3, false).value, triplet_oracle(&b, 0.3, false)),
            (oim_loss(&b, &c, TAU).value, oim_oracle(&b, &c, TAU)),
        ];
        for (got, want) in pairs {
            worst = worst.max((got - want).abs());
        }
    }
    assert!(worst < 1e-6, "max abs error {worst}");
}

#[test]
fn gradients_match_central_differences() {
    for seed in 0..20 {
        let mut rng = rng(1000 + seed);
        let (b, c) = random_batch(&mut rng, DIM, 4);
        let checks: Vec<(&str, Box<dyn Fn(&ContrastBatch) -> LossTerm>)> = vec![
            ("l_mto", Box::new(many_to_one_loss)),
            ("l_o", Box::new(occlusion_loss)),
            ("l_tri", Box::new(|x: &ContrastBatch| triplet_loss(x, 0.3, true))),
            ("l_oim", Box::new(|x: &ContrastBatch| oim_loss(x, &c, TAU))),
        ];
        for (name, f) in &checks {
            let t = f(&b);
            let err = fd_max_rel_error(&b, |x| f(x).value, &t.d_search, &t.d_instances);
            assert!(err < 1e-4, "{name} batch {seed}: relative error {err}");
        }
        let cfg = LossConfig::default();
        let l_c = |x: &ContrastBatch| {
            combined_loss(x, &c, &no_det(), &cfg, LossSwitches::default())
                .unwrap()
                .report
                .l_c
        };
        let full = combined_loss(&b, &c, &no_det(), &cfg, LossSwitches::default()).unwrap();
        let err = fd_max_rel_error(&b, l_c, &full.d_search, &full.d_instances);
        assert!(err < 1e-4, "l_c batch {seed}: relative error {err}");
    }
}

fn e(v: &[f64]) -> Embedding {
    let mut x = vec![0.0; DIM];
    x[..v.len()].copy_from_slice(v);
    Embedding::new(x)
}

fn entry(f: Embedding, gt: usize, masked: bool) -> SearchEntry {
    SearchEntry {
        embedding: f,
        gt_index: Some(gt),
        siamese: Some(gt),
        masked,
    }
}

#[test]
fn hand_evaluated_examples() {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let b = ContrastBatch {
        search: vec![entry(e(&[1.0]), 0, false)],
        instances: vec![e(&[h, h])],
        num_gt: 1,
        oim: vec![],
    };
    assert!((many_to_one_loss(&b).value - 0.29289321881).abs() < 1e-9);

    let b = ContrastBatch {
        search: vec![entry(e(&[1.0]), 0, true)],
        instances: vec![e(&[0.5, 0.75f64.sqrt()])],
        num_gt: 1,
        oim: vec![],
    };
    assert!((occlusion_loss(&b).value - 0.5).abs() < 1e-12);
    assert_eq!(many_to_one_loss(&b).flag, Some(LossFlag::NoPositives));

    let oim = |f: Embedding, cs: Vec<Embedding>| {
        let b = ContrastBatch {
            search: vec![],
            instances: vec![f],
            num_gt: 1,
            oim: vec![OimEntry {
                search: None,
                instance: 0,
                label: Some(0),
            }],
        };
        oim_loss(&b, &cs, TAU).value
    };
    let want = -(20f64.exp() / (20f64.exp() + 1.0)).ln();
    assert!((oim(e(&[1.0]), vec![e(&[1.0]), e(&[0.0, 1.0])]) - want).abs() < 1e-15);
    assert!((want - 2.06e-9).abs() < 1e-11);
    let far = oim(e(&[0.0, 1.0]), vec![e(&[1.0]), e(&[0.0, 1.0])]);
    assert!((far - 20.0).abs() < 1e-8, "{far}");
    assert_eq!(oim(e(&[0.3, 0.4]), vec![e(&[1.0])]), 0.0);

    let r = LossReport::from_components(0.2, 0.1, 0.3, 0.5, 0.4);
    assert!((r.l_c - 1.1).abs() < 1e-12 && (r.l_all - 1.5).abs() < 1e-12);
}

#[test]
fn triplet_examples_with_a_second_identity() {
    // Two identities with one prediction each; `pos` is identity 0's
    // instance embedding, `neg` both the prediction and instance of identity 1.
    let batch = |pos: Embedding, neg: Embedding| ContrastBatch {
        search: vec![
            SearchEntry {
                embedding: e(&[1.0]),
                gt_index: Some(0),
                siamese: None,
                masked: false,
            },
            SearchEntry {
                embedding: neg.clone(),
                gt_index: Some(1),
                siamese: None,
                masked: false,
            },
        ],
        instances: vec![pos, neg],
        num_gt: 2,
        oim: vec![],
    };
    let b = batch(e(&[1.0]), e(&[0.0, 1.0]));
    assert_eq!(triplet_loss(&b, 0.3, true).value, 0.0);
    assert_eq!(triplet_oracle(&b, 0.3, true), 0.0);
    // The first anchor sits at 0.3 + sqrt(2) ~ 1.7142; the second anchor has
    // a positive and a negative both at distance zero and hits the margin.
    let b = batch(e(&[0.0, 1.0]), e(&[1.0]));
    let want = (0.3 + 2f64.sqrt() + 0.3) / 2.0;
    assert!((triplet_loss(&b, 0.3, true).value - want).abs() < 1e-12);
    assert!((triplet_oracle(&b, 0.3, true) - want).abs() < 1e-12);
}

fn permuted(b: &ContrastBatch, seed: u64) -> ContrastBatch {
    let mut order: Vec<usize> = (0..b.search.len()).collect();
    order.shuffle(&mut rng(seed));
    let mut out = b.clone();
    out.search = order.iter().map(|&i| b.search[i].clone()).collect();
    for o in &mut out.oim {
        o.search = o.search.map(|s| order.iter().position(|&i| i == s).unwrap());
    }
    out
}

fn flipped(b: &ContrastBatch) -> ContrastBatch {
    let mut out = b.clone();
    for s in &mut out.search {
        s.masked = !s.masked;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn values_are_permutation_invariant(seed in any::<u64>(), perm in any::<u64>()) {
        let (b, c) = random_batch(&mut rng(seed), DIM, 3);
        let p = permuted(&b, perm);
        let cfg = LossConfig::default();
        let x = combined_loss(&b, &c, &no_det(), &cfg, LossSwitches::default()).unwrap().report;
        let y = combined_loss(&p, &c, &no_det(), &cfg, LossSwitches::default()).unwrap().report;
        for (u, v) in [(x.l_mto, y.l_mto), (x.l_o, y.l_o), (x.l_tri, y.l_tri), (x.l_oim, y.l_oim)] {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn occlusion_on_a_batch_is_many_to_one_on_its_flip(seed in any::<u64>()) {
        let (b, _) = random_batch(&mut rng(seed), DIM, 1);
        let f = flipped(&b);
        prop_assert!((occlusion_loss(&b).value - many_to_one_loss(&f).value).abs() < 1e-12);
        prop_assert!((many_to_one_loss(&b).value - occlusion_loss(&f).value).abs() < 1e-12);
    }

    #[test]
    fn values_stay_in_range(seed in any::<u64>(), margin in 0.0f64..1.0) {
        let (b, c) = random_batch(&mut rng(seed), DIM, 4);
        for v in [many_to_one_loss(&b).value, occlusion_loss(&b).value] {
            prop_assert!((0.0..=2.0).contains(&v));
        }
        let t = triplet_loss(&b, margin, true).value;
        prop_assert!(t >= 0.0 && t <= margin + 2.0);
        prop_assert!(oim_loss(&b, &c, TAU).value >= 0.0);
    }

    #[test]
    fn report_sums_its_components(seed in any::<u64>(), logits in prop::collection::vec(-3.0f64..3.0, 8)) {
        let (b, c) = random_batch(&mut rng(seed), DIM, 3);
        let det = DetInputs {
            cls_logits: Array2::from_shape_vec((4, 2), logits).unwrap(),
            reg: Array2::from_elem((4, 4), 0.1),
            labels: vec![true, false, true, false],
            reg_targets: vec![Some([0.0; 4]), None, Some([0.5, -0.2, 0.1, 2.0]), None],
        };
        let cfg = LossConfig::default();
        let r = combined_loss(&b, &c, &det, &cfg, LossSwitches::default()).unwrap().report;
        prop_assert!((r.l_c - (r.l_mto + r.l_o + r.l_tri + r.l_oim)).abs() < 1e-6);
        prop_assert!((r.l_all - (r.l_c + r.l_det)).abs() < 1e-6);
        prop_assert!((r.l_mto - many_to_one_loss(&b).value).abs() < 1e-6);
        prop_assert!((r.l_o - occlusion_loss(&b).value).abs() < 1e-6);
        prop_assert!((r.l_tri - triplet_loss(&b, cfg.margin, true).value).abs() < 1e-6);
        prop_assert!((r.l_oim - oim_loss(&b, &c, TAU).value).abs() < 1e-6);
        prop_assert!((r.l_det - detection_loss(&det).value).abs() < 1e-6);
    }
}
