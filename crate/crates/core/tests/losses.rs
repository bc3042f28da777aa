use approx::assert_abs_diff_eq;
use pccl_core::config::{LossToggles, LossWeights};
use pccl_core::losses::*;
use pccl_core::ops::softmax;
use pccl_core::{LogitMap, MaskMap, ProbMap, Shape};
use proptest::prelude::*;

fn constant(shape: Shape, per_class: &[f64]) -> ProbMap {
    let mut data = vec![0.0; shape.len()];
    for b in 0..shape.batch {
        for (c, &v) in per_class.iter().enumerate() {
            for y in 0..shape.height {
                for x in 0..shape.width {
                    data[shape.index(b, c, y, x)] = v;
                }
            }
        }
    }
    ProbMap::new(shape, data).unwrap()
}

fn probs_from(shape: Shape, raw: &[f64]) -> ProbMap {
    softmax(&LogitMap::new(shape, raw.to_vec()).unwrap())
}

const SHAPE: Shape = Shape { batch: 2, classes: 2, height: 4, width: 4 };

fn logits() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, SHAPE.len())
}

fn labels() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, SHAPE.pixels())
}

fn mask(labels: Vec<u8>) -> MaskMap {
    MaskMap::new(SHAPE.batch, SHAPE.height, SHAPE.width, SHAPE.classes, labels).unwrap()
}

#[test]
fn kl_closed_form_both_directions() {
    let s = Shape::new(1, 2, 3, 3);
    let a = constant(s, &[0.5, 0.5]);
    let b = constant(s, &[0.25, 0.75]);
    // 0.5 ln(0.5/0.25) + 0.5 ln(0.5/0.75) and its reverse, evaluated separately
    assert_abs_diff_eq!(kl_pixel_loss(&a, &b).unwrap(), 0.143_841_036_225_890_42, epsilon = 1e-12);
    assert_abs_diff_eq!(kl_pixel_loss(&b, &a).unwrap(), 0.130_812_035_941_136_97, epsilon = 1e-12);
}

#[test]
fn half_overlap_dice() {
    // two 4×4 squares overlapping in a 4×2 strip
    let (h, w) = (8, 8);
    let mut pred = vec![0u8; h * w];
    let mut gt = vec![0u8; h * w];
    for y in 0..4 {
        for x in 0..4 {
            gt[y * w + x] = 1;
            pred[y * w + x + 2] = 1;
        }
    }
    let pred = MaskMap::binary(h, w, pred).unwrap();
    let gt = MaskMap::binary(h, w, gt).unwrap();
    let per_class = dice_per_class(&pred.one_hot(), &gt).unwrap();
    assert_abs_diff_eq!(per_class[1], 0.5, epsilon = 1e-6);
}

#[test]
fn uniform_supervised_loss_is_sum_of_parts() {
    let s = Shape::new(1, 2, 2, 2);
    let p = constant(s, &[0.5, 0.5]);
    let y = MaskMap::binary(2, 2, vec![0, 1, 1, 0]).unwrap();
    let expected = core::f64::consts::LN_2 + dice_loss(&p, &y).unwrap();
    assert_abs_diff_eq!(supervised_loss(&p, &y).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn confident_disagreement_is_expensive() {
    let s = Shape::new(1, 2, 2, 2);
    let a = constant(s, &[1.0 - 1e-6, 1e-6]);
    let b = constant(s, &[1e-6, 1.0 - 1e-6]);
    let (s1, s2) = cross_supervision_losses(&a, &b).unwrap();
    assert!(s1 >= -(1e-6f64).ln() && s2 >= -(1e-6f64).ln());
    let (t1, t2) = cross_supervision_losses(&b, &a).unwrap();
    assert_eq!((s1, s2), (t2, t1));
    let agree = MaskMap::binary(2, 2, vec![0, 1, 1, 0]).unwrap().one_hot();
    let (z1, z2) = cross_supervision_losses(&agree, &agree).unwrap();
    assert!(z1 < 1e-4 && z2 < 1e-4);
}

#[test]
fn mac_zero_on_identical_disjoint_maps() {
    let m = MaskMap::binary(2, 2, vec![0, 1, 1, 0]).unwrap().one_hot();
    assert_abs_diff_eq!(mac_loss(&m, &m).unwrap(), 0.0, epsilon = 1e-7);
}

#[test]
fn doubling_beta_doubles_mac_contribution() {
    let c = LossComponents { sup1: 0.3, sup2: 0.4, semi1: 0.1, semi2: 0.2, con: 0.05, mac: 0.7 };
    let w = LossWeights::default();
    let w2 = LossWeights { beta: 2.0 * w.beta, ..w };
    let t = total_loss(&c, &w, &LossToggles::all());
    let t2 = total_loss(&c, &w2, &LossToggles::all());
    assert_abs_diff_eq!(t2.total - t.total, w.beta * c.mac, epsilon = 1e-12);
}

#[test]
fn zero_lambda_matches_semi_toggle_off() {
    let c = LossComponents { sup1: 0.3, sup2: 0.4, semi1: 0.1, semi2: 0.2, con: 0.05, mac: 0.7 };
    let w = LossWeights { lambda: 0.0, ..LossWeights::default() };
    let off = LossToggles { semi: false, ..LossToggles::all() };
    let a = total_loss(&c, &w, &LossToggles::all()).total;
    let b = total_loss(&c, &LossWeights::default(), &off).total;
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn losses_are_nonnegative_and_bounded(l1 in logits(), l2 in logits(), y in labels()) {
        let p1 = probs_from(SHAPE, &l1);
        let p2 = probs_from(SHAPE, &l2);
        let y = mask(y);
        prop_assert!(ce_loss(&p1, &y).unwrap() >= 0.0);
        let d = dice_loss(&p1, &y).unwrap();
        prop_assert!((0.0..=1.0 + 1e-9).contains(&d));
        let (s1, s2) = cross_supervision_losses(&p1, &p2).unwrap();
        prop_assert!(s1 >= 0.0 && s2 >= 0.0);
        prop_assert!(kl_pixel_loss(&p1, &p2).unwrap() >= -1e-12);
        let mig = mig_loss(&p1, &p2).unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&mig));
        prop_assert!((mig - mig_loss(&p2, &p1).unwrap()).abs() < 1e-12);
        let mac = mac_loss(&p1, &p2).unwrap();
        prop_assert!((mac - kl_pixel_loss(&p1, &p2).unwrap() - mig).abs() < 1e-12);
        let a = p2.slice_batch(0, 1).unwrap();
        let b = p2.slice_batch(1, 1).unwrap();
        let student = p1.slice_batch(0, 1).unwrap();
        let con = interpolation_consistency_loss(&student, &a, &b, 0.5).unwrap();
        prop_assert!(con >= 0.0);
        prop_assert!((con - interpolation_consistency_loss(&student, &b, &a, 0.5).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn supervised_decomposes(l in logits(), y in labels()) {
        let p = probs_from(SHAPE, &l);
        let y = mask(y);
        let sum = ce_loss(&p, &y).unwrap() + dice_loss(&p, &y).unwrap();
        prop_assert!((supervised_loss(&p, &y).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn kl_vanishes_only_on_equal_inputs(l1 in logits(), l2 in logits()) {
        let p1 = probs_from(SHAPE, &l1);
        let p2 = probs_from(SHAPE, &l2);
        prop_assert!(kl_pixel_loss(&p1, &p1).unwrap().abs() < 1e-12);
        let max_diff = p1.as_slice().iter().zip(p2.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if max_diff > 1e-3 {
            prop_assert!(kl_pixel_loss(&p1, &p2).unwrap() > 0.0);
        }
    }

    #[test]
    fn total_is_weighted_sum(
        c in prop::array::uniform6(0.0f64..10.0),
        w in prop::array::uniform3(0.0f64..20.0),
        t in prop::array::uniform3(any::<bool>()),
    ) {
        let comps = LossComponents { sup1: c[0], sup2: c[1], semi1: c[2], semi2: c[3], con: c[4], mac: c[5] };
        let weights = LossWeights { lambda: w[0], tau: w[1], beta: w[2] };
        let toggles = LossToggles { semi: t[0], con: t[1], mac: t[2] };
        let bundle = total_loss(&comps, &weights, &toggles);
        prop_assert!((bundle.total - bundle.weighted_sum(&weights)).abs() < 1e-6);
        if !t[2] { prop_assert_eq!(bundle.mac, 0.0); }
        if !t[1] { prop_assert_eq!(bundle.con, 0.0); }
        if !t[0] { prop_assert_eq!(bundle.semi1 + bundle.semi2, 0.0); }
    }
}
