//! Every loss and module op against its plain-loop oracle and against
//! central finite differences, plus hand-evaluated anchor values.

mod common;

use common::*;
use magnet::autograd::{Graph, ParamStore, Tensor};
use magnet::cam::pyramid_pool;
use magnet::encoders::FeatureMap;
use magnet::losses::{bce_loss, cal_p2p, cal_p2t, dice_loss, total_loss, CalForm, LossComponents, LossWeights, PixelPartition};
use magnet::maskgrounding::grounding_loss;
use magnet::nn::Linear;

fn assert_op(c: OpCheck) {
    eprintln!("{c}");
    assert!(c.passes(), "{c}");
}

#[test]
fn dice_matches_oracle_and_gradients() {
    assert_op(check_dice());
}

#[test]
fn bce_matches_oracle_and_gradients() {
    assert_op(check_bce());
}

#[test]
fn cal_p2p_matches_oracle_and_gradients() {
    assert_op(check_cal_p2p());
}

#[test]
fn cal_p2t_matches_oracle_and_gradients() {
    assert_op(check_cal_p2t());
}

#[test]
fn grounding_loss_matches_oracle_and_gradients() {
    assert_op(check_grounding_loss());
}

#[test]
fn pyramid_pool_matches_oracle_and_gradients() {
    assert_op(check_pyramid_pool());
}

#[test]
fn xmha_matches_oracle_and_gradients() {
    assert_op(check_xmha());
}

#[test]
fn cam_forward_matches_oracle_and_gradients() {
    assert_op(check_cam_forward());
}

#[test]
fn encode_mask_matches_oracle_and_gradients() {
    assert_op(check_encode_mask());
}

#[test]
fn predict_masked_matches_oracle_and_gradients() {
    assert_op(check_predict_masked());
}

fn scalar(f: impl Fn(&mut Graph<'_, f64>) -> magnet::Result<magnet::autograd::Var>) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::with_params(&store);
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

#[test]
fn pooling_sixteen_values_by_two() {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::with_params(&store);
    let var = g.input(Tensor::from_fn(16, 1, |r, _| (r + 1) as f64));
    let p = FeatureMap {
        var,
        batch: 1,
        h: 4,
        w: 4,
        c: 1,
    };
    let out = pyramid_pool(&mut g, &p, 2).unwrap();
    assert_eq!(g.value(out.var).data(), &[3.5, 5.5, 11.5, 13.5]);
    assert!(pyramid_pool(&mut g, &p, 5).is_err());
}

#[test]
fn dice_half_prediction_on_full_target() {
    let gt = Tensor::full(64, 1, 1.0);
    let v = scalar(|g| {
        let p = g.input(Tensor::full(64, 1, 0.5));
        dice_loss(g, p, &gt)
    });
    // 1 - (64 + eps) / (96 + eps)
    assert!((v - 1.0 / 3.0).abs() < 1e-8, "{v}");
    let zero = scalar(|g| {
        let p = g.input(Tensor::zeros(64, 1));
        dice_loss(g, p, &gt)
    });
    assert!((zero - 1.0).abs() < 1e-7);
    let perfect = scalar(|g| {
        let p = g.input(gt.clone());
        dice_loss(g, p, &gt)
    });
    assert!(perfect <= 1e-6);
}

#[test]
fn bce_anchor_values() {
    let gt = Tensor::from_fn(9, 1, |r, _| (r % 2) as f64);
    let v = scalar(|g| {
        let l = g.input(Tensor::zeros(9, 1));
        bce_loss(g, l, &gt)
    });
    assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    let sat = scalar(|g| {
        let l = g.input(gt.map(|y| if y > 0.5 { 30.0 } else { -30.0 }));
        bce_loss(g, l, &gt)
    });
    assert!(sat < 1e-9);
}

fn orthogonal_pair() -> Tensor<f64> {
    Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])
}

#[test]
fn cal_orthogonal_pair_log_form() {
    let v = scalar(|g| {
        let x = g.input(orthogonal_pair());
        let part = PixelPartition::new(g, x, &[true, false])?;
        cal_p2p(g, &part, 1.0, CalForm::Log)
    });
    let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((v - expected).abs() < 1e-9, "{v} vs {expected}");
    assert!((expected - 0.62652).abs() < 1e-5);
}

#[test]
fn cal_single_positive_without_negatives_is_zero() {
    let v = scalar(|g| {
        let x = g.input(Tensor::from_rows(&[vec![0.3, -0.2]]));
        let part = PixelPartition::new(g, x, &[true])?;
        cal_p2p(g, &part, 0.1, CalForm::Log)
    });
    assert_eq!(v, 0.0);
}

#[test]
fn cal_p2t_text_equal_to_positive() {
    // identity projection, the mean word equals the positive row
    let mut store = ParamStore::new();
    store.insert("proj.w", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    store.insert("proj.b", Tensor::zeros(1, 2));
    let proj = Linear::new("proj", 2, 2);
    let mut g = Graph::with_params(&store);
    let x = g.input(orthogonal_pair());
    let words = g.input(Tensor::from_rows(&[vec![2.0, 0.0]]));
    let part = PixelPartition::new(&mut g, x, &[true, false]).unwrap();
    let v = cal_p2t(&mut g, &part, words, &proj, 1.0, CalForm::Log).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((g.value(v).item() - expected).abs() < 1e-12);
    assert!((expected - 0.31326).abs() < 1e-5);

    let x = g.input(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let part = PixelPartition::new(&mut g, x, &[true]).unwrap();
    let v = cal_p2t(&mut g, &part, words, &proj, 1.0, CalForm::Log).unwrap();
    assert_eq!(g.value(v).item(), 0.0);
}

#[test]
fn grounding_loss_uniform_and_peaked() {
    for v in [2usize, 7, 32] {
        let loss = scalar(|g| {
            let l = g.input(Tensor::zeros(3, v));
            grounding_loss(g, l, &[0, 1, v - 1])
        });
        assert!((loss - (v as f64).ln()).abs() < 1e-12);
    }
    let peaked = scalar(|g| {
        let l = g.input(Tensor::from_fn(2, 5, |r, c| if c == r + 1 { 20.0 } else { 0.0 }));
        grounding_loss(g, l, &[1, 2])
    });
    assert!(peaked < 1e-4);
    let logits = vec![vec![0.2, -1.0, 0.5], vec![1.5, 0.0, -0.3]];
    let direct = scalar(|g| {
        let l = g.input(Tensor::from_rows(&logits));
        grounding_loss(g, l, &[2, 0])
    });
    assert!((direct - cross_entropy(&logits, &[2, 0])).abs() < 1e-14);
}

#[test]
fn total_loss_with_unit_components() {
    let b = total_loss(
        LossComponents {
            bce: 1.0,
            dice: 1.0,
            cal: 1.0,
            grounding: 1.0,
        },
        LossWeights::default(),
    )
    .unwrap();
    assert_eq!(b.total, 5.5);
}

#[test]
fn bilinear_oracle_is_a_partition_of_unity() {
    let x: M = (0..9).map(|_| vec![1.0]).collect();
    for v in bilinear(&x, 1, 3, 3, 7, 5) {
        assert!((v[0] - 1.0).abs() < 1e-15);
    }
}
