use risfuse::nn::{ParamGroup, ParamStore};
use risfuse::optim::{AdamW, AdamWConfig};
use risfuse::Tensor;

fn store_with(values: &[(ParamGroup, f64, f64)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (i, &(group, v, grad)) in values.iter().enumerate() {
        let id = s.add(format!("p{i}"), group, Tensor::scalar(v)).unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
    }
    s
}

fn value(s: &ParamStore, name: &str) -> f64 {
    s.by_name(name).unwrap().value.item()
}

#[test]
fn first_step_matches_hand_computation() {
    let cfg = AdamWConfig {
        lr_seg: 0.01,
        lr_fuse: 0.03,
        weight_decay: 0.1,
        ..Default::default()
    };
    let mut s = store_with(&[(ParamGroup::Segmentation, 0.5, 0.2), (ParamGroup::Fusion, -1.5, -0.04)]);
    let mut opt = AdamW::new(cfg, &s).unwrap();
    opt.step(&mut s).unwrap();
    // m_hat = g and v_hat = g^2 after one step, so the update is lr * g / (|g| + eps)
    let expect = |w: f64, g: f64, lr: f64| w * (1.0 - lr * 0.1) - lr * g / (g.abs() + 1e-8);
    assert!((value(&s, "p0") - expect(0.5, 0.2, 0.01)).abs() < 1e-12);
    assert!((value(&s, "p1") - expect(-1.5, -0.04, 0.03)).abs() < 1e-12);
    assert!((opt.first_moment(0)[0] - 0.1 * 0.2).abs() < 1e-15);
    assert!((opt.second_moment(0)[0] - 0.001 * 0.04).abs() < 1e-15);
}

#[test]
fn second_step_uses_bias_corrected_moments() {
    let cfg = AdamWConfig {
        lr_seg: 0.05,
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut s = store_with(&[(ParamGroup::Segmentation, 1.0, 0.3)]);
    let mut opt = AdamW::new(cfg, &s).unwrap();
    opt.step(&mut s).unwrap();
    s.iter_mut().next().unwrap().grad = Some(Tensor::scalar(-0.1));
    opt.step(&mut s).unwrap();
    let m = 0.9 * (0.1 * 0.3) + 0.1 * -0.1;
    let v = 0.999 * (0.001 * 0.09) + 0.001 * 0.01;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let w1 = 1.0 - 0.05 * 0.3 / (0.3 + 1e-8);
    let w2 = w1 - 0.05 * mh / (vh.sqrt() + 1e-8);
    assert!((value(&s, "p0") - w2).abs() < 1e-12);
    assert_eq!(opt.steps_taken(), 2);
}

#[test]
fn decay_only_shrinks_by_the_decoupled_factor() {
    let cfg = AdamWConfig {
        lr_seg: 0.1,
        lr_fuse: 0.2,
        weight_decay: 0.5,
        ..Default::default()
    };
    let mut s = store_with(&[(ParamGroup::Segmentation, 2.0, 0.0), (ParamGroup::Fusion, -3.0, 0.0)]);
    let mut opt = AdamW::new(cfg, &s).unwrap();
    opt.step(&mut s).unwrap();
    assert!((value(&s, "p0") - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    assert!((value(&s, "p1") + 3.0 * (1.0 - 0.2 * 0.5)).abs() < 1e-15);
}

#[test]
fn zero_gradient_and_zero_decay_leave_parameters_alone() {
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut s = store_with(&[(ParamGroup::Segmentation, 0.7, 0.0), (ParamGroup::Fusion, -0.2, 0.0)]);
    let before = s.clone();
    let mut opt = AdamW::new(cfg, &s).unwrap();
    for _ in 0..5 {
        opt.step(&mut s).unwrap();
    }
    assert_eq!(s, before);
}

#[test]
fn missing_gradients_and_bad_settings_are_rejected() {
    let mut s = store_with(&[(ParamGroup::Segmentation, 0.7, 0.1)]);
    let mut opt = AdamW::new(AdamWConfig::default(), &s).unwrap();
    s.zero_grad();
    assert!(opt.step(&mut s).is_err());
    let bad = AdamWConfig {
        beta1: 1.0,
        ..Default::default()
    };
    assert!(AdamW::new(bad, &s).is_err());
    let bad = AdamWConfig {
        lr_fuse: f64::NAN,
        ..Default::default()
    };
    assert!(AdamW::new(bad, &s).is_err());
}
