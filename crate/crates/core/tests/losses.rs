mod common;

use common::{dice, dice_examples_hold, fusion_loss_deviation, fusion_loss_graph, random, ssim_loop, Plane};
use risfuse::autodiff::Graph;
use risfuse::losses::{fusion_loss, ssim, total_loss, LossWeights};
use risfuse::nn::seeded_rng;
use risfuse::Tensor;

fn ssim_of(x: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()).unwrap(), g.constant(y.clone()).unwrap());
    let s = ssim(&mut g, a, b).unwrap();
    g.value(s).item()
}

fn checkerboard(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[1, 1, h, w], |k| ((k / w + k % w) % 2) as f64)
}

#[test]
fn fusion_loss_matches_scalar_loop() {
    for (seed, h, w) in [(1, 16, 16), (2, 12, 19), (3, 24, 13)] {
        let dev = fusion_loss_deviation(seed, h, w);
        assert!(dev < 1e-6, "{h}x{w}: deviation {dev:e}");
    }
}

#[test]
fn fusion_loss_hand_fixtures() {
    let w = LossWeights::default();
    let mut rng = seeded_rng(5);
    let x = random(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    assert!(fusion_loss_graph(&x, &x, &x, &w).abs() < 1e-12);

    let (c1, c2) = (0.7, 0.2);
    let vi = Tensor::full(&[1, 1, 16, 16], c1);
    let ir = Tensor::full(&[1, 1, 16, 16], c2);
    let mut g = Graph::new();
    let (f, v, i) = (
        g.constant(vi.clone()).unwrap(),
        g.constant(vi.clone()).unwrap(),
        g.constant(ir).unwrap(),
    );
    let terms = fusion_loss(&mut g, f, v, i, &w).unwrap().breakdown(&g);
    assert!((terms.total - 2.0 * (c1 - c2) * (c1 - c2)).abs() < 1e-12);
    assert_eq!((terms.mse_vi, terms.sobel_ir, terms.grad), (0.0, 0.0, 0.0));
    assert!(terms.ssim_vi.abs() < 1e-12);
}

#[test]
fn fusion_loss_terms_are_non_negative() {
    for seed in 0..20 {
        let mut rng = seeded_rng(100 + seed);
        let t: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 1, 12, 12], 0.0, 1.0)).collect();
        let mut g = Graph::new();
        let v: Vec<_> = t.iter().map(|x| g.constant(x.clone()).unwrap()).collect();
        let b = fusion_loss(&mut g, v[0], v[1], v[2], &LossWeights::default()).unwrap().breakdown(&g);
        for term in [b.ssim_vi, b.mse_vi, b.mse_ir, b.sobel_ir, b.grad] {
            assert!(term >= 0.0);
        }
        let sum = b.ssim_vi + b.mse_vi + b.mse_ir + b.sobel_ir + b.grad;
        assert!((b.total - sum).abs() < 1e-12);
    }
}

#[test]
fn gradient_term_vanishes_when_fused_carries_the_max_gradient() {
    // Both sources are ramps; the steeper one dominates everywhere, so fusing
    // to it leaves no gradient residual.
    let (h, w) = (12, 12);
    let vi = Tensor::from_fn(&[1, 1, h, w], |k| 0.02 * (k % w) as f64 + 0.01 * (k / w) as f64);
    let ir = Tensor::from_fn(&[1, 1, h, w], |k| 0.05 * (k % w) as f64 + 0.03 * (k / w) as f64);
    let mut g = Graph::new();
    let (f, v, i) = (
        g.constant(ir.clone()).unwrap(),
        g.constant(vi).unwrap(),
        g.constant(ir).unwrap(),
    );
    let b = fusion_loss(&mut g, f, v, i, &LossWeights::default()).unwrap().breakdown(&g);
    assert_eq!(b.grad, 0.0);
    assert_eq!(b.sobel_ir, 0.0);
}

#[test]
fn dice_worked_examples() {
    assert!(dice_examples_hold());
    // soft predictions stay inside [0, 1)
    let mut rng = seeded_rng(6);
    for _ in 0..100 {
        let p = random(&mut rng, &[16], 0.0, 1.0);
        let t: Vec<f64> = random(&mut rng, &[16], 0.0, 1.0).data().iter().map(|v| (*v > 0.5) as u8 as f64).collect();
        let l = dice(p.data(), &t, 1.0);
        assert!((0.0..1.0).contains(&l), "{l}");
    }
}

#[test]
fn ssim_properties() {
    let mut rng = seeded_rng(7);
    let x = random(&mut rng, &[1, 1, 20, 18], 0.0, 1.0);
    let y = random(&mut rng, &[1, 1, 20, 18], 0.0, 1.0);
    assert!((ssim_of(&x, &x) - 1.0).abs() < 1e-9);
    assert!((ssim_of(&x, &y) - ssim_of(&y, &x)).abs() < 1e-9);
    let s = ssim_of(&x, &y);
    assert!((-1.0..=1.0).contains(&s));

    let board = checkerboard(16, 16);
    let inverse = board.map(|v| 1.0 - v);
    assert!(ssim_of(&board, &inverse) < 0.1);

    let mut g = Graph::new();
    let small = g.constant(Tensor::zeros(&[1, 1, 10, 16])).unwrap();
    assert!(ssim(&mut g, small, small).is_err());
}

#[test]
fn ssim_matches_reference_loop() {
    for (seed, h, w) in [(8, 11, 11), (9, 16, 21), (10, 19, 14)] {
        let mut rng = seeded_rng(seed);
        let x = random(&mut rng, &[1, 1, h, w], 0.0, 1.0);
        let y = x.map(|v| (0.6 * v + 0.2 + 0.1 * (v * 13.0).sin()).clamp(0.0, 1.0));
        let expect = ssim_loop(&Plane { h, w, v: x.data() }, &Plane { h, w, v: y.data() });
        assert!((ssim_of(&x, &y) - expect).abs() < 1e-9);
    }
    let board = checkerboard(16, 16);
    let inverse = board.map(|v| 1.0 - v);
    let p = |t: &Tensor| ssim_loop(&Plane { h: 16, w: 16, v: t.data() }, &Plane { h: 16, w: 16, v: t.data() });
    assert!((p(&board) - 1.0).abs() < 1e-9);
    let reference = ssim_loop(&Plane { h: 16, w: 16, v: board.data() }, &Plane { h: 16, w: 16, v: inverse.data() });
    assert!(reference < 0.1);
}

#[test]
fn total_loss_routes_gradient_to_both_terms() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::scalar(0.4)).unwrap();
    let b = g.leaf(Tensor::scalar(0.9)).unwrap();
    let t = total_loss(&mut g, a, b, 0.25).unwrap();
    assert!((g.value(t).item() - (0.4 + 0.25 * 0.9)).abs() < 1e-15);
    g.backward(t).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[1.0]);
    assert_eq!(g.grad(b).unwrap(), &[0.25]);
}
