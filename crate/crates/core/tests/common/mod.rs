//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::Rng as _;
use risfuse::autodiff::{Graph, Var};
use risfuse::fusion::{gated_blend, Lga};
use risfuse::losses::{dice_loss, fusion_loss, LossWeights};
use risfuse::nn::{seeded_rng, LayerBuilder, ParamGroup, ParamStore, Rng};
use risfuse::Tensor;

pub fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// An attention block with random weights and random (nonzero) biases.
pub fn build_lga(seed: u64, in_ch: usize, d: usize) -> (ParamStore, Lga) {
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let lga = {
        let mut b = LayerBuilder {
            store: &mut store,
            rng: &mut rng,
            group: ParamGroup::Fusion,
            prefix: "t".into(),
        };
        Lga::new(&mut b, "lga", in_ch, d).unwrap()
    };
    for p in store.iter_mut() {
        if p.name.ends_with("bias") {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.3..0.3);
            }
        }
    }
    (store, lga)
}

/// Largest deviation between the attention context and a per-pixel loop
/// over a random `4x4` map with three tokens.
pub fn lga_loop_deviation(seed: u64) -> f64 {
    let (c, d, n, h, w) = (3, 8, 3, 4, 4);
    let (store, lga) = build_lga(seed, c, d);
    let mut rng = seeded_rng(seed + 1);
    let feats = random(&mut rng, &[1, c, h, w], -1.0, 1.0);
    let text = random(&mut rng, &[n, d], -1.0, 1.0);

    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let (fv, tv) = (g.constant(feats.clone()).unwrap(), g.constant(text.clone()).unwrap());
    let out = lga.forward(&mut g, &p, fv, tv).unwrap();
    let ctx = g.value(out.ctx).clone();

    let get = |name: &str| store.by_name(name).unwrap().value.data().to_vec();
    let (wq, bq) = (get("t.lga.query.weight"), get("t.lga.query.bias"));
    let (wk, bk) = (get("t.lga.key.weight"), get("t.lga.key.bias"));
    let (wv, bv) = (get("t.lga.value.weight"), get("t.lga.value.bias"));
    let t = text.data();
    // linear weights are stored [in, out]
    let proj = |wm: &[f64], bm: &[f64], row: usize, col: usize| -> f64 {
        bm[col] + (0..d).map(|i| t[row * d + i] * wm[i * d + col]).sum::<f64>()
    };
    let keys: Vec<Vec<f64>> = (0..n).map(|r| (0..d).map(|j| proj(&wk, &bk, r, j)).collect()).collect();
    let vals: Vec<Vec<f64>> = (0..n).map(|r| (0..d).map(|j| proj(&wv, &bv, r, j)).collect()).collect();
    let mut worst = 0.0f64;
    for pix in 0..h * w {
        let q: Vec<f64> = (0..d)
            .map(|o| bq[o] + (0..c).map(|ci| wq[o * c + ci] * feats.data()[ci * h * w + pix]).sum::<f64>())
            .collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..d {
            let expect: f64 = (0..n).map(|r| e[r] / z * vals[r][j]).sum();
            worst = worst.max((ctx.data()[j * h * w + pix] - expect).abs());
        }
    }
    worst
}

/// Plain row-major plane used by the scalar oracles.
pub struct Plane<'a> {
    pub h: usize,
    pub w: usize,
    pub v: &'a [f64],
}

impl Plane<'_> {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.w + j]
    }
}

/// Mean SSIM over valid 11x11 windows, Gaussian sigma 1.5.
pub fn ssim_loop(x: &Plane, y: &Plane) -> f64 {
    let (k, sigma) = (11usize, 1.5f64);
    let g1: Vec<f64> = (0..k).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (oh, ow) = (x.h - k + 1, x.w - k + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wt = g1[a] * g1[b] / (s * s);
                    let (p, q) = (x.at(i + a, j + b), y.at(i + a, j + b));
                    mx += wt * p;
                    my += wt * q;
                    xx += wt * p * p;
                    yy += wt * q * q;
                    xy += wt * p * q;
                }
            }
            let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (oh * ow) as f64
}

fn reflect(k: isize, n: usize) -> usize {
    if k < 0 {
        (-k) as usize
    } else if k as usize >= n {
        2 * n - 2 - k as usize
    } else {
        k as usize
    }
}

/// `|Gx| + |Gy|` with 3x3 Sobel kernels and reflect padding.
pub fn sobel_loop(x: &Plane) -> Vec<f64> {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut out = vec![0.0; x.h * x.w];
    for i in 0..x.h {
        for j in 0..x.w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = x.at(reflect(i as isize + a as isize - 1, x.h), reflect(j as isize + b as isize - 1, x.w));
                    gx += kx[a][b] * v;
                    gy += kx[b][a] * v;
                }
            }
            out[i * x.w + j] = f64::abs(gx) + f64::abs(gy);
        }
    }
    out
}

/// Forward differences, zero on the last column / row.
pub fn diff_loop(x: &Plane) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.h * x.w];
    let mut dy = vec![0.0; x.h * x.w];
    for i in 0..x.h {
        for j in 0..x.w {
            if j + 1 < x.w {
                dx[i * x.w + j] = x.at(i, j + 1) - x.at(i, j);
            }
            if i + 1 < x.h {
                dy[i * x.w + j] = x.at(i + 1, j) - x.at(i, j);
            }
        }
    }
    (dx, dy)
}

/// The five-term luminance fusion objective written as plain loops.
pub fn fusion_loss_loop(f: &Plane, vi: &Plane, ir: &Plane, w: &LossWeights) -> f64 {
    let n = (f.h * f.w) as f64;
    let mut mse_vi = 0.0;
    let mut mse_ir = 0.0;
    for k in 0..f.v.len() {
        mse_vi += (f.v[k] - vi.v[k]).powi(2);
        mse_ir += (f.v[k] - ir.v[k]).powi(2);
    }
    let (sf, si) = (sobel_loop(f), sobel_loop(ir));
    let sobel: f64 = sf.iter().zip(&si).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let ((fx, fy), (vx, vy), (ix, iy)) = (diff_loop(f), diff_loop(vi), diff_loop(ir));
    let mut grad = 0.0;
    for k in 0..f.v.len() {
        grad += (fx[k] - vx[k].max(ix[k])).abs() + (fy[k] - vy[k].max(iy[k])).abs();
    }
    w.ssim_vi * (1.0 - ssim_loop(f, vi))
        + w.mse_vi * mse_vi / n
        + w.mse_ir * mse_ir / n
        + w.sobel_ir * sobel
        + w.grad * grad / n
}

pub fn fusion_loss_graph(f: &Tensor, vi: &Tensor, ir: &Tensor, w: &LossWeights) -> f64 {
    let mut g = Graph::new();
    let (a, b, c) = (
        g.constant(f.clone()).unwrap(),
        g.constant(vi.clone()).unwrap(),
        g.constant(ir.clone()).unwrap(),
    );
    let terms = fusion_loss(&mut g, a, b, c, w).unwrap();
    g.value(terms.total).item()
}

/// Deviation between the graph fusion loss and the loop oracle on a random triple.
pub fn fusion_loss_deviation(seed: u64, h: usize, w: usize) -> f64 {
    let mut rng = seeded_rng(seed);
    let ts: Vec<Tensor> = (0..3).map(|_| random(&mut rng, &[1, 1, h, w], 0.0, 1.0)).collect();
    let weights = LossWeights::default();
    let [f, vi, ir] = [0, 1, 2].map(|k| Plane { h, w, v: ts[k].data() });
    let expect = fusion_loss_loop(&f, &vi, &ir, &weights);
    (fusion_loss_graph(&ts[0], &ts[1], &ts[2], &weights) - expect).abs()
}

pub fn dice(p: &[f64], t: &[f64], eps: f64) -> f64 {
    let mut g = Graph::new();
    let n = p.len();
    let pv = g.constant(Tensor::new(vec![1, 1, 1, n], p.to_vec()).unwrap()).unwrap();
    let tv = g.constant(Tensor::new(vec![1, 1, 1, n], t.to_vec()).unwrap()).unwrap();
    let l = dice_loss(&mut g, pv, tv, eps, false).unwrap();
    g.value(l).item()
}

/// The three worked Dice examples, compared with `==`.
pub fn dice_examples_hold() -> bool {
    let gt = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
    dice(&gt, &gt, 1.0) == 0.0
        && dice(&gt, &gt, 0.01) == 0.0
        && dice(&[0.0; 4], &[1.0; 4], 1.0) == 1.0 - 1.0 / 5.0
        && dice(&[0.5; 4], &[1.0, 0.0, 0.0, 0.0], 1.0) == 0.5
}

pub fn blend(vi: &Tensor, ir: &Tensor, alpha: &Tensor, gamma: &Tensor, beta: &Tensor, lambda: f64) -> Tensor {
    let mut g = Graph::new();
    let v: Vec<Var> = [vi, ir, alpha, gamma, beta].iter().map(|t| g.constant((*t).clone()).unwrap()).collect();
    let out = gated_blend(&mut g, v[0], v[1], v[2], v[3], v[4], lambda).unwrap();
    g.value(out).clone()
}

/// `(0,0,0)` returns the visible features and `(1,*,0)` at `lambda = 0` the infrared ones.
pub fn degenerate_gates_hold(seed: u64) -> bool {
    let mut rng = seeded_rng(seed);
    let (vi, ir) = (random(&mut rng, &[1, 3, 4, 4], -2.0, 2.0), random(&mut rng, &[1, 3, 4, 4], -2.0, 2.0));
    let zeros = Tensor::zeros(&[1, 1, 4, 4]);
    let ones = Tensor::full(&[1, 1, 4, 4], 1.0);
    let gamma = random(&mut rng, &[1, 1, 4, 4], -1.0, 1.0);
    blend(&vi, &ir, &zeros, &zeros, &zeros, 0.1) == vi && blend(&vi, &ir, &ones, &gamma, &zeros, 0.0) == ir
}

/// With `gamma = beta = 0` the blend stays inside the elementwise input range.
pub fn blend_is_bounded(seed: u64) -> bool {
    let mut rng = seeded_rng(seed);
    let vi = random(&mut rng, &[1, 2, 4, 4], -3.0, 3.0);
    let ir = random(&mut rng, &[1, 2, 4, 4], -3.0, 3.0);
    let alpha = random(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
    let zeros = Tensor::zeros(&[1, 1, 4, 4]);
    let out = blend(&vi, &ir, &alpha, &zeros, &zeros, 0.1);
    out.data()
        .iter()
        .zip(vi.data())
        .zip(ir.data())
        .all(|((o, a), b)| *o >= a.min(*b) && *o <= a.max(*b))
}

/// Samples whose ground truth is the first 20 raster pixels of a 10x10 frame.
pub fn fixture_sample(k: usize) -> risfuse::data::Sample {
    use risfuse::imaging::{Mask, PlaneImage};
    risfuse::data::Sample::new(
        format!("s{k}"),
        PlaneImage::filled(1, 10, 10, 0.5).unwrap(),
        PlaneImage::filled(3, 10, 10, 0.5).unwrap(),
        Mask::from_fn(10, 10, |i, j| i * 10 + j < 20),
        "x",
        risfuse::text::toy_embed("x", 4).unwrap(),
    )
    .unwrap()
}

/// Sample `k` is predicted as the first `hits[k]` pixels of its ground truth.
pub struct Fixture {
    pub hits: Vec<usize>,
}

impl risfuse::metrics::MaskPredictor for Fixture {
    fn predict_prob(&self, s: &risfuse::data::Sample) -> risfuse::Result<Tensor> {
        let k: usize = s.id[1..].parse().unwrap();
        let n = self.hits[k];
        Ok(Tensor::from_fn(&[1, 1, 10, 10], |p| if p < n { 0.9 } else { 0.1 }))
    }
}

/// Largest fusion-group and segmentation-group gradient after backpropagating
/// the Dice loss alone through the full pipeline.
pub fn seg_only_grads(model: &mut risfuse::model::Model, detach: bool) -> (f64, f64) {
    use risfuse::imaging::PlaneImage;
    use risfuse::model::PipelineInputs;
    let s = 16;
    let mut rng = seeded_rng(13);
    let mut g = Graph::new();
    let p = model.store().bind(&mut g).unwrap();
    let cb = PlaneImage::new(1, s, s, vec![0.45; s * s]).unwrap();
    let cr = PlaneImage::new(1, s, s, vec![0.55; s * s]).unwrap();
    let text = risfuse::text::toy_embed("hot blob", model.config().text_dim).unwrap();
    let inputs = PipelineInputs {
        y_vi: g.constant(random(&mut rng, &[1, 1, s, s], 0.2, 0.8)).unwrap(),
        y_ir: g.constant(random(&mut rng, &[1, 1, s, s], 0.2, 0.8)).unwrap(),
        cb: &cb,
        cr: &cr,
        text: g.constant(text.to_tensor()).unwrap(),
    };
    let out = model.pipeline(&mut g, &p, inputs, detach).unwrap();
    let gt = g
        .constant(Tensor::from_fn(&[1, 1, s, s], |k| (k % s < 8 && k / s < 8) as u8 as f64))
        .unwrap();
    let loss = dice_loss(&mut g, out.mask.prob, gt, 1.0, false).unwrap();
    g.backward(loss).unwrap();
    model.store_mut().zero_grad();
    model.store_mut().accumulate_grads(&g, &p);
    (
        model.store().max_abs_grad(ParamGroup::Fusion),
        model.store().max_abs_grad(ParamGroup::Segmentation),
    )
}
