//! Gradient-check suites behind the `gradcheck` subcommand. Each case
//! builds a scalar from random inputs and compares analytic gradients with
//! central differences.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck, Axis2d, GradcheckOptions, GradcheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{gated_blend, LangGatedFusion, Lga};
use crate::imaging::{directional_gradients_graph, sobel_magnitude_graph, ycbcr_to_rgb_graph, PlaneImage};
use crate::losses::{dice_loss, fusion_loss, ssim, total_loss, LossWeights};
use crate::model::{Model, ModelConfig, PipelineInputs};
use crate::nn::{seeded_rng, Bound, LayerBuilder, ParamGroup, ParamStore, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckModule {
    All,
    Ops,
    Lga,
    Losses,
    Pipeline,
}

impl std::str::FromStr for CheckModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckModule::All),
            "ops" => Ok(CheckModule::Ops),
            "lga" => Ok(CheckModule::Lga),
            "losses" => Ok(CheckModule::Losses),
            "pipeline" => Ok(CheckModule::Pipeline),
            other => Err(Error::invalid(format!(
                "unknown gradcheck module {other:?} (all|ops|lga|losses|pipeline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseReport {
    pub module: CheckModule,
    pub case: String,
    pub report: GradcheckReport,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn random(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Contracts `out` with a fixed random weighting so each entry gets its own cotangent.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = seeded_rng(seed);
    let w = g.constant(random(&mut rng, g.shape(out), -1.0, 1.0))?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

type OpFn = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    op: OpFn,
}

fn case(name: &'static str, shapes: &[&[usize]], range: (f64, f64), op: OpFn) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        op,
    }
}

fn op_cases() -> Vec<Case> {
    let unit = (-1.0, 1.0);
    vec![
        case("add", &[&[1, 3, 2, 2], &[1, 1, 2, 2]], unit, |g, v| g.add(v[0], v[1])),
        case("sub", &[&[3, 1], &[1, 4]], unit, |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[2, 3, 2], &[3, 1]], unit, |g, v| g.mul(v[0], v[1])),
        case("div", &[&[2, 3], &[2, 3]], (0.5, 2.0), |g, v| g.div(v[0], v[1])),
        case("maximum", &[&[3, 3], &[3, 3]], unit, |g, v| g.maximum(v[0], v[1])),
        case("scale", &[&[4]], unit, |g, v| g.scale(v[0], -2.5)),
        case("add_scalar", &[&[4]], unit, |g, v| g.add_scalar(v[0], 0.3)),
        case("one_minus", &[&[4]], unit, |g, v| g.one_minus(v[0])),
        case("sigmoid", &[&[2, 4]], (-3.0, 3.0), |g, v| g.sigmoid(v[0])),
        case("relu", &[&[2, 4]], unit, |g, v| g.relu(v[0])),
        case("abs", &[&[2, 4]], unit, |g, v| g.abs(v[0])),
        case("square", &[&[2, 4]], unit, |g, v| g.square(v[0])),
        case("sqrt", &[&[2, 4]], (0.2, 2.0), |g, v| g.sqrt(v[0])),
        case("clamp", &[&[2, 4]], (-0.5, 1.5), |g, v| g.clamp(v[0], 0.0, 1.0)),
        case("broadcast_to", &[&[1, 3, 1, 1]], unit, |g, v| g.broadcast_to(v[0], &[1, 3, 2, 2])),
        case("sum", &[&[3, 2]], unit, |g, v| g.sum(v[0])),
        case("mean", &[&[3, 2]], unit, |g, v| g.mean(v[0])),
        case("softmax", &[&[3, 4]], (-2.0, 2.0), |g, v| g.softmax(v[0], 1)),
        case("matmul", &[&[3, 4], &[4, 2]], unit, |g, v| g.matmul(v[0], v[1])),
        case("reshape", &[&[2, 6]], unit, |g, v| g.reshape(v[0], &[3, 4])),
        case("transpose", &[&[2, 5]], unit, |g, v| g.transpose(v[0])),
        case("concat", &[&[1, 2, 3, 3], &[1, 1, 3, 3]], unit, |g, v| g.concat(&[v[0], v[1]], 1)),
        case("slice", &[&[1, 4, 2, 2]], unit, |g, v| g.slice(v[0], 1, 1, 2)),
        case("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], unit, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d_stride2", &[&[2, 2, 6, 6], &[2, 2, 3, 3]], unit, |g, v| {
            g.conv2d(v[0], v[1], None, 2, 1)
        }),
        case("conv2d_wide", &[&[1, 6, 4, 4], &[4, 6, 3, 3], &[4]], unit, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("avg_pool2d", &[&[1, 2, 4, 4]], unit, |g, v| g.avg_pool2d(v[0], 2)),
        case("upsample_nearest2d", &[&[1, 2, 2, 3]], unit, |g, v| g.upsample_nearest2d(v[0], 2)),
        case("pad_reflect", &[&[1, 1, 4, 5]], unit, |g, v| g.pad_reflect(v[0], 1)),
        case("diff_x", &[&[1, 1, 4, 5]], unit, |g, v| g.diff(v[0], Axis2d::X)),
        case("diff_y", &[&[1, 1, 4, 5]], unit, |g, v| g.diff(v[0], Axis2d::Y)),
        case("sobel_magnitude", &[&[1, 1, 5, 6]], (0.0, 1.0), |g, v| sobel_magnitude_graph(g, v[0])),
        case("directional_gradients", &[&[1, 1, 5, 6]], (0.0, 1.0), |g, v| {
            let (dx, dy) = directional_gradients_graph(g, v[0])?;
            let dy2 = g.scale(dy, 0.7)?;
            g.add(dx, dy2)
        }),
        case("ycbcr_to_rgb", &[&[1, 1, 4, 4]], (0.2, 0.8), |g, v| {
            let cb = PlaneImage::filled(1, 4, 4, 0.45)?;
            let cr = PlaneImage::filled(1, 4, 4, 0.55)?;
            ycbcr_to_rgb_graph(g, v[0], &cb, &cr)
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    vec![
        case("dice", &[&[1, 1, 4, 4]], (0.05, 0.95), |g, v| {
            let t = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |k| ((k * 7) % 3 == 0) as u8 as f64))?;
            dice_loss(g, v[0], t, 1.0, false)
        }),
        case("dice_two_class", &[&[1, 1, 4, 4]], (0.05, 0.95), |g, v| {
            let t = g.constant(Tensor::from_fn(&[1, 1, 4, 4], |k| ((k * 5) % 4 == 1) as u8 as f64))?;
            dice_loss(g, v[0], t, 1.0, true)
        }),
        case("ssim", &[&[1, 1, 12, 13], &[1, 1, 12, 13]], (0.0, 1.0), |g, v| ssim(g, v[0], v[1])),
        case("fusion_loss", &[&[1, 1, 12, 12], &[1, 1, 12, 12], &[1, 1, 12, 12]], (0.0, 1.0), |g, v| {
            Ok(fusion_loss(g, v[0], v[1], v[2], &LossWeights::default())?.total)
        }),
        case("total_loss", &[&[1], &[1]], (0.0, 1.0), |g, v| {
            let a = g.sum(v[0])?;
            let b = g.sum(v[1])?;
            total_loss(g, a, b, 0.7)
        }),
    ]
}

fn run_cases(module: CheckModule, cases: Vec<Case>, trials: u64) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    for c in cases {
        for trial in 0..trials {
            let mut rng = seeded_rng(1000 + trial);
            let inputs: Vec<(String, Tensor)> = c
                .shapes
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("in{i}"), random(&mut rng, s, c.range.0, c.range.1)))
                .collect();
            let op = c.op;
            let report = gradcheck(
                &inputs,
                |g, v| {
                    let y = op(g, v)?;
                    weighted_sum(g, y, 77 + trial)
                },
                GradcheckOptions::default(),
            )?;
            out.push(CaseReport {
                module,
                case: format!("{} #{trial}", c.name),
                report,
            });
        }
    }
    Ok(out)
}

/// Named parameter tensors of `store`, followed by `extra` inputs.
fn param_inputs(store: &ParamStore, extra: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    store
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .chain(extra)
        .collect()
}

/// Gives every zero-initialized parameter small random values so that all
/// paths carry gradient.
fn perturb_zeros(store: &mut ParamStore, rng: &mut Rng) {
    for p in store.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn lga_cases() -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    let (c, d, n, h, w) = (3, 4, 3, 4, 4);
    let opts = GradcheckOptions::default();
    for trial in 0..3u64 {
        let mut rng = seeded_rng(500 + trial);
        let mut store = ParamStore::new();
        let lga = {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Fusion,
                prefix: "check".into(),
            };
            Lga::new(&mut b, "lga", c, d)?
        };
        let extra = vec![
            ("features".to_string(), random(&mut rng, &[1, c, h, w], -1.0, 1.0)),
            ("text".to_string(), random(&mut rng, &[n, d], -1.0, 1.0)),
        ];
        let inputs = param_inputs(&store, extra);
        let np = store.len();
        let report = gradcheck(
            &inputs,
            |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let o = lga.forward(g, &p, v[np], v[np + 1])?;
                let a = weighted_sum(g, o.ctx, 11 + trial)?;
                let b = weighted_sum(g, o.attention, 13 + trial)?;
                g.add(a, b)
            },
            opts,
        )?;
        out.push(CaseReport {
            module: CheckModule::Lga,
            case: format!("lga_attention #{trial}"),
            report,
        });

        let mut store = ParamStore::new();
        let gate = {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Fusion,
                prefix: "check".into(),
            };
            LangGatedFusion::new(&mut b, "gate", c, d)?
        };
        perturb_zeros(&mut store, &mut rng);
        let extra = vec![
            ("vi".to_string(), random(&mut rng, &[1, c, h, w], -1.0, 1.0)),
            ("ir".to_string(), random(&mut rng, &[1, c, h, w], -1.0, 1.0)),
            ("text".to_string(), random(&mut rng, &[n, d], -1.0, 1.0)),
        ];
        let inputs = param_inputs(&store, extra);
        let np = store.len();
        let report = gradcheck(
            &inputs,
            |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let o = gate.forward(g, &p, v[np], v[np + 1], v[np + 2], 0.3)?;
                weighted_sum(g, o.fused, 17 + trial)
            },
            opts,
        )?;
        out.push(CaseReport {
            module: CheckModule::Lga,
            case: format!("lang_gated_fuse #{trial}"),
            report,
        });
    }
    let blend = case(
        "gated_blend",
        &[&[1, 2, 3, 3], &[1, 2, 3, 3], &[1, 1, 3, 3], &[1, 1, 3, 3], &[1, 1, 3, 3]],
        (0.05, 0.95),
        |g, v| gated_blend(g, v[0], v[1], v[2], v[3], v[4], 0.4),
    );
    out.extend(run_cases(CheckModule::Lga, vec![blend], 3)?);
    Ok(out)
}

/// Tiny end-to-end model: every parameter and the three inputs against the
/// joint loss. Large blocks are probed at a spread subset of entries.
fn pipeline_cases() -> Result<Vec<CaseReport>> {
    let size = 16;
    let config = ModelConfig {
        fusion_channels: [2, 2, 3, 4],
        seg_channels: [2, 3, 4],
        text_dim: 4,
        lambda_film: 0.2,
        use_text: true,
    };
    let mut out = Vec::new();
    // Detaching changes the gradient but not the loss value, so only the
    // joint graph is comparable with finite differences.
    for (trial, use_text) in [(0u64, true), (1, false)] {
        let mut model = Model::new(ModelConfig { use_text, ..config }, 900 + trial)?;
        let mut rng = seeded_rng(901 + trial);
        perturb_zeros(model.store_mut(), &mut rng);
        let cb = PlaneImage::from_clamped(1, size, size, (0..size * size).map(|_| rng.random_range(0.3..0.7)).collect())?;
        let cr = PlaneImage::from_clamped(1, size, size, (0..size * size).map(|_| rng.random_range(0.3..0.7)).collect())?;
        let mask = Tensor::from_fn(&[1, 1, size, size], |k| ((k / size) < 8 && (k % size) < 8) as u8 as f64);
        let extra = vec![
            ("y_vi".to_string(), random(&mut rng, &[1, 1, size, size], 0.2, 0.8)),
            ("y_ir".to_string(), random(&mut rng, &[1, 1, size, size], 0.2, 0.8)),
            ("text".to_string(), random(&mut rng, &[3, 4], -1.0, 1.0)),
        ];
        let inputs = param_inputs(model.store(), extra);
        let np = model.store().len();
        let weights = LossWeights::default();
        let report = gradcheck(
            &inputs,
            |g, v| {
                let p = Bound::from_vars(v[..np].to_vec());
                let o = model.pipeline(
                    g,
                    &p,
                    PipelineInputs {
                        y_vi: v[np],
                        y_ir: v[np + 1],
                        cb: &cb,
                        cr: &cr,
                        text: v[np + 2],
                    },
                    false,
                )?;
                let gt = g.constant(mask.clone())?;
                let seg = dice_loss(g, o.mask.prob, gt, weights.epsilon_dice, false)?;
                let fuse = fusion_loss(g, o.fusion.y_fuse, v[np], v[np + 1], &weights)?;
                total_loss(g, seg, fuse.total, 1.0)
            },
            GradcheckOptions {
                max_entries_per_block: 6,
                ..GradcheckOptions::default()
            },
        )?;
        out.push(CaseReport {
            module: CheckModule::Pipeline,
            case: format!("joint_loss{}", if use_text { "" } else { " (additive)" }),
            report,
        });
    }
    Ok(out)
}

/// Runs the requested suite; `All` runs every suite.
pub fn run_suite(module: CheckModule) -> Result<Vec<CaseReport>> {
    let mut out = Vec::new();
    if matches!(module, CheckModule::All | CheckModule::Ops) {
        out.extend(run_cases(CheckModule::Ops, op_cases(), 3)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Lga) {
        out.extend(lga_cases()?);
    }
    if matches!(module, CheckModule::All | CheckModule::Losses) {
        out.extend(run_cases(CheckModule::Losses, loss_cases(), 3)?);
    }
    if matches!(module, CheckModule::All | CheckModule::Pipeline) {
        out.extend(pipeline_cases()?);
    }
    Ok(out)
}
