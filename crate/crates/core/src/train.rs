//! Joint training of the fusion network and the segmentation head.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::fusion::LEVELS;
use crate::imaging::{resize_bilinear, resize_bilinear_plane, Mask, PlaneImage};
use crate::losses::{dice_loss, fusion_loss, total_loss, FusionLossBreakdown, LossWeights};
use crate::model::{infrared_plane, split_visible, Model, ModelConfig, PipelineInputs};
use crate::nn::seeded_rng;
use crate::optim::{AdamW, AdamWConfig};
use crate::ris::STAGES;
use crate::tensor::Tensor;

/// Everything a training run depends on. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr_seg: f64,
    pub lr_fuse: f64,
    pub weight_decay: f64,
    pub lambda_fuse: f64,
    pub lambda_film: f64,
    pub epsilon_dice: f64,
    pub two_class_dice: bool,
    pub steps: usize,
    pub batch: usize,
    /// Square training resolution; samples of another size are resized.
    pub size: usize,
    /// Stop the segmentation loss at the fused image.
    pub detach_fusion: bool,
    /// Language-gated fusion at the deep levels.
    pub use_text: bool,
    pub fusion_channels: [usize; LEVELS],
    pub seg_channels: [usize; STAGES],
    pub text_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let model = ModelConfig::default();
        let loss = LossWeights::default();
        TrainConfig {
            seed: 0,
            lr_seg: opt.lr_seg,
            lr_fuse: opt.lr_fuse,
            weight_decay: opt.weight_decay,
            lambda_fuse: loss.lambda_fuse,
            lambda_film: model.lambda_film,
            epsilon_dice: loss.epsilon_dice,
            two_class_dice: loss.two_class_dice,
            steps: 500,
            batch: 4,
            size: 64,
            detach_fusion: false,
            use_text: true,
            fusion_channels: model.fusion_channels,
            seg_channels: model.seg_channels,
            text_dim: model.text_dim,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            fusion_channels: self.fusion_channels,
            seg_channels: self.seg_channels,
            text_dim: self.text_dim,
            lambda_film: self.lambda_film,
            use_text: self.use_text,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_seg: self.lr_seg,
            lr_fuse: self.lr_fuse,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_fuse: self.lambda_fuse,
            epsilon_dice: self.epsilon_dice,
            two_class_dice: self.two_class_dice,
            ..LossWeights::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::invalid("steps and batch must be positive"));
        }
        if self.size < 16 || self.size % 8 != 0 {
            return Err(Error::invalid(format!(
                "size {} must be a multiple of 8 and at least 16",
                self.size
            )));
        }
        self.model_config().validate()?;
        self.optimizer().validate()?;
        self.loss_weights().validate()
    }

    /// Reads TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = if text.trim_start().starts_with('{') {
            serde_json::from_str(text)?
        } else {
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One sample converted to the tensors the pipeline consumes.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub y_vi: Tensor,
    pub y_ir: Tensor,
    pub cb: PlaneImage,
    pub cr: PlaneImage,
    pub text: Tensor,
    pub mask: Tensor,
}

fn resize_mask(mask: &Mask, size: usize) -> Result<Mask> {
    if (mask.height(), mask.width()) == (size, size) {
        return Ok(mask.clone());
    }
    let plane: Vec<f64> = mask.bits().iter().map(|&b| b as u8 as f64).collect();
    let out = resize_bilinear_plane(&plane, mask.height(), mask.width(), size, size);
    Mask::new(size, size, out.iter().map(|&v| v > 0.5).collect())
}

impl PreparedSample {
    pub fn new(sample: &Sample, size: usize) -> Result<Self> {
        let fit = |img: &PlaneImage| -> Result<PlaneImage> {
            if (img.height(), img.width()) == (size, size) {
                Ok(img.clone())
            } else {
                resize_bilinear(img, size, size)
            }
        };
        let (y_vi, cb, cr) = split_visible(&fit(&sample.vis)?)?;
        let y_ir = infrared_plane(&fit(&sample.ir)?)?;
        let mask = resize_mask(&sample.mask, size)?;
        if mask.is_empty() {
            return Err(Error::invalid(format!("sample {}: mask vanished after resizing", sample.id)));
        }
        Ok(PreparedSample {
            y_vi: y_vi.to_tensor(),
            y_ir: y_ir.to_tensor(),
            cb,
            cr,
            text: sample.embedding.to_tensor(),
            mask: mask.to_tensor(),
        })
    }
}

/// Losses of one optimizer step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_seg: f64,
    pub ssim_vi: f64,
    pub mse_vi: f64,
    pub mse_ir: f64,
    pub sobel_ir: f64,
    pub grad: f64,
    pub l_fuse: f64,
    pub l_total: f64,
}

impl StepRecord {
    fn accumulate(&mut self, seg: f64, fuse: &FusionLossBreakdown, total: f64, w: f64) {
        self.l_seg += w * seg;
        self.ssim_vi += w * fuse.ssim_vi;
        self.mse_vi += w * fuse.mse_vi;
        self.mse_ir += w * fuse.mse_ir;
        self.sobel_ir += w * fuse.sobel_ir;
        self.grad += w * fuse.grad;
        self.l_fuse += w * fuse.total;
        self.l_total += w * total;
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepRecord>,
    pub seconds: f64,
}

/// Accumulates the gradient of the batch-mean total loss for one batch and
/// returns the averaged loss record. Gradients are left in the store.
pub fn batch_gradients(
    model: &mut Model,
    batch: &[&PreparedSample],
    weights: &LossWeights,
    detach_fusion: bool,
    step: usize,
) -> Result<StepRecord> {
    let mut record = StepRecord {
        step,
        l_seg: 0.0,
        ssim_vi: 0.0,
        mse_vi: 0.0,
        mse_ir: 0.0,
        sobel_ir: 0.0,
        grad: 0.0,
        l_fuse: 0.0,
        l_total: 0.0,
    };
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        let mut g = Graph::new();
        let p = model.store().bind(&mut g)?;
        let inputs = PipelineInputs {
            y_vi: g.constant(s.y_vi.clone())?,
            y_ir: g.constant(s.y_ir.clone())?,
            cb: &s.cb,
            cr: &s.cr,
            text: g.constant(s.text.clone())?,
        };
        let out = model.pipeline(&mut g, &p, inputs, detach_fusion)?;
        let gt = g.constant(s.mask.clone())?;
        let seg = dice_loss(&mut g, out.mask.prob, gt, weights.epsilon_dice, weights.two_class_dice)?;
        let fuse = fusion_loss(&mut g, out.fusion.y_fuse, inputs.y_vi, inputs.y_ir, weights)?;
        let total = total_loss(&mut g, seg, fuse.total, weights.lambda_fuse)?;
        let scaled = g.scale(total, w)?;
        g.backward(scaled)?;
        model.store_mut().accumulate_grads(&g, &p);
        record.accumulate(g.value(seg).item(), &fuse.breakdown(&g), g.value(total).item(), w);
    }
    Ok(record)
}

/// Trains from scratch. Each record is also written as one JSON line to `log`.
pub fn train(config: &TrainConfig, samples: &[Sample], mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let start = Instant::now();
    let prepared = samples
        .iter()
        .map(|s| PreparedSample::new(s, config.size))
        .collect::<Result<Vec<_>>>()?;
    if let Some(s) = samples.iter().find(|s| s.embedding.dim() != config.text_dim) {
        return Err(Error::invalid(format!(
            "sample {} has embedding dimension {}, config expects {}",
            s.id,
            s.embedding.dim(),
            config.text_dim
        )));
    }

    let mut model = Model::new(config.model_config(), config.seed)?;
    let mut opt = AdamW::new(config.optimizer(), model.store())?;
    let weights = config.loss_weights();
    // Separate stream so data order does not depend on the parameter count.
    let mut rng = seeded_rng(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch {
            if order.is_empty() {
                order = (0..prepared.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&prepared[order.pop().unwrap()]);
        }
        model.store_mut().zero_grad();
        let record = batch_gradients(&mut model, &batch, &weights, config.detach_fusion, step)
            .map_err(|e| match e {
                Error::NonFinite { op } => Error::Diverged(format!("step {step}: non-finite value in {op}")),
                other => other,
            })?;
        if !record.l_total.is_finite() {
            return Err(Error::Diverged(format!("step {step}: total loss {}", record.l_total)));
        }
        opt.step(model.store_mut())?;
        if let Some(out) = log.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record)?;
            out.write_all(b"\n")?;
        }
        log::debug!("step {step}: seg {:.4} fuse {:.4}", record.l_seg, record.l_fuse);
        records.push(record);
    }
    Ok(TrainOutcome {
        model,
        log: records,
        seconds: start.elapsed().as_secs_f64(),
    })
}
