//! The cascaded model: fusion network feeding the segmentation head, plus
//! the RFCK checkpoint container.
//!
//! ```text
//! "RFCK" | version u32 | fusion channels 4*u32 | seg channels 3*u32 | d u32 | lambda f32 | use_text u32
//!        | count u32 | count * (name_len u32 | name | group u8 | rank u32 | dims rank*u32 | f32 data)
//! ```
//! All integers and floats are little-endian. Parameters are stored as f32,
//! so a loaded model holds the saved values rounded to single precision and
//! saving it again reproduces the file byte for byte.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionForward, FusionNet, LEVELS};
use crate::imaging::{rgb_to_ycbcr, ycbcr_to_rgb_graph, PlaneImage};
use crate::nn::{seeded_rng, Bound, LayerBuilder, ParamGroup, ParamStore};
use crate::ris::{MaskLogits, RisHead, STAGES};
use crate::tensor::Tensor;
use crate::text::TextEmbedding;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub fusion_channels: [usize; LEVELS],
    pub seg_channels: [usize; STAGES],
    pub text_dim: usize,
    /// FiLM strength applied to gamma in the gated blend.
    pub lambda_film: f64,
    /// Language-gated fusion at the deep levels; additive everywhere when off.
    pub use_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            fusion_channels: [16, 32, 64, 128],
            seg_channels: [16, 32, 64],
            text_dim: crate::text::DEFAULT_DIM,
            lambda_film: 0.1,
            use_text: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_channels.contains(&0) || self.seg_channels.contains(&0) || self.text_dim == 0 {
            return Err(Error::invalid("channel widths and text_dim must be positive"));
        }
        if !(self.lambda_film.is_finite() && self.lambda_film >= 0.0) {
            return Err(Error::invalid("lambda_film must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Per-sample inputs of the pipeline, already on the graph.
#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub y_vi: Var,
    pub y_ir: Var,
    pub cb: &'a PlaneImage,
    pub cr: &'a PlaneImage,
    pub text: Var,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub fusion: FusionForward,
    /// Fused RGB `[1, 3, H, W]`, the segmentation input.
    pub rgb: Var,
    pub mask: MaskLogits,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    fusion: FusionNet,
    ris: RisHead,
}

/// Luminance and chroma planes of a visible image; gray input gets neutral chroma.
pub(crate) fn split_visible(vis: &PlaneImage) -> Result<(PlaneImage, PlaneImage, PlaneImage)> {
    match vis.channels() {
        3 => {
            let ycc = rgb_to_ycbcr(vis)?;
            Ok((ycc.y, ycc.cb, ycc.cr))
        }
        _ => {
            let neutral = PlaneImage::filled(1, vis.height(), vis.width(), 0.5)?;
            Ok((vis.clone(), neutral.clone(), neutral))
        }
    }
}

/// Single-plane infrared; three-channel input is reduced to luminance.
pub(crate) fn infrared_plane(ir: &PlaneImage) -> Result<PlaneImage> {
    if ir.channels() == 3 {
        log::warn!("infrared input has 3 channels; using its luminance");
    }
    crate::imaging::luminance(ir)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let fusion = {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Fusion,
                prefix: "fusion".into(),
            };
            FusionNet::new(
                &mut b,
                config.fusion_channels,
                config.text_dim,
                config.lambda_film,
                config.use_text,
            )?
        };
        let ris = {
            let mut b = LayerBuilder {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Segmentation,
                prefix: "ris".into(),
            };
            RisHead::new(&mut b, config.seg_channels, config.text_dim)?
        };
        Ok(Model {
            config,
            store,
            fusion,
            ris,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fusion(&self) -> &FusionNet {
        &self.fusion
    }

    pub fn ris(&self) -> &RisHead {
        &self.ris
    }

    /// Fusion then segmentation on one sample. With `detach_fusion` the
    /// segmentation loss cannot reach the fusion parameters.
    pub fn pipeline(&self, g: &mut Graph, p: &Bound, inputs: PipelineInputs<'_>, detach_fusion: bool) -> Result<PipelineOutput> {
        let text_for_fusion = self.fusion.uses_text().then_some(inputs.text);
        let fusion = self
            .fusion
            .forward(g, p, inputs.y_vi, inputs.y_ir, text_for_fusion)?;
        let rgb = ycbcr_to_rgb_graph(g, fusion.y_fuse, inputs.cb, inputs.cr)?;
        let seg_in = if detach_fusion { g.detach(rgb) } else { rgb };
        let mask = self.ris.segment(g, p, seg_in, inputs.text)?;
        Ok(PipelineOutput { fusion, rgb, mask })
    }

    fn check_text(&self, emb: &TextEmbedding) -> Result<()> {
        if emb.dim() != self.config.text_dim {
            return Err(Error::invalid(format!(
                "embedding dimension {} does not match the model's {}",
                emb.dim(),
                self.config.text_dim
            )));
        }
        Ok(())
    }

    /// Inference on one pair: fused RGB image, fused luminance, and mask probabilities.
    pub fn infer(&self, vis: &PlaneImage, ir: &PlaneImage, emb: &TextEmbedding) -> Result<Inference> {
        self.check_text(emb)?;
        if (vis.height(), vis.width()) != (ir.height(), ir.width()) {
            return Err(Error::Shape {
                op: "fuse_pair",
                lhs: vec![vis.height(), vis.width()],
                rhs: vec![ir.height(), ir.width()],
            });
        }
        let (y_vi, cb, cr) = split_visible(vis)?;
        let y_ir = infrared_plane(ir)?;
        let mut g = Graph::new();
        let p = self.store.bind_frozen(&mut g)?;
        let inputs = PipelineInputs {
            y_vi: g.constant(y_vi.to_tensor())?,
            y_ir: g.constant(y_ir.to_tensor())?,
            cb: &cb,
            cr: &cr,
            text: g.constant(emb.to_tensor())?,
        };
        let out = self.pipeline(&mut g, &p, inputs, false)?;
        Ok(Inference {
            fused: PlaneImage::from_tensor(g.value(out.rgb))?,
            y_fuse: PlaneImage::from_tensor(g.value(out.fusion.y_fuse))?,
            prob: g.value(out.mask.prob).clone(),
        })
    }

    /// Fused RGB image and luminance; chroma is taken from the visible input.
    pub fn fuse_pair(&self, vis: &PlaneImage, ir: &PlaneImage, emb: &TextEmbedding) -> Result<(PlaneImage, PlaneImage)> {
        let out = self.infer(vis, ir, emb)?;
        Ok((out.fused, out.y_fuse))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let c = &self.config;
        for &ch in c.fusion_channels.iter().chain(&c.seg_channels) {
            u32le(&mut out, ch);
        }
        u32le(&mut out, c.text_dim);
        out.extend_from_slice(&(c.lambda_film as f32).to_le_bytes());
        u32le(&mut out, c.use_text as usize);
        u32le(&mut out, self.store.len());
        for p in self.store.iter() {
            u32le(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.group.code());
            u32le(&mut out, p.value.shape().len());
            for &d in p.value.shape() {
                u32le(&mut out, d);
            }
            for &v in p.value.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("checkpoint: bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("checkpoint: unsupported version {version}")));
        }
        let mut config = ModelConfig::default();
        for ch in config.fusion_channels.iter_mut().chain(config.seg_channels.iter_mut()) {
            *ch = r.u32()? as usize;
        }
        config.text_dim = r.u32()? as usize;
        // The header holds f32; take its shortest decimal form so a value
        // written as 0.1 comes back as the f64 0.1 rather than 0.10000000149.
        config.lambda_film = r
            .f32()?
            .to_string()
            .parse()
            .map_err(|_| Error::format("checkpoint: bad lambda_film"))?;
        config.use_text = match r.u32()? {
            0 => false,
            1 => true,
            other => return Err(Error::format(format!("checkpoint: bad use_text flag {other}"))),
        };
        // Cheap sanity bound before building layers sized by the header.
        if config.fusion_channels.iter().chain(&config.seg_channels).any(|&c| c > 4096) || config.text_dim > 1 << 16 {
            return Err(Error::format("checkpoint: implausible layer width in header"));
        }
        let mut model = Model::new(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.store.len() {
            return Err(Error::format(format!(
                "checkpoint: {count} parameters, architecture expects {}",
                model.store.len()
            )));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format("checkpoint: parameter name is not UTF-8"))?
                .to_string();
            let group = ParamGroup::from_code(r.u8()?)?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let param = model.store.get_mut(id);
            if name != param.name || group != param.group || dims != param.value.shape() {
                return Err(Error::format(format!(
                    "checkpoint: record {name:?} {dims:?} does not match parameter {:?} {:?}",
                    param.name,
                    param.value.shape()
                )));
            }
            let raw = r.take(4 * param.value.len())?;
            for (v, c) in param.value.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            if !param.value.is_finite() {
                return Err(Error::format(format!("checkpoint: non-finite values in {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint: trailing bytes"));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    pub fused: PlaneImage,
    pub y_fuse: PlaneImage,
    /// Mask probabilities `[1, 1, H, W]`.
    pub prob: Tensor,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint: truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            fusion_channels: [2, 2, 3, 3],
            seg_channels: [2, 3, 3],
            text_dim: 4,
            lambda_film: 0.1,
            use_text: true,
        }
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let m = Model::new(tiny(), 7).unwrap();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let bytes = Model::new(tiny(), 7).unwrap().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Model::from_bytes(&magic).is_err());
    }

    #[test]
    fn groups_cover_both_stages() {
        let m = Model::new(tiny(), 1).unwrap();
        assert!(m.store().iter().any(|p| p.group == ParamGroup::Fusion));
        assert!(m
            .store()
            .iter()
            .filter(|p| p.name.starts_with("ris."))
            .all(|p| p.group == ParamGroup::Segmentation));
    }
}
