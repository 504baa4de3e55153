//! Referring segmentation head: a three-stage conv encoder whose two deeper
//! stages are modulated by language-guided attention, and a decoder that
//! sees the mean-pooled expression at every scale.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{check_divisible, Lga};
use crate::imaging::Mask;
use crate::nn::{Bound, Conv2d, Init, LayerBuilder};
use crate::tensor::Tensor;

pub const STAGES: usize = 3;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy)]
pub struct MaskLogits {
    /// `[1, 1, H, W]`.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub prob: Var,
}

/// Stage features are scaled by `1 + inject(ctx)`.
#[derive(Debug, Clone, Copy)]
struct TextInjection {
    lga: Lga,
    inject: Conv2d,
}

impl TextInjection {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, text: Var) -> Result<Var> {
        let ctx = self.lga.forward(g, p, x, text)?.ctx;
        let m = self.inject.forward(g, p, ctx)?;
        let gain = g.add_scalar(m, 1.0)?;
        g.mul(x, gain)
    }
}

#[derive(Debug, Clone)]
pub struct RisHead {
    stages: Vec<Conv2d>,
    injections: Vec<TextInjection>,
    merges: Vec<Conv2d>,
    out: Conv2d,
    text_dim: usize,
}

/// Two constant channels holding the column and row position in `[-1, 1]`.
fn coordinate_planes(h: usize, w: usize) -> Tensor {
    let span = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    Tensor::from_fn(&[1, 2, h, w], |k| {
        let (c, pix) = (k / (h * w), k % (h * w));
        if c == 0 {
            span(pix % w, w)
        } else {
            span(pix / w, h)
        }
    })
}

impl RisHead {
    pub fn new(b: &mut LayerBuilder<'_>, channels: [usize; STAGES], text_dim: usize) -> Result<Self> {
        let mut stages = Vec::with_capacity(STAGES);
        let mut injections = Vec::with_capacity(STAGES - 1);
        // RGB plus two coordinate planes
        let mut in_ch = 3 + 2;
        for (s, &ch) in channels.iter().enumerate() {
            let stride = if s == 0 { 1 } else { 2 };
            stages.push(b.conv(&format!("seg.stage{}", s + 1), in_ch, ch, 3, stride, Init::Kaiming)?);
            if s > 0 {
                injections.push(TextInjection {
                    lga: Lga::new(b, &format!("seg.lga{}", s + 1), ch, text_dim)?,
                    inject: b.conv(&format!("seg.inject{}", s + 1), text_dim, ch, 1, 1, Init::Kaiming)?,
                });
            }
            in_ch = ch;
        }
        let mut merges = Vec::with_capacity(STAGES - 1);
        for s in (0..STAGES - 1).rev() {
            merges.push(b.conv(
                &format!("seg.dec{}", s + 1),
                channels[s + 1] + channels[s] + text_dim,
                channels[s],
                3,
                1,
                Init::Kaiming,
            )?);
        }
        let out = b.conv("seg.out", channels[0], 1, 1, 1, Init::Kaiming)?;
        Ok(RisHead {
            stages,
            injections,
            merges,
            out,
            text_dim,
        })
    }

    /// `image` is the fused RGB `[1, 3, H, W]`; `text` the `[N, d]` token matrix.
    pub fn segment(&self, g: &mut Graph, p: &Bound, image: Var, text: Var) -> Result<MaskLogits> {
        let (h, w) = match *g.shape(image) {
            [1, 3, h, w] => (h, w),
            _ => return Err(Error::invalid(format!("segmentation expects [1, 3, H, W], got {:?}", g.shape(image)))),
        };
        check_divisible(h, w)?;
        let tokens = match *g.shape(text) {
            [n, d] if n > 0 && d == self.text_dim => n,
            _ => {
                return Err(Error::Shape {
                    op: "segment",
                    lhs: g.shape(text).to_vec(),
                    rhs: vec![0, self.text_dim],
                })
            }
        };

        let coords = g.constant(coordinate_planes(h, w))?;
        let mut x = g.concat(&[image, coords], 1)?;
        let mut skips = Vec::with_capacity(STAGES);
        for (s, stage) in self.stages.iter().enumerate() {
            x = stage.forward_relu(g, p, x)?;
            if s > 0 {
                x = self.injections[s - 1].forward(g, p, x, text)?;
            }
            skips.push(x);
        }

        let pool = g.constant(Tensor::full(&[1, tokens], 1.0 / tokens as f64))?;
        let pooled = g.matmul(pool, text)?;
        let pooled = g.reshape(pooled, &[1, self.text_dim, 1, 1])?;
        for (conv, s) in self.merges.iter().zip((0..STAGES - 1).rev()) {
            let up = g.upsample_nearest2d(x, 2)?;
            let skip = skips[s];
            let [_, _, sh, sw]: [usize; 4] = g.shape(skip).try_into().unwrap();
            let txt = g.broadcast_to(pooled, &[1, self.text_dim, sh, sw])?;
            let cat = g.concat(&[up, skip, txt], 1)?;
            x = conv.forward_relu(g, p, cat)?;
        }
        let logits = self.out.forward(g, p, x)?;
        let prob = g.sigmoid(logits)?;
        Ok(MaskLogits { logits, prob })
    }
}

/// Hard mask of `prob > threshold` from a `[1, 1, H, W]` probability map.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("threshold {threshold} outside (0, 1)")));
    }
    let (h, w) = match *prob.shape() {
        [1, 1, h, w] | [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::invalid(format!("cannot binarize shape {:?}", prob.shape()))),
    };
    Mask::new(h, w, prob.data().iter().map(|&v| v > threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_fixtures() {
        let hi = Tensor::full(&[1, 1, 2, 2], 0.9);
        assert!(binarize(&hi, 0.5).unwrap().bits().iter().all(|&b| b));
        let lo = Tensor::full(&[1, 1, 2, 2], 0.1);
        assert!(binarize(&lo, 0.5).unwrap().is_empty());
        let mixed = Tensor::new(vec![1, 1, 2, 3], vec![0.2, 0.5, 0.51, 0.99, 0.0, 0.7]).unwrap();
        assert_eq!(
            binarize(&mixed, 0.5).unwrap().bits(),
            &[false, false, true, true, false, true]
        );
        assert!(binarize(&mixed, 1.0).is_err());
    }

    #[test]
    fn coordinates_span_unit_range() {
        let c = coordinate_planes(4, 3);
        assert_eq!(&c.data()[..3], &[-1.0, 0.0, 1.0]);
        assert_eq!(c.data()[12], -1.0);
        assert_eq!(c.data()[12 + 11], 1.0);
    }
}
