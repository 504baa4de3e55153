//! Fusion stage: dual-stream pyramid encoder, additive fusion at the two
//! shallow levels, language-gated fusion at the two deep levels, and a
//! U-Net style decoder that produces the fused luminance.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, Init, LayerBuilder, Linear};

pub const LEVELS: usize = 4;
/// Levels below this index are fused by addition.
pub const FIRST_GATED_LEVEL: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Visible,
    Infrared,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Visible => "vi",
            Stream::Infrared => "ir",
        }
    }
}

/// Four feature maps, finest first; level `l` has spatial size `H / 2^l`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub levels: [Var; LEVELS],
}

/// Language-guided cross attention: pixels query the text tokens.
#[derive(Debug, Clone, Copy)]
pub struct Lga {
    query: Conv2d,
    key: Linear,
    value: Linear,
    dim: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LgaOutput {
    /// Text-conditioned context, `[1, d, H, W]`.
    pub ctx: Var,
    /// Attention of every pixel over the tokens, `[H*W, N]`.
    pub attention: Var,
}

impl Lga {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, in_ch: usize, text_dim: usize) -> Result<Self> {
        Ok(Lga {
            query: b.conv(&format!("{name}.query"), in_ch, text_dim, 1, 1, Init::Kaiming)?,
            key: b.linear(&format!("{name}.key"), text_dim, text_dim)?,
            value: b.linear(&format!("{name}.value"), text_dim, text_dim)?,
            dim: text_dim,
        })
    }

    pub fn query_conv(&self) -> Conv2d {
        self.query
    }

    pub fn key_proj(&self) -> Linear {
        self.key
    }

    pub fn value_proj(&self) -> Linear {
        self.value
    }

    /// `features` is `[1, C, H, W]`, `text` is `[N, d]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: Var, text: Var) -> Result<LgaOutput> {
        let (h, w) = match *g.shape(features) {
            [1, _, h, w] => (h, w),
            _ => return Err(Error::invalid(format!("LGA expects one [1, C, H, W] map, got {:?}", g.shape(features)))),
        };
        match *g.shape(text) {
            [0, _] => return Err(Error::invalid("LGA needs at least one text token")),
            [_, d] if d == self.dim => {}
            _ => {
                return Err(Error::Shape {
                    op: "lga_attention",
                    lhs: g.shape(text).to_vec(),
                    rhs: vec![0, self.dim],
                })
            }
        }
        let q = self.query.forward(g, p, features)?;
        let q = g.reshape(q, &[self.dim, h * w])?;
        let q = g.transpose(q)?;
        let k = self.key.forward(g, p, text)?;
        let v = self.value.forward(g, p, text)?;
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt())?;
        let attention = g.softmax(scores, 1)?;
        let ctx = g.matmul(attention, v)?;
        let ctx = g.transpose(ctx)?;
        let ctx = g.reshape(ctx, &[1, self.dim, h, w])?;
        Ok(LgaOutput { ctx, attention })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LangGateOutput {
    pub fused: Var,
    /// Soft modality gate in (0, 1), `[1, 1, H, W]`.
    pub alpha: Var,
    pub gamma: Var,
    pub beta: Var,
    pub ctx: Var,
    pub attention: Var,
}

/// `(1 + lambda * gamma) * ((1 - alpha) * vi + alpha * ir) + beta`, with the
/// single-channel `alpha`, `gamma`, `beta` broadcast over feature channels.
pub fn gated_blend(
    g: &mut Graph,
    vi: Var,
    ir: Var,
    alpha: Var,
    gamma: Var,
    beta: Var,
    lambda: f64,
) -> Result<Var> {
    if g.shape(vi) != g.shape(ir) {
        return Err(Error::Shape {
            op: "lang_gated_fuse",
            lhs: g.shape(vi).to_vec(),
            rhs: g.shape(ir).to_vec(),
        });
    }
    let keep = g.one_minus(alpha)?;
    let from_vi = g.mul(keep, vi)?;
    let from_ir = g.mul(alpha, ir)?;
    let mixed = g.add(from_vi, from_ir)?;
    let film = g.scale(gamma, lambda)?;
    let film = g.add_scalar(film, 1.0)?;
    let modulated = g.mul(film, mixed)?;
    g.add(modulated, beta)
}

/// Text-conditioned gating of two same-shaped feature maps.
#[derive(Debug, Clone, Copy)]
pub struct LangGatedFusion {
    lga: Lga,
    conv_alpha: Conv2d,
    conv_film: Conv2d,
}

impl LangGatedFusion {
    pub fn new(b: &mut LayerBuilder<'_>, name: &str, channels: usize, text_dim: usize) -> Result<Self> {
        Ok(LangGatedFusion {
            lga: Lga::new(b, &format!("{name}.lga"), 2 * channels, text_dim)?,
            conv_alpha: b.conv(&format!("{name}.alpha"), text_dim, 1, 1, 1, Init::Kaiming)?,
            conv_film: b.conv(&format!("{name}.film"), text_dim, 2, 1, 1, Init::Zeros)?,
        })
    }

    pub fn lga(&self) -> &Lga {
        &self.lga
    }

    pub fn alpha_conv(&self) -> Conv2d {
        self.conv_alpha
    }

    pub fn film_conv(&self) -> Conv2d {
        self.conv_film
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        vi: Var,
        ir: Var,
        text: Var,
        lambda: f64,
    ) -> Result<LangGateOutput> {
        if g.shape(vi) != g.shape(ir) {
            return Err(Error::Shape {
                op: "lang_gated_fuse",
                lhs: g.shape(vi).to_vec(),
                rhs: g.shape(ir).to_vec(),
            });
        }
        let cat = g.concat(&[vi, ir], 1)?;
        let LgaOutput { ctx, attention } = self.lga.forward(g, p, cat, text)?;
        let a = self.conv_alpha.forward(g, p, ctx)?;
        let alpha = g.sigmoid(a)?;
        let film = self.conv_film.forward(g, p, ctx)?;
        let gamma = g.slice(film, 1, 0, 1)?;
        let beta = g.slice(film, 1, 1, 1)?;
        let fused = gated_blend(g, vi, ir, alpha, gamma, beta, lambda)?;
        Ok(LangGateOutput {
            fused,
            alpha,
            gamma,
            beta,
            ctx,
            attention,
        })
    }
}

/// One stream of the pyramid encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<[Conv2d; 2]>,
}

impl Encoder {
    fn new(b: &mut LayerBuilder<'_>, stream: Stream, channels: [usize; LEVELS]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(LEVELS);
        let mut in_ch = 1;
        for (l, &ch) in channels.iter().enumerate() {
            let stride = if l == 0 { 1 } else { 2 };
            let name = format!("enc_{}.l{}", stream.tag(), l + 1);
            blocks.push([
                b.conv(&format!("{name}.conv1"), in_ch, ch, 3, stride, Init::Kaiming)?,
                b.conv(&format!("{name}.conv2"), ch, ch, 3, 1, Init::Kaiming)?,
            ]);
            in_ch = ch;
        }
        Ok(Encoder { blocks })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, y: Var) -> Result<FeaturePyramid> {
        let mut x = y;
        let mut levels = [y; LEVELS];
        for (l, [c1, c2]) in self.blocks.iter().enumerate() {
            x = c1.forward_relu(g, p, x)?;
            x = c2.forward_relu(g, p, x)?;
            levels[l] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    /// Merges level `l + 1` (upsampled) into level `l`, deepest first.
    merges: Vec<Conv2d>,
    out: Conv2d,
}

impl Decoder {
    fn new(b: &mut LayerBuilder<'_>, channels: [usize; LEVELS]) -> Result<Self> {
        let mut merges = Vec::with_capacity(LEVELS - 1);
        for l in (0..LEVELS - 1).rev() {
            merges.push(b.conv(
                &format!("dec.l{}", l + 1),
                channels[l + 1] + channels[l],
                channels[l],
                3,
                1,
                Init::Kaiming,
            )?);
        }
        let out = b.conv("dec.out", channels[0], 1, 1, 1, Init::Kaiming)?;
        Ok(Decoder { merges, out })
    }

    fn forward(&self, g: &mut Graph, p: &Bound, fused: &FeaturePyramid) -> Result<Var> {
        let mut x = fused.levels[LEVELS - 1];
        for (conv, l) in self.merges.iter().zip((0..LEVELS - 1).rev()) {
            let up = g.upsample_nearest2d(x, 2)?;
            let cat = g.concat(&[up, fused.levels[l]], 1)?;
            x = conv.forward_relu(g, p, cat)?;
        }
        let y = self.out.forward(g, p, x)?;
        g.sigmoid(y)
    }
}

#[derive(Debug, Clone)]
pub struct FusionNet {
    vi: Encoder,
    ir: Encoder,
    gates: Vec<LangGatedFusion>,
    decoder: Decoder,
    lambda: f64,
}

/// Everything the fusion forward pass exposes to its callers.
#[derive(Debug, Clone)]
pub struct FusionForward {
    pub vi: FeaturePyramid,
    pub ir: FeaturePyramid,
    pub fused: FeaturePyramid,
    /// Gate outputs of the language-gated levels (empty without text).
    pub gates: Vec<LangGateOutput>,
    /// Fused luminance `[1, 1, H, W]` in (0, 1).
    pub y_fuse: Var,
}

pub(crate) fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "image size {h}x{w} must be a positive multiple of 8; resize the inputs first"
        )));
    }
    Ok(())
}

impl FusionNet {
    /// `use_text = false` builds the additive-only variant without gate parameters.
    pub fn new(
        b: &mut LayerBuilder<'_>,
        channels: [usize; LEVELS],
        text_dim: usize,
        lambda: f64,
        use_text: bool,
    ) -> Result<Self> {
        let vi = Encoder::new(b, Stream::Visible, channels)?;
        let ir = Encoder::new(b, Stream::Infrared, channels)?;
        let gates = if use_text {
            (FIRST_GATED_LEVEL..LEVELS)
                .map(|l| LangGatedFusion::new(b, &format!("gate.l{}", l + 1), channels[l], text_dim))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let decoder = Decoder::new(b, channels)?;
        Ok(FusionNet {
            vi,
            ir,
            gates,
            decoder,
            lambda,
        })
    }

    pub fn uses_text(&self) -> bool {
        !self.gates.is_empty()
    }

    pub fn gate(&self, level: usize) -> Option<&LangGatedFusion> {
        level.checked_sub(FIRST_GATED_LEVEL).and_then(|i| self.gates.get(i))
    }

    pub fn film_lambda(&self) -> f64 {
        self.lambda
    }

    /// Encodes a `[1, 1, H, W]` luminance plane with the stream's own weights.
    pub fn encode(&self, g: &mut Graph, p: &Bound, y: Var, stream: Stream) -> Result<FeaturePyramid> {
        match *g.shape(y) {
            [1, 1, h, w] => check_divisible(h, w)?,
            _ => return Err(Error::invalid(format!("encoder expects [1, 1, H, W], got {:?}", g.shape(y)))),
        }
        match stream {
            Stream::Visible => self.vi.forward(g, p, y),
            Stream::Infrared => self.ir.forward(g, p, y),
        }
    }

    /// Adds the shallow levels and gates the deep ones with the text.
    /// Without gates (or without text) every level is added.
    pub fn fuse_pyramids(
        &self,
        g: &mut Graph,
        p: &Bound,
        vi: &FeaturePyramid,
        ir: &FeaturePyramid,
        text: Option<Var>,
    ) -> Result<(FeaturePyramid, Vec<LangGateOutput>)> {
        let mut levels = vi.levels;
        let mut outputs = Vec::new();
        for l in 0..LEVELS {
            let (a, b) = (vi.levels[l], ir.levels[l]);
            levels[l] = match (self.gate(l), text) {
                (Some(gate), Some(text)) => {
                    let out = gate.forward(g, p, a, b, text, self.lambda)?;
                    outputs.push(out);
                    out.fused
                }
                _ => g.add(a, b)?,
            };
        }
        Ok((FeaturePyramid { levels }, outputs))
    }

    pub fn decode(&self, g: &mut Graph, p: &Bound, fused: &FeaturePyramid) -> Result<Var> {
        self.decoder.forward(g, p, fused)
    }

    /// Full luminance path: encode both streams, fuse, decode.
    pub fn forward(&self, g: &mut Graph, p: &Bound, y_vi: Var, y_ir: Var, text: Option<Var>) -> Result<FusionForward> {
        if g.shape(y_vi) != g.shape(y_ir) {
            return Err(Error::Shape {
                op: "fuse_pair",
                lhs: g.shape(y_vi).to_vec(),
                rhs: g.shape(y_ir).to_vec(),
            });
        }
        let vi = self.encode(g, p, y_vi, Stream::Visible)?;
        let ir = self.encode(g, p, y_ir, Stream::Infrared)?;
        let (fused, gates) = self.fuse_pyramids(g, p, &vi, &ir, text)?;
        let y_fuse = self.decode(g, p, &fused)?;
        Ok(FusionForward {
            vi,
            ir,
            fused,
            gates,
            y_fuse,
        })
    }
}
