//! Non-learned image math: color conversion, resizing, gradient operators,
//! mask overlay and file I/O.

mod io;

pub use io::{read_image, read_mask, write_image, write_mask};

use crate::autodiff::{Axis2d, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (channel-major) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneImage {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl PlaneImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if !matches!(channels, 1 | 3) {
            return Err(Error::invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![channels, height, width],
                rhs: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(PlaneImage {
            channels,
            height,
            width,
            data,
        })
    }

    /// Builds an image by clamping arbitrary values into `[0, 1]`.
    pub fn from_clamped(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(channels, height, width, data)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    /// `[1, C, H, W]` tensor view for the networks.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Inverse of [`PlaneImage::to_tensor`]; values are clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [1, c, h, w] | [c, h, w] => Self::from_clamped(c, h, w, t.data().to_vec()),
            _ => Err(Error::invalid(format!("cannot view tensor of shape {:?} as an image", t.shape()))),
        }
    }
}

/// Full-range BT.601 luminance/chrominance planes.
#[derive(Debug, Clone, PartialEq)]
pub struct YCbCrImage {
    pub y: PlaneImage,
    pub cb: PlaneImage,
    pub cr: PlaneImage,
}

const KR: f64 = 0.299;
const KG: f64 = 0.587;
const KB: f64 = 0.114;
/// `2 (1 - KB)` and `2 (1 - KR)`.
const CB_SCALE: f64 = 1.772;
const CR_SCALE: f64 = 1.402;

pub fn rgb_to_ycbcr(img: &PlaneImage) -> Result<YCbCrImage> {
    if img.channels != 3 {
        return Err(Error::invalid(format!(
            "YCbCr conversion needs 3 channels, got {}",
            img.channels
        )));
    }
    let n = img.height * img.width;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for k in 0..n {
        let (r, g, b) = (img.data[k], img.data[n + k], img.data[2 * n + k]);
        let luma = KR * r + KG * g + KB * b;
        y.push(luma.clamp(0.0, 1.0));
        cb.push((0.5 + (b - luma) / CB_SCALE).clamp(0.0, 1.0));
        cr.push((0.5 + (r - luma) / CR_SCALE).clamp(0.0, 1.0));
    }
    let plane = |d| PlaneImage::new(1, img.height, img.width, d);
    Ok(YCbCrImage {
        y: plane(y)?,
        cb: plane(cb)?,
        cr: plane(cr)?,
    })
}

/// Unclamped inverse transform of one pixel.
fn ycbcr_pixel_to_rgb(y: f64, cb: f64, cr: f64) -> [f64; 3] {
    let r = y + CR_SCALE * (cr - 0.5);
    let b = y + CB_SCALE * (cb - 0.5);
    let g = (y - KR * r - KB * b) / KG;
    [r, g, b]
}

pub fn ycbcr_to_rgb(img: &YCbCrImage) -> Result<PlaneImage> {
    let (h, w) = (img.y.height, img.y.width);
    for p in [&img.cb, &img.cr] {
        if (p.height, p.width) != (h, w) {
            return Err(Error::Shape {
                op: "ycbcr_to_rgb",
                lhs: vec![h, w],
                rhs: vec![p.height, p.width],
            });
        }
    }
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for k in 0..n {
        let rgb = ycbcr_pixel_to_rgb(img.y.data[k], img.cb.data[k], img.cr.data[k]);
        for (c, v) in rgb.into_iter().enumerate() {
            out[c * n + k] = v;
        }
    }
    PlaneImage::from_clamped(3, h, w, out)
}

/// Differentiable recombination of a luminance tensor `[1, 1, H, W]` with
/// fixed chroma planes; yields a clamped `[1, 3, H, W]` RGB tensor.
pub fn ycbcr_to_rgb_graph(g: &mut Graph, y: Var, cb: &PlaneImage, cr: &PlaneImage) -> Result<Var> {
    let (h, w) = (cb.height, cb.width);
    if g.shape(y) != [1, 1, h, w] {
        return Err(Error::Shape {
            op: "ycbcr_to_rgb",
            lhs: g.shape(y).to_vec(),
            rhs: vec![1, 1, h, w],
        });
    }
    // R = Y + r_off, B = Y + b_off, G = Y + g_off where the offsets depend on chroma only.
    let n = h * w;
    let mut offsets = vec![0.0; 3 * n];
    for k in 0..n {
        let [r, gr, b] = ycbcr_pixel_to_rgb(0.0, cb.data[k], cr.data[k]);
        offsets[k] = r;
        offsets[n + k] = gr;
        offsets[2 * n + k] = b;
    }
    let offsets = g.constant(Tensor::from_parts(vec![1, 3, h, w], offsets))?;
    let rgb = g.add(offsets, y)?;
    g.clamp(rgb, 0.0, 1.0)
}

/// Luminance plane of an image; 3-channel input is converted through BT.601.
pub fn luminance(img: &PlaneImage) -> Result<PlaneImage> {
    match img.channels {
        1 => Ok(img.clone()),
        _ => Ok(rgb_to_ycbcr(img)?.y),
    }
}

/// Bilinear resampling of one plane with half-pixel centers (no corner alignment).
pub fn resize_bilinear_plane(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = coords(out_h, h);
    let cols = coords(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

pub fn resize_bilinear(img: &PlaneImage, out_h: usize, out_w: usize) -> Result<PlaneImage> {
    if out_h < 8 || out_w < 8 {
        return Err(Error::invalid(format!("resize target {out_h}x{out_w} is below 8x8")));
    }
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        data.extend(resize_bilinear_plane(img.plane(c), img.height, img.width, out_h, out_w));
    }
    PlaneImage::from_clamped(img.channels, out_h, out_w, data)
}

/// `|G_x| + |G_y|` of the 3x3 Sobel pair over a reflect-padded `[1, 1, H, W]` plane.
///
/// Each kernel is applied as a central difference followed by `[1, 2, 1]`
/// smoothing across it, so constant regions give exact zeros.
pub fn sobel_magnitude_graph(g: &mut Graph, y: Var) -> Result<Var> {
    let (h, w) = match *g.shape(y) {
        [_, 1, h, w] => (h, w),
        _ => {
            return Err(Error::Shape {
                op: "sobel_magnitude",
                lhs: g.shape(y).to_vec(),
                rhs: vec![1, 1, 0, 0],
            })
        }
    };
    let padded = g.pad_reflect(y, 1)?;
    let gx = sobel_axis(g, padded, 3, 2, w, h)?;
    let gy = sobel_axis(g, padded, 2, 3, h, w)?;
    let gx = g.abs(gx)?;
    let gy = g.abs(gy)?;
    g.add(gx, gy)
}

/// Difference along `diff_axis` (output length `n`) then `[1, 2, 1]` along
/// `smooth_axis` (output length `m`).
fn sobel_axis(g: &mut Graph, padded: Var, diff_axis: usize, smooth_axis: usize, n: usize, m: usize) -> Result<Var> {
    let ahead = g.slice(padded, diff_axis, 2, n)?;
    let behind = g.slice(padded, diff_axis, 0, n)?;
    let d = g.sub(ahead, behind)?;
    let lo = g.slice(d, smooth_axis, 0, m)?;
    let mid = g.slice(d, smooth_axis, 1, m)?;
    let hi = g.slice(d, smooth_axis, 2, m)?;
    let mid = g.scale(mid, 2.0)?;
    let out = g.add(lo, mid)?;
    g.add(out, hi)
}

/// Forward differences `(d/dx, d/dy)`; the last column/row is zero.
pub fn directional_gradients_graph(g: &mut Graph, y: Var) -> Result<(Var, Var)> {
    Ok((g.diff(y, Axis2d::X)?, g.diff(y, Axis2d::Y)?))
}

fn plane_tensor(plane: &PlaneImage) -> Result<Tensor> {
    if plane.channels != 1 {
        return Err(Error::invalid("gradient operators need a single plane"));
    }
    Ok(plane.to_tensor())
}

/// Sobel magnitude of a single plane as a `[1, 1, H, W]` tensor.
pub fn sobel_magnitude(plane: &PlaneImage) -> Result<Tensor> {
    let mut g = Graph::new();
    let y = g.constant(plane_tensor(plane)?)?;
    let m = sobel_magnitude_graph(&mut g, y)?;
    Ok(g.value(m).clone())
}

pub fn directional_gradients(plane: &PlaneImage) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let y = g.constant(plane_tensor(plane)?)?;
    let (dx, dy) = directional_gradients_graph(&mut g, y)?;
    Ok((g.value(dx).clone(), g.value(dy).clone()))
}

/// Binary `H x W` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width || height == 0 || width == 0 {
            return Err(Error::Shape {
                op: "mask",
                lhs: vec![height, width],
                rhs: vec![bits.len()],
            });
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|k| f(k / width, k % width)).collect();
        Mask { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// `[1, 1, H, W]` tensor of zeros and ones.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, 1, self.height, self.width],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }
}

pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.5;

/// Blends masked pixels toward pure red by `alpha`.
pub fn overlay_mask(img: &PlaneImage, mask: &Mask, alpha: f64) -> Result<PlaneImage> {
    if img.channels != 3 {
        return Err(Error::invalid("overlay needs an RGB image"));
    }
    if (img.height, img.width) != (mask.height, mask.width) {
        return Err(Error::Shape {
            op: "overlay_mask",
            lhs: vec![img.height, img.width],
            rhs: vec![mask.height, mask.width],
        });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let n = img.height * img.width;
    let mut data = img.data.clone();
    for (k, _) in mask.bits.iter().enumerate().filter(|(_, &b)| b) {
        for (c, red) in [1.0, 0.0, 0.0].into_iter().enumerate() {
            let v = &mut data[c * n + k];
            *v = (1.0 - alpha) * *v + alpha * red;
        }
    }
    PlaneImage::new(3, img.height, img.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> PlaneImage {
        PlaneImage::new(1, h, w, (0..h * w).map(|k| f(k / w, k % w)).collect()).unwrap()
    }

    fn rgb(r: f64, g: f64, b: f64) -> PlaneImage {
        PlaneImage::new(3, 1, 1, vec![r, g, b]).unwrap()
    }

    #[test]
    fn white_and_black_have_neutral_chroma() {
        let white = rgb_to_ycbcr(&rgb(1.0, 1.0, 1.0)).unwrap();
        assert!((white.y.data[0] - 1.0).abs() < 1e-12);
        assert!((white.cb.data[0] - 0.5).abs() < 1e-12);
        assert!((white.cr.data[0] - 0.5).abs() < 1e-12);
        let black = rgb_to_ycbcr(&rgb(0.0, 0.0, 0.0)).unwrap();
        assert_eq!((black.y.data[0], black.cb.data[0], black.cr.data[0]), (0.0, 0.5, 0.5));
    }

    #[test]
    fn gray_axis_inverts() {
        for (y, expect) in [(1.0, 1.0), (0.5, 0.5)] {
            let img = YCbCrImage {
                y: plane(1, 1, |_, _| y),
                cb: plane(1, 1, |_, _| 0.5),
                cr: plane(1, 1, |_, _| 0.5),
            };
            let out = ycbcr_to_rgb(&img).unwrap();
            for &v in out.data() {
                assert!((v - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ycbcr_needs_three_channels() {
        assert!(rgb_to_ycbcr(&plane(2, 2, |_, _| 0.1)).is_err());
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = plane(8, 8, |i, j| (i * 8 + j) as f64 / 64.0);
        assert_eq!(resize_bilinear(&img, 8, 8).unwrap(), img);
        let c = plane(8, 12, |_, _| 0.3);
        let up = resize_bilinear(&c, 16, 10).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        assert!(resize_bilinear(&img, 4, 8).is_err());
    }

    #[test]
    fn resize_checkerboard_two_to_four() {
        // sample coordinates are [0, .25, .75, 1] along each axis and the
        // bilinear surface of [[0,1],[1,0]] is x + y - 2xy
        let out = resize_bilinear_plane(&[0.0, 1.0, 1.0, 0.0], 2, 2, 4, 4);
        #[rustfmt::skip]
        let expected = [
            0.0, 0.25, 0.75, 1.0,
            0.25, 0.375, 0.625, 0.75,
            0.75, 0.625, 0.375, 0.25,
            1.0, 0.75, 0.25, 0.0,
        ];
        assert_eq!(out, expected);
    }

    #[test]
    fn sobel_fixtures() {
        let flat = sobel_magnitude(&plane(8, 8, |_, _| 0.4)).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.0), "{:?}", flat.data());

        // step between columns 3 and 4: columns 3 and 4 see a 0 -> 1 jump
        let step = sobel_magnitude(&plane(8, 8, |_, j| if j >= 4 { 1.0 } else { 0.0 })).unwrap();
        for i in 1..7 {
            assert_eq!(step.data()[i * 8 + 3], 4.0);
            assert_eq!(step.data()[i * 8 + 4], 4.0);
            assert_eq!(step.data()[i * 8 + 1], 0.0);
        }

        let s = 1.0 / 16.0;
        let ramp = sobel_magnitude(&plane(8, 10, |_, j| s * j as f64)).unwrap();
        for i in 1..7 {
            for j in 1..9 {
                assert_eq!(ramp.data()[i * 10 + j], 8.0 * s);
            }
        }
    }

    #[test]
    fn directional_gradient_fixtures() {
        let (dx, dy) = directional_gradients(&plane(8, 8, |_, _| 0.7)).unwrap();
        assert!(dx.data().iter().chain(dy.data()).all(|&v| v == 0.0));

        let w = 8;
        let (dx, _) = directional_gradients(&plane(8, w, |_, j| j as f64 / w as f64)).unwrap();
        for i in 0..8 {
            for j in 0..w {
                let expect = if j + 1 < w { 1.0 / w as f64 } else { 0.0 };
                assert!((dx.data()[i * w + j] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn overlay_blends_toward_red() {
        let img = PlaneImage::new(3, 1, 2, vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0]).unwrap();
        let mask = Mask::new(1, 2, vec![true, false]).unwrap();
        assert_eq!(overlay_mask(&img, &mask, 0.0).unwrap(), img);
        let half = overlay_mask(&img, &mask, 0.5).unwrap();
        assert_eq!(half.data(), &[0.6, 0.4, 0.3, 0.8, 0.5, 0.0]);
        let all = Mask::new(1, 2, vec![true, true]).unwrap();
        let red = overlay_mask(&img, &all, 1.0).unwrap();
        assert_eq!(red.data(), &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(overlay_mask(&img, &Mask::empty(2, 2), 0.5).is_err());
    }
}
