//! Samples, the synthetic IR/visible generator, JSON-lines manifests, and
//! connected-region splitting of class masks.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{read_image, read_mask, write_image, write_mask, Mask, PlaneImage};
use crate::nn::{seeded_rng, Rng};
use crate::text::{load_embedding, save_embedding, toy_embed, TextEmbedding, DEFAULT_DIM};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Single plane.
    pub ir: PlaneImage,
    /// RGB.
    pub vis: PlaneImage,
    pub mask: Mask,
    pub expression: String,
    pub embedding: TextEmbedding,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        ir: PlaneImage,
        vis: PlaneImage,
        mask: Mask,
        expression: impl Into<String>,
        embedding: TextEmbedding,
    ) -> Result<Self> {
        let id = id.into();
        let dims = (mask.height(), mask.width());
        if (ir.height(), ir.width()) != dims || (vis.height(), vis.width()) != dims {
            return Err(Error::invalid(format!(
                "sample {id}: infrared {}x{}, visible {}x{} and mask {}x{} must agree",
                ir.height(),
                ir.width(),
                vis.height(),
                vis.width(),
                dims.0,
                dims.1
            )));
        }
        if mask.is_empty() {
            return Err(Error::invalid(format!("sample {id}: mask has no positive pixel")));
        }
        Ok(Sample {
            id,
            ir,
            vis,
            mask,
            expression: expression.into(),
            embedding,
        })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyVariant {
    /// One hot target in a named quadrant; the visible image carries a decoy.
    #[default]
    SingleTarget,
    /// Equally hot blobs in both halves; only the expression says which is meant.
    TwoTargets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyOptions {
    pub variant: ToyVariant,
    pub text_dim: usize,
}

impl Default for ToyOptions {
    fn default() -> Self {
        ToyOptions {
            variant: ToyVariant::SingleTarget,
            text_dim: DEFAULT_DIM,
        }
    }
}

/// Rounds to the 8-bit grid so generated samples survive a PNG round trip unchanged.
fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Debug, Clone, Copy)]
struct Disk {
    ci: f64,
    cj: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, i: usize, j: usize) -> bool {
        let (di, dj) = (i as f64 - self.ci, j as f64 - self.cj);
        di * di + dj * dj <= self.r * self.r
    }

    /// Disk of random radius fully inside rows `[r0, r1)` and columns `[c0, c1)`.
    fn inside(rng: &mut Rng, size: usize, (r0, r1): (usize, usize), (c0, c1): (usize, usize)) -> Disk {
        let r = rng.random_range(size as f64 * 0.09..size as f64 * 0.14);
        let margin = r + 1.0;
        let pick = |rng: &mut Rng, lo: usize, hi: usize| {
            let (lo, hi) = (lo as f64 + margin, hi as f64 - 1.0 - margin);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                (lo + hi) / 2.0
            }
        };
        Disk {
            ci: pick(rng, r0, r1),
            cj: pick(rng, c0, c1),
            r,
        }
    }

    fn overlaps(&self, other: &Disk) -> bool {
        let d = ((self.ci - other.ci).powi(2) + (self.cj - other.cj).powi(2)).sqrt();
        d < self.r + other.r + 2.0
    }
}

/// Quadrant or half of the frame, as rows and columns.
fn region(size: usize, lower: bool, right: bool) -> ((usize, usize), (usize, usize)) {
    let half = size / 2;
    let rows = if lower { (half, size) } else { (0, half) };
    let cols = if right { (half, size) } else { (0, half) };
    (rows, cols)
}

fn toy_sample(rng: &mut Rng, index: usize, size: usize, opts: &ToyOptions) -> Result<Sample> {
    let (expression, targets, chosen) = match opts.variant {
        ToyVariant::SingleTarget => {
            let (lower, right) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let (rows, cols) = region(size, lower, right);
            let disk = Disk::inside(rng, size, rows, cols);
            let expr = format!(
                "hot blob {} {}",
                if lower { "lower" } else { "upper" },
                if right { "right" } else { "left" }
            );
            (expr, vec![disk], 0)
        }
        ToyVariant::TwoTargets => {
            let left = Disk::inside(rng, size, (0, size), (0, size / 2));
            let right = Disk::inside(rng, size, (0, size), (size / 2, size));
            let pick_right = rng.random_bool(0.5);
            let expr = format!("hot blob {}", if pick_right { "right" } else { "left" });
            (expr, vec![left, right], pick_right as usize)
        }
    };

    // Visible decoy: a bright disk somewhere that does not touch any target.
    let decoy = {
        let mut d = Disk::inside(rng, size, (0, size), (0, size));
        for _ in 0..32 {
            if targets.iter().all(|t| !t.overlaps(&d)) {
                break;
            }
            d = Disk::inside(rng, size, (0, size), (0, size));
        }
        d
    };
    let decoy_color = [rng.random_range(0.8..1.0), rng.random_range(0.6..0.9), rng.random_range(0.1..0.3)];

    let n = size * size;
    let (fi, fj) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint = [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), rng.random_range(0.8..1.2)];
    let ir_level: Vec<f64> = targets.iter().map(|_| rng.random_range(0.75..0.95)).collect();

    let mut vis = vec![0.0; 3 * n];
    let mut ir = vec![0.0; n];
    for k in 0..n {
        let (i, j) = (k / size, k % size);
        let stripes = 0.35 + 0.12 * (fi * i as f64 + fj * j as f64 + phase).sin();
        for c in 0..3 {
            let noise = rng.random_range(-0.04..0.04);
            let v = if decoy.contains(i, j) {
                decoy_color[c]
            } else {
                stripes * tint[c] + noise
            };
            vis[c * n + k] = quantize(v);
        }
        let base = 0.12 + 0.04 * (0.5 * stripes) + rng.random_range(-0.03..0.03);
        let hot = targets
            .iter()
            .zip(&ir_level)
            .find(|(t, _)| t.contains(i, j))
            .map(|(_, &lvl)| lvl + rng.random_range(-0.03..0.03));
        ir[k] = quantize(hot.unwrap_or(base));
    }
    let target = targets[chosen];
    let mask = Mask::from_fn(size, size, |i, j| target.contains(i, j));
    let embedding = toy_embed(&expression, opts.text_dim)?;
    Sample::new(
        format!("toy{index:04}"),
        PlaneImage::new(1, size, size, ir)?,
        PlaneImage::new(3, size, size, vis)?,
        mask,
        expression,
        embedding,
    )
}

/// `n` synthetic samples of `size x size` pixels, reproducible from `seed`.
pub fn make_toy_data(n: usize, size: usize, seed: u64, opts: &ToyOptions) -> Result<Vec<Sample>> {
    if size < 16 || size % 8 != 0 {
        return Err(Error::invalid(format!("toy image size {size} must be a multiple of 8 and at least 16")));
    }
    if opts.text_dim == 0 {
        return Err(Error::invalid("text_dim must be positive"));
    }
    let mut rng = seeded_rng(seed);
    (0..n).map(|i| toy_sample(&mut rng, i, size, opts)).collect()
}

/// Train and test sets drawn from one generator stream (train first).
pub fn make_toy_split(
    n_train: usize,
    n_test: usize,
    size: usize,
    seed: u64,
    opts: &ToyOptions,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut all = make_toy_data(n_train + n_test, size, seed, opts)?;
    let test = all.split_off(n_train);
    Ok((all, test))
}

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub ir: PathBuf,
    pub vis: PathBuf,
    pub mask: PathBuf,
    pub expression: String,
    pub embedding: PathBuf,
}

/// Writes images, masks and embeddings next to a JSON-lines manifest.
pub fn write_dataset(samples: &[Sample], dir: impl AsRef<Path>, manifest_name: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join(manifest_name);
    let mut out = std::io::BufWriter::new(fs::File::create(&manifest_path)?);
    for s in samples {
        let entry = ManifestEntry {
            id: s.id.clone(),
            ir: format!("{}_ir.png", s.id).into(),
            vis: format!("{}_vis.png", s.id).into(),
            mask: format!("{}_mask.png", s.id).into(),
            expression: s.expression.clone(),
            embedding: format!("{}.teb", s.id).into(),
        };
        write_image(&s.ir, dir.join(&entry.ir))?;
        write_image(&s.vis, dir.join(&entry.vis))?;
        write_mask(&s.mask, dir.join(&entry.mask))?;
        save_embedding(&s.embedding, dir.join(&entry.embedding))?;
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest_path)
}

pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(fs::File::open(manifest)?);
    let mut samples = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}: {e}", manifest.display(), lineno + 1)))?;
        let ir = read_image(base.join(&entry.ir))?;
        let ir = if ir.channels() == 3 {
            log::warn!("sample {}: infrared image has 3 channels; using its luminance", entry.id);
            crate::imaging::luminance(&ir)?
        } else {
            ir
        };
        let vis = read_image(base.join(&entry.vis))?;
        let mask = read_mask(base.join(&entry.mask))?;
        let embedding = load_embedding(base.join(&entry.embedding))?;
        samples.push(Sample::new(entry.id, ir, vis, mask, entry.expression, embedding)?);
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!("manifest {} lists no samples", manifest.display())));
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Connected components of a binary mask, ordered by their first pixel in
/// raster order. An empty mask yields no components.
pub fn split_regions(mask: &Mask, connectivity: Connectivity) -> Vec<Mask> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![usize::MAX; h * w];
    let mut regions = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || label[start] != usize::MAX {
            continue;
        }
        let id = regions.len();
        let mut region = Mask::empty(h, w);
        label[start] = id;
        queue.push_back(start);
        while let Some(k) = queue.pop_front() {
            let (i, j) = ((k / w) as isize, (k % w) as isize);
            region.set(i as usize, j as usize, true);
            for di in -1..=1isize {
                for dj in -1..=1isize {
                    if (di, dj) == (0, 0) || (connectivity == Connectivity::Four && di != 0 && dj != 0) {
                        continue;
                    }
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                        continue;
                    }
                    let nk = ni as usize * w + nj as usize;
                    if mask.bits()[nk] && label[nk] == usize::MAX {
                        label[nk] = id;
                        queue.push_back(nk);
                    }
                }
            }
        }
        regions.push(region);
    }
    regions
}
