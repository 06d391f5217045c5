//! Video-to-image preprocessing.
//!
//! A clip is reduced to a single stitched image: sample `num_selected`
//! frames (temporal order kept), augment each to `crop_size`², and place
//! them row-major on a `grid_side`×`grid_side` canvas. The training path
//! resizes, random-crops, and applies a randomized augmentation policy;
//! the test path center-crops a `crop_size·test_crop_scale` window, then
//! random-crops inside it with no photometric ops, and is repeated
//! `test_replicas` times per clip.
//!
//! Every stage draws from a ChaCha stream derived from (seed, stage tag),
//! so the whole pipeline is a pure function of (sequence, config, seed).

use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding;

#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub video_id: String,
    frames: Vec<RgbImage>,
}

impl FrameSequence {
    pub fn new(video_id: impl Into<String>, frames: Vec<RgbImage>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Pipeline("empty frame sequence".into()));
        }
        let (w, h) = frames[0].dimensions();
        for (i, f) in frames.iter().enumerate() {
            if f.dimensions() != (w, h) {
                return Err(Error::Pipeline(format!(
                    "frame {i} is {:?}, expected {:?}",
                    f.dimensions(),
                    (w, h)
                )));
            }
        }
        Ok(FrameSequence {
            video_id: video_id.into(),
            frames,
        })
    }

    /// Read zero-padded numeric PNG/JPEG frames from a directory.
    pub fn load_dir(video_id: impl Into<String>, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| {
                matches!(
                    p.extension().and_then(|s| s.to_str()),
                    Some("png") | Some("jpg") | Some("jpeg")
                )
            })
            .collect();
        names.sort();
        let mut frames = Vec::with_capacity(names.len());
        for p in &names {
            let img = image::open(p)
                .map_err(|e| Error::Pipeline(format!("{}: {e}", p.display())))?
                .to_rgb8();
            frames.push(img);
        }
        Self::new(video_id, frames)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, i: usize) -> &RgbImage {
        &self.frames[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    HorizontalFlip,
    Brightness,
    Contrast,
    Rotation,
    Translation,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    /// No photometric or geometric ops after the crop.
    Identity,
    /// Apply `num_ops` draws from `ops` at strength `magnitude` in 0..=9.
    Randomized {
        ops: Vec<AugOp>,
        num_ops: usize,
        magnitude: u32,
    },
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy::Randomized {
            ops: vec![
                AugOp::HorizontalFlip,
                AugOp::Brightness,
                AugOp::Contrast,
                AugOp::Rotation,
                AugOp::Translation,
            ],
            num_ops: 2,
            magnitude: 9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    /// Frames sampled per clip; must be a perfect square.
    pub num_selected: usize,
    /// Side of each augmented tile.
    pub crop_size: u32,
    /// Pre-crop resize factor in (0, 1].
    pub resize_factor: f64,
    /// Test-path center-crop scale (window side = floor(crop_size · scale)).
    pub test_crop_scale: f64,
    /// Independent test draws per clip.
    pub test_replicas: usize,
    /// Guarantee every frame of a short clip at least one slot.
    pub stratified_short: bool,
    pub policy: AugmentPolicy,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig {
            num_selected: 16,
            crop_size: 224,
            resize_factor: 0.25,
            test_crop_scale: 1.3,
            test_replicas: 30,
            stratified_short: true,
            policy: AugmentPolicy::default(),
        }
    }
}

impl StitchConfig {
    pub fn grid_side(&self) -> Result<usize> {
        let g = (self.num_selected as f64).sqrt().round() as usize;
        if g * g != self.num_selected || g == 0 {
            return Err(Error::Config(format!(
                "num_selected {} is not a perfect square",
                self.num_selected
            )));
        }
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_side()?;
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        if !(self.resize_factor > 0.0 && self.resize_factor <= 1.0) {
            return Err(Error::Config(format!(
                "resize_factor {} outside (0, 1]",
                self.resize_factor
            )));
        }
        if self.test_crop_scale < 1.0 {
            return Err(Error::Config(format!(
                "test_crop_scale {} below 1",
                self.test_crop_scale
            )));
        }
        if self.test_replicas == 0 {
            return Err(Error::Config("test_replicas must be positive".into()));
        }
        Ok(())
    }

    /// Side of the test-path center-crop window.
    pub fn center_window(&self) -> u32 {
        (f64::from(self.crop_size) * self.test_crop_scale).floor() as u32
    }

    /// Spatial side of the stitched output.
    pub fn output_side(&self) -> Result<u32> {
        Ok(self.grid_side()? as u32 * self.crop_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

/// Where an augmented tile's pixels came from, in the coordinates of the
/// resized (and, if needed, padded) frame.
#[derive(Debug, Clone, Copy)]
pub struct CropTrace {
    pub frame_size: (u32, u32),
    pub padded: bool,
    /// Window the final crop was constrained to.
    pub window: Rect,
    /// Final crop rectangle.
    pub crop: Rect,
}

#[derive(Debug, Clone)]
pub struct StitchedImage {
    pub pixels: RgbImage,
    /// Clip-relative frame index of each tile, row-major.
    pub source_indices: Vec<usize>,
}

impl StitchedImage {
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.pixels
            .save(path)
            .map_err(|e| Error::Pipeline(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct StitchOutput {
    pub stitched: StitchedImage,
    /// Post-augmentation tiles in slot order.
    pub tiles: Vec<RgbImage>,
    pub traces: Vec<CropTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Train,
    Test,
}

// ---------------------------------------------------------------------------
// frame sampling
// ---------------------------------------------------------------------------

/// Sorted frame indices for one stitched image. Uniform without replacement
/// when the clip is long enough; with replacement otherwise (covering every
/// frame at least once when `stratified_short` is set).
pub fn sample_frames(
    seq: &FrameSequence,
    cfg: &StitchConfig,
    _mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let n = seq.len();
    let k = cfg.num_selected;
    if n == 0 {
        return Err(Error::Pipeline("empty frame sequence".into()));
    }
    let mut idx: Vec<usize> = if n >= k {
        rand::seq::index::sample(rng, n, k).into_vec()
    } else if cfg.stratified_short {
        let mut v = Vec::with_capacity(k);
        for i in 0..n {
            for _ in 0..(k / n) {
                v.push(i);
            }
        }
        let extra = k - v.len();
        let chosen = rand::seq::index::sample(rng, n, extra);
        v.extend(chosen.into_iter());
        v
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    idx.sort_unstable();
    Ok(idx)
}

// ---------------------------------------------------------------------------
// pixel ops
// ---------------------------------------------------------------------------

fn resize_by(img: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let nw = ((f64::from(w) * factor).round() as u32).max(1);
    let nh = ((f64::from(h) * factor).round() as u32).max(1);
    if (nw, nh) == (w, h) {
        return img.clone();
    }
    imageops::resize(img, nw, nh, imageops::FilterType::Triangle)
}

fn reflect(i: i64, n: u32) -> u32 {
    let n = i64::from(n);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as u32
}

/// Reflection-pad so the image is at least (min_w, min_h).
fn pad_to(img: &RgbImage, min_w: u32, min_h: u32) -> (RgbImage, bool) {
    let (w, h) = img.dimensions();
    if w >= min_w && h >= min_h {
        return (img.clone(), false);
    }
    let nw = w.max(min_w);
    let nh = h.max(min_h);
    let off_x = i64::from((nw - w) / 2);
    let off_y = i64::from((nh - h) / 2);
    let mut out = RgbImage::new(nw, nh);
    for y in 0..nh {
        let sy = reflect(i64::from(y) - off_y, h);
        for x in 0..nw {
            let sx = reflect(i64::from(x) - off_x, w);
            out.put_pixel(x, y, *img.get_pixel(sx, sy));
        }
    }
    (out, true)
}

fn crop(img: &RgbImage, x0: u32, y0: u32, side: u32) -> RgbImage {
    imageops::crop_imm(img, x0, y0, side, side).to_image()
}

fn random_offset(extent: u32, side: u32, rng: &mut ChaCha8Rng) -> u32 {
    if extent <= side {
        0
    } else {
        rng.random_range(0..=(extent - side))
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &RgbImage, f: impl Fn(u8) -> u8) -> RgbImage {
    let mut out = img.clone();
    for p in out.pixels_mut() {
        *p = Rgb([f(p.0[0]), f(p.0[1]), f(p.0[2])]);
    }
    out
}

/// Nearest-neighbor rotation about the center, clamp-to-edge sampling.
fn rotate_about_center(img: &RgbImage, degrees: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cw, ch) = (f64::from(w - 1) / 2.0, f64::from(h - 1) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dx = f64::from(x) - cw;
            let dy = f64::from(y) - ch;
            let sx = (cos * dx + sin * dy + cw).round();
            let sy = (-sin * dx + cos * dy + ch).round();
            let sx = sx.clamp(0.0, f64::from(w - 1)) as u32;
            let sy = sy.clamp(0.0, f64::from(h - 1)) as u32;
            out.put_pixel(x, y, *img.get_pixel(sx, sy));
        }
    }
    out
}

fn translate(img: &RgbImage, dx: i64, dy: i64) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sx = (i64::from(x) - dx).clamp(0, i64::from(w - 1)) as u32;
            let sy = (i64::from(y) - dy).clamp(0, i64::from(h - 1)) as u32;
            out.put_pixel(x, y, *img.get_pixel(sx, sy));
        }
    }
    out
}

fn apply_policy(img: RgbImage, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> RgbImage {
    let AugmentPolicy::Randomized {
        ops,
        num_ops,
        magnitude,
    } = policy
    else {
        return img;
    };
    if ops.is_empty() || *num_ops == 0 {
        return img;
    }
    let strength = f64::from((*magnitude).min(9)) / 9.0;
    let mut out = img;
    for _ in 0..*num_ops {
        let op = ops[rng.random_range(0..ops.len())];
        let u: f64 = rng.random_range(-1.0..=1.0);
        out = match op {
            AugOp::HorizontalFlip => imageops::flip_horizontal(&out),
            AugOp::Brightness => {
                let f = 1.0 + 0.35 * strength * u;
                map_pixels(&out, |p| clamp_u8(f64::from(p) * f))
            }
            AugOp::Contrast => {
                let f = 1.0 + 0.5 * strength * u;
                map_pixels(&out, |p| clamp_u8(128.0 + (f64::from(p) - 128.0) * f))
            }
            AugOp::Rotation => rotate_about_center(&out, 15.0 * strength * u),
            AugOp::Translation => {
                let (w, h) = out.dimensions();
                let dx = (0.10 * strength * u * f64::from(w)).round() as i64;
                let v: f64 = rng.random_range(-1.0..=1.0);
                let dy = (0.10 * strength * v * f64::from(h)).round() as i64;
                translate(&out, dx, dy)
            }
        };
    }
    out
}

// ---------------------------------------------------------------------------
// augmentation paths
// ---------------------------------------------------------------------------

/// Training path: resize, random crop to `crop_size`, augmentation policy.
pub fn augment_train(
    frame: &RgbImage,
    cfg: &StitchConfig,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, CropTrace) {
    let c = cfg.crop_size;
    let resized = resize_by(frame, cfg.resize_factor);
    let (base, padded) = pad_to(&resized, c, c);
    let (bw, bh) = base.dimensions();
    let x0 = random_offset(bw, c, rng);
    let y0 = random_offset(bh, c, rng);
    let cropped = crop(&base, x0, y0, c);
    let out = apply_policy(cropped, &cfg.policy, rng);
    let trace = CropTrace {
        frame_size: (bw, bh),
        padded,
        window: Rect { x: 0, y: 0, w: bw, h: bh },
        crop: Rect { x: x0, y: y0, w: c, h: c },
    };
    (out, trace)
}

/// Test path: resize, center crop the scaled window, random crop inside it.
/// No photometric augmentation.
pub fn augment_test(
    frame: &RgbImage,
    cfg: &StitchConfig,
    rng: &mut ChaCha8Rng,
) -> (RgbImage, CropTrace) {
    let c = cfg.crop_size;
    let m = cfg.center_window();
    let resized = resize_by(frame, cfg.resize_factor);
    let (base, padded) = pad_to(&resized, m, m);
    let (bw, bh) = base.dimensions();
    let wx = (bw - m) / 2;
    let wy = (bh - m) / 2;
    let window = crop(&base, wx, wy, m);
    let x0 = random_offset(m, c, rng);
    let y0 = random_offset(m, c, rng);
    let out = crop(&window, x0, y0, c);
    let trace = CropTrace {
        frame_size: (bw, bh),
        padded,
        window: Rect { x: wx, y: wy, w: m, h: m },
        crop: Rect { x: wx + x0, y: wy + y0, w: c, h: c },
    };
    (out, trace)
}

// ---------------------------------------------------------------------------
// stitching
// ---------------------------------------------------------------------------

/// Place `grid²` equally sized tiles row-major: tile t covers rows
/// `(t / g)·c ..` and columns `(t % g)·c ..`.
pub fn stitch_grid(
    tiles: &[RgbImage],
    source_indices: &[usize],
    cfg: &StitchConfig,
) -> Result<StitchedImage> {
    let g = cfg.grid_side()? as u32;
    let c = cfg.crop_size;
    if tiles.len() != (g * g) as usize {
        return Err(Error::Pipeline(format!(
            "expected {} tiles, got {}",
            g * g,
            tiles.len()
        )));
    }
    if source_indices.len() != tiles.len() {
        return Err(Error::Pipeline("tile/index count mismatch".into()));
    }
    for (t, tile) in tiles.iter().enumerate() {
        if tile.dimensions() != (c, c) {
            return Err(Error::Pipeline(format!(
                "tile {t} is {:?}, expected ({c}, {c})",
                tile.dimensions()
            )));
        }
    }
    let side = g * c;
    let mut canvas = RgbImage::new(side, side);
    for (t, tile) in tiles.iter().enumerate() {
        let ty = (t as u32 / g) * c;
        let tx = (t as u32 % g) * c;
        for y in 0..c {
            for x in 0..c {
                canvas.put_pixel(tx + x, ty + y, *tile.get_pixel(x, y));
            }
        }
    }
    Ok(StitchedImage {
        pixels: canvas,
        source_indices: source_indices.to_vec(),
    })
}

/// Extract the tile at slot t from a stitched image.
pub fn extract_tile(stitched: &StitchedImage, cfg: &StitchConfig, t: usize) -> Result<RgbImage> {
    let g = cfg.grid_side()? as u32;
    let c = cfg.crop_size;
    let ty = (t as u32 / g) * c;
    let tx = (t as u32 % g) * c;
    Ok(crop(&stitched.pixels, tx, ty, c))
}

// ---------------------------------------------------------------------------
// full pipelines
// ---------------------------------------------------------------------------

/// One training-path stitched image; a pure function of (seq, cfg, seed).
pub fn train_stitch(seq: &FrameSequence, cfg: &StitchConfig, seed: u64) -> Result<StitchOutput> {
    cfg.validate()?;
    let mut sample_rng = seeding::rng_for(seed, "sample", &[]);
    let indices = sample_frames(seq, cfg, SampleMode::Train, &mut sample_rng)?;
    let mut aug_rng = seeding::rng_for(seed, "augment", &[]);
    let mut tiles = Vec::with_capacity(indices.len());
    let mut traces = Vec::with_capacity(indices.len());
    for &i in &indices {
        let (tile, trace) = augment_train(seq.frame(i), cfg, &mut aug_rng);
        tiles.push(tile);
        traces.push(trace);
    }
    let stitched = stitch_grid(&tiles, &indices, cfg)?;
    Ok(StitchOutput {
        stitched,
        tiles,
        traces,
    })
}

/// One test-path stitched image under a replica seed.
pub fn test_stitch(seq: &FrameSequence, cfg: &StitchConfig, seed: u64) -> Result<StitchOutput> {
    cfg.validate()?;
    let mut sample_rng = seeding::rng_for(seed, "sample", &[]);
    let indices = sample_frames(seq, cfg, SampleMode::Test, &mut sample_rng)?;
    let mut aug_rng = seeding::rng_for(seed, "augment", &[]);
    let mut tiles = Vec::with_capacity(indices.len());
    let mut traces = Vec::with_capacity(indices.len());
    for &i in &indices {
        let (tile, trace) = augment_test(seq.frame(i), cfg, &mut aug_rng);
        tiles.push(tile);
        traces.push(trace);
    }
    let stitched = stitch_grid(&tiles, &indices, cfg)?;
    Ok(StitchOutput {
        stitched,
        tiles,
        traces,
    })
}

/// The full test-time set: `test_replicas` independent draws, replica i
/// seeded with `seed + i`.
pub fn test_time_replicas(
    seq: &FrameSequence,
    cfg: &StitchConfig,
    seed: u64,
) -> Result<Vec<StitchOutput>> {
    (0..cfg.test_replicas as u64)
        .map(|i| test_stitch(seq, cfg, seed.wrapping_add(i)))
        .collect()
}

// ---------------------------------------------------------------------------
// tensor conversion
// ---------------------------------------------------------------------------

/// (3, H, W) unit-interval tensor from an 8-bit image.
pub fn image_to_chw<F: Scalar>(img: &RgbImage) -> Array3<F> {
    let (w, h) = img.dimensions();
    let scale = F::from_f64(1.0 / 255.0);
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        F::from_f64(f64::from(img.get_pixel(x as u32, y as u32).0[c])) * scale
    })
}

/// (B, 3, H, W) batch tensor.
pub fn images_to_batch<F: Scalar>(imgs: &[&RgbImage]) -> Result<Array4<F>> {
    if imgs.is_empty() {
        return Err(Error::Pipeline("empty image batch".into()));
    }
    let (w, h) = imgs[0].dimensions();
    let mut out = Array4::zeros((imgs.len(), 3, h as usize, w as usize));
    for (b, img) in imgs.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::Pipeline("batch images differ in size".into()));
        }
        out.index_axis_mut(ndarray::Axis(0), b)
            .assign(&image_to_chw::<F>(img));
    }
    Ok(out)
}
