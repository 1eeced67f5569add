//! Images, Netpbm I/O, and the fixed-size region transformations.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCorners;

/// Row-major intensity grid, channels interleaved.
///
/// Loaded images hold values in `[0, 1]`; mean-subtracted patches may go
/// negative, so the constructor only requires finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Domain(format!("unsupported channel count {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch {
                expected: width * height * channels,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite pixel value".into()));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(channels == 1 || channels == 3);
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels == 1 || channels == 3);
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Image {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn bounds(&self) -> BoxCorners {
        BoxCorners::new_unchecked(0.0, 0.0, self.width as f64, self.height as f64)
    }

    /// Channel-averaged single-channel copy.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| ((px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0) as f32)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn subtract_mean(&self, mean: &[f32]) -> Result<Image> {
        if mean.len() != self.channels {
            return Err(Error::DimensionMismatch {
                expected: self.channels,
                actual: mean.len(),
            });
        }
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v - mean[i % self.channels])
            .collect();
        Ok(Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        })
    }

    /// Nearest-neighbour upscale by an integer factor (pixel replication).
    pub fn upscale(&self, factor: usize) -> Image {
        Image::from_fn(self.width * factor, self.height * factor, self.channels, |x, y, c| {
            self.get(x / factor, y / factor, c)
        })
    }

    /// Copy `src` into `self` with its top-left corner at `(x0, y0)`; clipped.
    pub fn blit(&mut self, src: &Image, x0: usize, y0: usize) {
        let src = if src.channels == self.channels {
            src.clone()
        } else if self.channels == 3 {
            src.to_rgb()
        } else {
            src.to_gray()
        };
        for y in 0..src.height.min(self.height.saturating_sub(y0)) {
            for x in 0..src.width.min(self.width.saturating_sub(x0)) {
                for c in 0..self.channels {
                    self.set(x0 + x, y0 + y, c, src.get(x, y, c));
                }
            }
        }
    }

    /// One-pixel outline of `b` (rounded to the pixel grid, clipped).
    pub fn draw_rect(&mut self, b: &BoxCorners, value: f32) {
        let clip = |v: f64, hi: usize| (v.round().max(0.0) as usize).min(hi);
        let x0 = clip(b.x_min, self.width);
        let y0 = clip(b.y_min, self.height);
        let x1 = clip(b.x_max, self.width);
        let y1 = clip(b.y_max, self.height);
        if x1 <= x0 || y1 <= y0 {
            return;
        }
        for x in x0..x1 {
            for c in 0..self.channels {
                self.set(x, y0, c, value);
                self.set(x, y1 - 1, c, value);
            }
        }
        for y in y0..y1 {
            for c in 0..self.channels {
                self.set(x0, y, c, value);
                self.set(x1 - 1, y, c, value);
            }
        }
    }

    /// Render `text` with a 3x5 bitmap font (digits, `.`, `-`) at `(x0, y0)`.
    pub fn draw_text(&mut self, text: &str, x0: usize, y0: usize, value: f32) {
        let mut cursor = x0;
        for ch in text.chars() {
            if let Some(rows) = glyph(ch) {
                for (dy, row) in rows.iter().enumerate() {
                    for dx in 0..3 {
                        if row & (0b100 >> dx) != 0 {
                            let (x, y) = (cursor + dx, y0 + dy);
                            if x < self.width && y < self.height {
                                for c in 0..self.channels {
                                    self.set(x, y, c, value);
                                }
                            }
                        }
                    }
                }
            }
            cursor += 4;
        }
    }
}

fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        _ => return None,
    })
}

// ---------------------------------------------------------------------------
// Netpbm
// ---------------------------------------------------------------------------

/// Encode as binary PGM (1 channel) or PPM (3 channels), maxval 255.
/// Values are clamped to `[0, 1]` and rounded.
pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn decode_netpbm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while let Some(&b) = bytes.get(*pos) {
                        *pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err(Error::decode(path, "truncated header")),
            }
        }
        let start = *pos;
        while let Some(b) = bytes.get(*pos) {
            if b.is_ascii_whitespace() || *b == b'#' {
                break;
            }
            *pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = token(&mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::decode(path, format!("unsupported magic {other:?}"))),
    };
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let t = token(pos)?;
        t.parse::<usize>()
            .map_err(|_| Error::decode(path, format!("bad {what} {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::decode(path, format!("maxval {maxval} not in 1..=255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::decode(path, "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::decode(path, "truncated header")),
    }
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(Error::decode(
            path,
            format!("truncated payload: need {need} bytes, have {}", raster.len()),
        ));
    }
    let scale = 1.0 / maxval as f32;
    let data = raster[..need].iter().map(|&b| (b as f32 * scale).min(1.0)).collect();
    Image::new(width, height, channels, data)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes, path)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_netpbm(img))
}

/// Write to a sibling temp file then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Region transformations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpMode {
    /// Anisotropic scaling of the proposal to the output size.
    Warp,
    /// Tightest enclosing square, scaled isotropically, surrounding content kept.
    TightestSquareWithContext,
    /// As above, but everything outside the original proposal is mean-filled.
    TightestSquareWithoutContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpConfig {
    /// Side of the square output patch.
    pub out_size: usize,
    /// Border of context around the proposal, in output pixels.
    pub padding: usize,
    pub mode: WarpMode,
}

impl Default for WarpConfig {
    fn default() -> Self {
        WarpConfig {
            out_size: 227,
            padding: 16,
            mode: WarpMode::Warp,
        }
    }
}

impl WarpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.out_size <= 2 * self.padding {
            return Err(Error::Config(format!(
                "warp out_size {} must exceed twice the padding {}",
                self.out_size, self.padding
            )));
        }
        Ok(())
    }

    /// Side of the central region the proposal itself maps onto.
    pub fn inner_size(&self) -> usize {
        self.out_size - 2 * self.padding
    }
}

/// Bilinear sample at continuous source coordinate `(u, v)`.
///
/// Pixel `k` covers `[k, k + 1)` and is sampled at its center `k + 0.5`.
/// Points outside the image take `fill`; points inside use edge-clamped
/// neighbours.
#[inline]
fn sample_bilinear(img: &Image, u: f64, v: f64, fill: &[f32], out: &mut [f32]) {
    let (w, h) = (img.width as f64, img.height as f64);
    if !(u >= 0.0 && u < w && v >= 0.0 && v < h) {
        out.copy_from_slice(fill);
        return;
    }
    let fu = u - 0.5;
    let fv = v - 0.5;
    let x0 = fu.floor();
    let y0 = fv.floor();
    let t = fu - x0;
    let s = fv - y0;
    let last_x = img.width as i64 - 1;
    let last_y = img.height as i64 - 1;
    let xa = (x0 as i64).clamp(0, last_x) as usize;
    let xb = (x0 as i64 + 1).clamp(0, last_x) as usize;
    let ya = (y0 as i64).clamp(0, last_y) as usize;
    let yb = (y0 as i64 + 1).clamp(0, last_y) as usize;
    for (c, o) in out.iter_mut().enumerate() {
        let p00 = img.get(xa, ya, c) as f64;
        let p10 = img.get(xb, ya, c) as f64;
        let p01 = img.get(xa, yb, c) as f64;
        let p11 = img.get(xb, yb, c) as f64;
        // lerp form keeps the result exact when neighbours are equal
        let top = p00 + t * (p10 - p00);
        let bottom = p01 + t * (p11 - p01);
        *o = (top + s * (bottom - top)) as f32;
    }
}

/// Transform the region under `b` into an `out_size x out_size` patch.
///
/// The proposal lands exactly on the central `(out_size - 2p)^2` square
/// (for the square modes: its enclosing square does), so the source region
/// is dilated by `p / inner * side` per side.
pub fn warp_region(img: &Image, b: &BoxCorners, cfg: &WarpConfig, fill_mean: &[f32]) -> Result<Image> {
    cfg.validate()?;
    if !b.is_valid() || !b.has_positive_area() {
        return Err(Error::Domain(format!("cannot warp degenerate box {b:?}")));
    }
    if fill_mean.len() != img.channels {
        return Err(Error::DimensionMismatch {
            expected: img.channels,
            actual: fill_mean.len(),
        });
    }
    let inner = cfg.inner_size() as f64;
    let pad = cfg.padding as f64;
    let (w, h) = (b.width(), b.height());
    let (origin_x, origin_y, scale_x, scale_y) = match cfg.mode {
        WarpMode::Warp => (b.x_min, b.y_min, inner / w, inner / h),
        WarpMode::TightestSquareWithContext | WarpMode::TightestSquareWithoutContext => {
            let side = w.max(h);
            (
                b.x_min - 0.5 * (side - w),
                b.y_min - 0.5 * (side - h),
                inner / side,
                inner / side,
            )
        }
    };
    let mask_outside = cfg.mode == WarpMode::TightestSquareWithoutContext;
    let n = cfg.out_size;
    let ch = img.channels;
    let mut data = vec![0f32; n * n * ch];
    for row in 0..n {
        let v = origin_y + (row as f64 + 0.5 - pad) / scale_y;
        for col in 0..n {
            let u = origin_x + (col as f64 + 0.5 - pad) / scale_x;
            let px = &mut data[(row * n + col) * ch..(row * n + col + 1) * ch];
            if mask_outside && !(u >= b.x_min && u < b.x_max && v >= b.y_min && v < b.y_max) {
                px.copy_from_slice(fill_mean);
            } else {
                sample_bilinear(img, u, v, fill_mean, px);
            }
        }
    }
    Ok(Image {
        width: n,
        height: n,
        channels: ch,
        data,
    })
}

/// Per-channel arithmetic mean over every pixel of every image.
pub fn image_mean(images: &[Image]) -> Result<Vec<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Domain("mean of an empty dataset".into()))?;
    let ch = first.channels;
    let mut sums = vec![0f64; ch];
    let mut count = 0usize;
    for img in images {
        if img.channels != ch {
            return Err(Error::DimensionMismatch {
                expected: ch,
                actual: img.channels,
            });
        }
        for px in img.data.chunks_exact(ch) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += *v as f64;
            }
        }
        count += img.width * img.height;
    }
    if count == 0 {
        return Err(Error::Domain("mean of zero pixels".into()));
    }
    Ok(sums.into_iter().map(|s| (s / count as f64) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, 1, |x, y, _| ((x * 7 + y * 13) % 256) as f32 / 255.0)
    }

    #[test]
    fn pgm_scaling() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x00\xff";
        let img = decode_netpbm(bytes, Path::new("mem")).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn header_comments_and_truncation() {
        let ok = b"P5 # comment\n# another\n2 1\n255\n\x10\x20";
        assert_eq!(decode_netpbm(ok, Path::new("mem")).unwrap().width(), 2);
        let short = b"P6\n2 2\n255\n\x00\x01\x02";
        assert!(matches!(
            decode_netpbm(short, Path::new("mem")),
            Err(Error::Decode { .. })
        ));
        assert!(decode_netpbm(b"P3\n1 1\n255\n0", Path::new("mem")).is_err());
        assert!(decode_netpbm(b"P5\n1 1\n", Path::new("mem")).is_err());
        assert!(decode_netpbm(b"P5\n1 1\n65535\n\x00\x00", Path::new("mem")).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 4, 3, |x, y, c| ((x * 31 + y * 17 + c * 5) % 256) as f32 / 255.0);
        let path = dir.path().join("a.ppm");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(encode_netpbm(&back), encode_netpbm(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn warp_identity_crop() {
        let img = gradient(40, 30);
        let cfg = WarpConfig {
            out_size: 16,
            padding: 0,
            mode: WarpMode::Warp,
        };
        let b = BoxCorners::new(5.0, 7.0, 21.0, 23.0).unwrap();
        let patch = warp_region(&img, &b, &cfg, &[0.5]).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(patch.get(x, y, 0), img.get(x + 5, y + 7, 0));
            }
        }
    }

    #[test]
    fn warp_constant_image_ignores_outside() {
        let img = Image::filled(20, 20, 1, 0.3);
        let cfg = WarpConfig {
            out_size: 24,
            padding: 4,
            mode: WarpMode::Warp,
        };
        let b = BoxCorners::new(-10.0, 12.0, 8.0, 35.0).unwrap();
        let patch = warp_region(&img, &b, &cfg, &[0.3]).unwrap();
        assert!(patch.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn warp_padding_places_proposal_in_center() {
        // proposal pixels bright, everything else dark
        let img = Image::from_fn(100, 100, 1, |x, y, _| {
            if (20..60).contains(&x) && (30..50).contains(&y) {
                1.0
            } else {
                0.0
            }
        });
        let cfg = WarpConfig {
            out_size: 227,
            padding: 16,
            mode: WarpMode::Warp,
        };
        assert_eq!(cfg.inner_size(), 195);
        let b = BoxCorners::new(20.0, 30.0, 60.0, 50.0).unwrap();
        let patch = warp_region(&img, &b, &cfg, &[0.0]).unwrap();
        assert_eq!((patch.width(), patch.height()), (227, 227));
        // rows/cols well inside the central 195 square are bright, the border dark
        assert_eq!(patch.get(113, 113, 0), 1.0);
        assert_eq!(patch.get(24, 24, 0), 1.0);
        assert_eq!(patch.get(202, 202, 0), 1.0);
        assert_eq!(patch.get(5, 113, 0), 0.0);
        assert_eq!(patch.get(113, 221, 0), 0.0);
    }

    #[test]
    fn warp_output_size_fixed_for_any_aspect() {
        let img = gradient(50, 50);
        for mode in [
            WarpMode::Warp,
            WarpMode::TightestSquareWithContext,
            WarpMode::TightestSquareWithoutContext,
        ] {
            let cfg = WarpConfig {
                out_size: 20,
                padding: 3,
                mode,
            };
            for b in [
                (0.0, 0.0, 3.0, 40.0),
                (10.0, 10.0, 49.0, 12.5),
                (-5.0, -5.0, 60.0, 70.0),
            ] {
                let b = BoxCorners::new(b.0, b.1, b.2, b.3).unwrap();
                let p = warp_region(&img, &b, &cfg, &[0.5]).unwrap();
                assert_eq!((p.width(), p.height()), (20, 20));
            }
        }
    }

    #[test]
    fn warp_scale_equivariant() {
        let img = gradient(30, 30);
        let big = img.upscale(2);
        let b = BoxCorners::new(4.0, 6.0, 20.0, 22.0).unwrap();
        let cfg = WarpConfig {
            out_size: 16,
            padding: 0,
            mode: WarpMode::Warp,
        };
        let small_patch = warp_region(&img, &b, &cfg, &[0.5]).unwrap();
        let big_patch = warp_region(&big, &b.scale(2.0), &cfg, &[0.5]).unwrap();
        assert_eq!(small_patch, big_patch);
    }

    #[test]
    fn modes_agree_on_inside_square() {
        let img = gradient(40, 40);
        let b = BoxCorners::new(5.0, 9.0, 29.0, 33.0).unwrap();
        let patches: Vec<_> = [
            WarpMode::Warp,
            WarpMode::TightestSquareWithContext,
            WarpMode::TightestSquareWithoutContext,
        ]
        .into_iter()
        .map(|mode| {
            let cfg = WarpConfig {
                out_size: 17,
                padding: 0,
                mode,
            };
            warp_region(&img, &b, &cfg, &[0.5]).unwrap()
        })
        .collect();
        assert_eq!(patches[0], patches[1]);
        assert_eq!(patches[1], patches[2]);
    }

    #[test]
    fn square_without_context_masks_outside() {
        let img = Image::filled(40, 40, 1, 1.0);
        let b = BoxCorners::new(10.0, 18.0, 30.0, 22.0).unwrap();
        let cfg = WarpConfig {
            out_size: 20,
            padding: 0,
            mode: WarpMode::TightestSquareWithoutContext,
        };
        let p = warp_region(&img, &b, &cfg, &[0.25]).unwrap();
        // proposal is 20x4 inside a 20x20 square: rows 8..12 keep content
        assert_eq!(p.get(10, 10, 0), 1.0);
        assert_eq!(p.get(10, 2, 0), 0.25);
        assert_eq!(p.get(10, 17, 0), 0.25);
        let with = WarpConfig {
            mode: WarpMode::TightestSquareWithContext,
            ..cfg
        };
        let q = warp_region(&img, &b, &with, &[0.25]).unwrap();
        assert_eq!(q.get(10, 2, 0), 1.0);
    }

    #[test]
    fn warp_rejects_degenerate() {
        let img = gradient(10, 10);
        let cfg = WarpConfig {
            out_size: 8,
            padding: 0,
            mode: WarpMode::Warp,
        };
        let flat = BoxCorners::new(1.0, 1.0, 1.0, 5.0).unwrap();
        assert!(matches!(warp_region(&img, &flat, &cfg, &[0.0]), Err(Error::Domain(_))));
        let bad = WarpConfig {
            out_size: 8,
            padding: 4,
            mode: WarpMode::Warp,
        };
        let b = BoxCorners::new(1.0, 1.0, 4.0, 5.0).unwrap();
        assert!(warp_region(&img, &b, &bad, &[0.0]).is_err());
    }

    #[test]
    fn mean_examples() {
        assert_eq!(image_mean(&[Image::filled(3, 3, 1, 0.0)]).unwrap(), vec![0.0]);
        let m = image_mean(&[Image::filled(4, 4, 1, 0.2), Image::filled(4, 4, 1, 0.6)]).unwrap();
        assert!((m[0] - 0.4).abs() < 1e-7);
        let g = gradient(7, 5);
        let own = g.data().iter().map(|&v| v as f64).sum::<f64>() / 35.0;
        assert!((image_mean(std::slice::from_ref(&g)).unwrap()[0] as f64 - own).abs() < 1e-7);
        assert!(image_mean(&[]).is_err());
    }

    #[test]
    fn text_and_rect_drawing_stay_in_bounds() {
        let mut img = Image::filled(10, 6, 3, 0.0);
        img.draw_rect(&BoxCorners::new(-3.0, -3.0, 40.0, 40.0).unwrap(), 1.0);
        img.draw_text("0.93", 7, 2, 1.0);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(9, 5, 2), 1.0);
    }
}
