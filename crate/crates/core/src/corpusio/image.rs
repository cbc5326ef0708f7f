//! Single-channel radiograph grids: PGM I/O, resizing and the two
//! augmentation pipelines (MIMIC-style 512 letterbox, RSNA-style 224 crop).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, input_err, Error, Result};
use crate::rng::Rng;

pub const MIMIC_SIZE: usize = 512;
pub const RSNA_SIZE: usize = 224;

/// Row-major single-channel image.
///
/// Loaded and augmented grids hold intensities in `[0,1]`; the output of
/// [`preprocess_mimic_image`] is normalized and no longer bounded.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return input_err("image dimensions must be positive");
        }
        check_len("image pixels", width * height, pixels.len())?;
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return input_err("pixel intensities must lie in [0,1]");
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample with zero outside the image; `(x, y)` in pixel-center coordinates.
    fn sample(&self, x: f64, y: f64) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
        let get = |xi: f64, yi: f64| -> f32 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.at(xi as usize, yi as usize)
            }
        };
        let top = get(x0, y0) * (1.0 - fx) + get(x0 + 1.0, y0) * fx;
        let bottom = get(x0, y0 + 1.0) * (1.0 - fx) + get(x0 + 1.0, y0 + 1.0) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn mean_std(&self) -> (f64, f64) {
        let n = self.pixels.len() as f64;
        let mean = self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / n;
        let var = self
            .pixels
            .iter()
            .map(|&p| (f64::from(p) - mean).powi(2))
            .sum::<f64>()
            / n;
        (mean, var.sqrt())
    }
}

/// Reads an 8-bit binary PGM (P5), mapping gray levels to `[0,1]`.
pub fn read_pgm(path: &Path) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Input(m) => Error::Input(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_pgm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return input_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return input_err(format!("unsupported PGM magic {}", fields[0]));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Input(format!("bad PGM field {s}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return input_err(format!("only 8-bit PGM is supported (maxval {maxval})"));
    }
    pos += 1; // single whitespace after maxval
    let data = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Input("truncated PGM data".into()))?;
    let scale = maxval as f32;
    ImageGrid::new(
        w,
        h,
        data.iter()
            .map(|&b| (f32::from(b) / scale).min(1.0))
            .collect(),
    )
}

/// Writes an 8-bit binary PGM; values are clamped to `[0,1]` and rounded.
pub fn write_pgm(path: &Path, img: &ImageGrid) -> Result<()> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(
        img.pixels
            .iter()
            .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, out)?;
    Ok(())
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(img: &ImageGrid, new_w: usize, new_h: usize) -> Result<ImageGrid> {
    if new_w == 0 || new_h == 0 {
        return input_err("resize target must be positive");
    }
    if new_w == img.width && new_h == img.height {
        return Ok(img.clone());
    }
    let sx = img.width as f64 / new_w as f64;
    let sy = img.height as f64 / new_h as f64;
    let mut pixels = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        for x in 0..new_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            pixels.push(img.sample(src_x, src_y));
        }
    }
    Ok(ImageGrid {
        width: new_w,
        height: new_h,
        pixels,
    })
}

/// How the final MIMIC grid is standardized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    /// Per-image mean and standard deviation; a constant image maps to zeros.
    Dataset,
    /// Fixed statistics, e.g. the ImageNet grayscale mean 0.449 / std 0.226.
    Fixed { mean: f64, std: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MimicAugConfig {
    /// Half-width of the uniform intensity offset.
    pub dither: f64,
    pub noise_std: f64,
    /// Maximum translation in pixels along each axis.
    pub max_shift: f64,
    /// Maximum rotation in degrees.
    pub max_deg: f64,
    pub normalization: Normalization,
}

impl Default for MimicAugConfig {
    fn default() -> Self {
        Self {
            dither: 0.05,
            noise_std: 0.01,
            max_shift: 10.0,
            max_deg: 5.0,
            normalization: Normalization::Dataset,
        }
    }
}

impl MimicAugConfig {
    pub fn disabled() -> Self {
        Self {
            dither: 0.0,
            noise_std: 0.0,
            max_shift: 0.0,
            max_deg: 0.0,
            normalization: Normalization::Dataset,
        }
    }
}

/// Concrete augmentation draws for one MIMIC image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MimicAugParams {
    pub dither: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub degrees: f64,
}

fn symmetric(rng: &mut Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// Letterboxes to 512×512, augments, and normalizes.
///
/// Order: resize long side to 512, center with black padding, intensity dither,
/// Gaussian noise, translation + rotation, clamp to `[0,1]`, normalize.
pub fn preprocess_mimic_image(
    img: &ImageGrid,
    cfg: &MimicAugConfig,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    if img.width == 0 || img.height == 0 {
        return input_err("zero-sized image");
    }
    let long = img.width.max(img.height) as f64;
    let scale = MIMIC_SIZE as f64 / long;
    let new_w = ((img.width as f64 * scale).round() as usize).clamp(1, MIMIC_SIZE);
    let new_h = ((img.height as f64 * scale).round() as usize).clamp(1, MIMIC_SIZE);
    let resized = resize_bilinear(img, new_w, new_h)?;
    let (off_x, off_y) = ((MIMIC_SIZE - new_w) / 2, (MIMIC_SIZE - new_h) / 2);
    let mut canvas = ImageGrid::filled(MIMIC_SIZE, MIMIC_SIZE, 0.0);
    for y in 0..new_h {
        let dst = (y + off_y) * MIMIC_SIZE + off_x;
        canvas.pixels[dst..dst + new_w]
            .copy_from_slice(&resized.pixels[y * new_w..(y + 1) * new_w]);
    }

    let params = MimicAugParams {
        dither: symmetric(rng, cfg.dither),
        shift_x: symmetric(rng, cfg.max_shift),
        shift_y: symmetric(rng, cfg.max_shift),
        degrees: symmetric(rng, cfg.max_deg),
    };
    if params.dither != 0.0 {
        let d = params.dither as f32;
        canvas.pixels.iter_mut().for_each(|p| *p += d);
    }
    if cfg.noise_std > 0.0 {
        for p in canvas.pixels.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *p += (z * cfg.noise_std) as f32;
        }
    }
    if params.shift_x != 0.0 || params.shift_y != 0.0 || params.degrees != 0.0 {
        canvas = warp(&canvas, &params);
    }
    canvas
        .pixels
        .iter_mut()
        .for_each(|p| *p = p.clamp(0.0, 1.0));

    let (mean, std) = match cfg.normalization {
        Normalization::Dataset => canvas.mean_std(),
        Normalization::Fixed { mean, std } => (mean, std),
    };
    if std > 1e-12 {
        canvas
            .pixels
            .iter_mut()
            .for_each(|p| *p = ((f64::from(*p) - mean) / std) as f32);
    } else {
        canvas.pixels.iter_mut().for_each(|p| *p = 0.0);
    }
    Ok(canvas)
}

/// Rotation about the image center followed by translation, zero fill.
fn warp(img: &ImageGrid, p: &MimicAugParams) -> ImageGrid {
    let (cx, cy) = (
        (img.width as f64 - 1.0) / 2.0,
        (img.height as f64 - 1.0) / 2.0,
    );
    let (sin, cos) = p.degrees.to_radians().sin_cos();
    let mut out = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in 0..img.width {
            // inverse map: undo translation, then rotate by -theta
            let dx = x as f64 - p.shift_x - cx;
            let dy = y as f64 - p.shift_y - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            out.push(img.sample(sx, sy));
        }
    }
    ImageGrid {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RsnaAugConfig {
    /// Maximum crop-center displacement in pixels.
    pub center_jitter: usize,
    /// Relative brightness range (0.1 = ±10%).
    pub brightness: f64,
    /// Relative contrast range (0.2 = ±20%).
    pub contrast: f64,
    /// Recorded for completeness; identity on single-channel grids.
    pub saturation: f64,
    /// Recorded for completeness; identity on single-channel grids.
    pub hue: f64,
}

impl Default for RsnaAugConfig {
    fn default() -> Self {
        Self {
            center_jitter: 8,
            brightness: 0.1,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

impl RsnaAugConfig {
    pub fn disabled() -> Self {
        Self {
            center_jitter: 0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> RsnaAugParams {
        let j = self.center_jitter as i64;
        let mut offset = || if j > 0 { rng.random_range(-j..=j) } else { 0 };
        let (offset_x, offset_y) = (offset(), offset());
        RsnaAugParams {
            offset_x,
            offset_y,
            brightness: 1.0 + symmetric(rng, self.brightness),
            contrast: 1.0 + symmetric(rng, self.contrast),
        }
    }
}

/// Concrete draws for one RSNA crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RsnaAugParams {
    pub offset_x: i64,
    pub offset_y: i64,
    pub brightness: f64,
    pub contrast: f64,
}

impl RsnaAugParams {
    pub fn identity() -> Self {
        Self {
            offset_x: 0,
            offset_y: 0,
            brightness: 1.0,
            contrast: 1.0,
        }
    }

    /// 224×224 jittered center crop, multiplicative brightness, contrast about the crop mean, clamp.
    pub fn apply(&self, img: &ImageGrid) -> Result<ImageGrid> {
        if img.width < RSNA_SIZE || img.height < RSNA_SIZE {
            return input_err(format!(
                "image {}x{} smaller than {RSNA_SIZE}x{RSNA_SIZE}",
                img.width, img.height
            ));
        }
        let max_x = (img.width - RSNA_SIZE) as i64;
        let max_y = (img.height - RSNA_SIZE) as i64;
        let x0 = (max_x / 2 + self.offset_x).clamp(0, max_x) as usize;
        let y0 = (max_y / 2 + self.offset_y).clamp(0, max_y) as usize;
        let b = self.brightness as f32;
        let mut pixels = Vec::with_capacity(RSNA_SIZE * RSNA_SIZE);
        for y in y0..y0 + RSNA_SIZE {
            pixels.extend(
                img.pixels[y * img.width + x0..y * img.width + x0 + RSNA_SIZE]
                    .iter()
                    .map(|&p| p * b),
            );
        }
        if self.contrast != 1.0 {
            let mean = pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / pixels.len() as f64;
            for p in pixels.iter_mut() {
                *p = (mean + self.contrast * (f64::from(*p) - mean)) as f32;
            }
        }
        pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
        Ok(ImageGrid {
            width: RSNA_SIZE,
            height: RSNA_SIZE,
            pixels,
        })
    }
}

pub fn augment_rsna_image(
    img: &ImageGrid,
    cfg: &RsnaAugConfig,
    rng: &mut Rng,
) -> Result<ImageGrid> {
    cfg.sample(rng).apply(img)
}
