//! Grayscale images, patch grids, noise injection, PSNR, and file I/O.
//!
//! Images are `f64` row-major buffers on the 0..=255 intensity scale. Files
//! are binary PGM (P5, 8-bit) for read and write, plus 8-bit grayscale PNG
//! for read only.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{CoreError, Result};

pub const MAX_INTENSITY: f64 = 255.0;

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("not a supported image file (magic bytes {found:?})")]
    BadMagic { found: Vec<u8> },

    #[error("malformed header: {0}")]
    BadHeader(String),

    #[error("unsupported bit depth (max value {max_val}, only 8-bit supported)")]
    UnsupportedDepth { max_val: u32 },

    #[error("truncated pixel data: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("unsupported PNG: {0}")]
    UnsupportedPng(String),

    #[error("PNG decode failed: {0}")]
    PngDecode(String),
}

/// Grayscale image on the 0..=255 scale; values may leave that range after
/// noise injection or boosting and are clamped only at export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    data: Array2<f64>,
}

impl ImageBuffer {
    /// Wraps `(height, width)` data; every value must be finite.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(CoreError::EmptyInput("image"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite("image"));
        }
        Ok(ImageBuffer { data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        ImageBuffer::new(Array2::from_elem((height, width), value))
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// Copy with every value clamped to the displayable range.
    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            data: self.data.mapv(|v| v.clamp(0.0, MAX_INTENSITY)),
        }
    }

    /// Row-major 8-bit pixels: clamp, then round half away from zero.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| v.clamp(0.0, MAX_INTENSITY).round() as u8)
            .collect()
    }
}

/// Patch offsets over an image: strided top-left corners along each axis with
/// the final offset clamped so the last patch touches the image border.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchGrid {
    width: usize,
    height: usize,
    patch_side: usize,
    stride: usize,
    ys: Vec<usize>,
    xs: Vec<usize>,
}

fn axis_offsets(dim: usize, side: usize, stride: usize) -> Vec<usize> {
    let last = dim - side;
    let mut offsets = Vec::with_capacity(last / stride + 2);
    let mut o = 0;
    while o < last {
        offsets.push(o);
        o += stride;
    }
    offsets.push(last);
    offsets
}

impl PatchGrid {
    pub fn new(width: usize, height: usize, patch_side: usize, stride: usize) -> Result<Self> {
        if patch_side == 0 {
            return Err(CoreError::invalid_parameter("patch_side", "must be >= 1"));
        }
        if stride == 0 {
            return Err(CoreError::invalid_parameter("stride", "must be >= 1"));
        }
        if stride > patch_side {
            return Err(CoreError::invalid_parameter(
                "stride",
                format!("stride {stride} > patch side {patch_side} would leave coverage gaps"),
            ));
        }
        if patch_side > width || patch_side > height {
            return Err(CoreError::invalid_parameter(
                "patch_side",
                format!("patch side {patch_side} exceeds image {width}x{height}"),
            ));
        }
        Ok(PatchGrid {
            width,
            height,
            patch_side,
            stride,
            ys: axis_offsets(height, patch_side, stride),
            xs: axis_offsets(width, patch_side, stride),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Patch vector length (`patch_side` squared).
    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Number of patches (rows x cols of offsets).
    pub fn len(&self) -> usize {
        self.ys.len() * self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Top-left corner `(y, x)` of patch `index`, row-major over offsets.
    pub fn offset(&self, index: usize) -> (usize, usize) {
        let cols = self.xs.len();
        (self.ys[index / cols], self.xs[index % cols])
    }

    /// Center pixel `(y, x)` of patch `index`.
    pub fn center(&self, index: usize) -> (usize, usize) {
        let (y, x) = self.offset(index);
        (y + self.patch_side / 2, x + self.patch_side / 2)
    }
}

/// Extracts all grid patches as rows, pixels in row-major order within each
/// patch.
pub fn extract_patches(img: &ImageBuffer, grid: &PatchGrid) -> Result<Array2<f64>> {
    if grid.width() != img.width() || grid.height() != img.height() {
        return Err(CoreError::DimensionMismatch {
            expected: grid.width() * grid.height(),
            got: img.width() * img.height(),
        });
    }
    let side = grid.patch_side();
    let mut out = Array2::zeros((grid.len(), grid.patch_dim()));
    let data = img.data();
    for (idx, mut row) in out.rows_mut().into_iter().enumerate() {
        let (y, x) = grid.offset(idx);
        let mut k = 0;
        for dy in 0..side {
            for dx in 0..side {
                row[k] = data[(y + dy, x + dx)];
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Averages overlapping patch estimates back into an image. Every pixel is
/// covered because grids never leave gaps.
pub fn reassemble(patches: ArrayView2<f64>, grid: &PatchGrid) -> Result<ImageBuffer> {
    if patches.nrows() != grid.len() || patches.ncols() != grid.patch_dim() {
        return Err(CoreError::DimensionMismatch {
            expected: grid.len() * grid.patch_dim(),
            got: patches.nrows() * patches.ncols(),
        });
    }
    let side = grid.patch_side();
    let mut sums = Array2::<f64>::zeros((grid.height(), grid.width()));
    let mut counts = Array2::<f64>::zeros((grid.height(), grid.width()));
    for (idx, row) in patches.rows().into_iter().enumerate() {
        let (y, x) = grid.offset(idx);
        let mut k = 0;
        for dy in 0..side {
            for dx in 0..side {
                sums[(y + dy, x + dx)] += row[k];
                counts[(y + dy, x + dx)] += 1.0;
                k += 1;
            }
        }
    }
    ImageBuffer::new(sums / counts)
}

/// Adds white Gaussian noise of standard deviation `sigma`, unclipped, drawn
/// row-major from a ChaCha stream seeded with `seed`.
pub fn add_noise(img: &ImageBuffer, sigma: f64, seed: u64) -> Result<ImageBuffer> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(CoreError::invalid_parameter("sigma", "must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = img
        .data
        .mapv(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    ImageBuffer::new(noisy)
}

/// Peak signal-to-noise ratio in dB on the 0..=255 scale; identical images
/// give `f64::INFINITY`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(CoreError::DimensionMismatch {
            expected: a.width() * a.height(),
            got: b.width() * b.height(),
        });
    }
    let n = (a.width() * a.height()) as f64;
    let mse = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (MAX_INTENSITY * MAX_INTENSITY / mse).log10())
}

/// Writes binary 8-bit PGM (P5).
pub fn save_pgm(img: &ImageBuffer, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.width() * img.height());
    write!(out, "P5\n{} {}\n255\n", img.width(), img.height())
        .expect("writing to a Vec cannot fail");
    out.extend_from_slice(&img.to_bytes());
    fs::write(path, out).map_err(ImageIoError::from)?;
    Ok(())
}

struct PgmTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmTokens<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn next_uint(&mut self) -> std::result::Result<u32, ImageIoError> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(ImageIoError::BadHeader(
                "expected an unsigned integer".into(),
            ));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("digits are valid UTF-8")
            .parse::<u32>()
            .map_err(|e| ImageIoError::BadHeader(format!("integer out of range: {e}")))
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Array2<f64>, ImageIoError> {
    let mut tok = PgmTokens { bytes, pos: 2 };
    let width = tok.next_uint()? as usize;
    let height = tok.next_uint()? as usize;
    let max_val = tok.next_uint()?;
    if width == 0 || height == 0 {
        return Err(ImageIoError::BadHeader(format!(
            "degenerate dimensions {width}x{height}"
        )));
    }
    if max_val == 0 || max_val > 255 {
        return Err(ImageIoError::UnsupportedDepth { max_val });
    }
    // Exactly one separator byte between the header and the raster.
    if tok.pos >= bytes.len() || !bytes[tok.pos].is_ascii_whitespace() {
        return Err(ImageIoError::BadHeader(
            "missing separator before pixel data".into(),
        ));
    }
    let data_start = tok.pos + 1;
    let expected = width * height;
    let raster = &bytes[data_start..];
    if raster.len() < expected {
        return Err(ImageIoError::Truncated {
            expected,
            got: raster.len(),
        });
    }
    let mut data = Array2::zeros((height, width));
    for (dst, src) in data.iter_mut().zip(raster.iter()) {
        *dst = f64::from(*src);
    }
    Ok(data)
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Array2<f64>, ImageIoError> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| ImageIoError::PngDecode(e.to_string()))?;
    match decoded {
        image::DynamicImage::ImageLuma8(gray) => {
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut data = Array2::zeros((h, w));
            for (dst, src) in data.iter_mut().zip(gray.as_raw().iter()) {
                *dst = f64::from(*src);
            }
            Ok(data)
        }
        image::DynamicImage::ImageLuma16(_) => {
            Err(ImageIoError::UnsupportedDepth { max_val: 65535 })
        }
        other => Err(ImageIoError::UnsupportedPng(format!(
            "color type {:?}, expected 8-bit grayscale",
            other.color()
        ))),
    }
}

/// Loads a PGM (P5) or 8-bit grayscale PNG file, dispatching on magic bytes.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = fs::read(path).map_err(ImageIoError::from)?;
    let data = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png(&bytes)?
    } else {
        return Err(ImageIoError::BadMagic {
            found: bytes.iter().take(4).copied().collect(),
        }
        .into());
    };
    ImageBuffer::new(data)
}

/// Loads every `.pgm`/`.png` file in `dir`, sorted by file name; returns the
/// images and the paths that were skipped for not carrying an image
/// extension.
pub fn load_dataset_dir(dir: &Path) -> Result<(Vec<(PathBuf, ImageBuffer)>, Vec<PathBuf>)> {
    let mut image_paths = Vec::new();
    let mut skipped = Vec::new();
    for entry in fs::read_dir(dir).map_err(ImageIoError::from)? {
        let path = entry.map_err(ImageIoError::from)?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("pgm") | Some("png") => image_paths.push(path),
            _ => skipped.push(path),
        }
    }
    image_paths.sort();
    skipped.sort();
    let mut images = Vec::with_capacity(image_paths.len());
    for path in image_paths {
        let img = load_image(&path)?;
        images.push((path, img));
    }
    Ok((images, skipped))
}
