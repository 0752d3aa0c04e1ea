//! Deterministic synthetic text-like images.
//!
//! Renders lines of glyphs from a small procedural alphabet onto a shaded
//! background. Layout is locked to a fixed cell grid (8 px advance, 16 px
//! line pitch, 4 px margins) so the same glyph shapes repeat at the same
//! patch phases across images; that repetition is what patch priors feed on.
//! Gray values vary the way scans do: smooth paper shading, per-image
//! exposure, per-glyph ink levels, and antialiased stroke edges, so no patch
//! of one image recurs pixel-exact in another. Pixels are quantized to whole
//! levels, making in-memory images identical to their PGM round trip.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::imaging::{save_pgm, ImageBuffer};
use crate::seed;

pub const PAPER: f64 = 230.0;
pub const INK: f64 = 26.0;

/// Background shading amplitude around the paper level.
pub const SHADE_AMP: f64 = 5.0;
/// Half-width of the per-image exposure spread of both base levels.
pub const EXPOSURE_JITTER: f64 = 10.0;
/// Half-width of the per-glyph ink level spread.
pub const INK_JITTER: f64 = 8.0;

const CELL_W: usize = 8;
const CELL_H: usize = 12;
const LINE_PITCH: usize = 16;
const MARGIN: usize = 4;
/// Subpixel supersampling factor per axis for stroke antialiasing.
const SS: usize = 3;

// Segment bits: 0 top bar, 1 middle bar, 2 bottom bar, 3 left stem,
// 4 right stem, 5 center stem, 6 descending diagonal.
const SEG_TOP: u8 = 1 << 0;
const SEG_MID: u8 = 1 << 1;
const SEG_BOT: u8 = 1 << 2;
const SEG_LEFT: u8 = 1 << 3;
const SEG_RIGHT: u8 = 1 << 4;
const SEG_CENTER: u8 = 1 << 5;
const SEG_DIAG: u8 = 1 << 6;

/// Letter-like segment combinations.
const GLYPHS: &[u8] = &[
    SEG_TOP | SEG_MID | SEG_BOT | SEG_LEFT,             // E
    SEG_TOP | SEG_MID | SEG_LEFT,                       // F
    SEG_LEFT | SEG_BOT,                                 // L
    SEG_TOP | SEG_CENTER,                               // T
    SEG_CENTER,                                         // I
    SEG_LEFT | SEG_RIGHT | SEG_MID,                     // H
    SEG_LEFT | SEG_RIGHT | SEG_BOT,                     // U
    SEG_TOP | SEG_BOT | SEG_LEFT | SEG_RIGHT,           // O
    SEG_TOP | SEG_MID | SEG_LEFT | SEG_RIGHT,           // P-ish
    SEG_TOP | SEG_BOT | SEG_LEFT | SEG_RIGHT | SEG_MID, // B-ish
    SEG_TOP | SEG_LEFT | SEG_RIGHT,                     // Pi-like
    SEG_BOT | SEG_CENTER,                               // up-tack
    SEG_DIAG,                                           // slash
    SEG_DIAG | SEG_LEFT | SEG_RIGHT,                    // N-ish
    SEG_TOP | SEG_DIAG,                                 // 7-ish
    SEG_MID | SEG_CENTER,                               // plus
    SEG_TOP | SEG_MID | SEG_BOT,                        // xi-like
    SEG_LEFT | SEG_RIGHT,                               // ||
];

/// Picks per cell: a glyph index, or space about one cell in five.
fn pick_glyph(rng: &mut ChaCha8Rng) -> Option<u8> {
    let roll = rng.gen_range(0..GLYPHS.len() + 4);
    GLYPHS.get(roll).copied()
}

fn glyph_subpixel(mask: u8, r: usize, c: usize) -> bool {
    // Strokes are two pixels thick on a 7x12 drawing box inside the cell;
    // coordinates arrive in subpixel units (SS per pixel).
    if c >= 7 * SS {
        return false;
    }
    let top = mask & SEG_TOP != 0 && r < 2 * SS;
    let mid = mask & SEG_MID != 0 && (5 * SS..7 * SS).contains(&r);
    let bot = mask & SEG_BOT != 0 && r >= 10 * SS;
    let left = mask & SEG_LEFT != 0 && c < 2 * SS;
    let right = mask & SEG_RIGHT != 0 && (5 * SS..7 * SS).contains(&c);
    let center = mask & SEG_CENTER != 0 && (3 * SS..5 * SS).contains(&c);
    let diag = mask & SEG_DIAG != 0 && {
        let want = r * 6 * SS / (CELL_H * SS - 1);
        (want..want + 2 * SS).contains(&c)
    };
    top || mid || bot || left || right || center || diag
}

/// Fraction of the pixel at cell coordinates (r, c) covered by the glyph.
fn glyph_coverage(mask: u8, r: usize, c: usize) -> f64 {
    let mut hits = 0;
    for rr in 0..SS {
        for cc in 0..SS {
            if glyph_subpixel(mask, r * SS + rr, c * SS + cc) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SS * SS) as f64
}

/// Renders one deterministic text-like image.
pub fn text_image(height: usize, width: usize, seed: u64) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = ImageBuffer::filled(height, width, PAPER)?;
    let mut data = img.into_data();

    // Per-image exposure shifts both levels; one low-frequency product wave
    // of paper shading on top.
    let exposure = rng.gen_range(-EXPOSURE_JITTER..=EXPOSURE_JITTER);
    let paper = PAPER + exposure;
    let ink = INK + exposure;
    let tau = std::f64::consts::TAU;
    let fx = rng.gen_range(1..=3) as f64;
    let fy = rng.gen_range(1..=3) as f64;
    let px = rng.gen_range(0.0..tau);
    let py = rng.gen_range(0.0..tau);
    for r in 0..height {
        for c in 0..width {
            let sx = (tau * fx * c as f64 / width as f64 + px).sin();
            let sy = (tau * fy * r as f64 / height as f64 + py).sin();
            data[(r, c)] = paper + SHADE_AMP * sx * sy;
        }
    }

    let mut y = MARGIN;
    while y + CELL_H <= height.saturating_sub(MARGIN) {
        let mut x = MARGIN;
        while x + CELL_W <= width.saturating_sub(MARGIN) {
            if let Some(mask) = pick_glyph(&mut rng) {
                let level = ink + rng.gen_range(-INK_JITTER..=INK_JITTER);
                for r in 0..CELL_H {
                    for c in 0..CELL_W {
                        let alpha = glyph_coverage(mask, r, c);
                        if alpha > 0.0 {
                            let base = data[(y + r, x + c)];
                            data[(y + r, x + c)] = base + alpha * (level - base);
                        }
                    }
                }
            }
            x += CELL_W;
        }
        y += LINE_PITCH;
    }
    // Quantize to whole levels so PGM export reproduces the image exactly.
    data.mapv_inplace(|v| v.clamp(0.0, 255.0).round());
    ImageBuffer::new(data)
}

/// Writes `train` + `test` square text images as PGM files under
/// `dir/train` and `dir/test`.
pub fn write_dataset(dir: &Path, train: usize, test: usize, size: usize, seed: u64) -> Result<()> {
    let train_dir = dir.join("train");
    let test_dir = dir.join("test");
    std::fs::create_dir_all(&train_dir).map_err(crate::imaging::ImageIoError::from)?;
    std::fs::create_dir_all(&test_dir).map_err(crate::imaging::ImageIoError::from)?;
    for i in 0..train {
        let img = text_image(size, size, seed::mix(seed, i as u64))?;
        save_pgm(&img, &train_dir.join(format!("train_{i:03}.pgm")))?;
    }
    for i in 0..test {
        let img = text_image(size, size, seed::mix(seed, 1_000_000 + i as u64))?;
        save_pgm(&img, &test_dir.join(format!("test_{i:03}.pgm")))?;
    }
    Ok(())
}
