//! Fixed patch codebooks: the toy stand-in for a VQ decoder's embedding
//! table. Tokens 0..K-2 are flat colors spaced around the hue wheel; the
//! last two tokens are textured (checkerboard and diagonal gradient) so
//! images carry more than per-patch mean color.

/// Patch side length in pixels.
pub const PATCH: usize = 4;
/// Color channels.
pub const CHANNELS: usize = 3;

const FLAT_SATURATION: f64 = 0.6;
const FLAT_VALUE: f64 = 0.9;

/// Immutable table of K pixel patches, each PATCH×PATCH×CHANNELS in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    data: Vec<f64>, // size * PATCH * PATCH * CHANNELS, row-major per patch
}

impl Codebook {
    /// Deterministic standard codebook for a given size (≥ 2).
    pub fn standard(size: usize) -> Self {
        assert!(size >= 2, "codebook needs at least 2 entries");
        let stride = PATCH * PATCH * CHANNELS;
        let mut data = vec![0.0; size * stride];
        let flats = size - 2;
        for token in 0..size {
            let patch = &mut data[token * stride..(token + 1) * stride];
            if token < flats {
                let hue = token as f64 / flats as f64;
                let rgb = hsv_to_rgb(hue, FLAT_SATURATION, FLAT_VALUE);
                for px in patch.chunks_mut(CHANNELS) {
                    px.copy_from_slice(&rgb);
                }
            } else if token == size - 2 {
                // checkerboard
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let v = if (x + y) % 2 == 0 { 0.85 } else { 0.15 };
                        let at = (y * PATCH + x) * CHANNELS;
                        patch[at..at + CHANNELS].fill(v);
                    }
                }
            } else {
                // diagonal gradient
                for y in 0..PATCH {
                    for x in 0..PATCH {
                        let v = (x + y) as f64 / (2 * (PATCH - 1)) as f64;
                        let at = (y * PATCH + x) * CHANNELS;
                        patch[at..at + CHANNELS].fill(v);
                    }
                }
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Patch pixels for one token, PATCH×PATCH×CHANNELS row-major.
    pub fn patch(&self, token: usize) -> &[f64] {
        let stride = PATCH * PATCH * CHANNELS;
        &self.data[token * stride..(token + 1) * stride]
    }
}

/// HSV (h in [0,1), s, v in [0,1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}
