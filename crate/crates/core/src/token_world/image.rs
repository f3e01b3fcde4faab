//! Decoded images and the token-to-pixel tiling decoder.

use super::codebook::{Codebook, CHANNELS, PATCH};
use super::{TokenSequence, WorldError};

/// Row-major H×W×C pixel array with values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }

    /// Flat pixel view (feature extractors and the discriminator consume
    /// this).
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    /// Binary PPM (P6, 8-bit) encoding for quick inspection.
    pub fn to_ppm(&self) -> Vec<u8> {
        assert_eq!(self.channels, 3, "PPM is RGB");
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }
}

/// Tile per-token patches in grid order. The sequence must be complete.
pub fn decode_tokens(v: &TokenSequence, cb: &Codebook) -> Result<Image, WorldError> {
    if !v.is_complete() {
        return Err(WorldError::MaskPresent);
    }
    let height = v.height() * PATCH;
    let width = v.width() * PATCH;
    let mut data = vec![0.0; height * width * CHANNELS];
    for gy in 0..v.height() {
        for gx in 0..v.width() {
            let patch = cb.patch(v.get(gy * v.width() + gx) as usize);
            for py in 0..PATCH {
                let row_at = ((gy * PATCH + py) * width + gx * PATCH) * CHANNELS;
                let src_at = py * PATCH * CHANNELS;
                data[row_at..row_at + PATCH * CHANNELS]
                    .copy_from_slice(&patch[src_at..src_at + PATCH * CHANNELS]);
            }
        }
    }
    Ok(Image { height, width, channels: CHANNELS, data })
}
