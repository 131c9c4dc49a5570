//! Contact sheets: every frame of a clip side by side in one PNG.

use std::path::Path;

use image::{Rgb, RgbImage};
use sugar_core::numerics::Tensor;

use crate::CliError;

pub const UPSCALE: u32 = 8;
pub const SEPARATOR: u32 = 2;
const SEPARATOR_COLOR: Rgb<u8> = Rgb([255, 255, 255]);

/// Maps `[-1, 1]` to `0..=255`; out-of-range values saturate.
pub fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn bad_shape(video: &Tensor) -> CliError {
    sugar_core::Error::Data(format!("frame grid needs a [F, H, W, 3] clip, got {:?}", video.shape())).into()
}

/// Lays out a `[F, H, W, 3]` clip as one row of frames, each upscaled by
/// nearest neighbour and separated by a white gap.
pub fn frame_grid(video: &Tensor) -> Result<RgbImage, CliError> {
    let &[f, h, w, c] = video.shape() else {
        return Err(bad_shape(video));
    };
    if c != 3 || f == 0 {
        return Err(bad_shape(video));
    }
    let (cell_w, cell_h) = (w as u32 * UPSCALE, h as u32 * UPSCALE);
    let width = f as u32 * cell_w + (f as u32 - 1) * SEPARATOR;
    let mut img = RgbImage::from_pixel(width, cell_h, SEPARATOR_COLOR);
    let data = video.data();
    for k in 0..f {
        let x0 = k as u32 * (cell_w + SEPARATOR);
        for y in 0..cell_h {
            for x in 0..cell_w {
                let (sy, sx) = ((y / UPSCALE) as usize, (x / UPSCALE) as usize);
                let base = ((k * h + sy) * w + sx) * 3;
                let px = Rgb([to_byte(data[base]), to_byte(data[base + 1]), to_byte(data[base + 2])]);
                img.put_pixel(x0 + x, y, px);
            }
        }
    }
    Ok(img)
}

pub fn write_frame_grid(video: &Tensor, path: &Path) -> Result<(), CliError> {
    frame_grid(video)?.save(path).map_err(|e| CliError::output(path, e))
}
