//! Synthetic textured scenes for examples, smoke training, and tests.
//!
//! A scene is a 4-band (R, G, B, NIR) image built from smooth per-band
//! background waves, a few soft blobs, and a shared high-frequency
//! texture whose wavelengths sit below the MS Nyquist limit, so the
//! detail genuinely lives in the PAN image after degradation. The PAN is
//! the per-pixel band mean.

use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::Result;
use crate::raster::{crop_patches, BandRole, PatchSet, Raster, ScaleFactor, RGBN};

/// A 4-band HR scene and its matching PAN at the same grid.
pub fn textured_scene(
    width: usize,
    height: usize,
    seed: u64,
    value_range: (f64, f64),
) -> Result<(Raster, Raster)> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let span = value_range.1 - value_range.0;
    let mid = value_range.0 + 0.5 * span;

    // smooth background: 3 long waves per band, correlated across bands
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..2.0) / width as f64,
                rng.gen_range(0.5..2.0) / height as f64,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.04..0.08) * span,
            )
        })
        .collect();
    let band_wave_gain: Vec<f64> = (0..4).map(|_| rng.gen_range(0.7..1.3)).collect();

    // soft blobs shared across bands with per-band amplitude
    let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.2..0.8) * width as f64,
                rng.gen_range(0.2..0.8) * height as f64,
                rng.gen_range(0.08..0.25) * width.min(height) as f64,
                rng.gen_range(-0.12..0.12) * span,
            )
        })
        .collect();
    let band_blob_gain: Vec<f64> = (0..4).map(|_| rng.gen_range(0.6..1.4)).collect();

    // high-frequency texture: wavelengths 3..6 px, lost at 4x reduction
    let texture: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let wavelength = rng.gen_range(3.0..6.0);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            (
                angle.cos() / wavelength,
                angle.sin() / wavelength,
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.04) * span,
            )
        })
        .collect();
    let band_tex_gain: Vec<f64> = (0..4).map(|_| rng.gen_range(0.8..1.2)).collect();

    let plane = width * height;
    let mut data = vec![0.0; plane * 4];
    for y in 0..height {
        for x in 0..width {
            let (fx, fy) = (x as f64, y as f64);
            let mut wave = 0.0;
            for &(kx, ky, phase, amp) in &waves {
                wave += amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + phase).cos();
            }
            let mut blob = 0.0;
            for &(cx, cy, radius, amp) in &blobs {
                let d2 = (fx - cx) * (fx - cx) + (fy - cy) * (fy - cy);
                blob += amp * (-d2 / (2.0 * radius * radius)).exp();
            }
            let mut tex = 0.0;
            for &(kx, ky, phase, amp) in &texture {
                tex += amp * (std::f64::consts::TAU * (kx * fx + ky * fy) + phase).cos();
            }
            for b in 0..4 {
                data[b * plane + y * width + x] = mid
                    + band_wave_gain[b] * wave
                    + band_blob_gain[b] * blob
                    + band_tex_gain[b] * tex;
            }
        }
    }
    let hrms = Raster::new(width, height, RGBN.to_vec(), data, value_range)?;

    let mut pan_data = vec![0.0; plane];
    for b in 0..4 {
        for (acc, v) in pan_data.iter_mut().zip(hrms.band(b)) {
            *acc += v * 0.25;
        }
    }
    let pan = Raster::new(width, height, vec![BandRole::Pan], pan_data, value_range)?;
    Ok((hrms, pan))
}

/// `count` degraded training triples with `pan_size` PAN patches, one
/// fresh scene per triple.
pub fn training_set(
    count: usize,
    pan_size: usize,
    s: ScaleFactor,
    seed: u64,
    value_range: (f64, f64),
) -> Result<PatchSet> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (hrms, pan) = textured_scene(pan_size, pan_size, seed.wrapping_add(i as u64), value_range)?;
        let mut set = crop_patches(&hrms, &pan, pan_size, pan_size, s, &format!("synth{i}"))?;
        out.append(&mut set);
    }
    Ok(out)
}
