//! Classical pan-sharpening baselines: IHS, Brovey, Gram-Schmidt, SFIM.
//!
//! All four upsample the MS image to the PAN grid with the shared bicubic
//! resampler and then inject PAN detail per their standard formulations.
//! Histogram matching is restricted to mean/sigma matching so results are
//! deterministic and testable.

use crate::error::{Error, Result};
use crate::raster::{bicubic_resample, downsample, Raster, ScaleFactor};

/// Inputs shared by every fusion method.
pub struct FusionInput<'a> {
    pub lrms: &'a Raster,
    pub pan: &'a Raster,
    pub s: ScaleFactor,
}

impl<'a> FusionInput<'a> {
    pub fn new(lrms: &'a Raster, pan: &'a Raster, s: ScaleFactor) -> Result<Self> {
        if pan.bands() != 1 {
            return Err(Error::InvalidArgument(format!(
                "pan must have one band, got {}",
                pan.bands()
            )));
        }
        let f = s.as_usize();
        if pan.width() != lrms.width() * f || pan.height() != lrms.height() * f {
            return Err(Error::InvalidArgument(format!(
                "pan {}x{} must be {}x the ms grid {}x{}",
                pan.width(),
                pan.height(),
                s.get(),
                lrms.width(),
                lrms.height()
            )));
        }
        Ok(FusionInput { lrms, pan, s })
    }
}

/// A fused raster plus the count of degenerate pixels that fell back to
/// the plain upsampled MS (ratio methods only).
pub struct FusionResult {
    pub raster: Raster,
    pub degenerate_pixels: usize,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64], mu: f64) -> f64 {
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Per-pixel mean over all spectral bands (generalized intensity).
fn intensity(ms_up: &Raster) -> Vec<f64> {
    let plane = ms_up.width() * ms_up.height();
    let mut i = vec![0.0; plane];
    for b in 0..ms_up.bands() {
        for (acc, v) in i.iter_mut().zip(ms_up.band(b)) {
            *acc += v;
        }
    }
    let inv = 1.0 / ms_up.bands() as f64;
    for v in &mut i {
        *v *= inv;
    }
    i
}

/// PAN linearly matched to the intensity image's mean and standard
/// deviation.
fn match_pan(pan: &[f64], intensity: &[f64]) -> Result<Vec<f64>> {
    let mu_p = mean(pan);
    let sd_p = std_dev(pan, mu_p);
    if sd_p == 0.0 {
        return Err(Error::Degenerate(
            "zero-variance pan: mean/sigma matching undefined".into(),
        ));
    }
    let mu_i = mean(intensity);
    let sd_i = std_dev(intensity, mu_i);
    let gain = sd_i / sd_p;
    Ok(pan.iter().map(|p| (p - mu_p) * gain + mu_i).collect())
}

fn upsample_ms(input: &FusionInput) -> Result<Raster> {
    bicubic_resample(input.lrms, input.pan.width(), input.pan.height())
}

fn require_bands(input: &FusionInput, min: usize, method: &str) -> Result<()> {
    if input.lrms.bands() < min {
        return Err(Error::InvalidArgument(format!(
            "{method} needs at least {min} bands, got {}",
            input.lrms.bands()
        )));
    }
    Ok(())
}

/// Generalized IHS: fused_b = ms_b + (P' - I) with I the band mean and P'
/// the matched PAN.
pub fn ihs_fuse(input: &FusionInput) -> Result<FusionResult> {
    require_bands(input, 2, "ihs")?;
    let ms_up = upsample_ms(input)?;
    let i = intensity(&ms_up);
    let p = match_pan(input.pan.band(0), &i)?;
    let plane = ms_up.width() * ms_up.height();
    let mut data = Vec::with_capacity(ms_up.data().len());
    for b in 0..ms_up.bands() {
        let band = ms_up.band(b);
        for k in 0..plane {
            data.push(band[k] + (p[k] - i[k]));
        }
    }
    Ok(FusionResult {
        raster: Raster::new(
            ms_up.width(),
            ms_up.height(),
            ms_up.band_roles().to_vec(),
            data,
            ms_up.value_range(),
        )?,
        degenerate_pixels: 0,
    })
}

/// Brovey: fused_b = ms_b * (P' / I); pixels where I <= eps pass the
/// upsampled MS through unchanged and are counted.
pub fn brovey_fuse(input: &FusionInput) -> Result<FusionResult> {
    require_bands(input, 2, "brovey")?;
    let ms_up = upsample_ms(input)?;
    let i = intensity(&ms_up);
    let p = match_pan(input.pan.band(0), &i)?;
    let eps = 1e-9 * ms_up.range_span();
    let plane = ms_up.width() * ms_up.height();
    let mut degenerate = vec![false; plane];
    let mut count = 0;
    for k in 0..plane {
        if i[k] <= eps {
            degenerate[k] = true;
            count += 1;
        }
    }
    let mut data = Vec::with_capacity(ms_up.data().len());
    for b in 0..ms_up.bands() {
        let band = ms_up.band(b);
        for k in 0..plane {
            data.push(if degenerate[k] { band[k] } else { band[k] * (p[k] / i[k]) });
        }
    }
    Ok(FusionResult {
        raster: Raster::new(
            ms_up.width(),
            ms_up.height(),
            ms_up.band_roles().to_vec(),
            data,
            ms_up.value_range(),
        )?,
        degenerate_pixels: count,
    })
}

/// Gram-Schmidt spectral sharpening with the band mean as the synthetic
/// low-resolution pan and covariance-derived injection gains.
pub fn gs_fuse(input: &FusionInput) -> Result<FusionResult> {
    require_bands(input, 2, "gs")?;
    let ms_up = upsample_ms(input)?;
    let i = intensity(&ms_up);
    let mu_i = mean(&i);
    let var_i = i.iter().map(|v| (v - mu_i) * (v - mu_i)).sum::<f64>() / i.len() as f64;
    if var_i == 0.0 {
        return Err(Error::Degenerate(
            "zero-variance intensity: injection gains undefined".into(),
        ));
    }
    let p = match_pan(input.pan.band(0), &i)?;
    let plane = ms_up.width() * ms_up.height();
    let mut data = Vec::with_capacity(ms_up.data().len());
    for b in 0..ms_up.bands() {
        let band = ms_up.band(b);
        let mu_b = mean(band);
        let cov = band
            .iter()
            .zip(&i)
            .map(|(x, y)| (x - mu_b) * (y - mu_i))
            .sum::<f64>()
            / plane as f64;
        let gain = cov / var_i;
        for k in 0..plane {
            data.push(band[k] + gain * (p[k] - i[k]));
        }
    }
    Ok(FusionResult {
        raster: Raster::new(
            ms_up.width(),
            ms_up.height(),
            ms_up.band_roles().to_vec(),
            data,
            ms_up.value_range(),
        )?,
        degenerate_pixels: 0,
    })
}

/// SFIM: fused_b = ms_b * pan / lowpass(pan), with the lowpass being the
/// same downsample-then-upsample used for high-pass extraction.
pub fn sfim_fuse(input: &FusionInput) -> Result<FusionResult> {
    let ms_up = upsample_ms(input)?;
    let low = bicubic_resample(
        &downsample(input.pan, input.s)?,
        input.pan.width(),
        input.pan.height(),
    )?;
    let pan = input.pan.band(0);
    let lowpass = low.band(0);
    let eps = 1e-9 * ms_up.range_span();
    let plane = ms_up.width() * ms_up.height();
    let mut count = 0;
    let ratio: Vec<Option<f64>> = (0..plane)
        .map(|k| {
            if lowpass[k] <= eps {
                count += 1;
                None
            } else {
                Some(pan[k] / lowpass[k])
            }
        })
        .collect();
    let mut data = Vec::with_capacity(ms_up.data().len());
    for b in 0..ms_up.bands() {
        let band = ms_up.band(b);
        for k in 0..plane {
            data.push(match ratio[k] {
                Some(r) => band[k] * r,
                None => band[k],
            });
        }
    }
    Ok(FusionResult {
        raster: Raster::new(
            ms_up.width(),
            ms_up.height(),
            ms_up.band_roles().to_vec(),
            data,
            ms_up.value_range(),
        )?,
        degenerate_pixels: count,
    })
}
