//! Fusion quality metrics: reference-based ERGAS, RMSE, RMAE, SAM, UIQI
//! and no-reference D_lambda, D_S, QNR.
//!
//! On perfect fusion the suite reports exactly
//! (ERGAS, RMSE, RMAE, SAM, UIQI, D_lambda, D_S, QNR) = (0, 0, 0, 0, 1, 0, 0, 1).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::{downsample, Raster, ScaleFactor};

/// The eight scores plus per-band detail for one fusion result.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub ergas: Option<f64>,
    pub rmse: Option<f64>,
    pub rmae: Option<f64>,
    pub sam_degrees: Option<f64>,
    pub uiqi: Option<f64>,
    pub d_lambda: f64,
    pub d_s: f64,
    pub qnr: f64,
    pub per_band_rmse: Option<Vec<f64>>,
    pub per_band_rmae: Option<Vec<f64>>,
    pub per_band_uiqi: Option<Vec<f64>>,
    /// RMAE here is the relative mean absolute error in percent,
    /// 100 * mean|f - r| / mean(r) per band.
    pub rmae_definition: &'static str,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Degraded inputs with the original MS as ground truth; all eight
    /// metrics available.
    Reduced,
    /// No reference; only D_lambda, D_S, QNR.
    Full,
}

fn check_same_geometry(op: &'static str, a: &Raster, b: &Raster) -> Result<()> {
    if a.width() != b.width() || a.height() != b.height() || a.bands() != b.bands() {
        return Err(Error::shape(
            op,
            format!(
                "{}x{}x{} vs {}x{}x{}",
                a.width(),
                a.height(),
                a.bands(),
                b.width(),
                b.height(),
                b.bands()
            ),
        ));
    }
    Ok(())
}

/// Per-band root mean square error and its mean over bands.
pub fn rmse(fused: &Raster, reference: &Raster) -> Result<(f64, Vec<f64>)> {
    check_same_geometry("rmse", fused, reference)?;
    let per_band: Vec<f64> = (0..fused.bands())
        .map(|b| {
            let (f, r) = (fused.band(b), reference.band(b));
            let mse = f.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / f.len() as f64;
            mse.sqrt()
        })
        .collect();
    Ok((mean_of(&per_band), per_band))
}

/// Relative mean absolute error in percent: 100 * mean|f - r| / mean(r)
/// per band, then the mean over bands.
pub fn rmae(fused: &Raster, reference: &Raster) -> Result<(f64, Vec<f64>)> {
    check_same_geometry("rmae", fused, reference)?;
    let mut per_band = Vec::with_capacity(fused.bands());
    for b in 0..fused.bands() {
        let (f, r) = (fused.band(b), reference.band(b));
        let mu_r = mean_of(r);
        if mu_r <= 0.0 {
            return Err(Error::Degenerate(format!(
                "reference band {b} has non-positive mean {mu_r}"
            )));
        }
        let mae = f.iter().zip(r).map(|(x, y)| (x - y).abs()).sum::<f64>() / f.len() as f64;
        per_band.push(100.0 * mae / mu_r);
    }
    Ok((mean_of(&per_band), per_band))
}

/// Dimensionless global synthesis error:
/// 100/s * sqrt(mean_b (RMSE_b / mu_b)^2).
pub fn ergas(fused: &Raster, reference: &Raster, s: ScaleFactor) -> Result<f64> {
    let (_, per_band) = rmse(fused, reference)?;
    let mut acc = 0.0;
    for (b, rb) in per_band.iter().enumerate() {
        let mu = mean_of(reference.band(b));
        if mu == 0.0 {
            return Err(Error::Degenerate(format!("reference band {b} has zero mean")));
        }
        acc += (rb / mu) * (rb / mu);
    }
    Ok(100.0 / s.get() as f64 * (acc / fused.bands() as f64).sqrt())
}

/// Mean spectral angle in degrees. Pixels where either spectral vector
/// has zero norm are skipped; their count comes back alongside.
pub fn sam(fused: &Raster, reference: &Raster) -> Result<(f64, usize)> {
    check_same_geometry("sam", fused, reference)?;
    if fused.bands() < 2 {
        return Err(Error::InvalidArgument(
            "sam needs at least two bands".into(),
        ));
    }
    let plane = fused.width() * fused.height();
    let bands = fused.bands();
    let mut sum = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    let mut u = vec![0.0; bands];
    let mut v = vec![0.0; bands];
    for k in 0..plane {
        for b in 0..bands {
            u[b] = fused.band(b)[k];
            v[b] = reference.band(b)[k];
        }
        let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if nu == 0.0 || nv == 0.0 {
            skipped += 1;
            continue;
        }
        // angle via the normalized chord (Kahan): exact 0 for identical
        // vectors, well-conditioned near 0 and pi
        let mut diff = 0.0;
        let mut sum_sq = 0.0;
        for b in 0..bands {
            let (a, c) = (u[b] / nu, v[b] / nv);
            diff += (a - c) * (a - c);
            sum_sq += (a + c) * (a + c);
        }
        sum += 2.0 * diff.sqrt().atan2(sum_sq.sqrt());
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::Degenerate("all pixels have zero spectral norm".into()));
    }
    Ok((sum / valid as f64 * 180.0 / std::f64::consts::PI, skipped))
}

/// Wang-Bovik Q between two equal-length sample windows; `None` when the
/// denominator vanishes.
fn q_index(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = mean_of(x);
    let my = mean_of(y);
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let den = (sxx + syy) * (mx * mx + my * my);
    if den == 0.0 {
        return None;
    }
    // grouped so that q_index(z, z) is exactly 1.0
    Some((4.0 * sxy) * (mx * my) / den)
}

/// Mean Q over sliding windows (stride 1) per band, then over bands.
/// Windows with a vanishing denominator are skipped and counted.
pub fn uiqi(fused: &Raster, reference: &Raster, window: usize) -> Result<(f64, Vec<f64>, usize)> {
    check_same_geometry("uiqi", fused, reference)?;
    if window == 0 || fused.width() < window || fused.height() < window {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {window}x{window} window",
            fused.width(),
            fused.height()
        )));
    }
    let (w, h) = (fused.width(), fused.height());
    let mut per_band = Vec::with_capacity(fused.bands());
    let mut skipped = 0usize;
    let mut wx = vec![0.0; window * window];
    let mut wy = vec![0.0; window * window];
    for b in 0..fused.bands() {
        let (f, r) = (fused.band(b), reference.band(b));
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - window {
            for x0 in 0..=w - window {
                for dy in 0..window {
                    let src = (y0 + dy) * w + x0;
                    wx[dy * window..(dy + 1) * window].copy_from_slice(&f[src..src + window]);
                    wy[dy * window..(dy + 1) * window].copy_from_slice(&r[src..src + window]);
                }
                match q_index(&wx, &wy) {
                    Some(q) => {
                        sum += q;
                        count += 1;
                    }
                    None => skipped += 1,
                }
            }
        }
        if count == 0 {
            return Err(Error::Degenerate(format!(
                "every window of band {b} has a vanishing Q denominator"
            )));
        }
        per_band.push(sum / count as f64);
    }
    Ok((mean_of(&per_band), per_band, skipped))
}

fn q_global(x: &[f64], y: &[f64], what: &str) -> Result<f64> {
    q_index(x, y).ok_or_else(|| Error::Degenerate(format!("global Q undefined for {what}")))
}

/// Spectral distortion: mean absolute difference (to the power p) between
/// the inter-band Q matrices of the fused image and of the original MS.
pub fn d_lambda(fused: &Raster, lrms: &Raster, p: f64) -> Result<f64> {
    if fused.bands() != lrms.bands() {
        return Err(Error::shape(
            "d_lambda",
            format!("{} vs {} bands", fused.bands(), lrms.bands()),
        ));
    }
    let c = fused.bands();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "d_lambda needs at least two bands".into(),
        ));
    }
    let mut acc = 0.0;
    for b in 0..c {
        for k in 0..c {
            if b == k {
                continue;
            }
            let qf = q_global(fused.band(b), fused.band(k), "fused band pair")?;
            let ql = q_global(lrms.band(b), lrms.band(k), "ms band pair")?;
            acc += (qf - ql).abs().powf(p);
        }
    }
    Ok((acc / (c * (c - 1)) as f64).powf(1.0 / p))
}

/// Spatial distortion: per band, |Q(fused_b, pan) - Q(ms_b, pan down s)|^q.
pub fn d_s(fused: &Raster, lrms: &Raster, pan: &Raster, s: ScaleFactor, q: f64) -> Result<f64> {
    if pan.bands() != 1 {
        return Err(Error::InvalidArgument("pan must have one band".into()));
    }
    if fused.width() != pan.width() || fused.height() != pan.height() {
        return Err(Error::shape(
            "d_s",
            format!(
                "fused {}x{} vs pan {}x{}",
                fused.width(),
                fused.height(),
                pan.width(),
                pan.height()
            ),
        ));
    }
    if fused.bands() != lrms.bands() {
        return Err(Error::shape(
            "d_s",
            format!("{} vs {} bands", fused.bands(), lrms.bands()),
        ));
    }
    let pan_low = downsample(pan, s)?;
    if pan_low.width() != lrms.width() || pan_low.height() != lrms.height() {
        return Err(Error::shape(
            "d_s",
            format!(
                "ms {}x{} vs downsampled pan {}x{}",
                lrms.width(),
                lrms.height(),
                pan_low.width(),
                pan_low.height()
            ),
        ));
    }
    let c = fused.bands();
    let mut acc = 0.0;
    for b in 0..c {
        let qh = q_global(fused.band(b), pan.band(0), "fused band vs pan")?;
        let ql = q_global(lrms.band(b), pan_low.band(0), "ms band vs low pan")?;
        acc += (qh - ql).abs().powf(q);
    }
    Ok((acc / c as f64).powf(1.0 / q))
}

/// Quality with no reference: (1 - D_lambda)^a * (1 - D_S)^b.
pub fn qnr(d_lambda: f64, d_s: f64, a: f64, b: f64) -> f64 {
    (1.0 - d_lambda).powf(a) * (1.0 - d_s).powf(b)
}

/// Default UIQI window (the Wang-Bovik 8x8 convention).
pub const UIQI_WINDOW: usize = 8;

/// Fill a [`MetricReport`]. With a reference the reduced protocol fills
/// all eight metrics; without one only the no-reference triple.
pub fn evaluate_all(
    fused: &Raster,
    reference: Option<&Raster>,
    lrms: &Raster,
    pan: &Raster,
    s: ScaleFactor,
) -> Result<MetricReport> {
    let dl = d_lambda(fused, lrms, 1.0)?;
    let ds = d_s(fused, lrms, pan, s, 1.0)?;
    let q = qnr(dl, ds, 1.0, 1.0);
    match reference {
        None => Ok(MetricReport {
            protocol: Protocol::Full,
            ergas: None,
            rmse: None,
            rmae: None,
            sam_degrees: None,
            uiqi: None,
            d_lambda: dl,
            d_s: ds,
            qnr: q,
            per_band_rmse: None,
            per_band_rmae: None,
            per_band_uiqi: None,
            rmae_definition: "100 * mean|f-r| / mean(r), averaged over bands",
        }),
        Some(reference) => {
            let (rmse_mean, rmse_bands) = rmse(fused, reference)?;
            let (rmae_mean, rmae_bands) = rmae(fused, reference)?;
            let erg = ergas(fused, reference, s)?;
            let (sam_deg, _) = sam(fused, reference)?;
            let (uiqi_mean, uiqi_bands, _) = uiqi(fused, reference, UIQI_WINDOW)?;
            Ok(MetricReport {
                protocol: Protocol::Reduced,
                ergas: Some(erg),
                rmse: Some(rmse_mean),
                rmae: Some(rmae_mean),
                sam_degrees: Some(sam_deg),
                uiqi: Some(uiqi_mean),
                d_lambda: dl,
                d_s: ds,
                qnr: q,
                per_band_rmse: Some(rmse_bands),
                per_band_rmae: Some(rmae_bands),
                per_band_uiqi: Some(uiqi_bands),
                rmae_definition: "100 * mean|f-r| / mean(r), averaged over bands",
            })
        }
    }
}

fn mean_of(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
