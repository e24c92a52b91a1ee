//! Multi-band raster data model: resampling, high-pass extraction,
//! reduced-resolution dataset synthesis, and file I/O.
//!
//! A [`Raster`] stores planar (band-major) f64 samples together with band
//! roles and a declared nominal value range. All operations here are pure
//! functions on immutable inputs.

mod io;
pub(crate) mod resample;

pub use io::{read_pgm, read_raster, write_pgm, write_pgm16, write_ppm, write_raster};

use crate::error::{Error, Result};

/// Role of one band within a product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BandRole {
    R,
    G,
    B,
    Nir,
    Pan,
    Unknown,
}

impl BandRole {
    /// Container code (MBR1 role byte).
    pub fn code(self) -> u8 {
        match self {
            BandRole::R => 0,
            BandRole::G => 1,
            BandRole::B => 2,
            BandRole::Nir => 3,
            BandRole::Pan => 4,
            BandRole::Unknown => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(BandRole::R),
            1 => Some(BandRole::G),
            2 => Some(BandRole::B),
            3 => Some(BandRole::Nir),
            4 => Some(BandRole::Pan),
            255 => Some(BandRole::Unknown),
            _ => None,
        }
    }
}

/// The standard 4-band order used throughout: R, G, B, NIR.
pub const RGBN: [BandRole; 4] = [BandRole::R, BandRole::G, BandRole::B, BandRole::Nir];

/// Integer resolution ratio between PAN and MS grids.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFactor(u32);

impl ScaleFactor {
    /// Supported ratios are 2 and 4 (the production setting); 1 is allowed
    /// for degenerate pipelines in tests and tooling.
    pub fn new(s: u32) -> Result<Self> {
        match s {
            1 | 2 | 4 => Ok(ScaleFactor(s)),
            other => Err(Error::InvalidArgument(format!(
                "unsupported scale factor {other} (expected 1, 2, or 4)"
            ))),
        }
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn as_usize(self) -> usize {
        self.0 as usize
    }
}

/// Planar multi-band floating-point image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: usize,
    band_roles: Vec<BandRole>,
    /// Band-major samples, length = width * height * bands.
    data: Vec<f64>,
    /// Declared nominal range (min, max); not a clamp.
    value_range: (f64, f64),
}

/// Default nominal range for 11-bit products.
pub const RANGE_11BIT: (f64, f64) = (0.0, 2047.0);
/// Nominal range for 8-bit exports.
pub const RANGE_8BIT: (f64, f64) = (0.0, 255.0);

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        band_roles: Vec<BandRole>,
        data: Vec<f64>,
        value_range: (f64, f64),
    ) -> Result<Self> {
        let bands = band_roles.len();
        if width == 0 || height == 0 || bands == 0 {
            return Err(Error::InvalidArgument(format!(
                "raster dimensions must be positive, got {width}x{height}x{bands}"
            )));
        }
        if data.len() != width * height * bands {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match {width}x{height}x{bands}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "raster contains non-finite samples".into(),
            ));
        }
        if !(value_range.0.is_finite() && value_range.1.is_finite() && value_range.1 > value_range.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid value range {value_range:?}"
            )));
        }
        Ok(Raster {
            width,
            height,
            bands,
            band_roles,
            data,
            value_range,
        })
    }

    /// Raster with every sample set to `value`.
    pub fn filled(
        width: usize,
        height: usize,
        band_roles: Vec<BandRole>,
        value: f64,
        value_range: (f64, f64),
    ) -> Result<Self> {
        let n = width * height * band_roles.len();
        Raster::new(width, height, band_roles, vec![value; n], value_range)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn band_roles(&self) -> &[BandRole] {
        &self.band_roles
    }

    pub fn value_range(&self) -> (f64, f64) {
        self.value_range
    }

    /// Span of the nominal range (max - min).
    pub fn range_span(&self) -> f64 {
        self.value_range.1 - self.value_range.0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.data[b * plane..(b + 1) * plane]
    }

    pub fn get(&self, b: usize, x: usize, y: usize) -> f64 {
        self.data[b * self.width * self.height + y * self.width + x]
    }

    /// Index of the first band with the given role.
    pub fn band_with_role(&self, role: BandRole) -> Option<usize> {
        self.band_roles.iter().position(|r| *r == role)
    }

    /// Axis-aligned crop; the window must lie inside the raster.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Raster> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidArgument(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * self.bands);
        for b in 0..self.bands {
            let plane = self.band(b);
            for y in y0..y0 + h {
                data.extend_from_slice(&plane[y * self.width + x0..y * self.width + x0 + w]);
            }
        }
        Raster::new(w, h, self.band_roles.clone(), data, self.value_range)
    }
}

/// Resample every band independently with the Keys bicubic kernel
/// (a = -0.5), pixel-center aligned, borders clamp-replicated. Output
/// values are not clamped to the nominal range; fusion arithmetic needs
/// the out-of-range overshoot.
pub fn bicubic_resample(src: &Raster, target_width: usize, target_height: usize) -> Result<Raster> {
    if target_width == 0 || target_height == 0 {
        return Err(Error::InvalidArgument(
            "resample target dimensions must be positive".into(),
        ));
    }
    let mut data = Vec::with_capacity(target_width * target_height * src.bands);
    for b in 0..src.bands {
        data.extend(resample::resample_plane(
            src.band(b),
            src.width,
            src.height,
            target_width,
            target_height,
        ));
    }
    Raster::new(
        target_width,
        target_height,
        src.band_roles.clone(),
        data,
        src.value_range,
    )
}

/// Bicubic reduction by an integer factor; dimensions must divide evenly.
pub fn downsample(src: &Raster, s: ScaleFactor) -> Result<Raster> {
    let s = s.as_usize();
    if src.width % s != 0 || src.height % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "{}x{} not divisible by scale factor {s}",
            src.width, src.height
        )));
    }
    bicubic_resample(src, src.width / s, src.height / s)
}

/// High-pass residual of a single-band image: P - U(D(P)), where D is the
/// bicubic downsample by `s` and U the bicubic upsample back.
pub fn highpass(p: &Raster, s: ScaleFactor) -> Result<Raster> {
    if p.bands != 1 {
        return Err(Error::InvalidArgument(format!(
            "highpass expects a single-band image, got {} bands",
            p.bands
        )));
    }
    let low = bicubic_resample(&downsample(p, s)?, p.width, p.height)?;
    let data: Vec<f64> = p.data.iter().zip(low.data.iter()).map(|(a, b)| a - b).collect();
    Raster::new(p.width, p.height, p.band_roles.clone(), data, p.value_range)
}

/// Reduced-resolution degradation: the original MS acts as ground truth,
/// its bicubic reduction becomes the training input, and the PAN (already
/// at the MS grid) passes through unchanged.
pub fn wald_degrade(hrms: &Raster, pan: &Raster, s: ScaleFactor) -> Result<(Raster, Raster)> {
    if pan.width != hrms.width || pan.height != hrms.height {
        return Err(Error::InvalidArgument(format!(
            "pan {}x{} must match hrms {}x{}",
            pan.width, pan.height, hrms.width, hrms.height
        )));
    }
    if pan.bands != 1 {
        return Err(Error::InvalidArgument(format!(
            "pan must have one band, got {}",
            pan.bands
        )));
    }
    Ok((downsample(hrms, s)?, pan.clone()))
}

/// One supervised training triple plus its provenance.
#[derive(Clone, Debug)]
pub struct PatchEntry {
    pub hrms: Raster,
    pub pan: Raster,
    pub lrms: Raster,
    pub source_id: String,
    pub x0: usize,
    pub y0: usize,
}

pub type PatchSet = Vec<PatchEntry>;

/// Grid crop into (hrms, pan, lrms) triples. Partial edge tiles are
/// discarded; tiles come out in row-major order.
pub fn crop_patches(
    hrms: &Raster,
    pan: &Raster,
    patch: usize,
    stride: usize,
    s: ScaleFactor,
    source_id: &str,
) -> Result<PatchSet> {
    if patch == 0 || stride == 0 {
        return Err(Error::InvalidArgument("patch and stride must be positive".into()));
    }
    if patch % s.as_usize() != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} not divisible by scale factor {}",
            s.get()
        )));
    }
    if pan.width != hrms.width || pan.height != hrms.height {
        return Err(Error::InvalidArgument(format!(
            "pan {}x{} must match hrms {}x{}",
            pan.width, pan.height, hrms.width, hrms.height
        )));
    }
    let mut out = Vec::new();
    if patch > hrms.width || patch > hrms.height {
        return Ok(out);
    }
    let mut y0 = 0;
    while y0 + patch <= hrms.height {
        let mut x0 = 0;
        while x0 + patch <= hrms.width {
            let hrms_patch = hrms.crop(x0, y0, patch, patch)?;
            let pan_patch = pan.crop(x0, y0, patch, patch)?;
            let (lrms_patch, pan_patch) = wald_degrade(&hrms_patch, &pan_patch, s)?;
            out.push(PatchEntry {
                hrms: hrms_patch,
                pan: pan_patch,
                lrms: lrms_patch,
                source_id: source_id.to_string(),
                x0,
                y0,
            });
            x0 += stride;
        }
        y0 += stride;
    }
    Ok(out)
}
