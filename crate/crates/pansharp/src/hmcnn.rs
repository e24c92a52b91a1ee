//! HMCNN: two-stage progressive pan-sharpening built around per-band
//! high-pass modification blocks (HMB).
//!
//! Each stage doubles resolution. A feature extractor lifts the MS
//! input, and the HMB injects the PAN high-pass residual gated by a
//! learned spatial attention map: X_hat = (attention + 1) * P_hat. Both
//! stage outputs are returned so training can supervise them jointly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::{BandRole, Raster};
use crate::tensor::{backward, concat_channels, seeded_init, InitScheme, Shape, Tape, Tensor};

/// The MS band set the network fuses (R, G, B, NIR).
pub const BANDS: usize = 4;

/// Overlap in PAN pixels for tiled prediction.
pub const TILE_OVERLAP: usize = 16;

/// Each stage covers one octave, so its HMB extracts the high-pass
/// octave with a factor-2 lowpass.
pub const STAGE_HIGHPASS_FACTOR: usize = 2;

#[derive(Clone, Debug, serde::Serialize)]
pub struct HmcnnConfig {
    /// Residual blocks per HMB.
    pub n_res_blocks: usize,
    pub feat_channels: usize,
    /// One HMB shared by all four bands, or one per band.
    pub share_hmb_across_bands: bool,
    /// Feed stage 2 from the upsampled stage-1 output (default) instead
    /// of re-upsampling the raw MS input.
    pub progressive_chain: bool,
    /// PAN-to-MS resolution ratio; the two-stage pipeline requires 4.
    pub s: u32,
    pub attention_hidden: usize,
    /// Maximum PAN-scale tile edge for prediction; larger inputs are
    /// tiled with center-crop stitching.
    pub tile: usize,
}

impl Default for HmcnnConfig {
    fn default() -> Self {
        HmcnnConfig {
            n_res_blocks: 11,
            feat_channels: 32,
            share_hmb_across_bands: true,
            progressive_chain: true,
            s: 4,
            attention_hidden: 16,
            tile: 256,
        }
    }
}

impl HmcnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_res_blocks < 1 {
            return Err(Error::Config("n_res_blocks must be at least 1".into()));
        }
        if self.feat_channels < BANDS {
            return Err(Error::Config(format!(
                "feat_channels must be at least {BANDS}"
            )));
        }
        if self.attention_hidden < 1 {
            return Err(Error::Config("attention_hidden must be at least 1".into()));
        }
        if self.s != 4 {
            return Err(Error::Config("the two-stage pipeline requires s = 4".into()));
        }
        if self.tile % 4 != 0 || self.tile <= 2 * TILE_OVERLAP {
            return Err(Error::Config(format!(
                "tile must be a multiple of 4 above {}",
                2 * TILE_OVERLAP
            )));
        }
        Ok(())
    }
}

enum ParamKind {
    ConvWeight { out_c: usize, in_c: usize },
    Bias { out_c: usize },
}

impl ParamKind {
    fn dims(&self) -> Vec<usize> {
        match self {
            ParamKind::ConvWeight { out_c, in_c } => vec![*out_c, *in_c, 3, 3],
            ParamKind::Bias { out_c } => vec![*out_c],
        }
    }

    fn shape(&self) -> Shape {
        match self {
            ParamKind::ConvWeight { out_c, in_c } => Shape::new(*out_c, *in_c, 3, 3),
            ParamKind::Bias { out_c } => Shape::new(1, *out_c, 1, 1),
        }
    }

    fn scheme(&self) -> InitScheme {
        match self {
            ParamKind::ConvWeight { .. } => InitScheme::HeUniform,
            ParamKind::Bias { .. } => InitScheme::Zeros,
        }
    }
}

/// Every parameter of the architecture, in storage order.
fn architecture(cfg: &HmcnnConfig) -> Vec<(String, ParamKind)> {
    let f = cfg.feat_channels;
    let mut out = Vec::new();
    let mut conv = |out_vec: &mut Vec<(String, ParamKind)>, name: String, oc: usize, ic: usize| {
        out_vec.push((format!("{name}.weight"), ParamKind::ConvWeight { out_c: oc, in_c: ic }));
        out_vec.push((format!("{name}.bias"), ParamKind::Bias { out_c: oc }));
    };
    for fe in ["f1", "f2"] {
        conv(&mut out, format!("{fe}.head"), f, BANDS);
        for i in 0..2 {
            conv(&mut out, format!("{fe}.rb{i}.conv0"), f, f);
            conv(&mut out, format!("{fe}.rb{i}.conv1"), f, f);
        }
        if fe == "f1" {
            conv(&mut out, "f1.up".to_string(), f, f);
        }
        conv(&mut out, format!("{fe}.tail"), BANDS, f);
    }
    for stage in ["stage1", "stage2"] {
        let copies = if cfg.share_hmb_across_bands { 1 } else { BANDS };
        for b in 0..copies {
            let prefix = if cfg.share_hmb_across_bands {
                format!("{stage}.hmb")
            } else {
                format!("{stage}.hmb.band{b}")
            };
            conv(&mut out, format!("{prefix}.entry"), f, 2);
            for i in 0..cfg.n_res_blocks {
                conv(&mut out, format!("{prefix}.rb{i}.conv0"), f, f);
                conv(&mut out, format!("{prefix}.rb{i}.conv1"), f, f);
            }
            conv(&mut out, format!("{prefix}.sa0"), cfg.attention_hidden, f);
            conv(&mut out, format!("{prefix}.sa1"), 1, cfg.attention_hidden);
        }
    }
    out
}

/// One stored parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter set of the network; serializable to the HMW1 weight
/// container.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelWeights {
    params: BTreeMap<String, Param>,
}

fn param_seed(seed: u64, name: &str) -> u64 {
    // fnv1a over the name keeps per-parameter streams independent
    let mut h = 0xcbf29ce484222325u64;
    for b in name.as_bytes() {
        h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
    }
    seed ^ h
}

impl ModelWeights {
    /// Seeded initialization: He-uniform conv weights, zero biases. Each
    /// parameter gets its own stream derived from the master seed and
    /// its name.
    pub fn init(cfg: &HmcnnConfig, seed: u64) -> Result<ModelWeights> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for (name, kind) in architecture(cfg) {
            let t = seeded_init(kind.shape(), param_seed(seed, &name), kind.scheme())?;
            params.insert(name, Param { dims: kind.dims(), data: t.values().to_vec() });
        }
        Ok(ModelWeights { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    /// Parameters in name order (the order every consumer relies on).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    /// Serialize to HMW1: magic, u32 count, then per parameter a u16
    /// name length, the UTF-8 name, u8 rank, u32 dims, and the f64
    /// payload, all little-endian.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        buf.extend_from_slice(b"HMW1");
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, param) in &self.params {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(param.dims.len() as u8);
            for &d in &param.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &param.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<ModelWeights> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let buf = fs::read(path).map_err(|e| Error::io(name.clone(), e))?;
        let fail = |offset: usize, message: &str| Error::Format {
            path: name.clone(),
            offset: offset as u64,
            message: message.to_string(),
        };
        if buf.len() < 8 || &buf[0..4] != b"HMW1" {
            return Err(fail(0, "bad magic, expected HMW1"));
        }
        let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let mut off = 8;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            if off + 2 > buf.len() {
                return Err(fail(off, "truncated name length"));
            }
            let name_len = u16::from_le_bytes(buf[off..off + 2].try_into().unwrap()) as usize;
            off += 2;
            if off + name_len > buf.len() {
                return Err(fail(off, "truncated name"));
            }
            let pname = std::str::from_utf8(&buf[off..off + name_len])
                .map_err(|_| fail(off, "parameter name is not UTF-8"))?
                .to_string();
            off += name_len;
            if off >= buf.len() {
                return Err(fail(off, "truncated rank"));
            }
            let rank = buf[off] as usize;
            off += 1;
            let mut dims = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                if off + 4 > buf.len() {
                    return Err(fail(off, "truncated dims"));
                }
                let d = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
                off += 4;
                numel = numel
                    .checked_mul(d)
                    .filter(|&n| n <= (1 << 32))
                    .ok_or_else(|| fail(off, "dimension overflow"))?;
                dims.push(d);
            }
            if off + 8 * numel > buf.len() {
                return Err(fail(off, "truncated payload"));
            }
            let mut data = Vec::with_capacity(numel);
            for i in 0..numel {
                data.push(f64::from_le_bytes(
                    buf[off + 8 * i..off + 8 * i + 8].try_into().unwrap(),
                ));
            }
            off += 8 * numel;
            params.insert(pname, Param { dims, data });
        }
        if off != buf.len() {
            return Err(fail(off, "trailing bytes after last parameter"));
        }
        Ok(ModelWeights { params })
    }

    /// Leaf tensors for every architecture parameter, checked against the
    /// expected shapes. With a tape and `trainable`, leaves take
    /// gradients.
    pub fn bind(&self, cfg: &HmcnnConfig, tape: Option<&Tape>, trainable: bool) -> Result<BoundModel> {
        cfg.validate()?;
        let mut named = BTreeMap::new();
        for (name, kind) in architecture(cfg) {
            let param = self.get(&name)?;
            if param.dims != kind.dims() {
                return Err(Error::Weights(format!(
                    "parameter {name} has dims {:?}, expected {:?}",
                    param.dims,
                    kind.dims()
                )));
            }
            let tensor = match tape {
                Some(tape) => tape.leaf(kind.shape(), param.data.clone(), trainable)?,
                None => Tensor::from_vec(kind.shape(), param.data.clone())?,
            };
            named.insert(name, tensor);
        }
        if named.len() != self.params.len() {
            let extra: Vec<&String> =
                self.params.keys().filter(|k| !named.contains_key(*k)).collect();
            return Err(Error::Weights(format!(
                "weight file carries parameters unknown to this configuration: {extra:?}"
            )));
        }
        BoundModel::from_named(cfg.clone(), named)
    }
}

#[derive(Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, &self.bias, 1, 1)
    }
}

#[derive(Clone)]
pub struct ResBlockParams {
    pub conv0: ConvParams,
    pub conv1: ConvParams,
}

/// One high-pass modification block: entry conv over concat(X, P), the
/// residual stack, and the two-conv spatial attention head.
#[derive(Clone)]
pub struct HmbParams {
    pub entry: ConvParams,
    pub blocks: Vec<ResBlockParams>,
    pub sa_hidden: ConvParams,
    pub sa_out: ConvParams,
}

#[derive(Clone)]
pub struct ExtractorParams {
    pub head: ConvParams,
    pub blocks: Vec<ResBlockParams>,
    /// Conv applied after the bicubic x2 feature resize (f1 only).
    pub upsample: Option<ConvParams>,
    pub tail: ConvParams,
}

/// All parameters bound as tensors, plus the name map used to collect
/// gradients after backward.
pub struct BoundModel {
    pub config: HmcnnConfig,
    pub f1: ExtractorParams,
    pub f2: ExtractorParams,
    /// One entry when shared across bands, otherwise one per band.
    pub stage1: Vec<HmbParams>,
    pub stage2: Vec<HmbParams>,
    named: BTreeMap<String, Tensor>,
}

impl BoundModel {
    fn from_named(config: HmcnnConfig, named: BTreeMap<String, Tensor>) -> Result<BoundModel> {
        let conv = |name: &str| -> Result<ConvParams> {
            Ok(ConvParams {
                weight: named
                    .get(&format!("{name}.weight"))
                    .ok_or_else(|| Error::Weights(format!("missing parameter {name}.weight")))?
                    .clone(),
                bias: named
                    .get(&format!("{name}.bias"))
                    .ok_or_else(|| Error::Weights(format!("missing parameter {name}.bias")))?
                    .clone(),
            })
        };
        let extractor = |fe: &str| -> Result<ExtractorParams> {
            Ok(ExtractorParams {
                head: conv(&format!("{fe}.head"))?,
                blocks: (0..2)
                    .map(|i| {
                        Ok(ResBlockParams {
                            conv0: conv(&format!("{fe}.rb{i}.conv0"))?,
                            conv1: conv(&format!("{fe}.rb{i}.conv1"))?,
                        })
                    })
                    .collect::<Result<_>>()?,
                upsample: if fe == "f1" { Some(conv("f1.up")?) } else { None },
                tail: conv(&format!("{fe}.tail"))?,
            })
        };
        let hmb = |stage: &str| -> Result<Vec<HmbParams>> {
            let copies = if config.share_hmb_across_bands { 1 } else { BANDS };
            (0..copies)
                .map(|b| {
                    let prefix = if config.share_hmb_across_bands {
                        format!("{stage}.hmb")
                    } else {
                        format!("{stage}.hmb.band{b}")
                    };
                    Ok(HmbParams {
                        entry: conv(&format!("{prefix}.entry"))?,
                        blocks: (0..config.n_res_blocks)
                            .map(|i| {
                                Ok(ResBlockParams {
                                    conv0: conv(&format!("{prefix}.rb{i}.conv0"))?,
                                    conv1: conv(&format!("{prefix}.rb{i}.conv1"))?,
                                })
                            })
                            .collect::<Result<_>>()?,
                        sa_hidden: conv(&format!("{prefix}.sa0"))?,
                        sa_out: conv(&format!("{prefix}.sa1"))?,
                    })
                })
                .collect()
        };
        Ok(BoundModel {
            f1: extractor("f1")?,
            f2: extractor("f2")?,
            stage1: hmb("stage1")?,
            stage2: hmb("stage2")?,
            config,
            named,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.named
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.named.keys()
    }

    /// Gradients by parameter name after a backward pass.
    pub fn grads(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        let mut out = BTreeMap::new();
        for (name, tensor) in &self.named {
            let grad = tensor
                .grad()
                .ok_or_else(|| Error::Weights(format!("no gradient recorded for {name}")))?;
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }
}

fn res_block(x: &Tensor, p: &ResBlockParams) -> Result<Tensor> {
    let y = p.conv0.apply(x)?.relu()?;
    x.add(&p.conv1.apply(&y)?)
}

fn run_extractor(x: &Tensor, p: &ExtractorParams) -> Result<Tensor> {
    let mut h = p.head.apply(x)?;
    for block in &p.blocks {
        h = res_block(&h, block)?;
    }
    if let Some(up) = &p.upsample {
        let s = h.shape();
        h = h.resample_bicubic(2 * s.h, 2 * s.w)?;
        h = up.apply(&h)?;
    }
    p.tail.apply(&h)
}

/// High-pass residual of a 1-channel tensor: P - U(D(P)), the raster
/// semantics applied tensor-wise (and differentiable).
pub fn highpass_tensor(pan: &Tensor, factor: usize) -> Result<Tensor> {
    let s = pan.shape();
    if s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::shape(
            "highpass",
            format!("{s} not divisible by factor {factor}"),
        ));
    }
    let low = pan
        .resample_bicubic(s.h / factor, s.w / factor)?
        .resample_bicubic(s.h, s.w)?;
    pan.sub(&low)
}

/// One HMB: X_hat = (f_SA(f_R(concat(X, P))) + 1) * P_hat.
pub fn hmb_forward(
    band: &Tensor,
    pan: &Tensor,
    p: &HmbParams,
    highpass_factor: usize,
) -> Result<Tensor> {
    let (bs, ps) = (band.shape(), pan.shape());
    if bs != ps || bs.c != 1 {
        return Err(Error::shape("hmb_forward", format!("band {bs} vs pan {ps}")));
    }
    let mut features = p.entry.apply(&concat_channels(&[band, pan])?)?;
    for block in &p.blocks {
        features = res_block(&features, block)?;
    }
    let attention = p.sa_out.apply(&p.sa_hidden.apply(&features)?.relu()?)?.sigmoid()?;
    let p_hat = highpass_tensor(pan, highpass_factor)?;
    attention.add_scalar(1.0)?.mul(&p_hat)
}

/// Apply the per-band HMB to each channel of the feature map and
/// reassemble in the same band order.
pub fn hmb_fuse(features: &Tensor, pan: &Tensor, stage: &[HmbParams]) -> Result<Tensor> {
    let fs = features.shape();
    if fs.c != BANDS {
        return Err(Error::Config(format!(
            "hmb_fuse expects {BANDS} feature channels, got {}",
            fs.c
        )));
    }
    let mut parts = Vec::with_capacity(BANDS);
    for b in 0..BANDS {
        let band = features.slice_channels(b, 1)?;
        let params = if stage.len() == 1 { &stage[0] } else { &stage[b] };
        parts.push(hmb_forward(&band, pan, params, STAGE_HIGHPASS_FACTOR)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    concat_channels(&refs)
}

/// Everything the two-stage forward produces; the fused outputs are the
/// feature-path outputs plus the HMB injections.
pub struct ForwardOutput {
    pub fused_x2: Tensor,
    pub fused_x4: Tensor,
    pub features_x2: Tensor,
    pub features_x4: Tensor,
    pub hmb_x2: Tensor,
    pub hmb_x4: Tensor,
}

/// Full forward pass on normalized tensors: lrms (n,4,h,w), pan (n,1,4h,4w).
pub fn forward(model: &BoundModel, lrms: &Tensor, pan: &Tensor) -> Result<ForwardOutput> {
    let (ls, ps) = (lrms.shape(), pan.shape());
    if ls.c != BANDS || ps.c != 1 || ps.n != ls.n || ps.h != 4 * ls.h || ps.w != 4 * ls.w {
        return Err(Error::shape(
            "forward",
            format!("lrms {ls} with pan {ps}, expected pan at 4x the ms grid"),
        ));
    }
    let features_x2 = run_extractor(lrms, &model.f1)?;
    let pan_x2 = pan.resample_bicubic(2 * ls.h, 2 * ls.w)?;
    let hmb_x2 = hmb_fuse(&features_x2, &pan_x2, &model.stage1)?;
    let fused_x2 = features_x2.add(&hmb_x2)?;

    let stage2_input = if model.config.progressive_chain {
        fused_x2.resample_bicubic(4 * ls.h, 4 * ls.w)?
    } else {
        lrms.resample_bicubic(4 * ls.h, 4 * ls.w)?
    };
    let features_x4 = run_extractor(&stage2_input, &model.f2)?;
    let hmb_x4 = hmb_fuse(&features_x4, pan, &model.stage2)?;
    let fused_x4 = features_x4.add(&hmb_x4)?;

    Ok(ForwardOutput { fused_x2, fused_x4, features_x2, features_x4, hmb_x2, hmb_x4 })
}

/// Raster to (1, bands, h, w) tensor, normalized to [0, 1] by the
/// raster's declared range when asked.
pub fn raster_to_tensor(r: &Raster, normalize: bool) -> Result<Tensor> {
    let shape = Shape::new(1, r.bands(), r.height(), r.width());
    if !normalize {
        return Tensor::from_vec(shape, r.data().to_vec());
    }
    let (lo, hi) = r.value_range();
    let inv = 1.0 / (hi - lo);
    Tensor::from_vec(shape, r.data().iter().map(|v| (v - lo) * inv).collect())
}

/// Batch of rasters with identical geometry to an (n, bands, h, w) tensor.
pub fn rasters_to_batch(rs: &[&Raster], normalize: bool) -> Result<Tensor> {
    let first = rs.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let shape = Shape::new(rs.len(), first.bands(), first.height(), first.width());
    let mut values = Vec::with_capacity(shape.numel());
    for r in rs {
        if r.width() != first.width() || r.height() != first.height() || r.bands() != first.bands()
        {
            return Err(Error::shape("rasters_to_batch", "mixed geometries".into()));
        }
        let (lo, hi) = r.value_range();
        let inv = 1.0 / (hi - lo);
        if normalize {
            values.extend(r.data().iter().map(|v| (v - lo) * inv));
        } else {
            values.extend_from_slice(r.data());
        }
    }
    Tensor::from_vec(shape, values)
}

/// Single-sample tensor back to a raster, denormalizing into the given
/// range.
pub fn tensor_to_raster(
    t: &Tensor,
    roles: Vec<BandRole>,
    value_range: (f64, f64),
    denormalize: bool,
) -> Result<Raster> {
    let s = t.shape();
    if s.n != 1 || roles.len() != s.c {
        return Err(Error::shape(
            "tensor_to_raster",
            format!("shape {s} with {} roles", roles.len()),
        ));
    }
    let (lo, hi) = value_range;
    let data = if denormalize {
        t.values().iter().map(|v| v * (hi - lo) + lo).collect()
    } else {
        t.values().to_vec()
    };
    Raster::new(s.w, s.h, roles, data, value_range)
}

/// Inference on rasters: normalize, run the network (tiled with
/// center-crop stitching when the PAN exceeds the configured tile), and
/// denormalize into the MS range.
pub fn predict(lrms: &Raster, pan: &Raster, weights: &ModelWeights, cfg: &HmcnnConfig) -> Result<Raster> {
    cfg.validate()?;
    if lrms.bands() != BANDS {
        return Err(Error::InvalidArgument(format!(
            "expected a {BANDS}-band ms raster, got {}",
            lrms.bands()
        )));
    }
    if pan.bands() != 1
        || pan.width() != 4 * lrms.width()
        || pan.height() != 4 * lrms.height()
    {
        return Err(Error::InvalidArgument(format!(
            "pan {}x{}x{} does not sit 4x above ms {}x{}",
            pan.width(),
            pan.height(),
            pan.bands(),
            lrms.width(),
            lrms.height()
        )));
    }
    let model = weights.bind(cfg, None, false)?;
    let (pw, ph) = (pan.width(), pan.height());
    if pw <= cfg.tile && ph <= cfg.tile {
        let out = forward(&model, &raster_to_tensor(lrms, true)?, &raster_to_tensor(pan, true)?)?;
        return tensor_to_raster(&out.fused_x4, lrms.band_roles().to_vec(), lrms.value_range(), true);
    }

    // tiled path: run overlapping tiles, keep each tile's center
    let tile = cfg.tile.min(pw.min(ph) / 4 * 4).max(4 * STAGE_HIGHPASS_FACTOR);
    let step = tile - 2 * TILE_OVERLAP;
    let positions = |extent: usize| -> Vec<usize> {
        let mut ps = Vec::new();
        let mut p = 0;
        loop {
            let clamped = p.min(extent.saturating_sub(tile));
            if ps.last() != Some(&clamped) {
                ps.push(clamped);
            }
            if clamped + tile >= extent {
                break;
            }
            p += step;
        }
        ps
    };
    let mut data = vec![0.0; pw * ph * BANDS];
    for &y0 in &positions(ph) {
        for &x0 in &positions(pw) {
            let pan_tile = pan.crop(x0, y0, tile, tile)?;
            let lrms_tile = lrms.crop(x0 / 4, y0 / 4, tile / 4, tile / 4)?;
            let out = forward(
                &model,
                &raster_to_tensor(&lrms_tile, true)?,
                &raster_to_tensor(&pan_tile, true)?,
            )?;
            let fused = tensor_to_raster(
                &out.fused_x4,
                lrms.band_roles().to_vec(),
                lrms.value_range(),
                true,
            )?;
            let (cy0, cy1) = (
                if y0 == 0 { 0 } else { TILE_OVERLAP },
                if y0 + tile >= ph { tile } else { tile - TILE_OVERLAP },
            );
            let (cx0, cx1) = (
                if x0 == 0 { 0 } else { TILE_OVERLAP },
                if x0 + tile >= pw { tile } else { tile - TILE_OVERLAP },
            );
            for b in 0..BANDS {
                let src = fused.band(b);
                for ty in cy0..cy1 {
                    let dst_row = b * pw * ph + (y0 + ty) * pw;
                    let src_row = ty * tile;
                    data[dst_row + x0 + cx0..dst_row + x0 + cx1]
                        .copy_from_slice(&src[src_row + cx0..src_row + cx1]);
                }
            }
        }
    }
    Raster::new(pw, ph, lrms.band_roles().to_vec(), data, lrms.value_range())
}

/// Architecture wiring check: after one backward pass every parameter
/// must own a gradient with at least one nonzero element.
pub fn check_gradient_flow(weights: &ModelWeights, cfg: &HmcnnConfig, seed: u64) -> Result<Vec<String>> {
    let tape = Tape::new();
    let model = weights.bind(cfg, Some(&tape), true)?;
    let lrms = seeded_init(Shape::new(1, BANDS, 8, 8), seed, InitScheme::HeUniform)?
        .add_scalar(0.5)?;
    let pan = seeded_init(Shape::new(1, 1, 32, 32), seed ^ 1, InitScheme::HeUniform)?
        .add_scalar(0.5)?;
    let lrms = tape.leaf(lrms.shape(), lrms.values().to_vec(), false)?;
    let pan = tape.leaf(pan.shape(), pan.values().to_vec(), false)?;
    let out = forward(&model, &lrms, &pan)?;
    let loss = out
        .fused_x4
        .mul(&out.fused_x4)?
        .mean_all()?
        .add(&out.fused_x2.mul(&out.fused_x2)?.mean_all()?)?;
    backward(&loss)?;
    let mut dead = Vec::new();
    for (name, grad) in model.grads()? {
        if grad.iter().all(|&g| g == 0.0) {
            dead.push(name);
        }
    }
    Ok(dead)
}

#[cfg(test)]
mod tests;
