//! Training objectives: pixel MSE on both stage outputs plus a
//! perceptual term computed on NIR-band feature maps.
//!
//! The feature extractor is a fixed (never-trained) strided conv stack.
//! Its weights come either from a frozen seed or from an HMW1 file, so
//! the perceptual space is deterministic and the loss stays
//! differentiable through the fused image only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::hmcnn::ModelWeights;
use crate::tensor::{seeded_init, InitScheme, Shape, Tensor};

/// Frozen default seed for the built-in feature extractor.
pub const PHI_DEFAULT_SEED: u64 = 0x00F0_77E5;

/// Channel plan of the extractor: three [conv3x3 stride 2, relu] blocks.
const PHI_CHANNELS: [usize; 4] = [1, 16, 32, 64];

/// Fixed convolutional feature extractor over single-band inputs.
pub struct FeatureExtractor {
    layers: Vec<(Tensor, Tensor)>,
}

impl FeatureExtractor {
    /// Deterministic random-feature extractor (He-uniform weights, zero
    /// biases) from a seed.
    pub fn from_seed(seed: u64) -> Result<FeatureExtractor> {
        let mut layers = Vec::new();
        for i in 0..PHI_CHANNELS.len() - 1 {
            let (ic, oc) = (PHI_CHANNELS[i], PHI_CHANNELS[i + 1]);
            let weight = seeded_init(
                Shape::new(oc, ic, 3, 3),
                seed.wrapping_add(i as u64),
                InitScheme::HeUniform,
            )?;
            let bias = Tensor::constant(Shape::new(1, oc, 1, 1), 0.0)?;
            layers.push((weight, bias));
        }
        Ok(FeatureExtractor { layers })
    }

    /// Load extractor weights from an HMW1 file carrying parameters
    /// phi.conv{i}.weight / phi.conv{i}.bias.
    pub fn from_weights_file(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
        let weights = ModelWeights::load(path)?;
        let mut layers = Vec::new();
        for i in 0..PHI_CHANNELS.len() - 1 {
            let (ic, oc) = (PHI_CHANNELS[i], PHI_CHANNELS[i + 1]);
            let w = weights.get(&format!("phi.conv{i}.weight"))?;
            if w.dims != vec![oc, ic, 3, 3] {
                return Err(Error::Weights(format!(
                    "phi.conv{i}.weight has dims {:?}, expected {:?}",
                    w.dims,
                    [oc, ic, 3, 3]
                )));
            }
            let b = weights.get(&format!("phi.conv{i}.bias"))?;
            if b.dims != vec![oc] {
                return Err(Error::Weights(format!(
                    "phi.conv{i}.bias has dims {:?}, expected [{oc}]",
                    b.dims
                )));
            }
            layers.push((
                Tensor::from_vec(Shape::new(oc, ic, 3, 3), w.data.clone())?,
                Tensor::from_vec(Shape::new(1, oc, 1, 1), b.data.clone())?,
            ));
        }
        Ok(FeatureExtractor { layers })
    }

    /// Write the extractor to HMW1 so it can be inspected or swapped.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut weights = ModelWeights::default();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let ws = w.shape();
            weights.insert(
                format!("phi.conv{i}.weight"),
                crate::hmcnn::Param { dims: vec![ws.n, ws.c, ws.h, ws.w], data: w.values().to_vec() },
            );
            weights.insert(
                format!("phi.conv{i}.bias"),
                crate::hmcnn::Param { dims: vec![w.shape().n], data: b.values().to_vec() },
            );
        }
        weights.save(path)
    }

    /// Feature maps of the deepest block for a (n, 1, h, w) input.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().c != 1 {
            return Err(Error::shape(
                "feature_extractor",
                format!("expected a single-band input, got {}", x.shape()),
            ));
        }
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h = h.conv2d(w, b, 2, 1)?.relu()?;
        }
        Ok(h)
    }
}

/// Loss weighting; alpha scales the perceptual term.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct LossWeights {
    pub alpha: f64,
    /// Apply the perceptual term to the final output only (default) or to
    /// both stages.
    pub stage2_only_perceptual: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1e-3, stage2_only_perceptual: true }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Mean squared error over every element.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    d.mul(&d)?.mean_all()
}

/// Pixel term: MSE at full scale plus MSE of the intermediate output
/// against the bicubically reduced ground truth.
pub fn pixel_loss(fused_x2: &Tensor, fused_x4: &Tensor, hrms: &Tensor) -> Result<Tensor> {
    let hs = hrms.shape();
    let hrms_x2 = hrms.resample_bicubic(hs.h / 2, hs.w / 2)?;
    mse(fused_x4, hrms)?.add(&mse(fused_x2, &hrms_x2)?)
}

/// Perceptual term: MSE between deepest feature maps of the NIR bands.
pub fn nir_perceptual_loss(
    fused: &Tensor,
    target: &Tensor,
    phi: &FeatureExtractor,
    nir_index: usize,
) -> Result<Tensor> {
    if nir_index >= fused.shape().c {
        return Err(Error::Config(format!(
            "NIR band index {nir_index} out of range for {} channels",
            fused.shape().c
        )));
    }
    let f = phi.apply(&fused.slice_channels(nir_index, 1)?)?;
    let t = phi.apply(&target.slice_channels(nir_index, 1)?)?;
    mse(&f, &t)
}

/// Weighted total: alpha * perceptual + pixel. The perceptual term runs
/// on the final output, and additionally on the intermediate stage when
/// configured.
pub fn total_loss(
    fused_x2: &Tensor,
    fused_x4: &Tensor,
    hrms: &Tensor,
    phi: &FeatureExtractor,
    weights: &LossWeights,
    nir_index: usize,
) -> Result<Tensor> {
    weights.validate()?;
    let l1 = pixel_loss(fused_x2, fused_x4, hrms)?;
    let mut lnn = nir_perceptual_loss(fused_x4, hrms, phi, nir_index)?;
    if !weights.stage2_only_perceptual {
        let hs = hrms.shape();
        let hrms_x2 = hrms.resample_bicubic(hs.h / 2, hs.w / 2)?;
        lnn = lnn.add(&nir_perceptual_loss(fused_x2, &hrms_x2, phi, nir_index)?)?;
    }
    lnn.scalar_mul(weights.alpha)?.add(&l1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tape};

    fn pseudo_random(n: usize, seed: u64) -> Vec<f64> {
        let mut state = seed;
        (0..n)
            .map(|_| {
                state = state.wrapping_add(0x9E3779B97F4A7C15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                z ^= z >> 31;
                (z >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect()
    }

    #[test]
    fn mse_basics_and_oracle() {
        let shape = Shape::new(1, 2, 3, 3);
        let a = Tensor::from_vec(shape, pseudo_random(shape.numel(), 1)).unwrap();
        assert_eq!(mse(&a, &a).unwrap().item(), 0.0);

        let shifted = a.add_scalar(2.0).unwrap();
        assert!((mse(&shifted, &a).unwrap().item() - 4.0).abs() < 1e-12);

        let b = Tensor::from_vec(shape, pseudo_random(shape.numel(), 2)).unwrap();
        let got = mse(&a, &b).unwrap().item();
        let mut want = 0.0;
        for (x, y) in a.values().iter().zip(b.values()) {
            want += (x - y) * (x - y);
        }
        want /= shape.numel() as f64;
        assert!((got - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn pixel_loss_supervises_both_stages() {
        let hrms = Tensor::from_vec(Shape::new(1, 4, 8, 8), pseudo_random(256, 3)).unwrap();
        let hrms_x2 = hrms.resample_bicubic(4, 4).unwrap();
        // perfect at both scales
        assert_eq!(pixel_loss(&hrms_x2, &hrms, &hrms).unwrap().item(), 0.0);
        // off by 1 at stage 2 only: total = 0 + 1
        let off = hrms_x2.add_scalar(1.0).unwrap();
        assert!((pixel_loss(&off, &hrms, &hrms).unwrap().item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn phi_is_deterministic_and_file_loadable() {
        let a = FeatureExtractor::from_seed(PHI_DEFAULT_SEED).unwrap();
        let b = FeatureExtractor::from_seed(PHI_DEFAULT_SEED).unwrap();
        let x = Tensor::from_vec(Shape::new(1, 1, 16, 16), pseudo_random(256, 4)).unwrap();
        assert_eq!(a.apply(&x).unwrap().values(), b.apply(&x).unwrap().values());
        // 16 -> 8 -> 4 -> 2 spatial, 64 channels deep
        assert_eq!(a.apply(&x).unwrap().shape(), Shape::new(1, 64, 2, 2));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.hmw");
        a.save(&path).unwrap();
        let c = FeatureExtractor::from_weights_file(&path).unwrap();
        assert_eq!(a.apply(&x).unwrap().values(), c.apply(&x).unwrap().values());
    }

    #[test]
    fn nir_loss_ignores_other_bands() {
        let phi = FeatureExtractor::from_seed(PHI_DEFAULT_SEED).unwrap();
        let shape = Shape::new(1, 4, 8, 8);
        let target = Tensor::from_vec(shape, pseudo_random(shape.numel(), 5)).unwrap();
        let fused = Tensor::from_vec(shape, pseudo_random(shape.numel(), 6)).unwrap();
        assert_eq!(nir_perceptual_loss(&target, &target, &phi, 3).unwrap().item(), 0.0);

        // corrupt only non-NIR channels of the target copy
        let mut corrupted = target.values().to_vec();
        for v in corrupted[0..3 * 64].iter_mut() {
            *v += 0.5;
        }
        let corrupted = Tensor::from_vec(shape, corrupted).unwrap();
        let base = nir_perceptual_loss(&fused, &target, &phi, 3).unwrap().item();
        let after = nir_perceptual_loss(&fused, &corrupted, &phi, 3).unwrap().item();
        assert_eq!(base, after);

        assert!(nir_perceptual_loss(&fused, &target, &phi, 7).is_err());
    }

    #[test]
    fn nir_loss_gradient_matches_finite_differences() {
        let phi = FeatureExtractor::from_seed(11).unwrap();
        let shape = Shape::new(1, 4, 8, 8);
        let fv = pseudo_random(shape.numel(), 7);
        let tv = pseudo_random(shape.numel(), 8);

        let tape = Tape::new();
        let fused = tape.leaf(shape, fv.clone(), true).unwrap();
        let target = Tensor::from_vec(shape, tv.clone()).unwrap();
        let loss = nir_perceptual_loss(&fused, &target, &phi, 3).unwrap();
        backward(&loss).unwrap();
        let analytic = fused.grad().unwrap();

        let eps = 1e-5;
        let mut probe = fv.clone();
        // only the NIR block of the gradient is nonzero; check it all,
        // spot-check a few zeros elsewhere
        for i in 3 * 64..4 * 64 {
            probe[i] = fv[i] + eps;
            let fp = nir_perceptual_loss(
                &Tensor::from_vec(shape, probe.clone()).unwrap(),
                &target,
                &phi,
                3,
            )
            .unwrap()
            .item();
            probe[i] = fv[i] - eps;
            let fm = nir_perceptual_loss(
                &Tensor::from_vec(shape, probe.clone()).unwrap(),
                &target,
                &phi,
                3,
            )
            .unwrap()
            .item();
            probe[i] = fv[i];
            let numeric = (fp - fm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "index {i}: {} vs {numeric}", analytic[i]);
        }
        assert!(analytic[0..3 * 64].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_is_alpha_weighted_sum_and_monotone_in_alpha() {
        let phi = FeatureExtractor::from_seed(PHI_DEFAULT_SEED).unwrap();
        let hrms = Tensor::from_vec(Shape::new(1, 4, 8, 8), pseudo_random(256, 9)).unwrap();
        let fused_x4 = Tensor::from_vec(Shape::new(1, 4, 8, 8), pseudo_random(256, 10)).unwrap();
        let fused_x2 = Tensor::from_vec(Shape::new(1, 4, 4, 4), pseudo_random(64, 11)).unwrap();

        let l1 = pixel_loss(&fused_x2, &fused_x4, &hrms).unwrap().item();
        let lnn = nir_perceptual_loss(&fused_x4, &hrms, &phi, 3).unwrap().item();
        assert!(lnn > 0.0);

        let w0 = LossWeights { alpha: 0.0, ..Default::default() };
        let t0 = total_loss(&fused_x2, &fused_x4, &hrms, &phi, &w0, 3).unwrap().item();
        assert_eq!(t0, l1);

        let w = LossWeights::default();
        let t = total_loss(&fused_x2, &fused_x4, &hrms, &phi, &w, 3).unwrap().item();
        assert_eq!(t, 1e-3 * lnn + l1);

        let w_big = LossWeights { alpha: 1.0, ..Default::default() };
        let t_big = total_loss(&fused_x2, &fused_x4, &hrms, &phi, &w_big, 3).unwrap().item();
        assert!(t_big > t && t > t0);

        // perfect fusion at both scales
        let hrms_x2 = hrms.resample_bicubic(4, 4).unwrap();
        let perfect = total_loss(&hrms_x2, &hrms, &hrms, &phi, &w, 3).unwrap().item();
        assert_eq!(perfect, 0.0);
    }

    #[test]
    fn negative_alpha_rejected() {
        let w = LossWeights { alpha: -0.5, ..Default::default() };
        assert!(w.validate().is_err());
    }
}
