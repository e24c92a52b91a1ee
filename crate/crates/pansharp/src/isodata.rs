//! ISODATA unsupervised classification with cluster splitting and
//! merging, plus a label-map agreement score for comparing two
//! classifications.
//!
//! Initialization spreads the centers evenly along the line between the
//! per-band minimum and maximum spectral vectors, so runs are fully
//! deterministic; the seed is carried only as provenance.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::Raster;

#[derive(Clone, Debug, Serialize)]
pub struct IsodataParams {
    /// Desired number of classes.
    pub k_init: usize,
    pub max_iter: usize,
    /// Clusters smaller than this are discarded and their pixels
    /// reassigned.
    pub min_cluster_size: usize,
    /// A cluster splits when its largest per-band standard deviation
    /// exceeds this (absolute units).
    pub split_std_threshold: f64,
    /// Center pairs closer than this merge (absolute units).
    pub merge_dist_threshold: f64,
    pub seed: u64,
}

impl IsodataParams {
    /// Defaults for a given nominal range span: 5 classes, 5 iterations,
    /// split at 15% of the span, merge below 5% of the span.
    pub fn defaults(range_span: f64) -> IsodataParams {
        IsodataParams {
            k_init: 5,
            max_iter: 5,
            min_cluster_size: 20,
            split_std_threshold: 0.15 * range_span,
            merge_dist_threshold: 0.05 * range_span,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k_init < 2 {
            return Err(Error::InvalidArgument("k_init must be at least 2".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-pixel class assignment and the final cluster centers.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub k_final: usize,
    /// Per-class spectral mean vectors.
    pub centers: Vec<Vec<f64>>,
}

/// Sum of squares recorded around one assign/update pair.
#[derive(Clone, Copy, Debug)]
pub struct SsePoint {
    pub after_assign: f64,
    pub after_update: f64,
    /// Whether discard/split/merge changed the cluster set afterwards.
    pub structure_changed: bool,
}

fn spectral(img: &Raster, k: usize, out: &mut [f64]) {
    let plane = img.width() * img.height();
    for (b, slot) in out.iter_mut().enumerate() {
        *slot = img.data()[b * plane + k];
    }
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-center assignment; ties break to the lowest class id.
fn assign(img: &Raster, centers: &[Vec<f64>], labels: &mut [u32]) -> f64 {
    let plane = img.width() * img.height();
    let bands = img.bands();
    let mut px = vec![0.0; bands];
    let mut sse = 0.0;
    for k in 0..plane {
        spectral(img, k, &mut px);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, center) in centers.iter().enumerate() {
            let d = dist_sq(&px, center);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[k] = best as u32;
        sse += best_d;
    }
    sse
}

fn cluster_stats(img: &Raster, labels: &[u32], k: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let plane = img.width() * img.height();
    let bands = img.bands();
    let mut sizes = vec![0usize; k];
    let mut sums = vec![vec![0.0; bands]; k];
    for i in 0..plane {
        let c = labels[i] as usize;
        sizes[c] += 1;
        for b in 0..bands {
            sums[c][b] += img.band(b)[i];
        }
    }
    for (c, sum) in sums.iter_mut().enumerate() {
        if sizes[c] > 0 {
            for v in sum.iter_mut() {
                *v /= sizes[c] as f64;
            }
        }
    }
    (sizes, sums)
}

fn total_sse(img: &Raster, labels: &[u32], centers: &[Vec<f64>]) -> f64 {
    let plane = img.width() * img.height();
    let bands = img.bands();
    let mut px = vec![0.0; bands];
    let mut sse = 0.0;
    for k in 0..plane {
        spectral(img, k, &mut px);
        sse += dist_sq(&px, &centers[labels[k] as usize]);
    }
    sse
}

pub fn classify(img: &Raster, params: &IsodataParams) -> Result<LabelMap> {
    classify_with_trace(img, params).map(|(map, _)| map)
}

/// [`classify`] plus the per-iteration sum-of-squares trace used by the
/// monotonicity checks.
pub fn classify_with_trace(
    img: &Raster,
    params: &IsodataParams,
) -> Result<(LabelMap, Vec<SsePoint>)> {
    params.validate()?;
    let plane = img.width() * img.height();
    let bands = img.bands();
    if plane == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }

    // evenly spaced centers between the min and max spectral vectors
    let mut mn = vec![f64::INFINITY; bands];
    let mut mx = vec![f64::NEG_INFINITY; bands];
    for b in 0..bands {
        for &v in img.band(b) {
            mn[b] = mn[b].min(v);
            mx[b] = mx[b].max(v);
        }
    }
    let mut centers: Vec<Vec<f64>> = (0..params.k_init)
        .map(|i| {
            let t = i as f64 / (params.k_init - 1) as f64;
            (0..bands).map(|b| mn[b] + t * (mx[b] - mn[b])).collect()
        })
        .collect();

    let mut labels = vec![0u32; plane];
    let mut prev_labels: Option<Vec<u32>> = None;
    let mut trace = Vec::new();

    for _ in 0..params.max_iter {
        let after_assign = assign(img, &centers, &mut labels);
        let changed = prev_labels.as_deref() != Some(labels.as_slice());

        // drop empty clusters right away so means are defined
        let (sizes, means) = cluster_stats(img, &labels, centers.len());
        let keep: Vec<usize> = (0..centers.len()).filter(|&c| sizes[c] > 0).collect();
        let mut remap = vec![u32::MAX; centers.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new as u32;
        }
        centers = keep.iter().map(|&c| means[c].clone()).collect();
        for l in labels.iter_mut() {
            *l = remap[*l as usize];
        }
        let after_update = total_sse(img, &labels, &centers);

        let mut structure_changed = false;

        // discard undersized clusters, reassigning their members
        let (mut sizes, _) = cluster_stats(img, &labels, centers.len());
        if centers.len() > 1 && sizes.iter().any(|&s| s < params.min_cluster_size) {
            // keep the largest cluster no matter what so one survives
            let largest = (0..sizes.len()).max_by_key(|&c| sizes[c]).unwrap();
            let keep: Vec<usize> = (0..centers.len())
                .filter(|&c| sizes[c] >= params.min_cluster_size || c == largest)
                .collect();
            if keep.len() < centers.len() {
                structure_changed = true;
                let kept_centers: Vec<Vec<f64>> = keep.iter().map(|&c| centers[c].clone()).collect();
                let mut remap = vec![u32::MAX; centers.len()];
                for (new, &old) in keep.iter().enumerate() {
                    remap[old] = new as u32;
                }
                let mut px = vec![0.0; bands];
                for i in 0..plane {
                    let old = labels[i] as usize;
                    if remap[old] != u32::MAX {
                        labels[i] = remap[old];
                    } else {
                        spectral(img, i, &mut px);
                        let mut best = 0usize;
                        let mut best_d = f64::INFINITY;
                        for (c, center) in kept_centers.iter().enumerate() {
                            let d = dist_sq(&px, center);
                            if d < best_d {
                                best_d = d;
                                best = c;
                            }
                        }
                        labels[i] = best as u32;
                    }
                }
                centers = kept_centers;
                let (s, m) = cluster_stats(img, &labels, centers.len());
                sizes = s;
                centers = m;
            }
        }

        // split clusters that spread too far along one band
        let mut c = 0;
        while c < centers.len() {
            if centers.len() >= 2 * params.k_init {
                break;
            }
            let size = sizes[c];
            if size < 2 * params.min_cluster_size.max(1) {
                c += 1;
                continue;
            }
            let mut var = vec![0.0; bands];
            for i in 0..plane {
                if labels[i] as usize == c {
                    for b in 0..bands {
                        let d = img.band(b)[i] - centers[c][b];
                        var[b] += d * d;
                    }
                }
            }
            let (widest, max_var) = var
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(b, v)| (b, v / size as f64))
                .unwrap();
            let sigma = max_var.sqrt();
            if sigma > params.split_std_threshold {
                structure_changed = true;
                let mut plus = centers[c].clone();
                plus[widest] += sigma;
                let mut minus = centers[c].clone();
                minus[widest] -= sigma;
                centers[c] = minus;
                centers.push(plus);
                sizes.push(0); // refreshed by the next assignment
            }
            c += 1;
        }

        // merge center pairs that ended up too close
        loop {
            if centers.len() <= (params.k_init / 2).max(1) {
                break;
            }
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..centers.len() {
                for j in i + 1..centers.len() {
                    let d = dist_sq(&centers[i], &centers[j]).sqrt();
                    if best.map_or(true, |(_, _, bd)| d < bd) {
                        best = Some((i, j, d));
                    }
                }
            }
            match best {
                Some((i, j, d)) if d < params.merge_dist_threshold => {
                    structure_changed = true;
                    let (ni, nj) = (sizes[i] as f64, sizes[j] as f64);
                    let total = (ni + nj).max(1.0);
                    let merged: Vec<f64> = centers[i]
                        .iter()
                        .zip(&centers[j])
                        .map(|(a, b)| (ni * a + nj * b) / total)
                        .collect();
                    centers[i] = merged;
                    sizes[i] += sizes[j];
                    centers.remove(j);
                    sizes.remove(j);
                }
                _ => break,
            }
        }

        trace.push(SsePoint { after_assign, after_update, structure_changed });

        if !changed && !structure_changed {
            break;
        }
        prev_labels = Some(labels.clone());
    }

    // consistent final state: assign against the final centers, drop
    // empties, compact ids, report per-class means
    assign(img, &centers, &mut labels);
    let (sizes, means) = cluster_stats(img, &labels, centers.len());
    let keep: Vec<usize> = (0..centers.len()).filter(|&c| sizes[c] > 0).collect();
    let mut remap = vec![u32::MAX; centers.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new as u32;
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    let centers: Vec<Vec<f64>> = keep.iter().map(|&c| means[c].clone()).collect();

    Ok((
        LabelMap {
            width: img.width(),
            height: img.height(),
            k_final: centers.len(),
            labels,
            centers,
        },
        trace,
    ))
}

/// Fraction of pixels whose classes can be matched between two label
/// maps under the best label pairing (greedy confusion-matrix
/// assignment). 1.0 means the maps are identical up to relabeling.
pub fn agreement(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::InvalidArgument(format!(
            "label maps {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (ka, kb) = (a.k_final, b.k_final);
    let mut confusion = vec![vec![0usize; kb]; ka];
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        confusion[la as usize][lb as usize] += 1;
    }
    let mut row_used = vec![false; ka];
    let mut col_used = vec![false; kb];
    let mut matched = 0usize;
    loop {
        let mut best: Option<(usize, usize, usize)> = None;
        for i in 0..ka {
            if row_used[i] {
                continue;
            }
            for j in 0..kb {
                if col_used[j] {
                    continue;
                }
                if best.map_or(true, |(_, _, c)| confusion[i][j] > c) {
                    best = Some((i, j, confusion[i][j]));
                }
            }
        }
        match best {
            Some((i, j, c)) if c > 0 => {
                matched += c;
                row_used[i] = true;
                col_used[j] = true;
            }
            _ => break,
        }
    }
    Ok(matched as f64 / a.labels.len() as f64)
}
