//! Experiment orchestration behind the CLI: dataset degradation,
//! training, fusion dispatch, evaluation, error maps, classification,
//! and timing tables.

pub mod config;
pub mod train;

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::classical::{brovey_fuse, gs_fuse, ihs_fuse, sfim_fuse, FusionInput, FusionResult};
use crate::error::{Error, Result};
use crate::hmcnn::{self, HmcnnConfig, ModelWeights};
use crate::isodata::{agreement, classify, IsodataParams, LabelMap};
use crate::metrics::{evaluate_all, MetricReport};
use crate::raster::{
    crop_patches, read_pgm, read_raster, write_pgm, write_raster, Raster, ScaleFactor,
};
use train::{DatasetIndex, IndexEntry};

pub const FUSE_METHODS: [&str; 5] = ["ihs", "brovey", "gs", "sfim", "hmcnn"];

/// Crop HR inputs into training triples, degrade them, and write the
/// MBR1 files plus a JSON index.
pub fn cmd_degrade(
    hrms_path: &Path,
    pan_path: &Path,
    s: ScaleFactor,
    patch: usize,
    stride: usize,
    out_dir: &Path,
) -> Result<DatasetIndex> {
    let hrms = read_raster(hrms_path)?;
    let pan = read_raster(pan_path)?;
    let stem = hrms_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".to_string());
    let set = crop_patches(&hrms, &pan, patch, stride, s, &stem)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(set.len());
    for (i, entry) in set.iter().enumerate() {
        let names = [
            format!("patch_{i:04}_hrms.mbr"),
            format!("patch_{i:04}_pan.mbr"),
            format!("patch_{i:04}_lrms.mbr"),
        ];
        write_raster(&entry.hrms, out_dir.join(&names[0]))?;
        write_raster(&entry.pan, out_dir.join(&names[1]))?;
        write_raster(&entry.lrms, out_dir.join(&names[2]))?;
        entries.push(IndexEntry {
            id: format!("{}_{i:04}", entry.source_id),
            hrms: names[0].clone(),
            pan: names[1].clone(),
            lrms: names[2].clone(),
            x0: entry.x0,
            y0: entry.y0,
        });
    }
    let index = DatasetIndex { scale: s.get(), entries };
    index.save(&out_dir.join("index.json"))?;
    Ok(index)
}

pub struct FuseOutcome {
    pub raster: Raster,
    pub wall_seconds: f64,
    pub degenerate_pixels: usize,
}

#[derive(Serialize)]
struct FuseSidecar<'a> {
    method: &'a str,
    wall_seconds: f64,
    degenerate_pixels: usize,
}

/// Fuse with one named method and write the result (plus a small JSON
/// sidecar with the wall clock) to `out_path`.
pub fn cmd_fuse(
    method: &str,
    lrms_path: &Path,
    pan_path: &Path,
    weights_path: Option<&Path>,
    s: ScaleFactor,
    model: &HmcnnConfig,
    out_path: &Path,
) -> Result<FuseOutcome> {
    let lrms = read_raster(lrms_path)?;
    let pan = read_raster(pan_path)?;
    let outcome = run_fuse(method, &lrms, &pan, weights_path, s, model)?;
    write_raster(&outcome.raster, out_path)?;
    let sidecar = FuseSidecar {
        method,
        wall_seconds: outcome.wall_seconds,
        degenerate_pixels: outcome.degenerate_pixels,
    };
    let sidecar_path = out_path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok(outcome)
}

/// Fusion dispatch shared by `fuse` and `bench`.
pub fn run_fuse(
    method: &str,
    lrms: &Raster,
    pan: &Raster,
    weights_path: Option<&Path>,
    s: ScaleFactor,
    model: &HmcnnConfig,
) -> Result<FuseOutcome> {
    let classical = |f: fn(&FusionInput) -> Result<FusionResult>| -> Result<FuseOutcome> {
        let input = FusionInput::new(lrms, pan, s)?;
        let started = Instant::now();
        let result = f(&input)?;
        Ok(FuseOutcome {
            raster: result.raster,
            wall_seconds: started.elapsed().as_secs_f64(),
            degenerate_pixels: result.degenerate_pixels,
        })
    };
    match method {
        "ihs" => classical(ihs_fuse),
        "brovey" => classical(brovey_fuse),
        "gs" => classical(gs_fuse),
        "sfim" => classical(sfim_fuse),
        "hmcnn" => {
            let weights_path = weights_path.ok_or_else(|| {
                Error::Usage("method hmcnn needs --weights <file.hmw>".into())
            })?;
            let weights = ModelWeights::load(weights_path)?;
            let started = Instant::now();
            let raster = hmcnn::predict(lrms, pan, &weights, model)?;
            Ok(FuseOutcome {
                raster,
                wall_seconds: started.elapsed().as_secs_f64(),
                degenerate_pixels: 0,
            })
        }
        other => Err(Error::Usage(format!(
            "unknown method `{other}`; valid methods: {}",
            FUSE_METHODS.join(", ")
        ))),
    }
}

/// Fixed CSV column order for evaluation tables.
pub const CSV_COLUMNS: &str =
    "label,protocol,ergas,rmse,rmae,sam_degrees,uiqi,d_lambda,d_s,qnr";

fn csv_cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_default()
}

/// Evaluate a fusion result, write the JSON report, and optionally
/// append one row to a CSV comparison table.
pub fn cmd_evaluate(
    fused_path: &Path,
    reference_path: Option<&Path>,
    lrms_path: &Path,
    pan_path: &Path,
    s: ScaleFactor,
    out_report: &Path,
    csv: Option<(&Path, &str)>,
) -> Result<MetricReport> {
    let fused = read_raster(fused_path)?;
    let reference = reference_path.map(read_raster).transpose()?;
    let lrms = read_raster(lrms_path)?;
    let pan = read_raster(pan_path)?;
    let report = evaluate_all(&fused, reference.as_ref(), &lrms, &pan, s)?;
    std::fs::write(
        out_report,
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )
    .map_err(|e| Error::io(out_report.display().to_string(), e))?;

    if let Some((csv_path, label)) = csv {
        let mut text = if csv_path.exists() {
            std::fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path.display().to_string(), e))?
        } else {
            format!("{CSV_COLUMNS}\n")
        };
        let protocol = match report.protocol {
            crate::metrics::Protocol::Reduced => "reduced",
            crate::metrics::Protocol::Full => "full",
        };
        text.push_str(&format!(
            "{label},{protocol},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
            csv_cell(report.ergas),
            csv_cell(report.rmse),
            csv_cell(report.rmae),
            csv_cell(report.sam_degrees),
            csv_cell(report.uiqi),
            report.d_lambda,
            report.d_s,
            report.qnr,
        ));
        std::fs::write(csv_path, text).map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    }
    Ok(report)
}

#[derive(Serialize)]
struct ErrorMapSidecar {
    /// Gray value 255 corresponds to this squared error.
    scale_max: f64,
    mean_squared_error: f64,
}

/// Per-pixel squared error averaged over bands, written as a PGM with a
/// JSON sidecar recording the scale. Returns (map, mean squared error).
pub fn cmd_error_map(fused_path: &Path, reference_path: &Path, out_path: &Path) -> Result<(Raster, f64)> {
    let fused = read_raster(fused_path)?;
    let reference = read_raster(reference_path)?;
    let (map, mean) = error_map(&fused, &reference)?;
    write_pgm(&map, 0, out_path)?;
    let sidecar = ErrorMapSidecar { scale_max: map.value_range().1, mean_squared_error: mean };
    let sidecar_path = out_path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok((map, mean))
}

/// The raster-level error map: mean over bands of the squared pixel
/// difference.
pub fn error_map(fused: &Raster, reference: &Raster) -> Result<(Raster, f64)> {
    if fused.width() != reference.width()
        || fused.height() != reference.height()
        || fused.bands() != reference.bands()
    {
        return Err(Error::shape(
            "error_map",
            format!(
                "{}x{}x{} vs {}x{}x{}",
                fused.width(),
                fused.height(),
                fused.bands(),
                reference.width(),
                reference.height(),
                reference.bands()
            ),
        ));
    }
    let plane = fused.width() * fused.height();
    let mut data = vec![0.0; plane];
    for b in 0..fused.bands() {
        let (f, r) = (fused.band(b), reference.band(b));
        for k in 0..plane {
            let d = f[k] - r[k];
            data[k] += d * d;
        }
    }
    let inv = 1.0 / fused.bands() as f64;
    for v in &mut data {
        *v *= inv;
    }
    let mean = data.iter().sum::<f64>() / plane as f64;
    let max = data.iter().cloned().fold(0.0, f64::max);
    let range = (0.0, if max > 0.0 { max } else { 1.0 });
    let map = Raster::new(
        fused.width(),
        fused.height(),
        vec![crate::raster::BandRole::Unknown],
        data,
        range,
    )?;
    Ok((map, mean))
}

#[derive(Serialize)]
struct ClassifySidecar<'a> {
    k_final: usize,
    centers: &'a [Vec<f64>],
    params: &'a IsodataParams,
    agreement: Option<f64>,
}

pub struct ClassifyOutcome {
    pub map: LabelMap,
    pub agreement: Option<f64>,
}

/// Classify a raster, write labels as a PGM (gray levels spread over the
/// class range) plus a JSON sidecar with centers and k_final; optionally
/// score agreement against a previous classification.
pub fn cmd_classify(
    input_path: &Path,
    params: &IsodataParams,
    out_path: &Path,
    compare_with: Option<&Path>,
) -> Result<ClassifyOutcome> {
    let img = read_raster(input_path)?;
    let map = classify(&img, params)?;
    write_label_pgm(&map, out_path)?;

    let score = match compare_with {
        None => None,
        Some(other) => Some(agreement(&map, &read_label_pgm(other)?)?),
    };
    let sidecar = ClassifySidecar {
        k_final: map.k_final,
        centers: &map.centers,
        params,
        agreement: score,
    };
    let sidecar_path = out_path.with_extension("json");
    std::fs::write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    Ok(ClassifyOutcome { map, agreement: score })
}

/// Labels as gray levels: class i maps to round(i * 255 / (k - 1)).
pub fn write_label_pgm(map: &LabelMap, path: &Path) -> Result<()> {
    let k = map.k_final;
    let data: Vec<f64> = map.labels.iter().map(|&l| l as f64).collect();
    let raster = Raster::new(
        map.width,
        map.height,
        vec![crate::raster::BandRole::Unknown],
        data,
        (0.0, (k.max(2) - 1) as f64),
    )?;
    write_pgm(&raster, 0, path)
}

/// Invert [`write_label_pgm`] using the k_final recorded in the PGM's
/// JSON sidecar.
pub fn read_label_pgm(path: &Path) -> Result<LabelMap> {
    let sidecar_path = path.with_extension("json");
    let text = std::fs::read_to_string(&sidecar_path)
        .map_err(|e| Error::io(sidecar_path.display().to_string(), e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: sidecar_path.display().to_string(),
        offset: 0,
        message: e.to_string(),
    })?;
    let k_final = value
        .get("k_final")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Format {
            path: sidecar_path.display().to_string(),
            offset: 0,
            message: "missing k_final".to_string(),
        })? as usize;
    let img = read_pgm(path)?;
    let denom = (k_final.max(2) - 1) as f64;
    let labels: Vec<u32> = img
        .data()
        .iter()
        .map(|&g| (g * denom / 255.0).round() as u32)
        .collect();
    let centers = (0..k_final).map(|_| Vec::new()).collect();
    Ok(LabelMap { width: img.width(), height: img.height(), labels, k_final, centers })
}

/// Wall-clock comparison across methods; absolute numbers depend on the
/// host and build, so the table disclaims cross-machine comparability.
pub fn cmd_bench(
    methods: &[String],
    lrms_path: &Path,
    pan_path: &Path,
    weights_path: Option<&Path>,
    s: ScaleFactor,
    model: &HmcnnConfig,
    repetitions: usize,
    out_csv: &Path,
) -> Result<()> {
    if repetitions == 0 {
        return Err(Error::Usage("--reps must be at least 1".into()));
    }
    let lrms = read_raster(lrms_path)?;
    let pan = read_raster(pan_path)?;
    let mut text = String::from(
        "# wall-clock seconds on this host and build only; not comparable across machines\n",
    );
    text.push_str("method,repetitions,mean_s,min_s\n");
    for method in methods {
        let mut times = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let outcome = run_fuse(method, &lrms, &pan, weights_path, s, model)?;
            times.push(outcome.wall_seconds);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let min = times.iter().cloned().fold(f64::INFINITY, f64::min);
        text.push_str(&format!("{method},{repetitions},{mean:.6},{min:.6}\n"));
    }
    std::fs::write(out_csv, text).map_err(|e| Error::io(out_csv.display().to_string(), e))
}

/// Train per a config file; convenience wrapper over [`train::train`].
pub fn cmd_train(
    config_path: &Path,
    seed_override: Option<u64>,
    quiet: bool,
) -> Result<(ModelWeights, train::RunManifest)> {
    let mut cfg = config::TrainConfig::load(config_path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    train::train(&cfg, quiet)
}

pub use config::TrainConfig;
pub use train::RunManifest;
