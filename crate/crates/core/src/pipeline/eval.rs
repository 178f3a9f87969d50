//! Evaluation of every available mask source against ground truth on the test split.

use super::config::PipelineConfig;
use super::manifest::{resolve, Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::evalkit::{self, BboxScore, MaskScores, RandomProjectionExtractor};
use crate::imageio::{self, Image};
use crate::mask::{BinaryMask, Provenance, ResolutionSpace};
use crate::maskgen;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

/// Mask sources in report order; the key is the record artifact name.
pub const METHODS: [&str; 6] = ["prelim", "refined", "cropflip", "unet-prelim", "unet-refined", "unet-augmented"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub id: String,
    pub method: String,
    pub scores: MaskScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BboxScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub n: usize,
    pub accuracy: f64,
    pub iou: f64,
    pub miou: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbox_iou: Option<f64>,
    /// Predictions that were empty where a box was expected.
    pub empty_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TprDiagnostic {
    pub target_tpr: f64,
    pub threshold: f64,
    pub holdout_images: usize,
    pub test_images: usize,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub test_images: usize,
    pub per_image: Vec<ImageScores>,
    pub per_image_auc: Vec<(String, f64)>,
    pub methods: BTreeMap<String, MethodSummary>,
    pub auc: Option<f64>,
    pub tpr: Option<TprDiagnostic>,
    /// Synthetic object images against the real images.
    pub fid: Option<f64>,
    pub notes: Vec<String>,
}

impl EvalReport {
    /// One line per image and method, then the aggregate block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# dataset {} test_images {}", self.dataset, self.test_images);
        for s in &self.per_image {
            let _ = write!(
                out,
                "{}\t{}\tacc={:.4}\tiou={:.4}\tmiou={:.4}",
                s.id, s.method, s.scores.accuracy, s.scores.iou, s.scores.miou
            );
            if let Some(b) = s.bbox {
                let _ = write!(out, "\tbbox_iou={:.4}", b.iou);
            }
            out.push('\n');
        }
        for (id, auc) in &self.per_image_auc {
            let _ = writeln!(out, "{id}\tauc\t{auc:.4}");
        }
        out.push_str(&self.aggregate_text());
        out
    }

    pub fn aggregate_text(&self) -> String {
        let mut out = String::from("# aggregate\n");
        for m in METHODS {
            if let Some(s) = self.methods.get(m) {
                let _ = write!(out, "{m}\tn={}\tacc={:.4}\tiou={:.4}\tmiou={:.4}", s.n, s.accuracy, s.iou, s.miou);
                if let Some(b) = s.bbox_iou {
                    let _ = write!(out, "\tbbox_iou={b:.4}\tempty={}", s.empty_predictions);
                }
                out.push('\n');
            }
        }
        if let Some(a) = self.auc {
            let _ = writeln!(out, "auc\tn={}\tmean={a:.4}", self.per_image_auc.len());
        }
        if let Some(t) = &self.tpr {
            let _ = writeln!(
                out,
                "tpr_threshold\ttarget={:.2}\tthreshold={:.4}\tholdout={}\ttest={}\ttest_acc={:.4}",
                t.target_tpr, t.threshold, t.holdout_images, t.test_images, t.test_accuracy
            );
        }
        if let Some(f) = self.fid {
            let _ = writeln!(out, "fid\t{f:.4}");
        }
        for n in &self.notes {
            let _ = writeln!(out, "note\t{n}");
        }
        out
    }
}

fn min_max(map: &Array2<f32>) -> Array2<f32> {
    let lo = map.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        map.mapv(|v| (v - lo) / (hi - lo))
    } else {
        Array2::zeros(map.dim())
    }
}

fn load_gt(root: &Path, r: &Record) -> Result<Option<BinaryMask>> {
    r.gt_mask
        .as_ref()
        .map(|p| imageio::load_mask_png(&resolve(root, p), ResolutionSpace::Pixel, Provenance::GroundTruth))
        .transpose()
}

fn load_method(root: &Path, r: &Record, method: &str, dims: (usize, usize)) -> Result<Option<BinaryMask>> {
    let Some(p) = r.artifacts.get(method) else { return Ok(None) };
    let path = resolve(root, p);
    if method == "prelim" {
        let m = imageio::load_mask_png(&path, ResolutionSpace::Latent, Provenance::Preliminary)?;
        return Ok(Some(maskgen::upsample_mask(&m, dims)));
    }
    Ok(Some(imageio::load_mask_png(&path, ResolutionSpace::Pixel, Provenance::Predicted)?))
}

fn importance(root: &Path, r: &Record, dims: (usize, usize)) -> Result<Option<Array2<f32>>> {
    r.artifacts
        .get("importance")
        .map(|p| imageio::load_pfm(&resolve(root, p)).map(|m| maskgen::upsample_map(&m, dims)))
        .transpose()
}

struct PerRecord {
    scores: Vec<ImageScores>,
    auc: Option<f64>,
}

fn score_record(root: &Path, r: &Record) -> Result<Option<PerRecord>> {
    let Some(gt) = load_gt(root, r)? else { return Ok(None) };
    let dims = gt.dims();
    let mut scores = Vec::new();
    for method in METHODS {
        let Some(pred) = load_method(root, r, method, dims)? else { continue };
        if pred.dims() != dims {
            return Err(Error::DimensionMismatch(pred.dims(), dims));
        }
        scores.push(ImageScores {
            id: r.id.clone(),
            method: method.to_string(),
            scores: evalkit::score_mask(&pred, &gt)?,
            bbox: r.gt_bbox.map(|b| evalkit::bbox_iou(&pred, &b)),
        });
    }
    let auc = match importance(root, r, dims)? {
        Some(map) if gt.count() > 0 && gt.count() < dims.0 * dims.1 => Some(evalkit::auc_roc(&map, &gt)?),
        _ => None,
    };
    Ok(Some(PerRecord { scores, auc }))
}

fn pooled_scores(root: &Path, records: &[&Record]) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let per: Vec<(Vec<f64>, Vec<bool>)> = records
        .par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<bool>)> {
            let gt = load_gt(root, r)?.expect("filtered on gt");
            let map = min_max(&importance(root, r, gt.dims())?.expect("filtered on importance"));
            Ok((map.iter().map(|&v| v as f64).collect(), gt.values.iter().copied().collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().unzip())
}

fn tpr_diagnostic(root: &Path, m: &Manifest, cfg: &PipelineConfig, test: &[&Record]) -> Result<Option<TprDiagnostic>> {
    let usable = |r: &&Record| r.gt_mask.is_some() && r.artifacts.contains_key("importance");
    let holdout: Vec<&Record> =
        m.records.iter().filter(|r| r.split == Split::Train).filter(usable).take(cfg.eval.holdout).collect();
    let test: Vec<&Record> = test.iter().copied().filter(usable).collect();
    if holdout.is_empty() || test.is_empty() {
        return Ok(None);
    }
    let (hs, hl) = pooled_scores(root, &holdout)?;
    let (hs, hl): (Vec<f64>, Vec<bool>) = (hs.concat(), hl.concat());
    let threshold = match evalkit::tpr_threshold(&hs, &hl, cfg.eval.target_tpr) {
        Ok(t) => t,
        Err(_) => return Ok(None),
    };
    let (ts, tl) = pooled_scores(root, &test)?;
    let acc: f64 = ts.iter().zip(&tl).map(|(s, l)| evalkit::threshold_accuracy(s, l, threshold)).sum::<f64>() / ts.len() as f64;
    Ok(Some(TprDiagnostic {
        target_tpr: cfg.eval.target_tpr,
        threshold,
        holdout_images: holdout.len(),
        test_images: test.len(),
        test_accuracy: acc,
    }))
}

fn load_images(paths: &[PathBuf]) -> Result<Vec<Image>> {
    paths.par_iter().map(|p| imageio::load_rgb_png(p)).collect()
}

/// Scores every mask source present on the test split, plus importance-map
/// AUC, the TPR-threshold diagnostic and FID of the synthetic images.
pub fn evaluate(
    m: &Manifest,
    root: &Path,
    cfg: &PipelineConfig,
    synthetic: Option<&(Manifest, PathBuf)>,
) -> Result<EvalReport> {
    let test: Vec<&Record> = m.records.iter().filter(|r| r.split == Split::Test).collect();
    let per: Vec<Option<PerRecord>> = test.par_iter().map(|r| score_record(root, r)).collect::<Result<Vec<_>>>()?;
    let mut report = EvalReport {
        dataset: m.header.dataset.clone(),
        test_images: test.len(),
        per_image: Vec::new(),
        per_image_auc: Vec::new(),
        methods: BTreeMap::new(),
        auc: None,
        tpr: None,
        fid: None,
        notes: Vec::new(),
    };
    let scored = per.iter().filter(|p| p.is_some()).count();
    if scored < test.len() {
        report.notes.push(format!("{} test images lack ground truth masks", test.len() - scored));
    }
    for (r, p) in test.iter().zip(per) {
        let Some(p) = p else { continue };
        if let Some(a) = p.auc {
            report.per_image_auc.push((r.id.clone(), a));
        }
        report.per_image.extend(p.scores);
    }
    for method in METHODS {
        let rows: Vec<&ImageScores> = report.per_image.iter().filter(|s| s.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        let mean = evalkit::mean_scores(&rows.iter().map(|s| s.scores.clone()).collect::<Vec<_>>()).expect("non-empty");
        let boxes: Vec<BboxScore> = rows.iter().filter_map(|s| s.bbox).collect();
        let empty = boxes.iter().filter(|b| b.empty_prediction).count();
        report.methods.insert(
            method.to_string(),
            MethodSummary {
                n: rows.len(),
                accuracy: mean.accuracy,
                iou: mean.iou,
                miou: mean.miou,
                bbox_iou: (!boxes.is_empty()).then(|| boxes.iter().map(|b| b.iou).sum::<f64>() / boxes.len() as f64),
                empty_predictions: empty,
            },
        );
    }
    if !report.per_image_auc.is_empty() {
        report.auc = Some(report.per_image_auc.iter().map(|(_, a)| a).sum::<f64>() / report.per_image_auc.len() as f64);
    }
    report.tpr = tpr_diagnostic(root, m, cfg, &test)?;
    if let Some((sm, dir)) = synthetic {
        let synth_paths: Vec<PathBuf> =
            sm.records.iter().filter(|r| r.flags.is_empty()).map(|r| resolve(dir, &r.image)).collect();
        let real_paths: Vec<PathBuf> = m.records.iter().map(|r| resolve(root, &r.image)).collect();
        let need = cfg.eval.fid_dim + 1;
        if synth_paths.len() >= need && real_paths.len() >= need {
            let extractor = RandomProjectionExtractor::new(cfg.eval.fid_dim, cfg.eval.fid_seed);
            report.fid = Some(evalkit::fid_images(&extractor, &load_images(&synth_paths)?, &load_images(&real_paths)?)?);
        } else {
            report.notes.push(format!("fid skipped: needs at least {need} images per set"));
        }
    }
    Ok(report)
}
