//! Building manifests from image directories or from the procedural toy set.

use super::config::PipelineConfig;
use super::manifest::{file_sha256, relativize, write_atomic_with, Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::imageio;
use crate::mask::PatchRect;
use crate::rng;
use crate::toyshapes;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `*.png` directly under the source directory; no ground truth.
    Flat,
    /// `images/<class>/<name>.png` with optional `segmentations/<class>/<name>.png`.
    Cub,
    /// `images/*.png` plus `bboxes.csv` with columns `image,top,left,height,width`.
    Bbox,
}

impl std::str::FromStr for Layout {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Layout::Flat),
            "cub" | "cub-style" => Ok(Layout::Cub),
            "bbox" | "bbox-style" => Ok(Layout::Bbox),
            other => Err(Error::Config(format!("unknown layout {other:?} (flat, cub, bbox)"))),
        }
    }
}

fn pngs_in(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Seeded shuffle of the sorted ids; the first `fraction` of them become test.
pub fn assign_splits(ids: &[String], fraction: f64, seed: u64) -> BTreeMap<String, Split> {
    let mut order: Vec<&String> = ids.iter().collect();
    order.sort();
    order.shuffle(&mut rng::rng(rng::derive_seed(seed, &[rng::tag("split")])));
    let n_test = (ids.len() as f64 * fraction).round() as usize;
    order.into_iter().enumerate().map(|(i, id)| (id.clone(), if i < n_test { Split::Test } else { Split::Train })).collect()
}

struct Found {
    id: String,
    image: PathBuf,
    gt_mask: Option<PathBuf>,
    gt_bbox: Option<PatchRect>,
}

fn parse_bboxes(path: &Path) -> Result<BTreeMap<String, PatchRect>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("image")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let nums: Option<Vec<usize>> = cols.get(1..5).map(|c| c.iter().filter_map(|v| v.parse().ok()).collect());
        match nums {
            Some(v) if cols.len() == 5 && v.len() == 4 => {
                out.insert(stem(Path::new(cols[0])), PatchRect::new(v[0], v[1], v[2], v[3]));
            }
            _ => return Err(Error::format(path, format!("line {}: expected image,top,left,height,width", n + 1))),
        }
    }
    Ok(out)
}

fn discover(source: &Path, layout: Layout) -> Result<Vec<Found>> {
    if !source.is_dir() {
        return Err(Error::Dependency(format!("{} is not a readable directory", source.display())));
    }
    let mut found = Vec::new();
    match layout {
        Layout::Flat => {
            for p in pngs_in(source)? {
                found.push(Found { id: stem(&p), image: p, gt_mask: None, gt_bbox: None });
            }
        }
        Layout::Cub => {
            let images = source.join("images");
            let segs = source.join("segmentations");
            if !images.is_dir() {
                return Err(Error::Dependency(format!("{} has no images/ directory", source.display())));
            }
            for class_dir in subdirs(&images)? {
                let class = class_dir.file_name().map(|c| c.to_string_lossy().into_owned()).unwrap_or_default();
                for p in pngs_in(&class_dir)? {
                    let seg = segs.join(&class).join(format!("{}.png", stem(&p)));
                    found.push(Found {
                        id: format!("{class}/{}", stem(&p)),
                        image: p,
                        gt_mask: seg.is_file().then_some(seg),
                        gt_bbox: None,
                    });
                }
            }
        }
        Layout::Bbox => {
            let images = source.join("images");
            if !images.is_dir() {
                return Err(Error::Dependency(format!("{} has no images/ directory", source.display())));
            }
            let boxes = parse_bboxes(&source.join("bboxes.csv"))?;
            for p in pngs_in(&images)? {
                let id = stem(&p);
                let gt_bbox = boxes.get(&id).copied();
                found.push(Found { id, image: p, gt_mask: None, gt_bbox });
            }
        }
    }
    Ok(found)
}

/// Scans `source`, checks every image (and mask) decodes, and returns a
/// manifest whose paths are relative to `root` where possible. All class
/// subfolders share one object word.
pub fn ingest(source: &Path, layout: Layout, cfg: &PipelineConfig, root: &Path) -> Result<Manifest> {
    let object = cfg
        .prompt
        .object
        .clone()
        .ok_or_else(|| Error::Config("ingest needs prompt.object (the object word for every image)".into()))?;
    let found = discover(source, layout)?;
    if found.is_empty() {
        return Err(Error::EmptyDataset(format!("no PNG images under {}", source.display())));
    }
    let mut broken = Vec::new();
    for f in &found {
        if let Err(e) = imageio::load_rgb_png(&f.image) {
            broken.push(format!("{}: {e}", f.image.display()));
        }
        if let Some(m) = &f.gt_mask {
            if let Err(e) = imageio::load_mask_png(m, crate::mask::ResolutionSpace::Pixel, crate::mask::Provenance::GroundTruth) {
                broken.push(format!("{}: {e}", m.display()));
            }
        }
    }
    if !broken.is_empty() {
        return Err(Error::Dependency(format!("unreadable files:\n  {}", broken.join("\n  "))));
    }
    let ids: Vec<String> = found.iter().map(|f| f.id.clone()).collect();
    let splits = assign_splits(&ids, cfg.general.test_fraction, cfg.general.seed);
    let mut records = Vec::with_capacity(found.len());
    for f in found {
        records.push(Record {
            image_sha256: file_sha256(&f.image)?,
            image: relativize(root, &f.image),
            gt_mask: f.gt_mask.as_deref().map(|m| relativize(root, m)),
            gt_bbox: f.gt_bbox,
            object: object.clone(),
            split: splits[&f.id],
            artifacts: BTreeMap::new(),
            flags: BTreeSet::new(),
            id: f.id,
        });
    }
    let m = Manifest::new(&cfg.general.dataset, records);
    m.check_ids()?;
    Ok(m)
}

/// Renders `toyset.count` shape images with exact masks under `<root>/toyset`.
pub fn make_toy_dataset(cfg: &PipelineConfig, root: &Path, pool: &rayon::ThreadPool) -> Result<Manifest> {
    use rayon::prelude::*;
    let t = &cfg.toyset;
    let ids: Vec<String> = (0..t.count).map(|i| format!("toy-{i:05}")).collect();
    let splits = assign_splits(&ids, cfg.general.test_fraction, cfg.general.seed);
    let records: Vec<Record> = pool.install(|| {
        (0..t.count)
            .into_par_iter()
            .map(|i| -> Result<Record> {
                let s = toyshapes::dataset_sample(&t.shapes, t.seed, i)?;
                let frac = s.mask.foreground_fraction() as f32;
                if !(t.shapes.min_fg_fraction..=t.shapes.max_fg_fraction).contains(&frac) {
                    return Err(Error::Range(format!("toy sample {i} covers {frac:.3} of the image")));
                }
                let id = ids[i].clone();
                let image = root.join("toyset/images").join(format!("{id}.png"));
                let mask = root.join("toyset/masks").join(format!("{id}.png"));
                write_atomic_with(&image, |p| imageio::save_rgb_png(p, &s.image))?;
                write_atomic_with(&mask, |p| imageio::save_mask_png(p, &s.mask))?;
                Ok(Record {
                    image_sha256: file_sha256(&image)?,
                    image: relativize(root, &image),
                    gt_mask: Some(relativize(root, &mask)),
                    gt_bbox: Some(s.bbox),
                    object: s.kind.word().to_string(),
                    split: splits[&id],
                    artifacts: BTreeMap::new(),
                    flags: BTreeSet::new(),
                    id,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(Manifest::new(&cfg.general.dataset, records))
}
