//! Stage runner: dependency checks, content-hash caching and artifact layout.
//!
//! Every stage reads and writes files reachable from the manifest. A stage is
//! skipped when its cache key (config section, seed, upstream keys and the
//! record inputs) matches the one stored in the manifest header and all
//! referenced files still exist.

use super::config::{BackendKind, LabelSource, PipelineConfig};
use super::eval;
use super::ingest::{self, Layout};
use super::manifest::{file_sha256, relativize, resolve, sha256_hex, write_atomic, write_atomic_with, Manifest, Record, Split};
use crate::backend::{
    pretrain, CheckpointAdapter, CheckpointDescriptor, DiffusionBackend, PretrainConfig, PromptSpec, ToyBackend,
};
use crate::distill::{self, FinetuneRecord};
use crate::error::{Error, Result};
use crate::imageio::{self, Image};
use crate::mask::{BinaryMask, Provenance, ResolutionSpace};
use crate::maskgen;
use crate::refine::{self, RefineFlag};
use crate::rng;
use crate::segnet::{self, SegExample};
use rayon::prelude::*;
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Prelim,
    Finetune,
    Refine,
    Synth,
    Segtrain,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Prelim, Stage::Finetune, Stage::Refine, Stage::Synth, Stage::Segtrain, Stage::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prelim => "prelim",
            Stage::Finetune => "finetune",
            Stage::Refine => "refine",
            Stage::Synth => "synth",
            Stage::Segtrain => "segtrain",
            Stage::Eval => "eval",
        }
    }

    /// Everything whose artifacts may be derived from this stage's output.
    fn static_deps(self) -> &'static [Stage] {
        match self {
            Stage::Prelim => &[],
            Stage::Finetune => &[Stage::Prelim],
            Stage::Refine | Stage::Synth => &[Stage::Finetune],
            Stage::Segtrain => &[Stage::Prelim, Stage::Refine, Stage::Synth],
            Stage::Eval => &[Stage::Prelim, Stage::Refine, Stage::Segtrain],
        }
    }

    fn depends_on(self, other: Stage) -> bool {
        self.static_deps().iter().any(|&d| d == other || d.depends_on(other))
    }

    fn owns_artifact(self, key: &str) -> bool {
        match self {
            Stage::Prelim => key == "prelim" || key == "importance",
            Stage::Refine => key == "refined" || key == "cropflip" || key == "inpainted",
            Stage::Segtrain => key.starts_with("unet-"),
            _ => false,
        }
    }

    fn owns_file(self, key: &str) -> bool {
        match self {
            Stage::Prelim => key == "foundation",
            Stage::Finetune => key == "finetuned" || key == "finetune_log",
            Stage::Synth => key == "synthetic_manifest",
            Stage::Segtrain => key.starts_with("segnet-") || key.starts_with("segtrain_log-"),
            Stage::Eval => key == "eval_report" || key == "eval_json",
            Stage::Refine => false,
        }
    }

    fn owns_flag(self, flag: &str) -> bool {
        let prefix = match self {
            Stage::Refine => return flag.starts_with("refine:") || flag.starts_with("cropflip:"),
            s => s.name(),
        };
        flag.strip_prefix(prefix).is_some_and(|rest| rest.starts_with(':'))
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    /// True when the cache key matched and nothing was recomputed.
    pub cached: bool,
    /// Records carrying at least one flag after the stage.
    pub flagged: usize,
}

/// Per-record result of a parallel stage body.
struct RecordUpdate {
    artifacts: Vec<(String, String)>,
    flags: Vec<String>,
}

impl RecordUpdate {
    fn flag(f: &str) -> Self {
        Self { artifacts: Vec::new(), flags: vec![f.to_string()] }
    }
}

/// Errors that concern one record (bad content, degenerate statistics)
/// rather than the run as a whole.
fn is_record_level(e: &Error) -> bool {
    !matches!(e, Error::Io(_) | Error::BackendNotReady(_) | Error::Config(_) | Error::Dependency(_) | Error::Contract(_))
}

/// File-name-safe form of a record id.
pub fn file_key(id: &str) -> String {
    id.replace(['/', '\\'], "__")
}

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    manifest_path: PathBuf,
    force: bool,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// `manifest` defaults to `<general.output>/manifest.ndjson`; artifacts
    /// live next to the manifest.
    pub fn new(cfg: PipelineConfig, manifest: Option<PathBuf>, force: bool) -> Result<Self> {
        cfg.validate()?;
        let manifest_path = manifest.unwrap_or_else(|| cfg.general.output.join("manifest.ndjson"));
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        let root = if root.as_os_str().is_empty() { PathBuf::from(".") } else { root };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.general.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        Ok(Self { cfg, root, manifest_path, force, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> &Path {
        &self.manifest_path
    }

    pub fn load_manifest(&self) -> Result<Manifest> {
        if !self.manifest_path.is_file() {
            return Err(Error::Dependency(format!(
                "no manifest at {}; run `distill ingest` or `distill toyset` first",
                self.manifest_path.display()
            )));
        }
        Manifest::load(&self.manifest_path)
    }

    fn path(&self, stored: &str) -> PathBuf {
        resolve(&self.root, stored)
    }

    fn rel(&self, p: &Path) -> String {
        relativize(&self.root, p)
    }

    fn seed(&self, parts: &[u64]) -> u64 {
        rng::derive_seed(self.cfg.general.seed, parts)
    }

    fn record_seed(&self, stage: &str, id: &str) -> u64 {
        self.seed(&[rng::tag(stage), rng::tag(id)])
    }

    fn object<'a>(&'a self, r: &'a Record) -> &'a str {
        self.cfg.prompt.object.as_deref().unwrap_or(&r.object)
    }

    pub fn ingest(&self, source: &Path, layout: Layout) -> Result<Manifest> {
        let m = ingest::ingest(source, layout, &self.cfg, &self.root)?;
        m.save(&self.manifest_path)?;
        Ok(m)
    }

    /// Writes the procedural toy set and a fresh manifest for it.
    pub fn toyset(&self) -> Result<Manifest> {
        let m = ingest::make_toy_dataset(&self.cfg, &self.root, &self.pool)?;
        m.save(&self.manifest_path)?;
        Ok(m)
    }

    fn required_deps(&self, stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Segtrain => {
                let mut d = vec![Stage::Prelim];
                let v = &self.cfg.segtrain.variants;
                if v.iter().any(|s| matches!(s, LabelSource::Refined | LabelSource::Augmented)) {
                    d.push(Stage::Refine);
                }
                if v.contains(&LabelSource::Augmented) {
                    d.push(Stage::Synth);
                }
                d
            }
            Stage::Eval => vec![Stage::Prelim],
            s => s.static_deps().to_vec(),
        }
    }

    fn stage_config(&self, stage: Stage) -> serde_json::Value {
        let c = &self.cfg;
        match stage {
            Stage::Prelim => json!({ "backend": c.backend, "prompt": c.prompt, "prelim": c.prelim }),
            Stage::Finetune => json!({ "finetune": c.finetune }),
            Stage::Refine => json!({ "refine": c.refine }),
            Stage::Synth => json!({ "synth": c.synth, "prelim": c.prelim, "refine": c.refine }),
            Stage::Segtrain => json!({ "segtrain": c.segtrain }),
            Stage::Eval => json!({ "eval": c.eval }),
        }
    }

    fn input_digest(m: &Manifest) -> Result<String> {
        let inputs: Vec<_> = m
            .records
            .iter()
            .map(|r| json!([r.id, r.image_sha256, r.object, r.split, r.gt_mask, r.gt_bbox]))
            .collect();
        Ok(sha256_hex(&serde_json::to_vec(&inputs)?))
    }

    pub fn stage_key(&self, m: &Manifest, stage: Stage) -> Result<String> {
        let upstream: BTreeMap<&str, &String> = stage
            .static_deps()
            .iter()
            .filter_map(|d| m.header.stages.get(d.name()).map(|k| (d.name(), k)))
            .collect();
        let doc = json!({
            "stage": stage.name(),
            "seed": self.cfg.general.seed,
            "config": self.stage_config(stage),
            "upstream": upstream,
            "inputs": Self::input_digest(m)?,
        });
        Ok(sha256_hex(&serde_json::to_vec(&doc)?))
    }

    fn clear(m: &mut Manifest, stage: Stage) {
        let hit = |s: Stage| s == stage || s.depends_on(stage);
        for s in Stage::ALL.into_iter().filter(|&s| hit(s)) {
            m.header.stages.remove(s.name());
            m.header.files.retain(|k, _| !s.owns_file(k));
            let note_prefix = format!("{}.", s.name());
            m.header.notes.retain(|k, _| !k.starts_with(&note_prefix));
            for r in &mut m.records {
                r.artifacts.retain(|k, _| !s.owns_artifact(k));
                r.flags.retain(|f| !s.owns_flag(f));
            }
        }
    }

    pub fn run(&self, stage: Stage) -> Result<StageReport> {
        let mut m = self.load_manifest()?;
        for d in self.required_deps(stage) {
            if !m.header.stages.contains_key(d.name()) {
                return Err(Error::Dependency(format!(
                    "{} needs {} to have run; run `distill {}` first",
                    stage.name(),
                    d.name(),
                    d.name()
                )));
            }
        }
        let key = self.stage_key(&m, stage)?;
        if !self.force && m.header.stages.get(stage.name()) == Some(&key) && m.validate(&self.root).is_ok() {
            log::info!("{}: inputs unchanged, nothing to do", stage.name());
            return Ok(StageReport { stage, cached: true, flagged: m.flagged() });
        }
        Self::clear(&mut m, stage);
        log::info!("{}: running over {} records", stage.name(), m.records.len());
        match stage {
            Stage::Prelim => self.prelim(&mut m)?,
            Stage::Finetune => self.finetune(&mut m)?,
            Stage::Refine => self.refine(&mut m)?,
            Stage::Synth => self.synth(&mut m)?,
            Stage::Segtrain => self.segtrain(&mut m)?,
            Stage::Eval => self.eval(&mut m)?,
        }
        m.header.stages.insert(stage.name().to_string(), key);
        m.save(&self.manifest_path)?;
        Ok(StageReport { stage, cached: false, flagged: m.flagged() })
    }

    /// Toy set (when no manifest exists yet) followed by every stage in order.
    pub fn run_all(&self) -> Result<Vec<StageReport>> {
        if !self.manifest_path.is_file() {
            self.toyset()?;
        }
        Stage::ALL.into_iter().map(|s| self.run(s)).collect()
    }

    fn apply(m: &mut Manifest, updates: Vec<(usize, RecordUpdate)>) {
        for (i, u) in updates {
            let r = &mut m.records[i];
            r.artifacts.extend(u.artifacts);
            r.flags.extend(u.flags);
        }
    }

    // ---- backends ----

    fn foundation(&self, m: &mut Manifest) -> Result<ToyBackend> {
        let b = &self.cfg.backend;
        let pre = PretrainConfig { seed: self.seed(&[rng::tag("pretrain"), b.pretrain.seed]), ..b.pretrain.clone() };
        let key = sha256_hex(&serde_json::to_vec(&json!({ "toy": b.toy, "pretrain": pre }))?);
        let path = self.root.join("models").join(format!("foundation-{}.bin", &key[..16]));
        let model = if path.is_file() {
            ToyBackend::load(&path)?
        } else {
            log::info!("pretraining the toy foundation model ({} steps)", pre.steps);
            let mut model = ToyBackend::new(b.toy.clone())?;
            pretrain(&mut model, &pre, |step, loss| {
                if step % 500 == 0 {
                    log::debug!("pretrain step {step} loss {loss:.4}");
                }
            })?;
            write_atomic_with(&path, |p| model.save(p))?;
            model
        };
        m.header.files.insert("foundation".into(), self.rel(&path));
        Ok(model)
    }

    fn inference_backend(&self, m: &mut Manifest) -> Result<Box<dyn DiffusionBackend>> {
        match self.cfg.backend.kind {
            BackendKind::Toy => Ok(Box::new(self.foundation(m)?)),
            BackendKind::Checkpoint => {
                let path = self.cfg.backend.descriptor.as_ref().expect("validated");
                Ok(Box::new(CheckpointAdapter::new(CheckpointDescriptor::load(path)?)?))
            }
        }
    }

    fn finetuned(&self, m: &Manifest) -> Result<ToyBackend> {
        let p = m
            .header
            .files
            .get("finetuned")
            .ok_or_else(|| Error::Dependency("no fine-tuned model in the manifest".into()))?;
        ToyBackend::load(&self.path(p))
    }

    fn load_image_checked(&self, r: &Record, shape: (usize, usize)) -> Result<std::result::Result<Image, RecordUpdate>> {
        let image = match imageio::load_rgb_png(&self.path(&r.image)) {
            Ok(i) => i,
            Err(Error::Io(e)) => return Err(Error::Io(e)),
            Err(e) => {
                log::warn!("{}: {e}", r.id);
                return Ok(Err(RecordUpdate::flag("prelim:unreadable")));
            }
        };
        let (_, h, w) = image.dim();
        if (h, w) != shape {
            return Ok(Err(RecordUpdate::flag("prelim:resolution_mismatch")));
        }
        Ok(Ok(image))
    }

    fn prelim_mask(&self, r: &Record) -> Result<Option<BinaryMask>> {
        r.artifacts
            .get("prelim")
            .map(|p| imageio::load_mask_png(&self.path(p), ResolutionSpace::Latent, Provenance::Preliminary))
            .transpose()
    }

    // ---- stages ----

    fn prelim(&self, m: &mut Manifest) -> Result<()> {
        let backend = self.inference_backend(m)?;
        let backend: &dyn DiffusionBackend = backend.as_ref();
        let shape = backend.descriptor().image_shape;
        let updates: Vec<(usize, RecordUpdate)> = self.pool.install(|| {
            m.records
                .par_iter()
                .enumerate()
                .map(|(i, r)| -> Result<(usize, RecordUpdate)> {
                    let image = match self.load_image_checked(r, shape)? {
                        Ok(img) => img,
                        Err(flagged) => return Ok((i, flagged)),
                    };
                    let run = || -> Result<RecordUpdate> {
                        let prompt = PromptSpec::foreground(backend, self.object(r))?;
                        let out = maskgen::preliminary_mask(backend, &image, &prompt, &self.cfg.prelim, self.record_seed("prelim", &r.id))?;
                        let fk = file_key(&r.id);
                        let mask_path = self.root.join("prelim").join(format!("{fk}.png"));
                        let map_path = self.root.join("importance").join(format!("{fk}.pfm"));
                        write_atomic_with(&mask_path, |p| imageio::save_mask_png(p, &out.mask))?;
                        write_atomic_with(&map_path, |p| imageio::save_pfm(p, &out.importance.scores))?;
                        let mut u = RecordUpdate {
                            artifacts: vec![("prelim".into(), self.rel(&mask_path)), ("importance".into(), self.rel(&map_path))],
                            flags: Vec::new(),
                        };
                        if out.degenerate {
                            u.flags.push("prelim:degenerate".into());
                        }
                        Ok(u)
                    };
                    match run() {
                        Ok(u) => Ok((i, u)),
                        Err(e) if is_record_level(&e) => {
                            log::warn!("{}: {e}", r.id);
                            Ok((i, RecordUpdate::flag("prelim:error")))
                        }
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Self::apply(m, updates);
        let degenerate = m.records.iter().filter(|r| r.flags.contains("prelim:degenerate")).count();
        m.header.notes.insert("prelim.degenerate".into(), degenerate.to_string());
        Ok(())
    }

    fn finetune(&self, m: &mut Manifest) -> Result<()> {
        if self.cfg.backend.kind != BackendKind::Toy {
            return Err(Error::BackendNotReady(
                "fine-tuning needs a trainable backend; checkpoint adapters are inference-only".into(),
            ));
        }
        let mut model = self.foundation(m)?;
        let records: Vec<FinetuneRecord> = self.pool.install(|| {
            m.records
                .par_iter()
                .filter(|r| r.artifacts.contains_key("prelim"))
                .map(|r| -> Result<FinetuneRecord> {
                    let image = imageio::load_rgb_png(&self.path(&r.image))?;
                    let (_, h, w) = image.dim();
                    let pre = self.prelim_mask(r)?.expect("filtered on prelim");
                    let prelim_up = (!pre.is_empty()).then(|| maskgen::upsample_mask(&pre, (h, w)));
                    Ok(FinetuneRecord { image, object: self.object(r).to_string(), prelim_up })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut cfg = self.cfg.finetune.clone();
        cfg.seed = self.seed(&[rng::tag("finetune"), cfg.seed]);
        let mut log_text = String::new();
        let report = distill::finetune(&mut model, &records, &cfg, |rec| {
            log_text.push_str(&serde_json::to_string(rec).expect("log record serializes"));
            log_text.push('\n');
        })?;
        let model_path = self.root.join("models/finetuned.bin");
        let log_path = self.root.join("logs/finetune.ndjson");
        write_atomic_with(&model_path, |p| model.save(p))?;
        write_atomic(&log_path, log_text.as_bytes())?;
        m.header.files.insert("finetuned".into(), self.rel(&model_path));
        m.header.files.insert("finetune_log".into(), self.rel(&log_path));
        m.header.notes.insert("finetune.records".into(), records.len().to_string());
        m.header.notes.insert(
            "finetune.background_pool".into(),
            records.iter().filter(|r| r.prelim_up.is_some()).count().to_string(),
        );
        m.header.notes.insert("finetune.skipped_no_rect".into(), report.skipped_no_rect.to_string());
        Ok(())
    }

    fn refine(&self, m: &mut Manifest) -> Result<()> {
        let model = self.finetuned(m)?;
        let background = PromptSpec::background(&model)?;
        let cfg = self.cfg.refine;
        let updates: Vec<(usize, RecordUpdate)> = self.pool.install(|| {
            m.records
                .par_iter()
                .enumerate()
                .filter(|(_, r)| r.artifacts.contains_key("prelim"))
                .map(|(i, r)| -> Result<(usize, RecordUpdate)> {
                    let image = imageio::load_rgb_png(&self.path(&r.image))?;
                    let pre = self.prelim_mask(r)?.expect("filtered on prelim");
                    let fk = file_key(&r.id);
                    let mut u = RecordUpdate { artifacts: Vec::new(), flags: Vec::new() };
                    match refine::refined_mask(&model, &image, &pre, &background, self.record_seed("refine", &r.id), &cfg) {
                        Ok(out) => {
                            let mp = self.root.join("refined").join(format!("{fk}.png"));
                            let ip = self.root.join("inpainted").join(format!("{fk}.png"));
                            write_atomic_with(&mp, |p| imageio::save_mask_png(p, &out.mask))?;
                            write_atomic_with(&ip, |p| imageio::save_rgb_png(p, &out.inpainted))?;
                            u.artifacts.push(("refined".into(), self.rel(&mp)));
                            u.artifacts.push(("inpainted".into(), self.rel(&ip)));
                            for f in out.flags {
                                match f {
                                    RefineFlag::EmptyPreliminary => u.flags.push("refine:empty_preliminary".into()),
                                    RefineFlag::EmptyRefinement => u.flags.push("refine:empty_refinement".into()),
                                    RefineFlag::Tiled => {}
                                }
                            }
                        }
                        Err(e) if is_record_level(&e) => {
                            log::warn!("{}: refinement failed: {e}", r.id);
                            u.flags.push("refine:error".into());
                        }
                        Err(e) => return Err(e),
                    }
                    match refine::crop_flip_mask(&image, &pre, &cfg) {
                        Ok(out) => {
                            let cp = self.root.join("cropflip").join(format!("{fk}.png"));
                            write_atomic_with(&cp, |p| imageio::save_mask_png(p, &out.mask))?;
                            u.artifacts.push(("cropflip".into(), self.rel(&cp)));
                        }
                        Err(e) if is_record_level(&e) => {
                            log::warn!("{}: crop-flip ablation failed: {e}", r.id);
                            u.flags.push("cropflip:error".into());
                        }
                        Err(e) => return Err(e),
                    }
                    Ok((i, u))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Self::apply(m, updates);
        Ok(())
    }

    fn synth(&self, m: &mut Manifest) -> Result<()> {
        let model = self.finetuned(m)?;
        let words: Vec<String> =
            m.records.iter().map(|r| self.object(r).to_string()).collect::<BTreeSet<_>>().into_iter().collect();
        if words.is_empty() && self.cfg.synth.count > 0 {
            return Err(Error::EmptyDataset("no object words to synthesize".into()));
        }
        let dir = self.root.join("synthetic");
        let cfg = self.cfg.synth_config();
        let seed = self.seed(&[rng::tag("synth"), self.cfg.synth.seed]);
        let records: Vec<Record> = self.pool.install(|| {
            (0..self.cfg.synth.count)
                .into_par_iter()
                .map(|i| -> Result<Record> {
                    let word = &words[i % words.len()];
                    let s = distill::synthesize_one(&model, word, i, seed, &cfg)?;
                    let id = format!("syn-{i:05}");
                    let paths: Vec<PathBuf> =
                        ["images", "masks", "foreground", "background"].iter().map(|d| dir.join(d).join(format!("{id}.png"))).collect();
                    write_atomic_with(&paths[0], |p| imageio::save_rgb_png(p, &s.image))?;
                    write_atomic_with(&paths[1], |p| imageio::save_mask_png(p, &s.mask))?;
                    write_atomic_with(&paths[2], |p| imageio::save_rgb_png(p, &s.foreground))?;
                    write_atomic_with(&paths[3], |p| imageio::save_rgb_png(p, &s.background))?;
                    let mut flags = BTreeSet::new();
                    if s.degenerate {
                        flags.insert("synth:degenerate".to_string());
                    }
                    Ok(Record {
                        image_sha256: file_sha256(&paths[0])?,
                        image: relativize(&dir, &paths[0]),
                        gt_mask: None,
                        gt_bbox: None,
                        object: word.clone(),
                        split: Split::Synthetic,
                        artifacts: [("mask", &paths[1]), ("foreground", &paths[2]), ("background", &paths[3])]
                            .into_iter()
                            .map(|(k, p)| (k.to_string(), relativize(&dir, p)))
                            .collect(),
                        flags,
                        id,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let degenerate = records.iter().filter(|r| !r.flags.is_empty()).count();
        let mut sm = Manifest::new(&format!("{}-synthetic", m.header.dataset), records);
        sm.header.notes.insert(
            "contents".into(),
            "images sampled with the object prompt; masks from refinement; foreground composites; \
             background-prompt samples"
                .into(),
        );
        let sm_path = dir.join("manifest.ndjson");
        sm.save(&sm_path)?;
        m.header.files.insert("synthetic_manifest".into(), self.rel(&sm_path));
        m.header.notes.insert("synth.count".into(), self.cfg.synth.count.to_string());
        m.header.notes.insert("synth.degenerate".into(), degenerate.to_string());
        Ok(())
    }

    /// Loads the synthetic manifest and its directory, if the synth stage ran.
    pub fn synthetic(&self, m: &Manifest) -> Result<Option<(Manifest, PathBuf)>> {
        match m.header.files.get("synthetic_manifest") {
            Some(p) => {
                let path = self.path(p);
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
                Ok(Some((Manifest::load(&path)?, dir)))
            }
            None => Ok(None),
        }
    }

    fn training_set(&self, m: &Manifest, source: LabelSource) -> Result<Vec<SegExample>> {
        let label_key = if source == LabelSource::Prelim { "prelim" } else { "refined" };
        let mut data: Vec<SegExample> = m
            .records
            .par_iter()
            .filter(|r| r.split == Split::Train && r.artifacts.contains_key(label_key))
            .map(|r| -> Result<SegExample> {
                let image = imageio::load_rgb_png(&self.path(&r.image))?;
                let (_, h, w) = image.dim();
                let mask = if source == LabelSource::Prelim {
                    maskgen::upsample_mask(&self.prelim_mask(r)?.expect("filtered"), (h, w))
                } else {
                    imageio::load_mask_png(&self.path(&r.artifacts["refined"]), ResolutionSpace::Pixel, Provenance::Refined)?
                };
                Ok(SegExample { image, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        if source == LabelSource::Augmented {
            let (sm, dir) = self
                .synthetic(m)?
                .ok_or_else(|| Error::Dependency("augmented segmenter needs the synth stage".into()))?;
            let extra = sm
                .records
                .par_iter()
                .filter(|r| r.flags.is_empty())
                .map(|r| -> Result<SegExample> {
                    Ok(SegExample {
                        image: imageio::load_rgb_png(&resolve(&dir, &r.image))?,
                        mask: imageio::load_mask_png(&resolve(&dir, &r.artifacts["mask"]), ResolutionSpace::Pixel, Provenance::Refined)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            data.extend(extra);
        }
        Ok(data)
    }

    fn segtrain(&self, m: &mut Manifest) -> Result<()> {
        struct Trained {
            source: LabelSource,
            files: Vec<(String, String)>,
            notes: Vec<(String, String)>,
            updates: Vec<(usize, RecordUpdate)>,
        }
        let train_one = |source: LabelSource| -> Result<Trained> {
            let v = source.name();
            let data = self.training_set(m, source)?;
            let mut cfg = self.cfg.segtrain.train.clone();
            cfg.seed = self.seed(&[rng::tag("segtrain"), rng::tag(v), cfg.seed]);
            log::info!("segtrain {v}: {} examples", data.len());
            let mut log_text = String::new();
            let (net, report) = segnet::train_segmenter(&data, &cfg, |step, loss| {
                log_text.push_str(&serde_json::to_string(&json!({ "step": step, "loss": loss })).expect("json"));
                log_text.push('\n');
            })?;
            let model_path = self.root.join("models").join(format!("segnet-{v}.bin"));
            let log_path = self.root.join("logs").join(format!("segtrain-{v}.ndjson"));
            write_atomic_with(&model_path, |p| net.save(p, &cfg))?;
            write_atomic(&log_path, log_text.as_bytes())?;
            let updates = m
                .records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.split == Split::Test)
                .map(|(i, r)| -> Result<(usize, RecordUpdate)> {
                    let image = imageio::load_rgb_png(&self.path(&r.image))?;
                    match segnet::predict(&net, &image, cfg.eval_crop) {
                        Ok(mask) => {
                            let p = self.root.join("predicted").join(v).join(format!("{}.png", file_key(&r.id)));
                            write_atomic_with(&p, |tmp| imageio::save_mask_png(tmp, &mask))?;
                            Ok((i, RecordUpdate { artifacts: vec![(format!("unet-{v}"), self.rel(&p))], flags: Vec::new() }))
                        }
                        Err(e) if is_record_level(&e) => Ok((i, RecordUpdate::flag("segtrain:predict_failed"))),
                        Err(e) => Err(e),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Trained {
                source,
                files: vec![(format!("segnet-{v}"), self.rel(&model_path)), (format!("segtrain_log-{v}"), self.rel(&log_path))],
                notes: vec![
                    (format!("segtrain.{v}.examples"), data.len().to_string()),
                    (format!("segtrain.{v}.skipped"), report.skipped.to_string()),
                ],
                updates,
            })
        };
        let mut variants = self.cfg.segtrain.variants.clone();
        variants.sort();
        variants.dedup();
        let trained: Vec<Trained> =
            self.pool.install(|| variants.par_iter().map(|&s| train_one(s)).collect::<Result<Vec<_>>>())?;
        for t in trained {
            log::info!("segtrain {}: done", t.source.name());
            m.header.files.extend(t.files);
            m.header.notes.extend(t.notes);
            Self::apply(m, t.updates);
        }
        Ok(())
    }

    fn eval(&self, m: &mut Manifest) -> Result<()> {
        let synthetic = self.synthetic(m)?;
        let report = self.pool.install(|| eval::evaluate(m, &self.root, &self.cfg, synthetic.as_ref()))?;
        let txt = self.root.join("reports/eval.txt");
        let js = self.root.join("reports/eval.json");
        write_atomic(&txt, report.to_text().as_bytes())?;
        write_atomic(&js, serde_json::to_string_pretty(&report)?.as_bytes())?;
        m.header.files.insert("eval_report".into(), self.rel(&txt));
        m.header.files.insert("eval_json".into(), self.rel(&js));
        Ok(())
    }
}
