use distill_core::error::Error;
use distill_core::imageio;
use distill_core::mask::{BinaryMask, PatchRect, Provenance, ResolutionSpace};
use distill_core::maskgen;
use distill_core::refine::ChannelReduce;
use distill_core::pipeline::{Layout, Manifest, Pipeline, PipelineConfig, Split, Stage};
use distill_core::toyshapes::{self, ToyShapesConfig};
use std::path::Path;

const SMALL: &str = r#"
[backend.pretrain]
steps = 40
[finetune]
steps = 10
batch = 2
[synth]
count = 4
[segtrain.train]
steps = 4
batch = 2
[eval]
holdout = 4
[toyset]
count = 12
"#;

fn small(extra: &str) -> PipelineConfig {
    PipelineConfig::parse(&format!("{SMALL}\n{extra}")).unwrap()
}

fn pipeline(cfg: PipelineConfig, dir: &Path) -> Pipeline {
    Pipeline::new(cfg, Some(dir.join("manifest.ndjson")), false).unwrap()
}

fn with_object() -> PipelineConfig {
    small("[prompt]\nobject = \"circle\"")
}

fn write_shape(path: &Path, seed: u64) -> BinaryMask {
    let s = toyshapes::dataset_sample(&ToyShapesConfig::default(), seed, 0).unwrap();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    imageio::save_rgb_png(path, &s.image).unwrap();
    s.mask
}

#[test]
fn empty_directory_is_rejected() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = pipeline(with_object(), out.path()).ingest(src.path(), Layout::Flat).unwrap_err();
    assert!(matches!(err, Error::EmptyDataset(_)), "{err}");
    assert!(!out.path().join("manifest.ndjson").exists());
}

#[test]
fn flat_layout_has_no_ground_truth() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    for i in 0..10 {
        write_shape(&src.path().join(format!("img{i}.png")), i);
    }
    std::fs::write(src.path().join("notes.txt"), "not an image").unwrap();
    let m = pipeline(with_object(), out.path()).ingest(src.path(), Layout::Flat).unwrap();
    assert_eq!(m.records.len(), 10);
    assert!(m.records.iter().all(|r| r.gt_mask.is_none() && r.gt_bbox.is_none() && r.object == "circle"));
    assert_eq!(m.records.iter().filter(|r| r.split == Split::Test).count(), 2);
    assert_eq!(Manifest::load(&out.path().join("manifest.ndjson")).unwrap(), m);
}

#[test]
fn class_folders_pair_images_with_segmentations() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let a = write_shape(&src.path().join("images/001.Bird/a.png"), 1);
    write_shape(&src.path().join("images/001.Bird/b.png"), 2);
    write_shape(&src.path().join("images/002.Other/c.png"), 3);
    let seg = src.path().join("segmentations/001.Bird/a.png");
    std::fs::create_dir_all(seg.parent().unwrap()).unwrap();
    imageio::save_mask_png(&seg, &a).unwrap();
    let m = pipeline(with_object(), out.path()).ingest(src.path(), Layout::Cub).unwrap();
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["001.Bird/a", "001.Bird/b", "002.Other/c"]);
    let gt = m.records[0].gt_mask.as_deref().unwrap();
    let loaded = imageio::load_mask_png(&distill_core::pipeline::manifest::resolve(out.path(), gt), ResolutionSpace::Pixel, Provenance::GroundTruth).unwrap();
    assert_eq!(loaded.values, a.values);
    assert!(m.records[1].gt_mask.is_none() && m.records[2].gt_mask.is_none());
    m.validate(out.path()).unwrap();
}

#[test]
fn bbox_layout_reads_the_box_table() {
    let src = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    write_shape(&src.path().join("images/x.png"), 1);
    write_shape(&src.path().join("images/y.png"), 2);
    std::fs::write(src.path().join("bboxes.csv"), "image,top,left,height,width\nx.png,4,5,20,30\n").unwrap();
    let m = pipeline(with_object(), out.path()).ingest(src.path(), Layout::Bbox).unwrap();
    assert_eq!(m.records[0].gt_bbox, Some(PatchRect::new(4, 5, 20, 30)));
    assert_eq!(m.records[1].gt_bbox, None);
}

#[test]
fn stages_refuse_to_run_out_of_order() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline(small(""), out.path());
    assert!(matches!(p.run(Stage::Prelim), Err(Error::Dependency(_))));
    p.toyset().unwrap();
    for s in [Stage::Finetune, Stage::Refine, Stage::Synth, Stage::Segtrain, Stage::Eval] {
        assert!(matches!(p.run(s), Err(Error::Dependency(_))), "{s:?}");
    }
}

#[test]
fn toy_dataset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = pipeline(small(""), a.path()).toyset().unwrap();
    let mb = pipeline(small(""), b.path()).toyset().unwrap();
    assert_eq!(ma, mb);
    for r in &ma.records {
        assert_eq!(std::fs::read(a.path().join(&r.image)).unwrap(), std::fs::read(b.path().join(&r.image)).unwrap());
    }
    let other = tempfile::tempdir().unwrap();
    let mut cfg = small("");
    cfg.toyset.seed += 1;
    let mc = pipeline(cfg, other.path()).toyset().unwrap();
    assert!(ma.records.iter().zip(&mc.records).any(|(x, y)| x.image_sha256 != y.image_sha256));
}

#[test]
fn full_run_is_cached_and_consistent() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline(small(""), out.path());
    let first = p.run_all().unwrap();
    assert!(first.iter().all(|r| !r.cached));
    let digest = p.load_manifest().unwrap().digest().unwrap();
    let again = p.run_all().unwrap();
    assert!(again.iter().all(|r| r.cached));
    assert_eq!(p.load_manifest().unwrap().digest().unwrap(), digest);

    let m = p.load_manifest().unwrap();
    m.validate(out.path()).unwrap();
    for r in m.records.iter().filter(|r| r.artifacts.contains_key("refined")) {
        let pre = imageio::load_mask_png(&out.path().join(&r.artifacts["prelim"]), ResolutionSpace::Latent, Provenance::Preliminary).unwrap();
        let refined = imageio::load_mask_png(&out.path().join(&r.artifacts["refined"]), ResolutionSpace::Pixel, Provenance::Refined).unwrap();
        let up = maskgen::upsample_mask(&pre, refined.dims());
        assert!(refined.values.iter().zip(up.values.iter()).all(|(&a, &b)| !a || b), "{}", r.id);
    }
    let (sm, dir) = p.synthetic(&m).unwrap().unwrap();
    assert_eq!(sm.records.len(), 4);
    sm.validate(&dir).unwrap();
    for r in &sm.records {
        assert_eq!(r.split, Split::Synthetic);
        let img = imageio::load_rgb_png(&dir.join(&r.image)).unwrap();
        let mask = imageio::load_mask_png(&dir.join(&r.artifacts["mask"]), ResolutionSpace::Pixel, Provenance::Refined).unwrap();
        assert_eq!((img.dim().1, img.dim().2), mask.dims());
    }
    let report = std::fs::read_to_string(out.path().join(&m.header.files["eval_report"])).unwrap();
    assert!(report.contains("# aggregate"));

    let mut cfg = small("");
    cfg.refine.reduce = ChannelReduce::Max;
    let edited = pipeline(cfg, out.path());
    let reruns = edited.run_all().unwrap();
    let cached: Vec<bool> = reruns.iter().map(|r| r.cached).collect();
    assert_eq!(cached, [true, true, false, false, false, false]);
}

#[test]
fn zero_synthetic_count_gives_an_empty_manifest() {
    let out = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::parse(&SMALL.replace("count = 4", "count = 0")).unwrap();
    let p = pipeline(cfg, out.path());
    p.toyset().unwrap();
    for s in [Stage::Prelim, Stage::Finetune, Stage::Synth] {
        p.run(s).unwrap();
    }
    let (sm, _) = p.synthetic(&p.load_manifest().unwrap()).unwrap().unwrap();
    assert!(sm.records.is_empty());
}

#[test]
fn manifest_saves_leave_no_temporaries() {
    let out = tempfile::tempdir().unwrap();
    let p = pipeline(small(""), out.path());
    let m = p.toyset().unwrap();
    let path = out.path().join("manifest.ndjson");
    m.save(&path).unwrap();
    let names: Vec<String> = std::fs::read_dir(out.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.ends_with(".tmp")), "{names:?}");
    assert_eq!(Manifest::load(&path).unwrap(), m);
}
