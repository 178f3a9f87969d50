//! Plain U-Net for binary foreground segmentation, trained with pixel-wise
//! binary cross-entropy on random crops.

use crate::error::{Error, Result};
use crate::imageio::Image;
use crate::mask::{BinaryMask, Provenance, ResolutionSpace};
use crate::nn::{
    max_pool2, max_pool2_backward, relu, relu_backward, upsample2, upsample2_backward, Adam, Conv2d, ConvCache, Feat,
    Module, Param,
};
use crate::rng;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 8] = b"FGBGSEG\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f32,
    pub train_crop: usize,
    pub eval_crop: usize,
    pub base_width: usize,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 8, learning_rate: 1e-3, train_crop: 48, eval_crop: 64, base_width: 8, seed: 4242 }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.base_width == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config("segmenter batch, width and learning rate must be positive".into()));
        }
        if self.train_crop % 8 != 0 || self.eval_crop % 8 != 0 || self.train_crop == 0 || self.eval_crop == 0 {
            return Err(Error::Config("crops must be positive multiples of 8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

struct DoubleCache {
    ca: ConvCache,
    pa: Feat,
    cb: ConvCache,
    pb: Feat,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, r: &mut impl Rng) -> Self {
        Self { a: Conv2d::new(cin, cout, 3, 1.4, r), b: Conv2d::new(cout, cout, 3, 1.4, r) }
    }

    fn forward(&self, x: &Feat) -> (Feat, DoubleCache) {
        let (pa, ca) = self.a.forward(x);
        let (pb, cb) = self.b.forward(&relu(&pa));
        (relu(&pb), DoubleCache { ca, pa, cb, pb })
    }

    fn backward(&mut self, c: &DoubleCache, dy: &Feat) -> Feat {
        let d = self.b.backward(&c.cb, &relu_backward(&c.pb, dy));
        self.a.backward(&c.ca, &relu_backward(&c.pa, &d))
    }
}

impl Module for DoubleConv {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.a.visit(f);
        self.b.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.a.visit_mut(f);
        self.b.visit_mut(f);
    }
}

/// Four resolution levels; the deepest one is the bottleneck.
#[derive(Debug, Clone)]
pub struct SegNet {
    base_width: usize,
    enc: Vec<DoubleConv>,
    up: Vec<Conv2d>,
    dec: Vec<DoubleConv>,
    head: Conv2d,
}

const LEVELS: usize = 4;

struct Cache {
    enc: Vec<DoubleCache>,
    skips: Vec<(usize, usize)>,
    pool_idx: Vec<Vec<usize>>,
    up: Vec<ConvCache>,
    dec: Vec<DoubleCache>,
    head: ConvCache,
}

impl SegNet {
    pub fn new(base_width: usize, seed: u64) -> Self {
        let mut r = rng::rng(seed);
        let widths: Vec<usize> = (0..LEVELS).map(|l| base_width << l).collect();
        let mut enc = Vec::new();
        let mut cin = 3;
        for &w in &widths {
            enc.push(DoubleConv::new(cin, w, &mut r));
            cin = w;
        }
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for l in (0..LEVELS - 1).rev() {
            up.push(Conv2d::new(widths[l + 1], widths[l], 3, 1.0, &mut r));
            dec.push(DoubleConv::new(2 * widths[l], widths[l], &mut r));
        }
        let head = Conv2d::new(base_width, 1, 1, 1.0, &mut r);
        Self { base_width, enc, up, dec, head }
    }

    pub fn base_width(&self) -> usize {
        self.base_width
    }

    fn forward(&self, x: &Feat) -> (Feat, Cache) {
        let mut enc_caches = Vec::new();
        let mut skips_out = Vec::new();
        let mut pool_idx = Vec::new();
        let mut skip_dims = Vec::new();
        let mut h = x.clone();
        for (l, block) in self.enc.iter().enumerate() {
            let (y, c) = block.forward(&h);
            enc_caches.push(c);
            if l + 1 < LEVELS {
                let (p, idx) = max_pool2(&y);
                pool_idx.push(idx);
                skip_dims.push((y.h, y.w));
                skips_out.push(y);
                h = p;
            } else {
                h = y;
            }
        }
        let mut up_caches = Vec::new();
        let mut dec_caches = Vec::new();
        for (i, (up, dec)) in self.up.iter().zip(&self.dec).enumerate() {
            let skip = &skips_out[LEVELS - 2 - i];
            let (u, uc) = up.forward(&upsample2(&h));
            let (d, dc) = dec.forward(&u.concat(skip));
            up_caches.push(uc);
            dec_caches.push(dc);
            h = d;
        }
        let (logits, head) = self.head.forward(&h);
        (logits, Cache { enc: enc_caches, skips: skip_dims, pool_idx, up: up_caches, dec: dec_caches, head })
    }

    fn backward(&mut self, cache: &Cache, dlogits: &Feat) {
        let mut dh = self.head.backward(&cache.head, dlogits);
        let mut dskips: Vec<Option<Feat>> = (0..LEVELS - 1).map(|_| None).collect();
        for i in (0..LEVELS - 1).rev() {
            let dcat = self.dec[i].backward(&cache.dec[i], &dh);
            let level = LEVELS - 2 - i;
            let (du, dskip) = dcat.split(self.base_width << level);
            dskips[level] = Some(dskip);
            dh = upsample2_backward(&self.up[i].backward(&cache.up[i], &du));
        }
        for l in (0..LEVELS).rev() {
            let mut dy = dh;
            if l + 1 < LEVELS {
                // `dy` is the gradient at the pooled output of this level.
                let (sh, sw) = cache.skips[l];
                let mut d = max_pool2_backward(&dy, &cache.pool_idx[l], sh, sw);
                d.add_assign(dskips[l].as_ref().expect("decoder filled every skip"));
                dy = d;
            }
            dh = self.enc[l].backward(&cache.enc[l], &dy);
        }
    }

    /// Foreground probabilities for an image whose sides are multiples of 8.
    pub fn probabilities(&self, image: &Image) -> Result<Array2<f32>> {
        let (c, h, w) = image.dim();
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("segmenter input {:?}", image.dim())));
        }
        let x = Feat::from_vec(3, h, w, image.iter().copied().collect());
        let (logits, _) = self.forward(&x);
        Ok(Array2::from_shape_vec((h, w), logits.data.iter().map(|&z| sigmoid(z)).collect()).expect("shape"))
    }

    pub fn save(&self, path: &Path, cfg: &SegTrainConfig) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = serde_json::to_vec(cfg)?;
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let params = self.flat_values();
        out.write_all(&(params.len() as u64).to_le_bytes())?;
        for p in params {
            out.write_all(&p.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, SegTrainConfig)> {
        let bytes = std::fs::read(path)?;
        let bad = |r: &str| Error::format(path, r);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a segmenter blob"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hl = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        if bytes.len() < 16 + hl + 8 {
            return Err(bad("truncated header"));
        }
        let cfg: SegTrainConfig = serde_json::from_slice(&bytes[16..16 + hl])?;
        let n = u64::from_le_bytes(bytes[16 + hl..24 + hl].try_into().expect("8 bytes")) as usize;
        let body = &bytes[24 + hl..];
        if body.len() != 4 * n {
            return Err(bad("parameter payload length mismatch"));
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let mut net = SegNet::new(cfg.base_width, cfg.seed);
        if !net.load_flat(&values) {
            return Err(bad("parameter count does not match architecture"));
        }
        Ok((net, cfg))
    }
}

impl Module for SegNet {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.enc.iter().for_each(|b| b.visit(f));
        self.up.iter().for_each(|b| b.visit(f));
        self.dec.iter().for_each(|b| b.visit(f));
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.enc.iter_mut().for_each(|b| b.visit_mut(f));
        self.up.iter_mut().for_each(|b| b.visit_mut(f));
        self.dec.iter_mut().for_each(|b| b.visit_mut(f));
        self.head.visit_mut(f);
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean binary cross-entropy of logits against 0/1 targets, and its gradient.
pub fn bce_with_logits(logits: &[f32], targets: &[f32]) -> (f32, Vec<f32>) {
    let n = logits.len() as f32;
    let mut loss = 0.0f32;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            // softplus(z) − y·z, computed stably.
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            (sigmoid(z) - y) / n
        })
        .collect();
    (loss / n, grad)
}

#[derive(Debug, Clone)]
pub struct SegExample {
    pub image: Image,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Default)]
pub struct SegTrainReport {
    pub losses: Vec<f32>,
    /// Records dropped for image/mask size mismatch or being smaller than the crop.
    pub skipped: usize,
}

fn crop(image: &Image, mask: &BinaryMask, top: usize, left: usize, size: usize) -> (Feat, Vec<f32>) {
    let img = image.slice(s![.., top..top + size, left..left + size]);
    let m = mask.values.slice(s![top..top + size, left..left + size]);
    (
        Feat::from_vec(3, size, size, img.iter().copied().collect()),
        m.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    )
}

/// Trains from the seed-determined initialization; examples are drawn
/// uniformly from `data` with seed-derived crops.
pub fn train_segmenter(data: &[SegExample], cfg: &SegTrainConfig, mut on_step: impl FnMut(usize, f32)) -> Result<(SegNet, SegTrainReport)> {
    cfg.validate()?;
    let mut report = SegTrainReport::default();
    let usable: Vec<&SegExample> = data
        .iter()
        .filter(|e| {
            let (_, h, w) = e.image.dim();
            let ok = e.mask.dims() == (h, w) && h >= cfg.train_crop && w >= cfg.train_crop;
            if !ok {
                report.skipped += 1;
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyDataset("segmenter training set".into()));
    }
    let mut net = SegNet::new(cfg.base_width, cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate);
    for step in 0..cfg.steps {
        let mut r = rng::rng(rng::derive_seed(cfg.seed, &[rng::tag("segtrain"), step as u64]));
        net.zero_grad();
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let ex = usable[r.random_range(0..usable.len())];
            let (_, h, w) = ex.image.dim();
            let top = r.random_range(0..=h - cfg.train_crop);
            let left = r.random_range(0..=w - cfg.train_crop);
            let (x, y) = crop(&ex.image, &ex.mask, top, left, cfg.train_crop);
            let (logits, cache) = net.forward(&x);
            let (loss, grad) = bce_with_logits(&logits.data, &y);
            total += loss;
            net.backward(&cache, &Feat::from_vec(1, logits.h, logits.w, grad));
        }
        net.scale_grads(1.0 / cfg.batch as f32);
        opt.step(&mut net);
        let mean = total / cfg.batch as f32;
        on_step(step, mean);
        report.losses.push(mean);
    }
    Ok((net, report))
}

/// Top-left corner of the centered `size × size` window.
pub fn center_offset(h: usize, w: usize, size: usize) -> Result<(usize, usize)> {
    if size > h || size > w {
        return Err(Error::Shape(format!("crop {size} larger than {h}×{w}")));
    }
    Ok(((h - size) / 2, (w - size) / 2))
}

pub fn center_crop_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let (h, w) = mask.dims();
    let (t, l) = center_offset(h, w, size)?;
    Ok(BinaryMask::new(mask.values.slice(s![t..t + size, l..l + size]).to_owned(), mask.space, mask.provenance))
}

/// Center crop, probabilities, strict `> 0.5`.
pub fn predict(net: &SegNet, image: &Image, eval_crop: usize) -> Result<BinaryMask> {
    let (_, h, w) = image.dim();
    let (t, l) = center_offset(h, w, eval_crop)?;
    let crop = image.slice(s![.., t..t + eval_crop, l..l + eval_crop]).to_owned();
    let p = net.probabilities(&crop)?;
    Ok(BinaryMask::new(p.mapv(|v| v > 0.5), ResolutionSpace::Pixel, Provenance::Predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{assert_close, numeric};

    fn bce_f64(logits: &[f32], targets: &[f32]) -> f64 {
        let n = logits.len() as f64;
        logits
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let (z, y) = (z as f64, y as f64);
                z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
            })
            .sum::<f64>()
            / n
    }

    #[test]
    fn bce_matches_definition() {
        let (l, g) = bce_with_logits(&[0.0, 2.0], &[1.0, 0.0]);
        let expect = (-(0.5f32).ln() - (1.0 - sigmoid(2.0)).ln()) / 2.0;
        assert!((l - expect).abs() < 1e-6);
        assert!((g[0] - (-0.25)).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Zero-initialized biases would park many activations exactly on a
        // ReLU kink, so jitter every parameter first.
        let mut net = SegNet::new(2, 3);
        let mut r = rng::rng(9);
        net.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.05 * (r.random::<f32>() - 0.5)));
        let x = Feat::from_vec(3, 8, 8, (0..192).map(|_| r.random::<f32>()).collect());
        let y: Vec<f32> = (0..64).map(|i| ((i / 3) % 2) as f32).collect();
        net.zero_grad();
        let (logits, cache) = net.forward(&x);
        let (_, g) = bce_with_logits(&logits.data, &y);
        net.backward(&cache, &Feat::from_vec(1, 8, 8, g));
        let mut grads = Vec::new();
        net.visit(&mut |p| grads.extend_from_slice(&p.grad));
        let flat = net.flat_values();
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
        for &i in order.iter().take(20) {
            let num = numeric(
                |v| {
                    let mut n = net.clone();
                    n.load_flat(v);
                    let (lg, _) = n.forward(&x);
                    bce_f64(&lg.data, &y)
                },
                &flat,
                i,
                1e-4,
            );
            assert_close(grads[i] as f64, num, &format!("param {i}"));
        }
    }

    #[test]
    fn half_probability_is_background() {
        let net = SegNet::new(2, 1);
        let mut zeroed = net.clone();
        zeroed.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = 0.0));
        let m = predict(&zeroed, &Image::from_elem((3, 16, 16), 0.3), 16).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.dims(), (16, 16));
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SegTrainConfig { base_width: 2, seed: 5, ..SegTrainConfig::default() };
        let net = SegNet::new(2, 5);
        let p = dir.path().join("seg.bin");
        net.save(&p, &cfg).unwrap();
        let (back, c2) = SegNet::load(&p).unwrap();
        assert_eq!(back.flat_values(), net.flat_values());
        assert_eq!(c2, cfg);
    }
}
