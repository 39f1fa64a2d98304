//! Synthetic 2-D head phantoms with exact 9-class ground truth.
//!
//! Each sample is built from jittered nested ellipses, outermost first:
//! skin ring, bone ring, CSF, gray matter, white matter, one ventricle
//! inside the white matter, then two eyes and one cavity in the lower part
//! of the CSF region. Every class has a fixed mean intensity
//! ([`Tissue::mean_intensity`]); pixels receive that mean plus Gaussian
//! texture, clamped to [0, 1]. Sample `i` depends only on `(seed, i)`.
//!
//! | code | tissue     | mean |
//! |------|------------|------|
//! | 0    | background | 0.02 |
//! | 1    | WM         | 0.90 |
//! | 2    | GM         | 0.58 |
//! | 3    | CSF        | 0.22 |
//! | 4    | bones      | 0.34 |
//! | 5    | skin       | 0.78 |
//! | 6    | cavities   | 0.10 |
//! | 7    | eyes       | 0.68 |
//! | 8    | ventricles | 0.46 |
//!
//! Any two tissues that can touch differ in mean by at least 0.1.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Rng, Stream};
use crate::tensor::{Image, LabelMap};

pub const NUM_CLASSES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Tissue {
    Background = 0,
    WhiteMatter = 1,
    GrayMatter = 2,
    Csf = 3,
    Bone = 4,
    Skin = 5,
    Cavity = 6,
    Eye = 7,
    Ventricle = 8,
}

impl Tissue {
    pub const ALL: [Tissue; NUM_CLASSES] = [
        Tissue::Background,
        Tissue::WhiteMatter,
        Tissue::GrayMatter,
        Tissue::Csf,
        Tissue::Bone,
        Tissue::Skin,
        Tissue::Cavity,
        Tissue::Eye,
        Tissue::Ventricle,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Tissue> {
        Tissue::ALL.get(code as usize).copied()
    }

    /// Column name used in metric tables.
    pub fn column(self) -> &'static str {
        match self {
            Tissue::Background => "background",
            Tissue::WhiteMatter => "wm",
            Tissue::GrayMatter => "gm",
            Tissue::Csf => "csf",
            Tissue::Bone => "bones",
            Tissue::Skin => "skin",
            Tissue::Cavity => "cavities",
            Tissue::Eye => "eyes",
            Tissue::Ventricle => "ventricles",
        }
    }

    pub fn mean_intensity(self) -> f64 {
        match self {
            Tissue::Background => 0.02,
            Tissue::WhiteMatter => 0.90,
            Tissue::GrayMatter => 0.58,
            Tissue::Csf => 0.22,
            Tissue::Bone => 0.34,
            Tissue::Skin => 0.78,
            Tissue::Cavity => 0.10,
            Tissue::Eye => 0.68,
            Tissue::Ventricle => 0.46,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Height and width; a multiple of 4.
    pub size: usize,
    pub intensity_noise: f64,
    pub geometry_jitter: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            size: 64,
            intensity_noise: 0.03,
            geometry_jitter: 0.08,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "phantom size must be a positive multiple of 4, got {}",
                self.size
            )));
        }
        if !(self.intensity_noise >= 0.0 && self.geometry_jitter >= 0.0) {
            return Err(Error::Config(
                "phantom noise and jitter must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// One image with its label map (batch extent 1).
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        dx * dx + dy * dy <= 1.0
    }

    fn shrink(&self, by: f64) -> Ellipse {
        Ellipse {
            rx: self.rx - by,
            ry: self.ry - by,
            ..*self
        }
    }
}

/// Generates sample `index` of the phantom family `cfg`.
pub fn generate_one(cfg: &PhantomConfig, index: u64) -> Result<PhantomSample> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Phantom, index);
    let j = cfg.geometry_jitter;
    let s = cfg.size as f64;
    let mut jitter = |scale: f64| 1.0 + scale * j * (2.0 * rng.random::<f64>() - 1.0);

    // Geometry in units of the image size, origin at the image center.
    let global = jitter(1.0);
    let (ox, oy) = (0.25 * (jitter(1.0) - 1.0), 0.25 * (jitter(1.0) - 1.0));
    let min_ring = 1.5 / s;
    let skin = Ellipse {
        cx: ox,
        cy: oy,
        rx: 0.40 * global,
        ry: 0.435 * global,
    };
    let bone = skin.shrink((0.04 * jitter(1.0)).max(min_ring));
    let csf = bone.shrink((0.04 * jitter(1.0)).max(min_ring));
    let brain_cy = oy - 0.08 * global;
    let gm = Ellipse {
        cx: ox,
        cy: brain_cy,
        rx: 0.255 * global * jitter(0.5),
        ry: 0.23 * global * jitter(0.5),
    };
    let wm = Ellipse {
        cx: ox,
        cy: brain_cy,
        rx: 0.18 * global * jitter(0.5),
        ry: 0.165 * global * jitter(0.5),
    };
    let ventricle = Ellipse {
        cx: ox,
        cy: brain_cy,
        rx: (0.055 * global * jitter(1.0)).max(min_ring),
        ry: (0.085 * global * jitter(1.0)).max(min_ring),
    };
    let eye = |side: f64, jx: f64, jy: f64| Ellipse {
        cx: ox + side * 0.12 * global,
        cy: oy + 0.23 * global,
        rx: (0.05 * global * jx).max(min_ring),
        ry: (0.045 * global * jy).max(min_ring),
    };
    let eyes = [
        eye(-1.0, jitter(1.0), jitter(1.0)),
        eye(1.0, jitter(1.0), jitter(1.0)),
    ];
    let cavity = Ellipse {
        cx: ox,
        cy: oy + 0.255 * global,
        rx: (0.042 * global * jitter(1.0)).max(min_ring),
        ry: (0.038 * global * jitter(1.0)).max(min_ring),
    };

    let layers: [(&[Ellipse], Tissue); 9] = [
        (&[skin], Tissue::Skin),
        (&[bone], Tissue::Bone),
        (&[csf], Tissue::Csf),
        (&[gm], Tissue::GrayMatter),
        (&[wm], Tissue::WhiteMatter),
        (&[ventricle], Tissue::Ventricle),
        (&eyes, Tissue::Eye),
        (&[cavity], Tissue::Cavity),
        (&[], Tissue::Background),
    ];
    let n = cfg.size;
    let mut labels = vec![Tissue::Background.code(); n * n];
    for y in 0..n {
        let py = (y as f64 + 0.5) / s - 0.5;
        for x in 0..n {
            let px = (x as f64 + 0.5) / s - 0.5;
            for (shapes, tissue) in &layers {
                if shapes.iter().any(|e| e.contains(px, py)) {
                    labels[y * n + x] = tissue.code();
                }
            }
        }
    }

    let noise = Normal::new(0.0, cfg.intensity_noise).map_err(|e| Error::Config(e.to_string()))?;
    let image = labels
        .iter()
        .map(|&l| {
            let mean = Tissue::ALL[l as usize].mean_intensity();
            (mean + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(PhantomSample {
        image: Image::new(n, n, image)?,
        labels: LabelMap::new(1, n, n, labels)?,
    })
}

/// Samples `0..n` of the phantom family `cfg`.
pub fn generate(cfg: &PhantomConfig, n: usize) -> Result<Vec<PhantomSample>> {
    if n == 0 {
        return Err(Error::Config("phantom count must be at least 1".into()));
    }
    (0..n as u64).map(|i| generate_one(cfg, i)).collect()
}

/// Training samples whose labels may be read.
#[derive(Clone, Debug, Default)]
pub struct LabeledSet {
    pub samples: Vec<PhantomSample>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Training samples whose labels are sealed. Ground truth stays attached
/// for evaluation-only use; reading it while sealed fails and is counted.
#[derive(Debug, Default)]
pub struct UnlabeledSet {
    images: Vec<Image>,
    hidden: Vec<LabelMap>,
    sealed: bool,
    attempts: AtomicUsize,
}

impl UnlabeledSet {
    pub fn new(samples: Vec<PhantomSample>) -> Self {
        let (images, hidden) = samples.into_iter().map(|s| (s.image, s.labels)).unzip();
        UnlabeledSet {
            images,
            hidden,
            sealed: true,
            attempts: AtomicUsize::new(0),
        }
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Ground truth, available only after [`UnlabeledSet::unseal`].
    pub fn ground_truth(&self) -> Result<&[LabelMap]> {
        if self.sealed {
            self.attempts.fetch_add(1, Ordering::Relaxed);
            return Err(Error::ForbiddenAccess);
        }
        Ok(&self.hidden)
    }

    /// Opens the ground truth for evaluation once training is over.
    pub fn unseal(&mut self) {
        self.sealed = false;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Number of rejected ground-truth reads.
    pub fn forbidden_attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }
}

/// Deterministic shuffled split into labeled and unlabeled parts.
pub fn split(
    dataset: Vec<PhantomSample>,
    labeled_fraction: f64,
    seed: u64,
) -> Result<(LabeledSet, UnlabeledSet)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    let n = dataset.len();
    let n_labeled = ((labeled_fraction * n as f64).round() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let mut slots: Vec<Option<PhantomSample>> = dataset.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<PhantomSample> {
        idx.iter()
            .map(|&i| slots[i].take().expect("indices are a permutation"))
            .collect()
    };
    let labeled = take(&order[..n_labeled]);
    let unlabeled = take(&order[n_labeled..]);
    Ok((
        LabeledSet { samples: labeled },
        UnlabeledSet::new(unlabeled),
    ))
}

/// Flips `fraction` of all label pixels to a uniformly drawn different class.
pub fn corrupt_labels(samples: &mut [PhantomSample], fraction: f64, rng: &mut Rng) {
    for s in samples {
        for l in s.labels.data_mut() {
            if rng.random::<f64>() < fraction {
                let shift = rng.random_range(1..NUM_CLASSES as u8);
                *l = (*l + shift) % NUM_CLASSES as u8;
            }
        }
    }
}

const DATASET_MAGIC: [u8; 4] = *b"SSRL";
const DATASET_VERSION: u8 = 0x01;
pub const DATASET_HEADER_LEN: usize = 24;

/// Exact byte length of a dataset file.
pub fn dataset_file_len(n: usize, height: usize, width: usize) -> usize {
    DATASET_HEADER_LEN + n * (height * width * 4 + height * width)
}

/// Serializes samples: `SSRL`, version 0x01, three zero pad bytes, then
/// little-endian u32 n, H, W, K, then per sample H·W f32 intensities
/// followed by H·W u8 labels.
pub fn encode_dataset(samples: &[PhantomSample]) -> Result<Vec<u8>> {
    let first = samples.first().ok_or(Error::EmptyDataset)?;
    let (h, w) = (first.image.height, first.image.width);
    let mut out = Vec::with_capacity(dataset_file_len(samples.len(), h, w));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&[DATASET_VERSION, 0, 0, 0]);
    for v in [samples.len(), h, w, NUM_CLASSES] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in samples {
        if (s.image.height, s.image.width) != (h, w) || s.labels.len() != h * w {
            return Err(Error::SizeMismatch("samples differ in extents".into()));
        }
        for v in &s.image.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(s.labels.data());
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<PhantomSample>> {
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(Error::Truncated(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            expected: DATASET_MAGIC,
            found: magic,
        });
    }
    if bytes[4] != DATASET_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let field = |i: usize| {
        u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize
    };
    let (n, h, w, k) = (field(0), field(1), field(2), field(3));
    if k != NUM_CLASSES {
        return Err(Error::SizeMismatch(format!(
            "dataset declares {k} classes, expected {NUM_CLASSES}"
        )));
    }
    let expected = dataset_file_len(n, h, w);
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::SizeMismatch(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let hw = h * w;
    let mut samples = Vec::with_capacity(n);
    for rec in bytes[DATASET_HEADER_LEN..].chunks_exact(hw * 5) {
        let image = rec[..hw * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels = LabelMap::new(1, h, w, rec[hw * 4..].to_vec())?;
        labels.check_range(NUM_CLASSES)?;
        samples.push(PhantomSample {
            image: Image::new(h, w, image)?,
            labels,
        });
    }
    Ok(samples)
}

pub fn save_dataset(samples: &[PhantomSample], path: &Path) -> Result<()> {
    let bytes = encode_dataset(samples)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<PhantomSample>> {
    decode_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn cfg(seed: u64) -> PhantomConfig {
        PhantomConfig {
            seed,
            ..Default::default()
        }
    }

    /// 4-connected components of the pixels where `mask` holds.
    fn components(n: usize, mask: impl Fn(usize) -> bool) -> usize {
        let mut seen = vec![false; n * n];
        let mut count = 0;
        for start in 0..n * n {
            if seen[start] || !mask(start) {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(p) = queue.pop_front() {
                let (y, x) = (p / n, p % n);
                let mut nb = Vec::with_capacity(4);
                if y > 0 {
                    nb.push(p - n)
                }
                if y + 1 < n {
                    nb.push(p + n)
                }
                if x > 0 {
                    nb.push(p - 1)
                }
                if x + 1 < n {
                    nb.push(p + 1)
                }
                for q in nb {
                    if !seen[q] && mask(q) {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn generation_is_deterministic_and_order_free() {
        let c = cfg(42);
        let all = generate(&c, 5).unwrap();
        assert_eq!(all[3], generate_one(&c, 3).unwrap());
        assert_eq!(all, generate(&c, 5).unwrap());
        assert_ne!(all[0], all[1]);
        assert_ne!(all[0], generate_one(&cfg(43), 0).unwrap());
    }

    #[test]
    fn labels_in_range_and_corners_background() {
        for s in generate(&cfg(1), 20).unwrap() {
            assert!(s.labels.check_range(NUM_CLASSES).is_ok());
            let n = 64;
            for p in [0, n - 1, n * (n - 1), n * n - 1] {
                assert_eq!(s.labels.data()[p], 0);
            }
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn every_class_present_in_nearly_all_samples() {
        let samples = generate(&cfg(2024), 100).unwrap();
        for t in Tissue::ALL {
            let present = samples
                .iter()
                .filter(|s| s.labels.data().contains(&t.code()))
                .count();
            assert!(present >= 95, "{t:?} present in {present}/100");
        }
    }

    #[test]
    fn regions_are_connected_and_nested() {
        let n = 64;
        for (i, s) in (0..10)
            .flat_map(|seed| generate(&cfg(seed), 100).unwrap())
            .enumerate()
        {
            let l = s.labels.data();
            for t in Tissue::ALL {
                let comps = components(n, |p| l[p] == t.code());
                let want = if t == Tissue::Eye { 2 } else { 1 };
                assert_eq!(comps, want, "sample {i}: {t:?} has {comps} components");
            }
            // background reaches the border
            assert_eq!(l[0], Tissue::Background.code());
            for p in 0..n * n {
                let (y, x) = (p / n, p % n);
                let nbrs = [
                    (y > 0).then(|| p - n),
                    (y + 1 < n).then(|| p + n),
                    (x > 0).then(|| p - 1),
                    (x + 1 < n).then(|| p + 1),
                ];
                let allowed: &[Tissue] = match Tissue::from_code(l[p]).unwrap() {
                    Tissue::WhiteMatter => {
                        &[Tissue::WhiteMatter, Tissue::GrayMatter, Tissue::Ventricle]
                    }
                    Tissue::Ventricle => &[Tissue::Ventricle, Tissue::WhiteMatter],
                    _ => continue,
                };
                for q in nbrs.into_iter().flatten() {
                    assert!(
                        allowed.iter().any(|t| t.code() == l[q]),
                        "pixel {p}: neighbor class {}",
                        l[q]
                    );
                }
            }
        }
    }

    #[test]
    fn adjacent_tissues_differ_in_mean() {
        let mut touching = std::collections::BTreeSet::new();
        for s in generate(&cfg(5), 100).unwrap() {
            let l = s.labels.data();
            for p in 0..64 * 64 {
                for q in [p + 1, p + 64] {
                    if q < 64 * 64 && (q != p + 1 || q % 64 != 0) && l[p] != l[q] {
                        touching.insert((l[p].min(l[q]), l[p].max(l[q])));
                    }
                }
            }
        }
        for (a, b) in touching {
            let d = (Tissue::ALL[a as usize].mean_intensity()
                - Tissue::ALL[b as usize].mean_intensity())
            .abs();
            assert!(d >= 0.1 - 1e-12, "classes {a} and {b} differ by {d}");
        }
    }

    #[test]
    fn intensity_concentrates_around_class_mean() {
        let c = cfg(77);
        let samples = generate(&c, 20).unwrap();
        let (mut inside, mut total) = (0usize, 0usize);
        for s in &samples {
            for (&v, &l) in s.image.data.iter().zip(s.labels.data()) {
                total += 1;
                let mean = Tissue::ALL[l as usize].mean_intensity();
                if (v as f64 - mean).abs() <= 3.0 * c.intensity_noise + 1e-6 {
                    inside += 1;
                }
            }
        }
        assert!(inside as f64 >= 0.99 * total as f64);
    }

    #[test]
    fn split_examples() {
        let data = generate(&cfg(3), 200).unwrap();
        let (l, u) = split(data.clone(), 0.5, 11).unwrap();
        assert_eq!((l.len(), u.len()), (100, 100));

        let (l2, u2) = split(data.clone(), 0.5, 11).unwrap();
        assert_eq!(l.samples, l2.samples);
        assert_eq!(u.images(), u2.images());

        // disjoint and exhaustive: every original image appears exactly once
        let mut seen: Vec<&Image> = l
            .samples
            .iter()
            .map(|s| &s.image)
            .chain(u.images())
            .collect();
        assert_eq!(seen.len(), 200);
        seen.dedup();
        for s in &data {
            assert_eq!(seen.iter().filter(|&&im| *im == s.image).count(), 1);
        }

        let (all, none) = split(data, 1.0, 0).unwrap();
        assert_eq!((all.len(), none.len()), (200, 0));
        assert!(matches!(
            split(Vec::new(), 0.5, 0),
            Err(Error::EmptyDataset)
        ));
        assert!(split(generate(&cfg(3), 2).unwrap(), 0.0, 0).is_err());
    }

    #[test]
    fn unlabeled_ground_truth_is_sealed() {
        let (_, mut u) = split(generate(&cfg(4), 4).unwrap(), 0.5, 0).unwrap();
        assert!(matches!(u.ground_truth(), Err(Error::ForbiddenAccess)));
        assert_eq!(u.forbidden_attempts(), 1);
        u.unseal();
        assert_eq!(u.ground_truth().unwrap().len(), 2);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let samples = generate(&cfg(8), 3).unwrap();
        let bytes = encode_dataset(&samples).unwrap();
        assert_eq!(bytes.len(), dataset_file_len(3, 64, 64));
        assert_eq!(bytes.len(), 24 + 3 * (64 * 64 * 4 + 64 * 64));
        assert_eq!(decode_dataset(&bytes).unwrap(), samples);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        assert!(matches!(
            decode_dataset(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_dataset(&bytes[..10]),
            Err(Error::Truncated(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(Error::SizeMismatch(_))));
        let mut bad = bytes;
        let last = bad.len() - 1;
        bad[last] = 9;
        assert!(matches!(
            decode_dataset(&bad),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn corruption_flips_to_other_classes() {
        let mut s = generate(&cfg(12), 2).unwrap();
        let clean = s.clone();
        corrupt_labels(&mut s, 0.3, &mut stream_rng(0, Stream::LabelNoise, 0));
        let (mut flipped, mut total) = (0, 0);
        for (a, b) in s.iter().zip(&clean) {
            for (x, y) in a.labels.data().iter().zip(b.labels.data()) {
                total += 1;
                assert!((*x as usize) < NUM_CLASSES);
                flipped += (x != y) as usize;
            }
        }
        let frac = flipped as f64 / total as f64;
        assert!((0.28..0.32).contains(&frac), "{frac}");
    }
}
