//! CIFAR binary ingestion, augmentation, seeded subsetting, and batch
//! assembly.
//!
//! Images are kept as the raw bytes of the source files so a parsed
//! dataset can be re-serialized bit-exactly; conversion to normalized
//! f64 happens at batch assembly.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::C10 => 1 + IMAGE_BYTES,
            CifarVariant::C100 => 2 + IMAGE_BYTES,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }

    pub fn parse(s: &str) -> Result<CifarVariant> {
        match s {
            "cifar10" | "c10" => Ok(CifarVariant::C10),
            "cifar100" | "c100" => Ok(CifarVariant::C100),
            other => Err(Error::invalid(format!("unknown dataset variant '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Provenance {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub variant: CifarVariant,
    /// Channel-planar R,G,B row-major bytes, one IMAGE_BYTES slab per image.
    pub images: Vec<u8>,
    /// Fine labels.
    pub labels: Vec<u8>,
    /// CIFAR-100 coarse labels, kept so re-serialization is bit-exact.
    pub coarse_labels: Option<Vec<u8>>,
    pub split: String,
    pub provenance: Vec<Provenance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * IMAGE_BYTES..(i + 1) * IMAGE_BYTES]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    // small standalone SHA-256; provenance only, not security-critical
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4,
        0xab1c5ed5, 0xd807aa98, 0x12835b01, 0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe,
        0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc, 0x2de92c6f,
        0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7,
        0xc6e00bf3, 0xd5a79147, 0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc,
        0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85, 0xa2bfe8a1, 0xa81a664b,
        0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116,
        0x1e376c08, 0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3,
        0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208, 0x90befffa, 0xa4506ceb, 0xbef9a3f7,
        0xc67178f2,
    ];
    let mut h: [u32; 8] = [
        0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab,
        0x5be0cd19,
    ];
    let mut msg = bytes.to_vec();
    let bitlen = (bytes.len() as u64) * 8;
    msg.push(0x80);
    while msg.len() % 64 != 56 {
        msg.push(0);
    }
    msg.extend_from_slice(&bitlen.to_be_bytes());
    for chunk in msg.chunks(64) {
        let mut w = [0u32; 64];
        for i in 0..16 {
            w[i] = u32::from_be_bytes([chunk[4 * i], chunk[4 * i + 1], chunk[4 * i + 2], chunk[4 * i + 3]]);
        }
        for i in 16..64 {
            let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
            let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
            w[i] = w[i - 16]
                .wrapping_add(s0)
                .wrapping_add(w[i - 7])
                .wrapping_add(s1);
        }
        let (mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh) =
            (h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7]);
        for i in 0..64 {
            let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
            let ch = (e & f) ^ (!e & g);
            let t1 = hh
                .wrapping_add(s1)
                .wrapping_add(ch)
                .wrapping_add(K[i])
                .wrapping_add(w[i]);
            let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
            let maj = (a & b) ^ (a & c) ^ (b & c);
            let t2 = s0.wrapping_add(maj);
            hh = g;
            g = f;
            f = e;
            e = d.wrapping_add(t1);
            d = c;
            c = b;
            b = a;
            a = t1.wrapping_add(t2);
        }
        h[0] = h[0].wrapping_add(a);
        h[1] = h[1].wrapping_add(b);
        h[2] = h[2].wrapping_add(c);
        h[3] = h[3].wrapping_add(d);
        h[4] = h[4].wrapping_add(e);
        h[5] = h[5].wrapping_add(f);
        h[6] = h[6].wrapping_add(g);
        h[7] = h[7].wrapping_add(hh);
    }
    h.iter().map(|v| format!("{v:08x}")).collect()
}

/// Parse one CIFAR binary batch file.
pub fn parse_cifar(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar_bytes(&bytes, variant, path)
}

pub fn parse_cifar_bytes(bytes: &[u8], variant: CifarVariant, origin: &Path) -> Result<Dataset> {
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % rec) as u64,
            message: format!(
                "file size {} is not a positive multiple of the record length {rec}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    let mut coarse = Vec::new();
    for i in 0..n {
        let r = &bytes[i * rec..(i + 1) * rec];
        let (label, pixels) = match variant {
            CifarVariant::C10 => (r[0], &r[1..]),
            CifarVariant::C100 => {
                coarse.push(r[0]);
                (r[1], &r[2..])
            }
        };
        if (label as usize) >= variant.num_classes() {
            return Err(Error::Parse {
                offset: (i * rec) as u64,
                message: format!("label {label} out of range for {} classes", variant.num_classes()),
            });
        }
        labels.push(label);
        images.extend_from_slice(pixels);
    }
    Ok(Dataset {
        variant,
        images,
        labels,
        coarse_labels: if variant == CifarVariant::C100 { Some(coarse) } else { None },
        split: origin
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        provenance: vec![Provenance { path: origin.to_path_buf(), sha256: sha256_hex(bytes) }],
    })
}

/// Re-serialize to the exact source byte layout.
pub fn serialize_cifar(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(ds.len() * ds.variant.record_len());
    for i in 0..ds.len() {
        if let Some(coarse) = &ds.coarse_labels {
            out.push(coarse[i]);
        }
        out.push(ds.labels[i]);
        out.extend_from_slice(ds.image(i));
    }
    out
}

/// Concatenate several parsed files (e.g. the five CIFAR-10 train batches).
pub fn concat_datasets(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut base = iter.next().ok_or_else(|| Error::invalid("no dataset parts"))?;
    for p in iter {
        if p.variant != base.variant {
            return Err(Error::invalid("cannot concatenate different CIFAR variants"));
        }
        base.images.extend_from_slice(&p.images);
        base.labels.extend_from_slice(&p.labels);
        if let (Some(a), Some(b)) = (base.coarse_labels.as_mut(), p.coarse_labels.as_ref()) {
            a.extend_from_slice(b);
        }
        base.provenance.extend(p.provenance);
    }
    Ok(base)
}

/// Load the standard binary layout from a directory: CIFAR-10 uses
/// data_batch_1..5.bin + test_batch.bin, CIFAR-100 train.bin + test.bin.
pub fn load_split(dir: &Path, variant: CifarVariant, train: bool) -> Result<Dataset> {
    let files: Vec<PathBuf> = match (variant, train) {
        (CifarVariant::C10, true) => (1..=5)
            .map(|i| dir.join(format!("data_batch_{i}.bin")))
            .collect(),
        (CifarVariant::C10, false) => vec![dir.join("test_batch.bin")],
        (CifarVariant::C100, true) => vec![dir.join("train.bin")],
        (CifarVariant::C100, false) => vec![dir.join("test.bin")],
    };
    let parts = files
        .iter()
        .map(|f| parse_cifar(f, variant))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = concat_datasets(parts)?;
    ds.split = if train { "train".into() } else { "test".into() };
    Ok(ds)
}

// ---------------------------------------------------------------------------
// normalization and batches
// ---------------------------------------------------------------------------

/// Per-channel mean/std of pixel values scaled to [0,1], computed from the
/// training split and stored with checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn compute(ds: &Dataset) -> NormStats {
        let n = ds.len();
        let per = 32 * 32;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        for i in 0..n {
            let img = ds.image(i);
            for c in 0..3 {
                for &p in &img[c * per..(c + 1) * per] {
                    mean[c] += p as f64 / 255.0;
                }
            }
        }
        let count = (n * per) as f64;
        for c in 0..3 {
            mean[c] /= count;
        }
        for i in 0..n {
            let img = ds.image(i);
            for c in 0..3 {
                for &p in &img[c * per..(c + 1) * per] {
                    let d = p as f64 / 255.0 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut std = [0.0f64; 3];
        for c in 0..3 {
            std[c] = (var[c] / count).sqrt().max(1e-8);
        }
        NormStats { mean, std }
    }
}

/// Pad to 40x40 with zeros, crop the 32x32 window at (dy, dx), optionally
/// mirror horizontally. Offset (4,4) without flip is the identity.
pub fn augment_image_with(raw: &[u8], dy: usize, dx: usize, flip: bool) -> Vec<u8> {
    assert_eq!(raw.len(), IMAGE_BYTES);
    assert!(dy <= 8 && dx <= 8);
    let mut out = vec![0u8; IMAGE_BYTES];
    for c in 0..3 {
        for y in 0..32usize {
            // source row in the padded image
            let py = y + dy;
            if !(4..36).contains(&py) {
                continue;
            }
            let sy = py - 4;
            for x in 0..32usize {
                let px = x + dx;
                if !(4..36).contains(&px) {
                    continue;
                }
                let sx = px - 4;
                let ox = if flip { 31 - x } else { x };
                out[(c * 32 + y) * 32 + ox] = raw[(c * 32 + sy) * 32 + sx];
            }
        }
    }
    out
}

/// Seeded random crop + flip. Draw order is pinned: dy, dx, flip.
pub fn augment_image(raw: &[u8], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let dy = rng.random_range(0..9usize);
    let dx = rng.random_range(0..9usize);
    let flip = rng.random_range(0..2u32) == 1;
    augment_image_with(raw, dy, dx, flip)
}

/// Normalized f64 batch for the listed indices; applies augmentation when
/// an RNG is supplied (training batches only).
pub fn make_batch(
    ds: &Dataset,
    indices: &[usize],
    norm: &NormStats,
    augment_rng: Option<&mut ChaCha8Rng>,
) -> (Tensor, Vec<usize>) {
    let n = indices.len();
    let per = 32 * 32;
    let mut data = vec![0.0f64; n * IMAGE_BYTES];
    let mut labels = Vec::with_capacity(n);
    let mut rng = augment_rng;
    for (bi, &idx) in indices.iter().enumerate() {
        let raw: Vec<u8> = match rng.as_deref_mut() {
            Some(r) => augment_image(ds.image(idx), r),
            None => ds.image(idx).to_vec(),
        };
        for c in 0..3 {
            let (m, s) = (norm.mean[c], norm.std[c]);
            for j in 0..per {
                data[(bi * 3 + c) * per + j] = (raw[c * per + j] as f64 / 255.0 - m) / s;
            }
        }
        labels.push(ds.label(idx));
    }
    (Tensor::new(&[n, 3, 32, 32], data).unwrap(), labels)
}

/// Class-balanced seeded sample: shuffle each class's index list, take
/// `n_per_class`, then keep ascending index order.
pub fn subset(ds: &Dataset, n_per_class: usize, seed: u64) -> Result<Dataset> {
    use rand::SeedableRng;
    let classes = ds.variant.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for i in 0..ds.len() {
        by_class[ds.label(i)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n_per_class * classes);
    for (cls, mut idxs) in by_class.into_iter().enumerate() {
        if idxs.len() < n_per_class {
            return Err(Error::invalid(format!(
                "class {cls} has only {} samples, need {n_per_class}",
                idxs.len()
            )));
        }
        idxs.shuffle(&mut rng);
        chosen.extend_from_slice(&idxs[..n_per_class]);
    }
    chosen.sort_unstable();

    let mut images = Vec::with_capacity(chosen.len() * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(chosen.len());
    let mut coarse = ds.coarse_labels.as_ref().map(|_| Vec::with_capacity(chosen.len()));
    for &i in &chosen {
        images.extend_from_slice(ds.image(i));
        labels.push(ds.labels[i]);
        if let (Some(out), Some(src)) = (coarse.as_mut(), ds.coarse_labels.as_ref()) {
            out.push(src[i]);
        }
    }
    Ok(Dataset {
        variant: ds.variant,
        images,
        labels,
        coarse_labels: coarse,
        split: format!("{}-subset{}x{}", ds.split, n_per_class, classes),
        provenance: ds.provenance.clone(),
    })
}

// ---------------------------------------------------------------------------
// synthetic CIFAR-format data
// ---------------------------------------------------------------------------

/// Deterministic synthetic stand-in dataset in exact CIFAR-10 binary
/// format, for environments without the real files. Each class is a
/// smooth random color texture; samples add spatial shifts, brightness
/// jitter, and pixel noise, so the classes are learnable but not trivial.
pub fn generate_synthetic(classes: usize, per_class: usize, seed: u64) -> Dataset {
    use rand::SeedableRng;
    assert!(classes <= 10, "synthetic data uses the CIFAR-10 record format");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = synthetic_prototypes(classes, &mut rng);
    let (images, labels) = synthetic_samples(&prototypes, per_class, &mut rng);
    Dataset {
        variant: CifarVariant::C10,
        images,
        labels,
        coarse_labels: None,
        split: "synthetic".into(),
        provenance: vec![Provenance {
            path: PathBuf::from(format!("synthetic(classes={classes},per_class={per_class},seed={seed})")),
            sha256: String::new(),
        }],
    }
}

/// Train and test splits that share one set of class prototypes, so the
/// test split is actually predictable from the training split. Two calls
/// to [`generate_synthetic`] with different seeds do not have that
/// property — their classes are unrelated textures.
pub fn generate_synthetic_split(
    classes: usize,
    train_per_class: usize,
    test_per_class: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    use rand::SeedableRng;
    assert!(classes <= 10, "synthetic data uses the CIFAR-10 record format");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prototypes = synthetic_prototypes(classes, &mut rng);
    let make = |per_class: usize, split: &str, rng: &mut ChaCha8Rng| {
        let (images, labels) = synthetic_samples(&prototypes, per_class, rng);
        Dataset {
            variant: CifarVariant::C10,
            images,
            labels,
            coarse_labels: None,
            split: split.to_string(),
            provenance: vec![Provenance {
                path: PathBuf::from(format!(
                    "synthetic-{split}(classes={classes},per_class={per_class},seed={seed})"
                )),
                sha256: String::new(),
            }],
        }
    };
    let train = make(train_per_class, "synthetic-train", &mut rng);
    let test = make(test_per_class, "synthetic-test", &mut rng);
    (train, test)
}

/// Coarse 8x8 fields upsampled to 32x32, one per class and channel.
fn synthetic_prototypes(classes: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut prototypes = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut proto = vec![0.0f64; IMAGE_BYTES];
        for c in 0..3 {
            let coarse: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            for y in 0..32usize {
                for x in 0..32usize {
                    // bilinear upsample of the 8x8 grid
                    let fy = y as f64 / 31.0 * 7.0;
                    let fx = x as f64 / 31.0 * 7.0;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(7), (x0 + 1).min(7));
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    let v = coarse[y0 * 8 + x0] * (1.0 - ty) * (1.0 - tx)
                        + coarse[y0 * 8 + x1] * (1.0 - ty) * tx
                        + coarse[y1 * 8 + x0] * ty * (1.0 - tx)
                        + coarse[y1 * 8 + x1] * ty * tx;
                    proto[(c * 32 + y) * 32 + x] = v;
                }
            }
        }
        prototypes.push(proto);
    }
    prototypes
}

/// Noisy shifted samples of the given prototypes, class-major order.
fn synthetic_samples(
    prototypes: &[Vec<f64>],
    per_class: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, Vec<u8>) {
    let classes = prototypes.len();
    let n = classes * per_class;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for cls in 0..classes {
        for _ in 0..per_class {
            let shift_y = rng.random_range(-3i32..=3);
            let shift_x = rng.random_range(-3i32..=3);
            let brightness = rng.random_range(-20.0..20.0);
            let amplitude = rng.random_range(45.0..75.0);
            for c in 0..3usize {
                for y in 0..32i32 {
                    for x in 0..32i32 {
                        let sy = (y + shift_y).rem_euclid(32) as usize;
                        let sx = (x + shift_x).rem_euclid(32) as usize;
                        let base = prototypes[cls][(c * 32 + sy) * 32 + sx];
                        let noise: f64 = rng.random_range(-18.0..18.0);
                        let v = 128.0 + base * amplitude + brightness + noise;
                        images.push(v.clamp(0.0, 255.0) as u8);
                    }
                }
            }
            labels.push(cls as u8);
        }
    }
    (images, labels)
}
