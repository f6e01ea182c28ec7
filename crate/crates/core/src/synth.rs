//! Synthetic RGB-D scenes in which some classes can only be told apart by depth.
//!
//! Every scene shows two textured blobs over a tissue-like background. Classes
//! come in confusable pairs that share the blob palette and the whole RGB
//! sampling path; the pair member is decided afterwards by which blob sits in
//! front in the depth map. One class is a singleton with its own look.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const NUM_CLASSES: usize = 9;
pub const GENERATOR_VERSION: u32 = 1;
pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// Confusable pairs; the first member puts the first blob in front.
pub const CONFUSABLE_PAIRS: [(usize, usize); 4] = [(1, 2), (4, 5), (7, 8), (0, 3)];
/// The class whose RGB alone identifies it.
pub const SINGLETON_CLASS: usize = 6;

/// Per-class frame counts of the reference train split.
pub const REFERENCE_TRAIN_COUNTS: [usize; NUM_CLASSES] = [81, 504, 444, 21, 405, 333, 303, 2628, 2361];
/// Per-class frame counts of the reference validation split.
pub const REFERENCE_VAL_COUNTS: [usize; NUM_CLASSES] = [9, 57, 51, 3, 48, 39, 36, 294, 264];

/// Scales counts, rounding halves away from zero.
pub fn scaled_counts(counts: &[usize], scale: f64) -> Result<Vec<usize>> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Usage(format!("scale must be positive and finite, got {scale}")));
    }
    Ok(counts.iter().map(|&c| libm::round(c as f64 * scale) as usize).collect())
}

/// Returns `(pair index, is second member)` for paired classes, `None` for the singleton.
pub fn pair_of(class_id: usize) -> Option<(usize, bool)> {
    CONFUSABLE_PAIRS.iter().enumerate().find_map(|(i, &(a, b))| {
        if class_id == a {
            Some((i, false))
        } else if class_id == b {
            Some((i, true))
        } else {
            None
        }
    })
}

/// One generated scene. `rgb` is `[3, H, W]` in `[0, 1]`, `depth` is `[H, W]` in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub rgb: Tensor,
    pub depth: Tensor,
    pub label: usize,
}

impl SampleRecord {
    pub fn validate(&self) -> Result<()> {
        if self.label >= NUM_CLASSES {
            return Err(Error::Data(format!("label {} out of range", self.label)));
        }
        let rs = self.rgb.shape();
        if rs.len() != 3 || rs[0] != 3 || self.depth.shape() != [rs[1], rs[2]] {
            return Err(Error::Data(format!(
                "rgb {:?} and depth {:?} do not describe one image",
                rs,
                self.depth.shape()
            )));
        }
        if let Some(v) = self.rgb.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("rgb value {v} outside [0, 1]")));
        }
        if let Some(v) = self.depth.data().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::Data(format!("depth value {v} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Blob colours per pair: (first blob, second blob).
const PAIR_PALETTES: [([f64; 3], [f64; 3]); 4] = [
    ([0.85, 0.25, 0.20], [0.25, 0.70, 0.30]),
    ([0.20, 0.35, 0.85], [0.90, 0.80, 0.25]),
    ([0.75, 0.30, 0.80], [0.25, 0.75, 0.80]),
    ([0.95, 0.55, 0.15], [0.45, 0.30, 0.20]),
];
const SINGLETON_COLOUR: [f64; 3] = [0.92, 0.92, 0.92];

#[derive(Clone, Copy, Debug)]
struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Blob {
    /// Soft membership in `[0, 1]` with a one-pixel edge.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        let r = libm::sqrt(dx * dx + dy * dy);
        let edge = 1.0 / self.rx.min(self.ry);
        ((1.0 - r) / edge + 0.5).clamp(0.0, 1.0)
    }
}

fn sample_blob<R: Rng + ?Sized>(rng: &mut R, size: f64) -> Blob {
    let rx = rng.random_range(0.12..0.20) * size;
    let ry = rx * rng.random_range(0.75..1.25);
    Blob {
        cx: rng.random_range(rx + 1.0..size - rx - 1.0),
        cy: rng.random_range(ry + 1.0..size - ry - 1.0),
        rx,
        ry,
    }
}

fn separated(a: &Blob, b: &Blob) -> bool {
    let d = libm::hypot(a.cx - b.cx, a.cy - b.cy);
    d > a.rx.max(a.ry) + b.rx.max(b.ry) + 2.0
}

/// Low-frequency texture: a sum of a few random plane waves, roughly in `[-1, 1]`.
struct Texture {
    waves: [(f64, f64, f64); 3],
}

impl Texture {
    fn sample<R: Rng + ?Sized>(rng: &mut R, size: f64) -> Self {
        let mut waves = [(0.0, 0.0, 0.0); 3];
        for w in &mut waves {
            let angle = rng.random_range(0.0..core::f64::consts::TAU);
            let freq = rng.random_range(1.0..4.0) * core::f64::consts::TAU / size;
            *w = (libm::cos(angle) * freq, libm::sin(angle) * freq, rng.random_range(0.0..core::f64::consts::TAU));
        }
        Texture { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(kx, ky, p)| libm::sin(kx * x + ky * y + p)).sum::<f64>() / 3.0
    }
}

/// Renders one scene of `class_id` at `size×size`.
///
/// All RGB randomness is drawn before anything class-specific within a pair,
/// so both members of a pair produce identical RGB from the same generator state.
pub fn generate_sample<R: Rng + ?Sized>(class_id: usize, size: usize, rng: &mut R) -> Result<SampleRecord> {
    if class_id >= NUM_CLASSES {
        return Err(Error::Usage(format!("class id {class_id} outside 0..{NUM_CLASSES}")));
    }
    if size < 8 {
        return Err(Error::Usage(format!("image size {size} is below the minimum of 8")));
    }
    let s = size as f64;
    let pair = pair_of(class_id);

    // shared RGB path
    let tissue = [
        rng.random_range(0.55..0.75),
        rng.random_range(0.30..0.45),
        rng.random_range(0.30..0.45),
    ];
    let bg_texture = Texture::sample(rng, s);
    let first = sample_blob(rng, s);
    let mut second = sample_blob(rng, s);
    for _ in 0..64 {
        if separated(&first, &second) {
            break;
        }
        second = sample_blob(rng, s);
    }
    if !separated(&first, &second) {
        // fall back to opposite corners
        second.cx = if first.cx < s / 2.0 { s - second.rx - 1.0 } else { second.rx + 1.0 };
        second.cy = if first.cy < s / 2.0 { s - second.ry - 1.0 } else { second.ry + 1.0 };
    }
    let blob_texture = Texture::sample(rng, s);
    let tint: f64 = rng.random_range(-0.05..0.05);
    let rgb_noise: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(-0.02..0.02)).collect();

    let (colour_a, colour_b) = match pair {
        Some((p, _)) => PAIR_PALETTES[p],
        None => (SINGLETON_COLOUR, SINGLETON_COLOUR),
    };
    let mut rgb = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let bg = tissue[c] + 0.08 * bg_texture.at(fx, fy);
                let (ca, cb) = (first.coverage(fx, fy), second.coverage(fx, fy));
                let tex = 0.06 * blob_texture.at(fx, fy) + tint;
                let mut v = bg * (1.0 - ca - cb) + (colour_a[c] + tex) * ca + (colour_b[c] + tex) * cb;
                if pair.is_none() {
                    // singleton: ring pattern inside the blobs
                    let ring = 0.5 + 0.5 * libm::cos(libm::hypot(fx - first.cx, fy - first.cy) * 1.5);
                    v -= 0.4 * ring * (ca + cb);
                }
                v += rgb_noise[(c * size + y) * size + x];
                rgb.push(v.clamp(0.0, 1.0));
            }
        }
    }

    // depth branch
    let base = rng.random_range(0.80..0.92);
    let tilt_x = rng.random_range(-0.04..0.04);
    let tilt_y = rng.random_range(-0.04..0.04);
    let lift = rng.random_range(0.40..0.55);
    let second_in_front = matches!(pair, Some((_, true)));
    let mut depth = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let field = base + tilt_x * (fx / s - 0.5) + tilt_y * (fy / s - 0.5);
            let front = if second_in_front { second.coverage(fx, fy) } else { first.coverage(fx, fy) };
            let noise = rng.random_range(-0.01..0.01);
            depth.push((field - lift * front + noise).clamp(0.01, 1.0));
        }
    }

    let record = SampleRecord {
        rgb: Tensor::new(&[3, size, size], rgb, DType::F32)?,
        depth: Tensor::new(&[size, size], depth, DType::F32)?,
        label: class_id,
    };
    record.validate()?;
    Ok(record)
}

/// Generator for sample `index` of a split; independent of every other sample.
pub fn sample_rng(seed: u64, split_id: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((split_id << 40) | index as u64);
    rng
}

/// Class label of every sample in manifest order (classes in ascending order).
pub fn split_labels(counts: &[usize]) -> Vec<usize> {
    counts.iter().enumerate().flat_map(|(c, &n)| core::iter::repeat_n(c, n)).collect()
}

/// Generates a whole split in memory.
pub fn generate_split(counts: &[usize], seed: u64, split_id: u64, size: usize) -> Result<Vec<SampleRecord>> {
    if counts.len() != NUM_CLASSES {
        return Err(Error::Usage(format!("expected {NUM_CLASSES} class counts, got {}", counts.len())));
    }
    split_labels(counts)
        .into_iter()
        .enumerate()
        .map(|(i, label)| generate_sample(label, size, &mut sample_rng(seed, split_id, i)))
        .collect()
}

/// A seeded permutation of `0..len`, for shuffled iteration over a split.
pub fn shuffled_order(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}
