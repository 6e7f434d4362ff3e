//! Images, binary PPM files, the synthetic generator and dataset batching.

use std::fs;
use std::path::{Path, PathBuf};

use mstok_core::numerics::rng::{seeded, stream, SeededRng};
use mstok_core::{Error, Result, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Channels-first RGB image with values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `3 × height × width`
    pub data: Vec<f32>,
}

impl Image {
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Image> {
        match t.shape() {
            [3, h, w] | [1, 3, h, w] => Ok(Image { width: *w, height: *h, data: t.to_vec() }),
            s => Err(Error::Dimension { op: "image", lhs: s.to_vec(), rhs: vec![3] }),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(self.data.clone(), &[1, 3, self.height, self.width]).expect("consistent image")
    }
}

fn byte_to_unit(b: u8) -> f32 {
    (b as f64 / 127.5 - 1.0) as f32
}

fn unit_to_byte(v: f32) -> u8 {
    ((v as f64 + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Parses a binary `P6` file with maxval 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let fail = |offset: usize, message: &str| Error::Format { offset, message: message.to_string() };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(fail(0, "missing P6 magic"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments before each header number
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(fail(pos, "truncated header")),
            }
        }
        if i == 0 && pos == 2 {
            return Err(fail(pos, "expected whitespace after magic"));
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(fail(start, "expected a decimal header number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fail(start, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(fail(2, "zero image dimension"));
    }
    if maxval != 255 {
        return Err(fail(pos, "only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(fail(pos, "expected one whitespace byte before the raster"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() != need {
        let at = pos + raster.len().min(need);
        return Err(fail(at, &format!("raster holds {} bytes, expected {need}", raster.len())));
    }
    let mut data = vec![0.0; need];
    for (i, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * width * height + i] = byte_to_unit(px[c]);
        }
    }
    Ok(Image { width, height, data })
}

pub fn encode_ppm(image: &Image) -> Vec<u8> {
    let (w, h) = (image.width, image.height);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h * 3);
    for i in 0..w * h {
        for c in 0..3 {
            out.push(unit_to_byte(image.data[c * w * h + i]));
        }
    }
    out
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn save_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image))?)
}

/// Smooth multi-frequency color gradients overlaid with a few flat disks,
/// rectangles and triangles.
pub fn synthetic_image(size: usize, rng: &mut SeededRng) -> Image {
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    let waves: Vec<[f64; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(0.2..0.6),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            for c in 0..3 {
                let [f, ph, dx, dy, amp] = waves[c];
                let val = base[c] + amp * (std::f64::consts::TAU * f * (dx * u + dy * v) + ph).sin();
                data[c * n + y * size + x] = val as f32;
            }
        }
    }
    let shapes = rng.random_range(1..=4);
    for _ in 0..shapes {
        let color: [f32; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let r = rng.random_range(0.08..0.3);
        let kind = rng.random_range(0..3);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
                let (du, dv) = (u - cx, v - cy);
                let inside = match kind {
                    0 => du * du + dv * dv <= r * r,
                    1 => du.abs() <= r && dv.abs() <= 0.6 * r,
                    _ => dv <= r && dv >= -r && du.abs() <= (r - dv) * 0.5,
                };
                if inside {
                    for c in 0..3 {
                        data[c * n + y * size + x] = color[c];
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(-1.0, 1.0);
    }
    Image { width: size, height: size, data }
}

/// Ordered images of one size.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    /// Source file per image; `None` for generated ones.
    pub paths: Vec<Option<PathBuf>>,
    pub size: usize,
}

impl Dataset {
    pub fn synthetic(count: usize, size: usize, seed: u64) -> Dataset {
        let mut rng = seeded(seed, stream::SYNTH);
        let images = (0..count).map(|_| synthetic_image(size, &mut rng)).collect();
        Dataset { images, paths: vec![None; count], size }
    }

    /// Every `.ppm` file of `dir` in lexicographic path order; all must be `size × size`.
    pub fn from_dir(dir: &Path, size: usize) -> Result<Dataset> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Format { offset: 0, message: format!("no .ppm images in {}", dir.display()) });
        }
        let mut images = Vec::with_capacity(paths.len());
        for p in &paths {
            let img = load_ppm(p).map_err(|e| match e {
                Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", p.display()) },
                other => other,
            })?;
            if img.width != size || img.height != size {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("{} is {}x{}, expected {size}x{size}", p.display(), img.width, img.height),
                });
            }
            images.push(img);
        }
        Ok(Dataset { images, paths: paths.into_iter().map(Some).collect(), size })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(train, eval)` index lists: a seeded permutation with the last
    /// `round(fraction · n)` entries held out.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut seeded(seed, stream::EVAL));
        let n_eval = ((eval_fraction * self.len() as f64).round() as usize).min(self.len().saturating_sub(1));
        let eval = idx.split_off(self.len() - n_eval);
        (idx, eval)
    }

    /// `[B, 3, H, W]` batch of the given images.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * 3 * self.size * self.size);
        for &i in indices {
            data.extend_from_slice(&self.images[i].data);
        }
        Tensor::new(data, &[indices.len(), 3, self.size, self.size]).expect("consistent batch")
    }
}

/// Shuffled copy of `indices` that depends only on `(seed, epoch)`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
    let mut out = indices.to_vec();
    let mixed = seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    out.shuffle(&mut seeded(mixed, stream::DATA));
    out
}

/// Endless batch stream over `indices`, reshuffled every epoch; a batch never
/// straddles two epochs.
pub struct Batches {
    indices: Vec<usize>,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Batches {
    pub fn new(indices: Vec<usize>, batch: usize, seed: u64) -> Batches {
        let batch = batch.min(indices.len()).max(1);
        let order = epoch_order(&indices, seed, 0);
        Batches { indices, batch, seed, epoch: 0, order, pos: 0 }
    }

    pub fn per_epoch(&self) -> usize {
        self.indices.len() / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.order = epoch_order(&self.indices, self.seed, self.epoch);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}
