//! MNIST-format (IDX) ingestion, bilinear resizing for multi-size training,
//! train/validation splitting, and size-homogeneous batch iteration.
//!
//! IDX files are parsed bit-exactly (big-endian magic and dimensions,
//! unsigned-byte payload) and may be gzip-compressed, detected by the 0x1f8b
//! prefix. The writer emits the uncompressed form; load → write → load is
//! byte-identical.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;
pub const CLASSES: usize = 10;

/// One image with pixels scaled to [0,1] and its class label.
#[derive(Clone)]
pub struct LabeledImage<T> {
    /// `[1 × H × W]` pixel tensor.
    pub pixels: Tensor<T>,
    pub label: u8,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }
}

#[derive(Clone, Default)]
pub struct Dataset<T> {
    pub items: Vec<LabeledImage<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            items: indices.iter().map(|&i| self.items[i].clone()).collect(),
        }
    }
}

fn read_maybe_gzip(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn u32_be(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!("{}: truncated header", self.path.display()))
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| {
            Error::Format(format!("{}: payload size overflow", self.path.display()))
        })?;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated payload, expected {} bytes after header",
                self.path.display(),
                n
            ))
        })?;
        self.pos = end;
        Ok(chunk)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes after payload",
                self.path.display(),
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.u32_be()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: image magic {:#010x}, expected {:#010x}",
            path.display(),
            magic,
            IMAGES_MAGIC
        )));
    }
    let n = cur.u32_be()? as usize;
    let h = cur.u32_be()? as usize;
    let w = cur.u32_be()? as usize;
    let pixels = cur.payload(n * h * w)?.to_vec();
    cur.finish()?;
    Ok((n, h, w, pixels))
}

fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.u32_be()?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: label magic {:#010x}, expected {:#010x}",
            path.display(),
            magic,
            LABELS_MAGIC
        )));
    }
    let n = cur.u32_be()? as usize;
    let labels = cur.payload(n)?.to_vec();
    cur.finish()?;
    Ok(labels)
}

/// Load an image/label IDX pair (optionally gzipped) into a dataset with
/// pixels divided by 255.
pub fn load_idx<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset<T>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (n, h, w, pixels) = parse_images(&read_maybe_gzip(images_path)?, images_path)?;
    let labels = parse_labels(&read_maybe_gzip(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            n,
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= CLASSES) {
        return Err(Error::Consistency(format!(
            "label {bad} outside 0..{CLASSES}"
        )));
    }
    let scale = T::from_f64(1.0 / 255.0);
    let items = (0..n)
        .map(|i| {
            let raw = &pixels[i * h * w..(i + 1) * h * w];
            let data: Vec<T> = raw.iter().map(|&b| T::from_f64(b as f64) * scale).collect();
            Ok(LabeledImage {
                pixels: Tensor::new(&[1, h, w], data)?,
                label: labels[i],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { items })
}

/// Write a dataset back to an uncompressed IDX image/label pair. All images
/// must share one size; pixels are quantized by rounding `p·255`.
pub fn write_idx<T: Scalar>(
    dataset: &Dataset<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let first = dataset
        .items
        .first()
        .ok_or_else(|| Error::Parameter("refusing to write an empty dataset".into()))?;
    let (h, w) = (first.pixels.shape()[1], first.pixels.shape()[2]);
    let n = dataset.len();
    let mut images = Vec::with_capacity(16 + n * h * w);
    images.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&(h as u32).to_be_bytes());
    images.extend_from_slice(&(w as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for item in &dataset.items {
        if item.pixels.shape() != [1, h, w] {
            return Err(Error::Consistency(
                "IDX container requires a single image size".into(),
            ));
        }
        for &p in item.pixels.data() {
            let v = (p.to_f64() * 255.0).round().clamp(0.0, 255.0);
            images.push(v as u8);
        }
        labels.push(item.label);
    }
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

/// Corner-aligned bilinear resize of a `[1×H×W]` image to `[1×S×S]`.
/// Outputs stay in the convex hull of the inputs, so [0,1] is preserved.
pub fn resize<T: Scalar>(image: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    if image.ndim() != 3 || image.shape()[0] != 1 {
        return Err(Error::Dim(format!(
            "resize expects [1, H, W], got {:?}",
            image.shape()
        )));
    }
    if target < 4 {
        return Err(Error::Parameter(format!(
            "target size must be at least 4, got {target}"
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h == target && w == target {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Tensor::zeros(&[1, target, target]);
    let row_scale = (h - 1) as f64 / (target - 1) as f64;
    let col_scale = (w - 1) as f64 / (target - 1) as f64;
    for r in 0..target {
        let fr = r as f64 * row_scale;
        let r0 = fr.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let wr = T::from_f64(fr - r0 as f64);
        for c in 0..target {
            let fc = c as f64 * col_scale;
            let c0 = fc.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let wc = T::from_f64(fc - c0 as f64);
            let top = src[r0 * w + c0] * (T::one() - wc) + src[r0 * w + c1] * wc;
            let bottom = src[r1 * w + c0] * (T::one() - wc) + src[r1 * w + c1] * wc;
            out.data_mut()[r * target + c] = top * (T::one() - wr) + bottom * wr;
        }
    }
    Ok(out)
}

/// Seeded shuffle, then split off the last `n_valid` items as the
/// validation set.
pub fn split_train_valid<T: Scalar>(
    mut dataset: Dataset<T>,
    n_valid: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Dataset<T>, Dataset<T>)> {
    if n_valid >= dataset.len() {
        return Err(Error::Parameter(format!(
            "validation size {} must be smaller than the dataset ({})",
            n_valid,
            dataset.len()
        )));
    }
    dataset.items.shuffle(rng);
    let valid = dataset.items.split_off(dataset.len() - n_valid);
    Ok((dataset, Dataset { items: valid }))
}

/// Ordered list of training image sizes; every size must be even and large
/// enough to resize to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeSchedule(Vec<usize>);

impl SizeSchedule {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::Parameter("size schedule is empty".into()));
        }
        for &s in &sizes {
            if s < 4 || s % 2 != 0 {
                return Err(Error::Parameter(format!(
                    "schedule sizes must be even and at least 4, got {s}"
                )));
            }
        }
        Ok(Self(sizes))
    }

    pub fn single(size: usize) -> Result<Self> {
        Self::new(vec![size])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One training batch: images all resized to `size`.
pub struct Batch<T> {
    pub size: usize,
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<u8>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Epoch iterator over size-homogeneous batches. Each scheduled size gets
/// its own shuffled visit order over the whole dataset, and batches are
/// drawn from the sizes round-robin, so every image is visited once per
/// size per epoch and consecutive batches cycle through the schedule.
pub struct BatchIter<'a, T> {
    data: &'a Dataset<T>,
    sizes: Vec<usize>,
    queues: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    batch: usize,
    next_queue: usize,
}

impl<'a, T: Scalar> BatchIter<'a, T> {
    pub fn new(
        data: &'a Dataset<T>,
        schedule: &SizeSchedule,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        let mut queues = Vec::with_capacity(schedule.len());
        for _ in schedule.sizes() {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(rng);
            queues.push(order);
        }
        Ok(Self {
            data,
            sizes: schedule.sizes().to_vec(),
            queues,
            cursors: vec![0; schedule.len()],
            batch,
            next_queue: 0,
        })
    }
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        let n_queues = self.queues.len();
        for step in 0..n_queues {
            let q = (self.next_queue + step) % n_queues;
            let cursor = self.cursors[q];
            if cursor >= self.queues[q].len() {
                continue;
            }
            let end = (cursor + self.batch).min(self.queues[q].len());
            self.cursors[q] = end;
            self.next_queue = (q + 1) % n_queues;
            let size = self.sizes[q];
            let mut images = Vec::with_capacity(end - cursor);
            let mut labels = Vec::with_capacity(end - cursor);
            for &idx in &self.queues[q][cursor..end] {
                let item = &self.data.items[idx];
                match resize(&item.pixels, size) {
                    Ok(img) => images.push(img),
                    Err(e) => return Some(Err(e)),
                }
                labels.push(item.label);
            }
            return Some(Ok(Batch {
                size,
                images,
                labels,
            }));
        }
        None
    }
}
