//! Dataset ingestion and preprocessing.
//!
//! IDX files (the MNIST family format) are parsed into [`RawImages`] and
//! turned into a normalized [`Dataset`] by [`preprocess`]. [`synth2d`]
//! generates Gaussian blobs in the plane for small end-to-end runs.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::ResizeSpec;
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Unnormalized images with labels, as stored in IDX files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    /// The first `n` images (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> RawImages {
        let n = n.min(self.len());
        RawImages {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels[..n * self.rows * self.cols].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Serializes back into (images, labels) IDX byte streams.
    pub fn to_idx_bytes(&self) -> (Vec<u8>, Vec<u8>) {
        let mut images = Vec::with_capacity(16 + self.pixels.len());
        images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        for d in [self.len(), self.rows, self.cols] {
            images.extend_from_slice(&(d as u32).to_be_bytes());
        }
        images.extend_from_slice(&self.pixels);

        let mut labels = Vec::with_capacity(8 + self.labels.len());
        labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        labels.extend_from_slice(&(self.len() as u32).to_be_bytes());
        labels.extend_from_slice(&self.labels);
        (images, labels)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or(Error::Truncated {
            expected: end,
            actual: self.bytes.len(),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let expected = self.pos + len;
        if self.bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: self.bytes.len(),
            });
        }
        Ok(&self.bytes[self.pos..expected])
    }
}

/// Parses an IDX image stream (magic `0x00000803`, dims `n, rows, cols`) and an
/// IDX label stream (magic `0x00000801`, dim `n`).
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<RawImages> {
    let mut img = Cursor { bytes: image_bytes, pos: 0 };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("image stream magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}")));
    }
    let n = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.payload(n * rows * cols)?.to_vec();

    let mut lab = Cursor { bytes: label_bytes, pos: 0 };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("label stream magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}")));
    }
    let m = lab.u32()? as usize;
    if m != n {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    let labels = lab.payload(m)?.to_vec();
    Ok(RawImages { rows, cols, pixels, labels })
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<RawImages> {
    let read = |p: &Path| {
        fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))))
    };
    parse_idx(&read(images)?, &read(labels)?)
}

/// Normalized inputs with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// `(height, width)` when inputs are single-channel images.
    pub image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize, image_shape: Option<(usize, usize)>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::invalid(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::invalid(format!("label {bad} outside {class_count} classes")));
        }
        if let Some((h, w)) = image_shape {
            if h * w != inputs.cols() {
                return Err(Error::invalid(format!("image shape {h}x{w} does not match input dim {}", inputs.cols())));
            }
        }
        Ok(Dataset { inputs, labels, class_count, image_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Shape used when rendering one input as an image: the stored image
    /// shape, or a `1 × d` strip for vector data.
    pub fn display_shape(&self) -> (usize, usize) {
        self.image_shape.unwrap_or((1, self.input_dim()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        Dataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.class_count,
            self.image_shape,
        )
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Copy with `offset` added to every input coordinate.
    pub fn translated(&self, offset: &[f64]) -> Result<Dataset> {
        if offset.len() != self.input_dim() {
            return Err(Error::invalid("offset dimension mismatch"));
        }
        let mut inputs = self.inputs.clone();
        for r in 0..inputs.rows() {
            for (v, o) in inputs.row_mut(r).iter_mut().zip(offset) {
                *v += o;
            }
        }
        Dataset::new(inputs, self.labels.clone(), self.class_count, self.image_shape)
    }
}

/// Maps pixels linearly from `[0, 255]` to `[-1, 1]` and, when `target_side`
/// exceeds the stored size, upsamples bilinearly to `target_side²`.
///
/// The class count is one more than the largest label present.
pub fn preprocess(raw: &RawImages, target_side: usize) -> Result<Dataset> {
    if raw.is_empty() {
        return Err(Error::invalid("no images"));
    }
    if target_side < raw.rows.max(raw.cols) {
        return Err(Error::invalid(format!(
            "target side {target_side} is smaller than the {}x{} source",
            raw.rows, raw.cols
        )));
    }
    let data: Vec<f64> = raw.pixels.iter().map(|&p| f64::from(p) / 127.5 - 1.0).collect();
    let mut inputs = Tensor::matrix(raw.len(), raw.rows * raw.cols, data);
    let mut shape = (raw.rows, raw.cols);
    if target_side != raw.rows || target_side != raw.cols {
        let spec = ResizeSpec {
            channels: 1,
            in_h: raw.rows,
            in_w: raw.cols,
            out_h: target_side,
            out_w: target_side,
        };
        inputs = spec.forward(&inputs).map_err(Error::InvalidArgument)?;
        shape = (target_side, target_side);
    }
    let labels: Vec<usize> = raw.labels.iter().map(|&y| usize::from(y)).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    Dataset::new(inputs, labels, class_count, Some(shape))
}

/// Isotropic Gaussian blobs in the plane, `n_per_class` points per center,
/// stored class by class.
pub fn synth2d(class_count: usize, n_per_class: usize, centers: &[[f64; 2]], spread: f64, seed: u64) -> Result<Dataset> {
    if centers.len() != class_count {
        return Err(Error::invalid(format!("{} centers for {class_count} classes", centers.len())));
    }
    if !(spread >= 0.0) || n_per_class == 0 {
        return Err(Error::invalid("spread must be non-negative and n_per_class positive"));
    }
    let mut rng = rng::stream(seed, Purpose::Synthetic, 0);
    let mut data = Vec::with_capacity(class_count * n_per_class * 2);
    let mut labels = Vec::with_capacity(class_count * n_per_class);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            data.push(c[0] + spread * dx);
            data.push(c[1] + spread * dy);
            labels.push(k);
        }
    }
    Dataset::new(Tensor::matrix(labels.len(), 2, data), labels, class_count, None)
}

/// Training, validation and test partitions.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

impl SplitDataset {
    /// Holds out `fraction` of `train_raw` (shuffled under `seed`) for validation.
    pub fn from_training(train_raw: &Dataset, test: Dataset, fraction: f64, seed: u64) -> Result<Self> {
        let (train, validation) = split(train_raw, fraction, seed)?;
        Ok(SplitDataset { train, validation, test })
    }
}

/// Disjoint shuffled split into `(train, validation)` where validation holds
/// `round(n · fraction)` samples (at least one, leaving at least one).
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n = data.len();
    if n < 2 {
        return Err(Error::invalid(format!("cannot split {n} samples")));
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, 0));
    let (val, train) = order.split_at(n_val);
    let mut train = train.to_vec();
    let mut val = val.to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((data.subset(&train)?, data.subset(&val)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(magic: u32, dims: &[u32]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend_from_slice(&d.to_be_bytes());
        }
        v
    }

    #[test]
    fn parses_single_image() {
        let mut img = header(0x803, &[1, 2, 2]);
        img.extend_from_slice(&[0, 255, 128, 64]);
        let mut lab = header(0x801, &[1]);
        lab.push(7);
        let raw = parse_idx(&img, &lab).unwrap();
        assert_eq!((raw.rows, raw.cols), (2, 2));
        assert_eq!(raw.image(0), &[0, 255, 128, 64]);
        assert_eq!(raw.labels, vec![7]);
    }

    #[test]
    fn count_mismatch() {
        let mut img = header(0x803, &[10, 1, 1]);
        img.extend_from_slice(&[0; 10]);
        let mut lab = header(0x801, &[9]);
        lab.extend_from_slice(&[0; 9]);
        let err = parse_idx(&img, &lab).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn wrong_magic_reports_value() {
        let img = header(0x804, &[1, 1, 1]);
        let lab = header(0x801, &[1]);
        let err = parse_idx(&img, &lab).unwrap_err().to_string();
        assert!(err.contains("0x00000804"), "{err}");
    }

    #[test]
    fn truncated_payload_reports_sizes() {
        let mut img = header(0x803, &[2, 2, 2]);
        img.extend_from_slice(&[1, 2, 3]);
        let lab = header(0x801, &[2]);
        match parse_idx(&img, &lab) {
            Err(Error::Truncated { expected, actual }) => {
                assert_eq!(expected, 16 + 8);
                assert_eq!(actual, 16 + 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn preprocess_endpoints_and_constant_upscale() {
        let raw = RawImages { rows: 2, cols: 2, pixels: vec![0, 255, 255, 0, 9, 9, 9, 9], labels: vec![0, 1] };
        let d = preprocess(&raw, 2).unwrap();
        assert_eq!(d.input(0), &[-1.0, 1.0, 1.0, -1.0]);
        let up = preprocess(&raw, 5).unwrap();
        assert_eq!(up.image_shape, Some((5, 5)));
        let c = 9.0 / 127.5 - 1.0;
        assert!(up.input(1).iter().all(|v| (v - c).abs() < 1e-12));
        assert!(preprocess(&raw, 1).is_err());
    }

    #[test]
    fn synth2d_zero_spread_and_counts() {
        let d = synth2d(2, 5, &[[-2.0, 0.0], [2.0, 0.0]], 0.0, 1).unwrap();
        for i in 0..d.len() {
            if d.labels[i] == 0 {
                assert_eq!(d.input(i), &[-2.0, 0.0]);
            }
        }
        let d = synth2d(3, 100, &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.1, 3).unwrap();
        assert_eq!(d.len(), 300);
        assert_eq!(d.class_histogram(), vec![100, 100, 100]);
        assert_eq!(d, synth2d(3, 100, &[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 0.1, 3).unwrap());
        assert!(synth2d(2, 5, &[[0.0, 0.0]], 0.1, 0).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = synth2d(2, 50, &[[0.0, 0.0], [1.0, 1.0]], 0.1, 0).unwrap();
        let (t, v) = split(&d, 0.1, 9).unwrap();
        assert_eq!((t.len(), v.len()), (90, 10));
        let (t2, v2) = split(&d, 0.1, 9).unwrap();
        assert_eq!(t, t2);
        assert_eq!(v, v2);

        let small = synth2d(2, 5, &[[0.0, 0.0], [1.0, 1.0]], 0.1, 0).unwrap();
        let (t, v) = split(&small, 0.5, 1).unwrap();
        assert_eq!((t.len(), v.len()), (5, 5));

        let one = small.subset(&[0]).unwrap();
        assert!(split(&one, 0.5, 0).is_err());
        assert!(split(&small, 1.0, 0).is_err());
    }
}
