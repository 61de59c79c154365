//! Datasets: IDX ingestion, the synthetic patch generator and split manifests.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Images `N x H x W x C` with labels in `[0, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    /// Ground-truth relevance masks `N x H x W`, when known.
    masks: Option<Tensor>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        let n = match *images.shape() {
            [n, _, _, _] => n,
            _ => {
                return Err(Error::shape(
                    "dataset",
                    "images",
                    format!("expected N x H x W x C, got {:?}", images.shape()),
                ))
            }
        };
        if labels.len() != n {
            return Err(Error::invalid(format!("{n} images but {} labels", labels.len())));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(Error::invalid(format!("label {l} of sample {i} is not below {classes}")));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
            masks: None,
        })
    }

    pub fn with_masks(mut self, masks: Tensor) -> Result<Self> {
        let [n, h, w, _] = self.dims();
        if masks.shape() != [n, h, w] {
            return Err(Error::shape(
                "dataset",
                "masks",
                format!("expected {:?}, got {:?}", [n, h, w], masks.shape()),
            ));
        }
        self.masks = Some(masks);
        Ok(self)
    }

    /// `[N, H, W, C]`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.images.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Image `i` as `H x W x C`.
    pub fn image(&self, i: usize) -> Tensor {
        let [_, h, w, c] = self.dims();
        let n = h * w * c;
        Tensor::new(vec![h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("consistent dims")
    }

    /// Ground-truth mask of sample `i` as `H x W`.
    pub fn mask(&self, i: usize) -> Option<Tensor> {
        let [_, h, w, _] = self.dims();
        self.masks.as_ref().map(|m| {
            Tensor::new(vec![h, w], m.data()[i * h * w..(i + 1) * h * w].to_vec()).expect("consistent dims")
        })
    }

    /// Samples at `indices` as an `B x C x H x W` batch.
    pub fn batch_nchw(&self, indices: &[usize]) -> Tensor {
        let [_, h, w, c] = self.dims();
        let src = self.images.data();
        let mut out = vec![0.0; indices.len() * h * w * c];
        for (b, &i) in indices.iter().enumerate() {
            let img = &src[i * h * w * c..(i + 1) * h * w * c];
            let dst = &mut out[b * h * w * c..(b + 1) * h * w * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        dst[(ch * h + y) * w + x] = img[(y * w + x) * c + ch];
                    }
                }
            }
        }
        Tensor::new(vec![indices.len(), c, h, w], out).expect("non-empty batch")
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::invalid("cannot take an empty subset"));
        }
        let [_, h, w, c] = self.dims();
        let images = Tensor::new(vec![n, h, w, c], self.images.data()[..n * h * w * c].to_vec())?;
        let mut out = Self::new(images, self.labels[..n].to_vec(), self.classes, self.split)?;
        if let Some(m) = &self.masks {
            out = out.with_masks(Tensor::new(vec![n, h, w], m.data()[..n * h * w].to_vec())?)?;
        }
        Ok(out)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(Error::Format {
            what,
            offset: offset as u64,
            detail: "truncated header".into(),
        })
}

/// Decodes an IDX3 `u8` image file into `N x rows x cols x 1`, scaled to `[0, 1]`.
pub fn decode_idx_images(bytes: &[u8]) -> Result<Tensor> {
    const WHAT: &str = "IDX image file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            what: WHAT,
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    let rows = be_u32(bytes, 8, WHAT)? as usize;
    let cols = be_u32(bytes, 12, WHAT)? as usize;
    for (off, v) in [(4, n), (8, rows), (12, cols)] {
        if v == 0 {
            return Err(Error::Format {
                what: WHAT,
                offset: off,
                detail: "zero extent".into(),
            });
        }
    }
    let need = 16 + n * rows * cols;
    if bytes.len() != need {
        return Err(Error::Format {
            what: WHAT,
            offset: bytes.len().min(need) as u64,
            detail: format!("expected {need} bytes, file has {}", bytes.len()),
        });
    }
    let data = bytes[16..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![n, rows, cols, 1], data)
}

pub fn decode_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    const WHAT: &str = "IDX label file";
    let magic = be_u32(bytes, 0, WHAT)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            what: WHAT,
            offset: 0,
            detail: format!("magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, WHAT)? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::Format {
            what: WHAT,
            offset: bytes.len().min(8 + n) as u64,
            detail: format!("expected {} bytes, file has {}", 8 + n, bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| usize::from(b)).collect())
}

/// Encodes `N x rows x cols x 1` images in `[0, 1]` as IDX3 bytes (rounded to `u8`).
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let [n, h, w] = match *images.shape() {
        [n, h, w, 1] => [n, h, w],
        _ => {
            return Err(Error::shape(
                "encode_idx_images",
                "images",
                format!("expected N x H x W x 1, got {:?}", images.shape()),
            ))
        }
    };
    let mut out = Vec::with_capacity(16 + images.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::invalid(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image/label pair. `classes` defaults to `max(label) + 1`.
pub fn ingest_idx(images: &Path, labels: &Path, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let imgs = decode_idx_images(&read(images)?)?;
    let labs = decode_idx_labels(&read(labels)?)?;
    let classes = classes.unwrap_or_else(|| labs.iter().max().map_or(1, |m| m + 1));
    Dataset::new(imgs, labs, classes, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFiles {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// Key-value manifest naming the IDX files of each split. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default)]
    pub classes: Option<usize>,
    pub train: Option<SplitFiles>,
    pub test: Option<SplitFiles>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut m: Self = toml::from_str(text).map_err(|e| Error::Format {
            what: "dataset manifest",
            offset: e.span().map_or(0, |s| s.start as u64),
            detail: e.message().to_string(),
        })?;
        m.root = root.into();
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let files = match split {
            Split::Train => self.train.as_ref(),
            Split::Test => self.test.as_ref(),
        }
        .ok_or_else(|| Error::invalid(format!("manifest has no {split:?} split")))?;
        ingest_idx(
            &self.root.join(&files.images),
            &self.root.join(&files.labels),
            self.classes,
            split,
        )
    }
}

/// Settings of the synthetic patch dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchConfig {
    pub size: usize,
    pub classes: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Uniform background noise range `[0, background)`.
    #[serde(default = "default_background")]
    pub background: f64,
}

fn one() -> usize {
    1
}

fn default_background() -> f64 {
    0.3
}

impl PatchConfig {
    pub fn new(size: usize, classes: usize) -> Self {
        Self {
            size,
            classes,
            channels: 1,
            background: default_background(),
        }
    }

    /// Region grid `(rows, cols)`: the most square factorization of `classes`.
    pub fn grid(&self) -> (usize, usize) {
        let rows = (1..=self.classes)
            .filter(|r| self.classes % r == 0 && r * r <= self.classes)
            .max()
            .unwrap_or(1);
        (rows, self.classes / rows)
    }

    pub fn patch_side(&self) -> usize {
        let (rows, cols) = self.grid();
        ((self.size / rows).min(self.size / cols) / 2).max(1)
    }
}

/// Noise images with one bright square patch; the label is the index of
/// the grid region containing the patch, and the patch mask is the
/// ground-truth relevance map.
pub fn synth_patch_dataset(seed: u64, n: usize, cfg: PatchConfig, split: Split) -> Result<Dataset> {
    let (rows, cols) = cfg.grid();
    if n == 0 || cfg.classes == 0 || cfg.size < rows.max(cols) || cfg.channels == 0 {
        return Err(Error::invalid(format!("cannot build a patch dataset from {cfg:?} with n={n}")));
    }
    let (s, c) = (cfg.size, cfg.channels);
    let (rh, rw) = (s / rows, s / cols);
    let p = cfg.patch_side();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * s * s * c);
    let mut masks = Vec::with_capacity(n * s * s);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..cfg.classes);
        let (gy, gx) = (label / cols, label % cols);
        let y0 = gy * rh + rng.random_range(0..=rh - p);
        let x0 = gx * rw + rng.random_range(0..=rw - p);
        for y in 0..s {
            for x in 0..s {
                let inside = (y0..y0 + p).contains(&y) && (x0..x0 + p).contains(&x);
                masks.push(if inside { 1.0 } else { 0.0 });
                for _ in 0..c {
                    images.push(if inside {
                        rng.random_range(0.8..1.0)
                    } else {
                        rng.random_range(0.0..cfg.background)
                    });
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::new(vec![n, s, s, c], images)?, labels, cfg.classes, split)?
        .with_masks(Tensor::new(vec![n, s, s], masks)?)
}
