//! Perturb-until-flip and the noise-matched reference.

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::SaliencyMap;
use crate::error::{Error, Result};
use crate::netzoo::network::image_to_nchw;
use crate::netzoo::Checkpoint;
use crate::tensor::Tensor;

/// Order in which pixels are removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Least salient first (`-s`).
    #[default]
    LeastFirst,
    /// Most salient first (`+s`).
    MostFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbConfig {
    #[serde(default)]
    pub direction: Direction,
    /// Fraction of pixels removed per step.
    #[serde(default = "default_step")]
    pub step_fraction: f64,
    /// Value written into every channel of a removed pixel.
    #[serde(default)]
    pub removal_value: f64,
    /// Stop after removing this fraction of pixels.
    #[serde(default = "default_max")]
    pub max_fraction: f64,
}

fn default_step() -> f64 {
    0.01
}

fn default_max() -> f64 {
    1.0
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            direction: Direction::LeastFirst,
            step_fraction: default_step(),
            removal_value: 0.0,
            max_fraction: default_max(),
        }
    }
}

impl PerturbConfig {
    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return Err(Error::invalid(format!("step fraction {} outside (0, 1]", self.step_fraction)));
        }
        if !(self.max_fraction > 0.0 && self.max_fraction <= 1.0) {
            return Err(Error::invalid(format!("max fraction {} outside (0, 1]", self.max_fraction)));
        }
        if !self.removal_value.is_finite() {
            return Err(Error::invalid("removal value must be finite"));
        }
        Ok(())
    }

    /// Pixels removed per step for an image of `pixels` pixels.
    pub fn batch_size(&self, pixels: usize) -> usize {
        ((self.step_fraction * pixels as f64 - 1e-9).ceil() as usize).clamp(1, pixels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbOutcome {
    /// `1 - |x_s| / |x|` at the first flipped image; 1 if nothing flipped.
    pub e: f64,
    pub flipped: bool,
    /// Removal steps taken (including the flipping one).
    pub steps: usize,
    /// `e` after each step.
    pub trajectory: Vec<f64>,
}

/// Pixel indices (row-major) in removal order; ties keep row-major order.
pub fn removal_order(s: &SaliencyMap, direction: Direction) -> Vec<usize> {
    let v = s.values().data();
    let mut idx: Vec<usize> = (0..v.len()).collect();
    match direction {
        Direction::LeastFirst => idx.sort_by(|&a, &b| v[a].total_cmp(&v[b])),
        Direction::MostFirst => idx.sort_by(|&a, &b| v[b].total_cmp(&v[a])),
    }
    idx
}

/// Steps evaluated per batched forward pass.
const LOOKAHEAD: usize = 8;

/// Removes pixels of `x` (`H x W x C`) in saliency order until the predicted
/// class changes.
pub fn perturb_until_flip(ck: &Checkpoint, x: &Tensor, s: &SaliencyMap, cfg: &PerturbConfig) -> Result<PerturbOutcome> {
    cfg.validate()?;
    let [h, w, c] = match *x.shape() {
        [h, w, c] => [h, w, c],
        _ => return Err(Error::shape("perturb", "image", format!("expected H x W x C, got {:?}", x.shape()))),
    };
    if s.grid() != (h, w) {
        return Err(Error::shape(
            "perturb",
            "saliency",
            format!("map is {:?}, image is {h}x{w}", s.grid()),
        ));
    }
    let norm = x.norm_l2();
    if norm == 0.0 {
        return Err(Error::invalid("the image has zero norm; removal fraction is undefined"));
    }
    let class = ck.predict(x)?;
    let order = removal_order(s, cfg.direction);
    let pixels = h * w;
    let batch = cfg.batch_size(pixels);
    let limit = ((cfg.max_fraction * pixels as f64).round() as usize).clamp(1, pixels);

    let mut current = x.clone();
    let mut trajectory = Vec::new();
    let mut removed = 0;
    while removed < limit {
        // stage up to LOOKAHEAD successive steps and classify them together
        let mut staged = Vec::new();
        while staged.len() < LOOKAHEAD && removed < limit {
            let end = (removed + batch).min(limit);
            let data = current.data_mut();
            for &p in &order[removed..end] {
                data[p * c..(p + 1) * c].fill(cfg.removal_value);
            }
            removed = end;
            staged.push(current.clone());
        }
        let mut stacked = Vec::with_capacity(staged.len() * x.len());
        for img in &staged {
            stacked.extend_from_slice(image_to_nchw(img)?.data());
        }
        let logits = ck.forward_batch(&Tensor::new(vec![staged.len(), c, h, w], stacked)?)?;
        let k = ck.spec().classes;
        for (img, row) in staged.iter().zip(logits.data().chunks(k)) {
            let e = 1.0 - img.norm_l2() / norm;
            trajectory.push(e);
            let pred = Tensor::from_vec(row.to_vec()).argmax();
            if pred != class {
                return Ok(PerturbOutcome {
                    e,
                    flipped: true,
                    steps: trajectory.len(),
                    trajectory,
                });
            }
        }
    }
    Ok(PerturbOutcome {
        e: 1.0,
        flipped: false,
        steps: trajectory.len(),
        trajectory,
    })
}

/// Saliency maps of one method over several images, used as the null
/// distribution for that method.
#[derive(Clone, Debug, Default)]
pub struct NoisePool {
    entries: Vec<(usize, SaliencyMap)>,
}

impl NoisePool {
    pub fn new(entries: Vec<(usize, SaliencyMap)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Maps whose image id differs from `image_id`.
    pub fn candidates(&self, image_id: usize) -> Vec<&SaliencyMap> {
        self.entries.iter().filter(|(id, _)| *id != image_id).map(|(_, s)| s).collect()
    }
}

/// Seed for per-image draws, independent of evaluation order.
pub fn image_seed(seed: u64, image_id: usize) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ (image_id as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseReference {
    pub mean_e: f64,
    pub outcomes: Vec<PerturbOutcome>,
}

/// Indices into `pool.candidates(image_id)` of the `m` distinct draws.
pub fn noise_draws(pool: &NoisePool, image_id: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = pool.candidates(image_id).len();
    if n == 0 {
        return Err(Error::invalid("noise pool has no maps from other images"));
    }
    if m == 0 || m > n {
        return Err(Error::InsufficientData(format!(
            "need {m} noise draws but the pool offers {n} maps"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, image_id));
    Ok(sample(&mut rng, n, m).into_vec())
}

/// Mean `e` over `m` distinct maps drawn from `pool` (excluding `image_id`).
pub fn noise_reference(
    ck: &Checkpoint,
    x: &Tensor,
    image_id: usize,
    pool: &NoisePool,
    cfg: &PerturbConfig,
    m: usize,
    seed: u64,
) -> Result<NoiseReference> {
    let draws = noise_draws(pool, image_id, m, seed)?;
    let candidates = pool.candidates(image_id);
    let outcomes = draws
        .iter()
        .map(|&d| perturb_until_flip(ck, x, candidates[d], cfg))
        .collect::<Result<Vec<_>>>()?;
    // shifted mean: exact when every draw gives the same e
    let first = outcomes[0].e;
    let mean_e = first + outcomes.iter().map(|o| o.e - first).sum::<f64>() / outcomes.len() as f64;
    Ok(NoiseReference { mean_e, outcomes })
}
