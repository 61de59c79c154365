//! Saliency generators evaluated by the perturbation protocol.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::perturb::image_seed;
use crate::attribution::{psi, Explainer, Granularity, Provenance, PsiConfig, SaliencyMap};
use crate::error::{Error, Result};
use crate::netzoo::analysis::has_bias;
use crate::netzoo::{Checkpoint, Dataset};
use crate::tensor::Tensor;

/// Anything that produces an input-sized saliency map for image `id` of a dataset.
pub trait SaliencyMethod: Sync {
    fn name(&self) -> String;

    /// `explainer` explains the predicted class of `data.image(id)`.
    fn saliency(&self, ck: &Checkpoint, data: &Dataset, id: usize, explainer: &Explainer) -> Result<SaliencyMap>;
}

/// Built-in methods, parsed from names such as `gradient`, `activity:3` or
/// `fullgrad:per-feature`.
#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// `sum_phi |df/dx|`.
    Gradient,
    /// `Psi(gradient x input)`.
    GradientTimesInput,
    Activity(usize),
    Bias(usize),
    FullGrad(Granularity),
    /// Sum of `Psi(a^{h,l})` for `l >= l0`.
    Aggregate(usize),
    /// Rectified gradCAM at layer `l`.
    GradCam(usize),
    /// The dataset's ground-truth mask.
    Oracle,
    /// The ground-truth mask of a different image.
    ShuffledOracle,
    /// Independent uniform noise per pixel.
    Random(u64),
}

pub const METHOD_NAMES: &[&str] = &[
    "gradient",
    "gxi",
    "activity:<l>",
    "bias:<l>",
    "fullgrad:per-feature",
    "fullgrad:per-layer",
    "agg:<l0>",
    "gradcam:<l>",
    "oracle",
    "shuffled-oracle",
    "random[:<seed>]",
];

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gradient => write!(f, "gradient"),
            Method::GradientTimesInput => write!(f, "gxi"),
            Method::Activity(l) => write!(f, "activity:{l}"),
            Method::Bias(l) => write!(f, "bias:{l}"),
            Method::FullGrad(Granularity::PerFeature) => write!(f, "fullgrad:per-feature"),
            Method::FullGrad(Granularity::PerLayer) => write!(f, "fullgrad:per-layer"),
            Method::Aggregate(l) => write!(f, "agg:{l}"),
            Method::GradCam(l) => write!(f, "gradcam:{l}"),
            Method::Oracle => write!(f, "oracle"),
            Method::ShuffledOracle => write!(f, "shuffled-oracle"),
            Method::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::invalid(format!("unknown method {s:?}; valid: {}", METHOD_NAMES.join(", ")));
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let layer = || -> Result<usize> { arg.and_then(|a| a.parse().ok()).ok_or_else(unknown) };
        Ok(match (head, arg) {
            ("gradient", None) => Method::Gradient,
            ("gxi", None) => Method::GradientTimesInput,
            ("activity", _) => Method::Activity(layer()?),
            ("bias", _) => Method::Bias(layer()?),
            ("agg", _) => Method::Aggregate(layer()?),
            ("gradcam", _) => Method::GradCam(layer()?),
            ("fullgrad", Some("per-feature")) => Method::FullGrad(Granularity::PerFeature),
            ("fullgrad", Some("per-layer")) => Method::FullGrad(Granularity::PerLayer),
            ("oracle", None) => Method::Oracle,
            ("shuffled-oracle", None) => Method::ShuffledOracle,
            ("random", None) => Method::Random(0),
            ("random", Some(a)) => Method::Random(a.parse().map_err(|_| unknown())?),
            _ => return Err(unknown()),
        })
    }
}

impl Method {
    /// Checks layer indices against the network depth.
    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad = |what: &str, l: usize, lo: usize| {
            Err(Error::invalid(format!("{self}: {what} {l} outside {lo}..={depth}")))
        };
        match *self {
            Method::Activity(l) | Method::Aggregate(l) if l > depth => bad("layer", l, 0),
            Method::Bias(l) | Method::GradCam(l) if l == 0 || l > depth => bad("layer", l, 1),
            _ => Ok(()),
        }
    }
}

fn mask_saliency(data: &Dataset, id: usize, method: &str) -> Result<SaliencyMap> {
    let mask = data
        .mask(id)
        .ok_or_else(|| Error::invalid(format!("{method} needs a dataset with ground-truth masks")))?;
    SaliencyMap::new(mask, Provenance::new(method))
}

impl SaliencyMethod for Method {
    fn name(&self) -> String {
        self.to_string()
    }

    fn saliency(&self, ck: &Checkpoint, data: &Dataset, id: usize, ex: &Explainer) -> Result<SaliencyMap> {
        let target = ex.input_grid();
        let cfg = PsiConfig::aggregate();
        let with_name = |mut s: SaliencyMap| {
            s.provenance.method = self.to_string();
            s
        };
        Ok(match *self {
            Method::Gradient => ex.gradient_saliency(),
            Method::GradientTimesInput => with_name(psi(&ex.gradient_times_input(), &cfg, target)?),
            Method::Activity(l) => with_name(psi(&ex.activity(l)?, &cfg, target)?),
            Method::Bias(l) => with_name(psi(&ex.bias(l)?, &cfg, target)?),
            Method::FullGrad(g) => ex.fullgrad(g, !has_bias(ck))?,
            Method::Aggregate(l0) => ex.aggregate_activity(l0, &cfg)?,
            Method::GradCam(l) => with_name(psi(&ex.gradcam(l, true)?, &cfg, target)?),
            Method::Oracle => mask_saliency(data, id, "oracle")?,
            Method::ShuffledOracle => {
                if data.len() < 2 {
                    return Err(Error::InsufficientData("shuffled oracle needs two images".into()));
                }
                let other = (id + 1 + data.len() / 2) % data.len();
                let other = if other == id { (id + 1) % data.len() } else { other };
                mask_saliency(data, other, "shuffled-oracle")?
            }
            Method::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, id));
                let v = (0..target.0 * target.1).map(|_| rng.random::<f64>()).collect();
                SaliencyMap::new(Tensor::new(vec![target.0, target.1], v)?, Provenance::new(self.to_string()))?
            }
        })
    }
}
