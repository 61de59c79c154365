use serde::{Deserialize, Serialize};

use super::{AttributionMap, Explainer, Provenance, SaliencyMap};
use crate::error::{Error, Result};
use crate::netzoo::analysis::has_bias;
use crate::netzoo::Checkpoint;
use crate::resize::{resize_map, ResizeMode};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// Transform the channel-summed map.
    #[default]
    PerLayer,
    /// Transform each feature map on its own, then sum.
    PerFeature,
}

/// Settings of the abs, rescale, upscale pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsiConfig {
    pub use_abs: bool,
    pub use_rescale: bool,
    #[serde(default)]
    pub resize: ResizeMode,
    #[serde(default)]
    pub granularity: Granularity,
}

impl Default for PsiConfig {
    fn default() -> Self {
        Self::aggregate()
    }
}

impl PsiConfig {
    /// abs, rescale, bilinear on channel sums: the layer-aggregation pipeline.
    pub fn aggregate() -> Self {
        Self {
            use_abs: true,
            use_rescale: true,
            resize: ResizeMode::Bilinear,
            granularity: Granularity::PerLayer,
        }
    }

    /// abs and bilinear without rescale, for single-layer comparisons.
    pub fn single_layer() -> Self {
        Self {
            use_rescale: false,
            ..Self::aggregate()
        }
    }

    /// Per-feature abs, rescale, bilinear.
    pub fn fullgrad() -> Self {
        Self {
            granularity: Granularity::PerFeature,
            ..Self::aggregate()
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.use_abs && !self.use_rescale {
            return Err(Error::invalid("psi needs abs or rescale to produce a non-negative map"));
        }
        Ok(())
    }
}

/// Min-max rescale onto `[0, 1]`; a constant input maps to all zeros.
pub fn rescale(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn transform(plane: &[f64], grid: (usize, usize), cfg: &PsiConfig, target: (usize, usize)) -> Result<Tensor> {
    let mut v: Vec<f64> = if cfg.use_abs {
        plane.iter().map(|x| x.abs()).collect()
    } else {
        plane.to_vec()
    };
    if cfg.use_rescale {
        v = rescale(&v);
    }
    resize_map(&Tensor::new(vec![grid.0, grid.1], v)?, target, cfg.resize)
}

/// Transforms `map` into an input-sized, non-negative saliency contribution.
pub fn psi(map: &AttributionMap, cfg: &PsiConfig, target: (usize, usize)) -> Result<SaliencyMap> {
    cfg.validate()?;
    let grid = map.grid();
    let values = match cfg.granularity {
        Granularity::PerLayer => transform(map.values.data(), grid, cfg, target)?,
        Granularity::PerFeature => {
            let n = grid.0 * grid.1;
            let mut acc = Tensor::zeros(&[target.0, target.1]);
            for plane in map.features.data().chunks(n) {
                acc = acc.add(&transform(plane, grid, cfg, target)?)?;
            }
            acc
        }
    };
    SaliencyMap::new(
        values,
        Provenance {
            method: format!("psi:{}:{}", map.kind_name(), map.layer),
            layers: vec![map.layer],
            psi: Some(*cfg),
            warning: map.warning.clone(),
        },
    )
}

fn accumulate(acc: Option<Tensor>, s: SaliencyMap) -> Result<Option<Tensor>> {
    Ok(Some(match acc {
        Some(a) => a.add(s.values())?,
        None => s.values().clone(),
    }))
}

impl Explainer {
    /// `Psi(a) + sum_l Psi(a^{b,l})` with abs, rescale and bilinear upscaling.
    pub fn fullgrad(&self, granularity: Granularity, bias_free: bool) -> Result<SaliencyMap> {
        let cfg = PsiConfig {
            granularity,
            ..PsiConfig::fullgrad()
        };
        let target = self.input_grid();
        let mut acc = accumulate(None, psi(&self.gradient_times_input(), &cfg, target)?)?;
        let mut layers = vec![0];
        for l in 1..=self.depth() {
            acc = accumulate(acc, psi(&self.bias(l)?, &cfg, target)?)?;
            layers.push(l);
        }
        let method = match granularity {
            Granularity::PerFeature => "fullgrad:per-feature",
            Granularity::PerLayer => "fullgrad:per-layer",
        };
        SaliencyMap::new(
            acc.expect("input term"),
            Provenance {
                method: method.into(),
                layers,
                psi: Some(cfg),
                warning: bias_free.then(|| "network has no nonzero biases; only the input term remains".into()),
            },
        )
    }

    /// `sum_{l = l0}^{L} Psi(a^{h,l})`, where `a^{h,0}` is gradient times input.
    pub fn aggregate_activity(&self, l0: usize, cfg: &PsiConfig) -> Result<SaliencyMap> {
        let depth = self.depth();
        if l0 > depth {
            return Err(Error::invalid(format!("l0 = {l0} outside 0..={depth}")));
        }
        let target = self.input_grid();
        let mut acc = None;
        for l in l0..=depth {
            acc = accumulate(acc, psi(&self.activity(l)?, cfg, target)?)?;
        }
        SaliencyMap::new(
            acc.expect("at least one layer"),
            Provenance {
                method: format!("agg:{l0}"),
                layers: (l0..=depth).collect(),
                psi: Some(*cfg),
                warning: None,
            },
        )
    }
}

pub fn fullgrad_saliency(ck: &Checkpoint, x: &Tensor, c: usize, granularity: Granularity) -> Result<SaliencyMap> {
    Explainer::new(ck, x, c)?.fullgrad(granularity, !has_bias(ck))
}

pub fn aggregate_activity_saliency(
    ck: &Checkpoint,
    x: &Tensor,
    c: usize,
    l0: usize,
    cfg: &PsiConfig,
) -> Result<SaliencyMap> {
    Explainer::new(ck, x, c)?.aggregate_activity(l0, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionKind;

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale(&[-2.0, 0.0, 2.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(rescale(&[3.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn per_feature_rescales_each_plane() {
        let f = Tensor::new(vec![2, 1, 2], vec![0.0, 1.0, 0.0, 100.0]).unwrap();
        let m = AttributionMap::from_features(0, 1, AttributionKind::Bias, f).unwrap();
        let s = psi(&m, &PsiConfig::fullgrad(), (1, 2)).unwrap();
        assert_eq!(s.values().data(), &[0.0, 2.0]);
        let s = psi(&m, &PsiConfig::aggregate(), (1, 2)).unwrap();
        assert_eq!(s.values().data(), &[0.0, 1.0]);
    }

    #[test]
    fn signed_output_config_rejected() {
        let m = AttributionMap::from_features(0, 0, AttributionKind::Activity, Tensor::zeros(&[1, 1, 1])).unwrap();
        let cfg = PsiConfig {
            use_abs: false,
            use_rescale: false,
            ..PsiConfig::aggregate()
        };
        assert!(psi(&m, &cfg, (1, 1)).is_err());
    }
}
