//! Gradient-based attributions, their decompositions and saliency maps.

mod explainer;
mod psi;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use explainer::{
    activity_attribution, bias_attribution, decomposition_report, gradcam_attribution, gradient_saliency,
    gradient_times_input, Explainer,
};
pub use psi::{aggregate_activity_saliency, fullgrad_saliency, psi, rescale, Granularity, PsiConfig};
pub use render::{encode_ppm, heatmap_rgb, render_heatmap, ColorScale, Overlay};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttributionKind {
    Activity,
    Bias,
    GradCam,
}

/// Signed, channel-summed attribution on the spatial grid of layer `layer`
/// (0 is the input).
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub class: usize,
    pub layer: usize,
    pub kind: AttributionKind,
    /// `H_l x W_l`.
    pub values: Tensor,
    /// Per-feature contributions `|Phi^l| x H_l x W_l`; `values` is their sum over features.
    pub features: Tensor,
    pub warning: Option<String>,
}

impl AttributionMap {
    pub(crate) fn from_features(class: usize, layer: usize, kind: AttributionKind, features: Tensor) -> Result<Self> {
        let [f, h, w] = match *features.shape() {
            [f, h, w] => [f, h, w],
            _ => {
                return Err(Error::shape(
                    "attribution",
                    "features",
                    format!("expected F x H x W, got {:?}", features.shape()),
                ))
            }
        };
        let src = features.data();
        let mut values = vec![0.0; h * w];
        for phi in 0..f {
            for (v, s) in values.iter_mut().zip(&src[phi * h * w..(phi + 1) * h * w]) {
                *v += s;
            }
        }
        Ok(Self {
            class,
            layer,
            kind,
            values: Tensor::new(vec![h, w], values)?,
            features,
            warning: None,
        })
    }

    /// Gross sum over the grid.
    pub fn total(&self) -> f64 {
        self.values.sum()
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[0], s[1])
    }

    /// `|a|` read as a saliency map at the map's own resolution.
    pub fn abs_saliency(&self) -> SaliencyMap {
        SaliencyMap {
            values: self.values.map(f64::abs),
            provenance: Provenance::new(format!("abs:{}:{}", self.kind_name(), self.layer)),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            AttributionKind::Activity => "activity",
            AttributionKind::Bias => "bias",
            AttributionKind::GradCam => "gradcam",
        }
    }
}

/// Description of how a saliency map was produced.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    #[serde(default)]
    pub layers: Vec<usize>,
    #[serde(default)]
    pub psi: Option<PsiConfig>,
    #[serde(default)]
    pub warning: Option<String>,
}

impl Provenance {
    pub fn new(method: impl Into<String>) -> Self {
        Self {
            method: method.into(),
            ..Self::default()
        }
    }
}

/// Non-negative map ranking pixel importance.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    values: Tensor,
    pub provenance: Provenance,
}

impl SaliencyMap {
    pub fn new(values: Tensor, provenance: Provenance) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape(
                "saliency",
                "values",
                format!("expected H x W, got {:?}", values.shape()),
            ));
        }
        if let Some(v) = values.data().iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::invalid(format!("saliency value {v} is negative or NaN")));
        }
        Ok(Self { values, provenance })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        let s = self.values.shape();
        (s[0], s[1])
    }
}

/// Gross sums of every decomposition `f_c = A^{h,l} + sum_{l' > l} A^{b,l'}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub class: usize,
    pub logit: f64,
    /// `A^{h,l}` for `l = 0..=L`; entry 0 is the gradient-times-input sum.
    pub activity_sums: Vec<f64>,
    /// `A^{b,l}` for `l = 0..=L` from the spatial maps; entry 0 is always 0.
    pub bias_sums: Vec<f64>,
    /// `A^{b,l}` from the parameter view (value times total gradient).
    pub bias_param_sums: Vec<f64>,
    /// `|f_c - (A^{h,l} + sum_{l' > l} A^{b,l'})|` for `l = 0..=L`.
    pub residuals: Vec<f64>,
}

impl DecompositionReport {
    pub fn depth(&self) -> usize {
        self.activity_sums.len() - 1
    }

    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}
