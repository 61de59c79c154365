//! Architecture descriptions and their derived attribution layout.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Input image extents (`H x W x channels`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl InputShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        bias: bool,
    },
    Dense {
        units: usize,
        bias: bool,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    BatchNorm {
        #[serde(default = "default_bn_epsilon")]
        epsilon: f64,
    },
    Flatten,
    /// `output = input + body(input)`; the body must preserve the shape.
    Residual {
        body: Vec<LayerSpec>,
    },
}

fn one() -> usize {
    1
}

fn default_bn_epsilon() -> f64 {
    1e-5
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        }
    }

    pub fn dense(units: usize, bias: bool) -> Self {
        LayerSpec::Dense { units, bias }
    }

    pub fn batchnorm() -> Self {
        LayerSpec::BatchNorm {
            epsilon: default_bn_epsilon(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BatchNorm { .. } => "batchnorm_frozen",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Residual { .. } => "skip-add",
        }
    }

    fn is_parameterized(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } | LayerSpec::Residual { .. }
        )
    }
}

/// Activation shape between layers. Dense activations are reported as a
/// `units x 1 x 1` grid so every layer has a spatial map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActShape {
    Spatial { channels: usize, height: usize, width: usize },
    Flat { features: usize },
}

impl ActShape {
    pub fn features(&self) -> usize {
        match *self {
            ActShape::Spatial { channels, .. } => channels,
            ActShape::Flat { features } => features,
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        match *self {
            ActShape::Spatial { height, width, .. } => (height, width),
            ActShape::Flat { .. } => (1, 1),
        }
    }

    pub fn len(&self) -> usize {
        let (h, w) = self.grid();
        self.features() * h * w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input: InputShape,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// One attribution layer: a parameterized op (conv, dense, or a whole
/// skip-add block) together with the batchnorm/ReLU ops directly after it.
/// Its activity `h^l` is the output of the last absorbed op.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionLayer {
    /// 1-based attribution index `l`.
    pub index: usize,
    /// Top-level positions in `NetworkSpec::layers` belonging to this layer.
    pub ops: std::ops::Range<usize>,
    pub kind: &'static str,
    pub shape: ActShape,
    pub has_bias: bool,
}

impl AttributionLayer {
    pub fn is_spatial(&self) -> bool {
        matches!(self.shape, ActShape::Spatial { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub input: ActShape,
    pub layers: Vec<AttributionLayer>,
    /// Shape after every top-level op.
    pub op_shapes: Vec<ActShape>,
}

impl Layout {
    /// Depth `L`: number of attribution layers.
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, l: usize) -> Option<&AttributionLayer> {
        l.checked_sub(1).and_then(|i| self.layers.get(i))
    }

    /// Highest attribution layer with a real spatial grid.
    pub fn top_spatial_layer(&self) -> Option<usize> {
        self.layers.iter().rev().find(|l| l.is_spatial()).map(|l| l.index)
    }
}

pub(crate) fn infer(layer: &LayerSpec, shape: ActShape) -> std::result::Result<ActShape, String> {
    use ActShape::*;
    match (layer, shape) {
        (
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            },
            Spatial { height, width, .. },
        ) => {
            if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                return Err("conv extents must be positive".into());
            }
            let ph = height + 2 * padding;
            let pw = width + 2 * padding;
            if *kernel > ph || *kernel > pw {
                return Err(format!("kernel {kernel} exceeds padded input {ph}x{pw}"));
            }
            Ok(Spatial {
                channels: *out_channels,
                height: (ph - kernel) / stride + 1,
                width: (pw - kernel) / stride + 1,
            })
        }
        (LayerSpec::MaxPool { window, stride }, Spatial { channels, height, width }) => {
            if *window == 0 || *stride == 0 {
                return Err("maxpool window and stride must be positive".into());
            }
            if *window > height || *window > width {
                return Err(format!("window {window} larger than input {height}x{width}"));
            }
            Ok(Spatial {
                channels,
                height: (height - window) / stride + 1,
                width: (width - window) / stride + 1,
            })
        }
        (LayerSpec::Dense { units, .. }, Flat { .. }) => {
            if *units == 0 {
                return Err("dense units must be positive".into());
            }
            Ok(Flat { features: *units })
        }
        (LayerSpec::Flatten, s @ Spatial { .. }) => Ok(Flat { features: s.len() }),
        (LayerSpec::Relu | LayerSpec::BatchNorm { .. }, s) => Ok(s),
        (LayerSpec::Residual { body }, s) => {
            let mut inner = s;
            for (j, op) in body.iter().enumerate() {
                if matches!(op, LayerSpec::Residual { .. } | LayerSpec::Flatten) {
                    return Err(format!("residual body op {j} ({}) is not allowed", op.kind_name()));
                }
                inner = infer(op, inner).map_err(|e| format!("residual body op {j}: {e}"))?;
            }
            if inner != s {
                return Err(format!("skip-add arms differ: {s:?} vs {inner:?}"));
            }
            Ok(s)
        }
        (l, s) => Err(format!("{} cannot take {s:?} input", l.kind_name())),
    }
}

fn has_bias(layer: &LayerSpec) -> bool {
    match layer {
        LayerSpec::Conv { bias, .. } | LayerSpec::Dense { bias, .. } => *bias,
        LayerSpec::BatchNorm { .. } => true,
        LayerSpec::Residual { body } => body.iter().any(has_bias),
        _ => false,
    }
}

impl NetworkSpec {
    /// Checks that consecutive layers compose and derives the attribution layout.
    pub fn layout(&self) -> Result<Layout> {
        let InputShape {
            height,
            width,
            channels,
        } = self.input;
        if height == 0 || width == 0 || channels == 0 || self.classes == 0 {
            return Err(Error::invalid("input extents and class count must be positive"));
        }
        let input = ActShape::Spatial {
            channels,
            height,
            width,
        };
        let mut shape = input;
        let mut op_shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = infer(layer, shape).map_err(|detail| {
                let prev = if i == 0 {
                    "input".to_string()
                } else {
                    format!("layer {} ({})", i - 1, self.layers[i - 1].kind_name())
                };
                Error::invalid(format!(
                    "layer {i} ({}) cannot follow {prev}: {detail}",
                    layer.kind_name()
                ))
            })?;
            op_shapes.push(shape);
        }
        if shape != (ActShape::Flat { features: self.classes }) {
            return Err(Error::invalid(format!(
                "network ends in {shape:?}, expected {} flat logits",
                self.classes
            )));
        }

        let mut layers: Vec<AttributionLayer> = Vec::new();
        let mut i = 0;
        while i < self.layers.len() {
            let op = &self.layers[i];
            if op.is_parameterized() {
                let start = i;
                let mut bias = has_bias(op);
                i += 1;
                while let Some(next @ (LayerSpec::Relu | LayerSpec::BatchNorm { .. })) = self.layers.get(i) {
                    bias |= has_bias(next);
                    i += 1;
                }
                layers.push(AttributionLayer {
                    index: layers.len() + 1,
                    ops: start..i,
                    kind: op.kind_name(),
                    shape: op_shapes[i - 1],
                    has_bias: bias,
                });
            } else {
                if let LayerSpec::BatchNorm { .. } = op {
                    return Err(Error::invalid(format!(
                        "layer {i} (batchnorm_frozen) must directly follow a conv, dense or skip-add layer"
                    )));
                }
                i += 1;
            }
        }
        match layers.last() {
            Some(last) if last.ops.end == self.layers.len() => {}
            _ => {
                return Err(Error::invalid(
                    "the final op must belong to a parameterized layer producing the logits",
                ))
            }
        }
        Ok(Layout {
            input,
            layers,
            op_shapes,
        })
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Linear classifier over flattened pixels.
    pub fn linear(input: InputShape, classes: usize, bias: bool) -> Self {
        Self {
            name: "linear".into(),
            input,
            classes,
            layers: vec![LayerSpec::Flatten, LayerSpec::dense(classes, bias)],
        }
    }

    /// The bias-free linear digit classifier: dense 10 x 784.
    pub fn linear_mnist() -> Self {
        Self::linear(InputShape::new(28, 28, 1), 10, false)
    }

    /// Fully connected ReLU network.
    pub fn mlp(input: InputShape, hidden: &[usize], classes: usize, bias: bool) -> Self {
        let mut layers = vec![LayerSpec::Flatten];
        for &h in hidden {
            layers.push(LayerSpec::dense(h, bias));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::dense(classes, bias));
        Self {
            name: "mlp".into(),
            input,
            classes,
            layers,
        }
    }

    /// Three conv-ReLU-maxpool stages followed by a dense head.
    pub fn vgg_mini(input: InputShape, classes: usize, bias: bool) -> Self {
        let mut layers = Vec::new();
        for channels in [8, 16, 32] {
            layers.push(LayerSpec::conv(channels, 3, 1, 1, bias));
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::dense(classes, bias));
        Self {
            name: "vgg-mini".into(),
            input,
            classes,
            layers,
        }
    }

    /// Skip-add blocks with frozen batchnorm; downsampling by stride-2 convolutions.
    pub fn resnet_mini(input: InputShape, classes: usize) -> Self {
        let block = |c: usize| LayerSpec::Residual {
            body: vec![
                LayerSpec::conv(c, 3, 1, 1, false),
                LayerSpec::batchnorm(),
                LayerSpec::Relu,
                LayerSpec::conv(c, 3, 1, 1, false),
                LayerSpec::batchnorm(),
            ],
        };
        let layers = vec![
            LayerSpec::conv(8, 3, 1, 1, false),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            block(8),
            LayerSpec::Relu,
            LayerSpec::conv(16, 3, 2, 1, false),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            block(16),
            LayerSpec::Relu,
            LayerSpec::conv(32, 3, 2, 1, false),
            LayerSpec::batchnorm(),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(classes, true),
        ];
        Self {
            name: "resnet-mini".into(),
            input,
            classes,
            layers,
        }
    }
}
