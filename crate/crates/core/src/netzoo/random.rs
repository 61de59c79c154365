//! Random small architectures and inputs for property checks.

use rand::Rng;

use super::spec::{InputShape, LayerSpec, NetworkSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpecSampler {
    pub max_extent: usize,
    pub max_channels: usize,
    pub classes: usize,
    pub bias: bool,
    pub batchnorm: bool,
    pub residual: bool,
    pub maxpool: bool,
}

impl Default for SpecSampler {
    fn default() -> Self {
        Self {
            max_extent: 6,
            max_channels: 3,
            classes: 3,
            bias: true,
            batchnorm: true,
            residual: true,
            maxpool: true,
        }
    }
}

impl SpecSampler {
    /// Plain conv/ReLU nets without batchnorm or skip connections.
    pub fn plain(bias: bool) -> Self {
        Self {
            bias,
            batchnorm: false,
            residual: false,
            ..Self::default()
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> NetworkSpec {
        let extent = rng.random_range(3..=self.max_extent.max(3));
        let input = InputShape::new(extent, rng.random_range(3..=self.max_extent.max(3)), rng.random_range(1..=2));
        let mut layers = Vec::new();
        let mut size = input.height.min(input.width);
        let mut channels;
        for stage in 0..rng.random_range(1..=2) {
            channels = rng.random_range(1..=self.max_channels);
            let kernel = if size >= 3 && rng.random_bool(0.7) { 3 } else { 1 };
            layers.push(LayerSpec::conv(channels, kernel, 1, kernel / 2, self.bias));
            if self.batchnorm && rng.random_bool(0.5) {
                layers.push(LayerSpec::batchnorm());
            }
            layers.push(LayerSpec::Relu);
            if self.residual && rng.random_bool(0.5) {
                let mut body = vec![LayerSpec::conv(channels, 3, 1, 1, self.bias)];
                if self.batchnorm {
                    body.push(LayerSpec::batchnorm());
                }
                body.push(LayerSpec::Relu);
                body.push(LayerSpec::conv(channels, 1, 1, 0, self.bias));
                layers.push(LayerSpec::Residual { body });
                layers.push(LayerSpec::Relu);
            }
            if self.maxpool && size >= 4 && stage == 0 && rng.random_bool(0.5) {
                layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
                size /= 2;
            }
        }
        layers.push(LayerSpec::Flatten);
        if rng.random_bool(0.5) {
            layers.push(LayerSpec::dense(rng.random_range(2..=6), self.bias));
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::dense(self.classes, self.bias));
        NetworkSpec {
            name: "random".into(),
            input,
            classes: self.classes,
            layers,
        }
    }
}

/// `H x W x C` image with entries uniform in `[0, 1)`.
pub fn random_image(rng: &mut impl Rng, input: InputShape) -> Tensor {
    let data = (0..input.len()).map(|_| rng.random::<f64>()).collect();
    Tensor::new(vec![input.height, input.width, input.channels], data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sampled_specs_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let spec = SpecSampler::default().sample(&mut rng);
            spec.layout().unwrap();
        }
    }
}
