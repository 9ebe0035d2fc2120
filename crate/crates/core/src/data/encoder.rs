//! A small fully-convolutional encoder: 3×3 convolutions with zero padding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T> {
    /// `[9 · in_channels, out_channels]`, row order `(ky, kx, in_channel)`.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub relu: bool,
}

impl<T: Real> ConvStage<T> {
    pub fn in_channels(&self) -> usize {
        self.weight.dims()[0] / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[1]
    }
}

/// Stage layout: `(out_channels, stride, relu)`.
pub type StageSpec = (usize, usize, bool);

#[derive(Debug, Clone, PartialEq)]
pub struct TinyEncoder<T> {
    pub stages: Vec<ConvStage<T>>,
}

/// Dense per-pixel embedding of one image: `features` is `[height·width, depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub features: Tensor<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn depth(&self) -> usize {
        self.features.cols()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

/// The encoder's parameters registered on a tape, stage by stage.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    pub stages: Vec<(Var, Var)>,
}

impl<T: Real> TinyEncoder<T> {
    /// Three stages, total stride 4, ReLU after the first two.
    pub fn default_layout(depth: usize) -> Vec<StageSpec> {
        vec![(16, 2, true), (32, 2, true), (depth, 1, false)]
    }

    /// Fan-in uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    pub fn new(in_channels: usize, layout: &[StageSpec], seed: u64) -> Result<Self> {
        if layout.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = in_channels;
        let mut stages = Vec::with_capacity(layout.len());
        for &(cout, stride, relu) in layout {
            if cout == 0 || stride == 0 {
                return Err(Error::Config(
                    "stage channels and stride must be positive".into(),
                ));
            }
            let fan_in = 9 * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            let weight =
                Tensor::from_fn(&[fan_in, cout], |_| T::lit(rng.random_range(-bound..bound)));
            stages.push(ConvStage {
                weight,
                bias: Tensor::zeros(&[cout]),
                stride,
                relu,
            });
            cin = cout;
        }
        Ok(Self { stages })
    }

    pub fn depth(&self) -> usize {
        self.stages.last().map_or(0, ConvStage::out_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }

    /// Spatial extent of the output for an input of the given size.
    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        self.stages.iter().fold((height, width), |(h, w), s| {
            (h.div_ceil(s.stride), w.div_ceil(s.stride))
        })
    }

    pub fn register(&self, graph: &mut Graph<T>, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        EncoderVars {
            stages: self
                .stages
                .iter()
                .map(|s| (leaf(&s.weight), leaf(&s.bias)))
                .collect(),
        }
    }

    /// Differentiable forward pass. `image` is an `[h, w, c]` node; the result
    /// is `[h'·w', depth]` with `(h', w') = output_dims(h, w)`.
    pub fn encode(&self, graph: &mut Graph<T>, vars: &EncoderVars, image: Var) -> Result<Var> {
        let dims = graph.value(image).dims().to_vec();
        let &[mut h, mut w, c] = dims.as_slice() else {
            return Err(Error::shape("encode", &dims, &[0, 0, 3]));
        };
        if c != self.stages[0].in_channels() {
            return Err(Error::shape(
                "encode",
                &dims,
                &[h, w, self.stages[0].in_channels()],
            ));
        }
        let mut x = image;
        for (stage, &(wv, bv)) in self.stages.iter().zip(&vars.stages) {
            let cols = graph.im2col3x3(x, stage.stride)?;
            let y = graph.matmul(cols, wv)?;
            let mut y = graph.add_row(y, bv)?;
            if stage.relu {
                y = graph.relu(y)?;
            }
            h = h.div_ceil(stage.stride);
            w = w.div_ceil(stage.stride);
            x = graph.reshape(y, &[h, w, stage.out_channels()])?;
        }
        graph.reshape(x, &[h * w, self.depth()])
    }

    /// Forward pass without gradients.
    pub fn encode_value(&self, image: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut graph = Graph::new();
        let vars = self.register(&mut graph, false);
        let x = graph.constant(image.clone());
        let f = self.encode(&mut graph, &vars, x)?;
        let (height, width) = self.output_dims(image.dims()[0], image.dims()[1]);
        Ok(FeatureMap {
            height,
            width,
            features: graph.value(f).clone(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.stages
            .iter()
            .all(|s| s.weight.all_finite() && s.bias.all_finite())
    }
}
