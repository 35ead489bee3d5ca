use rand::Rng;

use super::layers::{BatchNorm2d, Cache, Conv2d, Layer, Linear, Mode, Param};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Ordered stack of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Vec<Cache<T>>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, cache) = layer.forward(&cur, mode)?;
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, caches: &[Cache<T>], grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = grad.clone();
        for (layer, cache) in self.layers.iter_mut().zip(caches).rev() {
            cur = layer.backward(cache, &cur)?;
        }
        Ok(cur)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape)?;
        }
        Ok(shape)
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm2d<T>> {
        self.layers.iter_mut().filter_map(Layer::batch_norm_mut)
    }

    /// `blocks` repetitions of conv3x3(pad 1) -> batchnorm -> relu -> maxpool.
    pub fn conv_blocks<R: Rng + ?Sized>(
        in_channels: usize,
        width: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(blocks * 4);
        let mut c = in_channels;
        for _ in 0..blocks {
            layers.push(Layer::Conv2d(Conv2d::new(c, width, (3, 3), 1, 1, rng).without_bias()));
            layers.push(Layer::BatchNorm2d(BatchNorm2d::new(width, 1e-5, 0.1)));
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool2);
            c = width;
        }
        Self { layers }
    }

    /// flatten -> linear(hidden) -> relu -> linear(classes)
    pub fn classifier_head<R: Rng + ?Sized>(
        in_features: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            layers: vec![
                Layer::Flatten,
                Layer::Linear(Linear::new(in_features, hidden, rng)),
                Layer::Relu,
                Layer::Linear(Linear::new(hidden, classes, rng)),
            ],
        }
    }
}
