use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool, Param, Relu};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::features::N_FEATURES;
use crate::imaging::IMAGE_SIZE;

/// Height and width of a feature map.
pub type Hw = (usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub cnn_filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub pools: Vec<usize>,
    pub padding: usize,
    pub stride: usize,
    pub dilation: usize,
    pub feature_nn: Vec<usize>,
    pub prediction_nn: Vec<usize>,
    pub cnn_flatten_out: usize,
    /// Channels, height, width.
    pub input_image: [usize; 3],
    pub input_features: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            cnn_filters: vec![32, 16, 16, 16, 10, 1],
            kernels: vec![5, 3, 3, 3, 3, 2],
            pools: vec![2; 6],
            padding: 3,
            stride: 1,
            dilation: 1,
            feature_nn: vec![256, 128, 64, 32],
            prediction_nn: vec![16],
            cnn_flatten_out: 32,
            input_image: [1, 2 * IMAGE_SIZE, IMAGE_SIZE],
            input_features: N_FEATURES,
        }
    }
}

impl ArchitectureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("architecture: {m}")));
        let n = self.cnn_filters.len();
        if n == 0 || self.kernels.len() != n || self.pools.len() != n {
            return bad("cnn_filters, kernels and pools must have the same non-zero length".into());
        }
        if self.stride != 1 || self.dilation != 1 {
            return bad("only stride 1 and dilation 1 are supported".into());
        }
        let sizes = self
            .cnn_filters
            .iter()
            .chain(&self.kernels)
            .chain(&self.pools)
            .chain(&self.feature_nn)
            .chain(&self.prediction_nn)
            .chain(&self.input_image)
            .chain([&self.cnn_flatten_out, &self.input_features]);
        if sizes.into_iter().any(|v| *v == 0) {
            return bad("all sizes must be at least 1".into());
        }
        if self.feature_nn.is_empty() {
            return bad("feature_nn needs at least one layer".into());
        }
        self.block_shapes().map(|_| ())
    }

    /// `(conv_hw, pooled_hw)` per convolution block.
    pub fn block_shapes(&self) -> Result<Vec<(Hw, Hw)>> {
        let (mut h, mut w) = (self.input_image[1], self.input_image[2]);
        let mut out = Vec::new();
        for (i, (&k, &p)) in self.kernels.iter().zip(&self.pools).enumerate() {
            let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
            if hp < k || wp < k {
                return Err(Error::Validation(format!("architecture: block {i} kernel exceeds its input")));
            }
            let conv = (hp - k + 1, wp - k + 1);
            let pooled = (conv.0 / p, conv.1 / p);
            if pooled.0 == 0 || pooled.1 == 0 {
                return Err(Error::Validation(format!("architecture: block {i} pools to an empty map")));
            }
            out.push((conv, pooled));
            (h, w) = pooled;
        }
        Ok(out)
    }

    /// Length of the flattened convolutional output.
    pub fn flatten_len(&self) -> Result<usize> {
        let (h, w) = self.block_shapes()?.last().expect("validated non-empty").1;
        Ok(self.cnn_filters.last().expect("validated non-empty") * h * w)
    }

    pub fn image_len(&self) -> usize {
        self.input_image.iter().product()
    }
}

type Section<T> = Vec<(String, Layer<T>)>;

/// The three-path regressor: convolutional image path, dense feature path,
/// and the prediction head over their concatenation.
///
/// The network regresses a standardized target; a fixed affine map on the
/// output converts it back to dB.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    arch: ArchitectureConfig,
    cnn: Section<T>,
    feature: Section<T>,
    prediction: Section<T>,
    /// `[scale, shift]` applied to the raw network output.
    output: Vec<T>,
}

impl<T: Real> Model<T> {
    pub fn new(arch: ArchitectureConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cnn = Vec::new();
        let mut channels = arch.input_image[0];
        for (i, ((&f, &k), &p)) in arch.cnn_filters.iter().zip(&arch.kernels).zip(&arch.pools).enumerate() {
            let mut conv = Conv2d::new(channels, f, k, arch.padding, &mut rng);
            conv.propagate_input_grad = i > 0;
            cnn.push((format!("cnn.{i}.conv"), Layer::Conv(conv)));
            cnn.push((format!("cnn.{i}.relu"), Layer::Relu(Relu::default())));
            cnn.push((format!("cnn.{i}.bn"), Layer::BatchNorm(BatchNorm::new(f))));
            cnn.push((format!("cnn.{i}.pool"), Layer::MaxPool(MaxPool::new(p))));
            channels = f;
        }
        let flat = arch.flatten_len()?;
        cnn.push(("cnn.flatten".into(), Layer::Linear(Linear::new(flat, arch.cnn_flatten_out, &mut rng))));

        let mut feature = Vec::new();
        let mut width = arch.input_features;
        for (i, &u) in arch.feature_nn.iter().enumerate() {
            feature.push((format!("feature.{i}.linear"), Layer::Linear(Linear::new(width, u, &mut rng))));
            feature.push((format!("feature.{i}.relu"), Layer::Relu(Relu::default())));
            feature.push((format!("feature.{i}.bn"), Layer::BatchNorm(BatchNorm::new(u))));
            width = u;
        }

        let mut prediction = Vec::new();
        let mut width = arch.cnn_flatten_out + width;
        for (i, &u) in arch.prediction_nn.iter().enumerate() {
            prediction.push((format!("prediction.{i}.linear"), Layer::Linear(Linear::new(width, u, &mut rng))));
            prediction.push((format!("prediction.{i}.relu"), Layer::Relu(Relu::default())));
            width = u;
        }
        prediction.push(("prediction.out".into(), Layer::Linear(Linear::new(width, 1, &mut rng))));

        Ok(Model {
            arch,
            cnn,
            feature,
            prediction,
            output: vec![T::one(), T::zero()],
        })
    }

    pub fn architecture(&self) -> &ArchitectureConfig {
        &self.arch
    }

    pub fn set_output_affine(&mut self, scale: f64, shift: f64) {
        self.output = vec![T::of(scale), T::of(shift)];
    }

    pub fn output_affine(&self) -> (f64, f64) {
        (self.output[0].as_f64(), self.output[1].as_f64())
    }

    fn check_inputs(&self, images: &Tensor<T>, features: &Tensor<T>) -> Result<usize> {
        let n = images.batch();
        let [c, h, w] = self.arch.input_image;
        if images.shape() != [n, c, h, w] {
            return Err(Error::Shape(format!(
                "images must be [N, {c}, {h}, {w}], got {:?}",
                images.shape()
            )));
        }
        if features.shape() != [n, self.arch.input_features] {
            return Err(Error::Shape(format!(
                "features must be [{n}, {}], got {:?}",
                self.arch.input_features,
                features.shape()
            )));
        }
        Ok(n)
    }

    /// Training-mode (or caching) forward; `train` selects batch statistics
    /// and keeps what the backward pass needs.
    pub fn forward(&mut self, images: Tensor<T>, features: Tensor<T>, train: bool) -> Result<Tensor<T>> {
        self.check_inputs(&images, &features)?;
        let a = run_mut(&mut self.cnn, images, train)?;
        let b = run_mut(&mut self.feature, features, train)?;
        let joined = concat_columns(&a, &b)?;
        let raw = run_mut(&mut self.prediction, joined, train)?;
        self.scale_output(raw)
    }

    /// Inference-mode forward. Per-sample outputs do not depend on the batch.
    pub fn infer(&self, images: Tensor<T>, features: Tensor<T>) -> Result<Tensor<T>> {
        self.infer_traced(images, features, &mut Vec::new())
    }

    /// Inference forward that also records the output shape of every layer.
    pub fn infer_traced(
        &self,
        images: Tensor<T>,
        features: Tensor<T>,
        trace: &mut Vec<(String, Vec<usize>)>,
    ) -> Result<Tensor<T>> {
        self.check_inputs(&images, &features)?;
        let a = run(&self.cnn, images, trace)?;
        let b = run(&self.feature, features, trace)?;
        let joined = concat_columns(&a, &b)?;
        let raw = run(&self.prediction, joined, trace)?;
        self.scale_output(raw)
    }

    fn scale_output(&self, mut raw: Tensor<T>) -> Result<Tensor<T>> {
        let (s, b) = (self.output[0], self.output[1]);
        raw.data_mut().iter_mut().for_each(|v| *v = *v * s + b);
        Ok(raw)
    }

    /// Accumulates parameter gradients of `sum(dout * output)` and returns the
    /// gradient with respect to the feature input.
    pub fn backward(&mut self, dout: Tensor<T>) -> Result<Tensor<T>> {
        let scale = self.output[0];
        let mut d = dout;
        d.data_mut().iter_mut().for_each(|v| *v *= scale);
        let dj = back(&mut self.prediction, d)?.expect("prediction head ends in linear layers");
        let (da, db) = split_columns(&dj, self.arch.cnn_flatten_out)?;
        back(&mut self.cnn, da)?;
        Ok(back(&mut self.feature, db)?.expect("feature path propagates"))
    }

    pub fn zero_grad(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Trainable parameters in a fixed order, with qualified names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.cnn.iter_mut().chain(&mut self.feature).chain(&mut self.prediction) {
            for (p, param) in layer.params_mut() {
                out.push((format!("{name}.{p}"), param));
            }
        }
        out
    }

    /// Every array a checkpoint stores: parameters, running statistics and
    /// the output affine map.
    pub fn state_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out = Vec::new();
        for (name, layer) in self.cnn.iter_mut().chain(&mut self.feature).chain(&mut self.prediction) {
            for (p, v) in layer.state_mut() {
                out.push((format!("{name}.{p}"), v));
            }
        }
        out.push(("output.affine".into(), &mut self.output));
        out
    }

    pub fn num_params(&mut self) -> usize {
        self.params_mut().iter().map(|(_, p)| p.value.len()).sum()
    }

    /// Converts the parameters and state to another precision.
    pub fn cast<U: Real>(&mut self) -> Model<U> {
        let mut other = Model::<U>::new(self.arch.clone(), 0).expect("architecture already validated");
        let src: Vec<Vec<f64>> = self.state_mut().into_iter().map(|(_, v)| v.iter().map(|x| x.as_f64()).collect()).collect();
        for ((_, dst), s) in other.state_mut().into_iter().zip(src) {
            *dst = s.into_iter().map(U::of).collect();
        }
        other
    }
}

fn check_finite<T: Real>(name: &str, t: &Tensor<T>) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::Numeric {
            layer: name.to_string(),
            message: "non-finite activation".into(),
        });
    }
    Ok(())
}

fn run_mut<T: Real>(section: &mut Section<T>, mut x: Tensor<T>, train: bool) -> Result<Tensor<T>> {
    for (name, layer) in section.iter_mut() {
        x = layer.forward(x, train)?;
        check_finite(name, &x)?;
    }
    Ok(x)
}

fn run<T: Real>(section: &Section<T>, mut x: Tensor<T>, trace: &mut Vec<(String, Vec<usize>)>) -> Result<Tensor<T>> {
    for (name, layer) in section {
        x = layer.infer(x)?;
        check_finite(name, &x)?;
        trace.push((name.clone(), x.shape().to_vec()));
    }
    Ok(x)
}

fn back<T: Real>(section: &mut Section<T>, dy: Tensor<T>) -> Result<Option<Tensor<T>>> {
    let mut d = Some(dy);
    for (name, layer) in section.iter_mut().rev() {
        let Some(g) = d.take() else { break };
        d = layer.backward(g)?;
        for (p, param) in layer.params_mut() {
            if param.grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    layer: name.clone(),
                    message: format!("non-finite gradient in `{p}`"),
                });
            }
        }
    }
    Ok(d)
}

fn concat_columns<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let n = a.batch();
    let (ca, cb) = (a.len() / n.max(1), b.len() / n.max(1));
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::new(vec![n, ca + cb], out)
}

fn split_columns<T: Real>(x: &Tensor<T>, left: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let n = x.batch();
    let c = x.shape()[1];
    let mut a = Vec::with_capacity(n * left);
    let mut b = Vec::with_capacity(n * (c - left));
    for row in x.data().chunks_exact(c) {
        a.extend_from_slice(&row[..left]);
        b.extend_from_slice(&row[left..]);
    }
    Ok((Tensor::new(vec![n, left], a)?, Tensor::new(vec![n, c - left], b)?))
}
