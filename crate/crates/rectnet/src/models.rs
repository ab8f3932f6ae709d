//! The two detector architectures: a hybrid CNN+LSTM classifier that
//! reads a patch stack as a slice sequence, and a multi-channel CNN
//! baseline that reads the whole stack at once.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::neural::checkpoint::{self, CheckpointMeta, TensorInfo};
use crate::neural::layers::{Conv2d, ConvCache, Dense, DenseCache, MaxPool2, PoolCache};
use crate::neural::loss::{SoftmaxCache, SoftmaxHead};
use crate::neural::lstm::{Lstm, LstmStepCache};
use crate::neural::params::{self, Tensors};
use crate::neural::scalar::Scalar;
use crate::neural::tensor::Image;
use crate::sampler::PatchStack;

pub const CLASSES: usize = 2;

/// One stage of a convolutional stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Conv { kernel: usize, maps: usize },
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectNetConfig {
    /// Patch edge M fed to the per-slice CNN.
    pub input_size: usize,
    /// Slices on each side of the center; sequence length is 2k+1.
    pub k: usize,
    pub stages: Vec<Stage>,
    /// Feature dimension produced by the CNN submodule.
    pub feature_dim: usize,
    /// Hidden units per LSTM layer (two layers).
    pub lstm_units: usize,
    /// The two fully connected layers after the LSTM.
    pub mlp: [usize; 2],
}

impl RectNetConfig {
    /// Full-scale configuration.
    pub fn paper() -> Self {
        RectNetConfig {
            input_size: 50,
            k: 3,
            stages: vec![
                Stage::Conv { kernel: 5, maps: 16 },
                Stage::Pool,
                Stage::Conv { kernel: 4, maps: 16 },
                Stage::Conv { kernel: 3, maps: 32 },
                Stage::Pool,
                Stage::Conv { kernel: 3, maps: 64 },
                Stage::Pool,
            ],
            feature_dim: 412,
            lstm_units: 612,
            mlp: [1024, 512],
        }
    }

    /// Reduced configuration that trains in minutes on synthetic volumes.
    pub fn desk() -> Self {
        RectNetConfig {
            input_size: 20,
            k: 3,
            stages: vec![
                Stage::Conv { kernel: 3, maps: 8 },
                Stage::Pool,
                Stage::Conv { kernel: 2, maps: 8 },
                Stage::Conv { kernel: 3, maps: 16 },
                Stage::Pool,
                Stage::Conv { kernel: 2, maps: 32 },
                Stage::Pool,
            ],
            feature_dim: 64,
            lstm_units: 48,
            mlp: [96, 48],
        }
    }

    pub fn depth(&self) -> usize {
        2 * self.k + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.feature_dim == 0 || self.lstm_units == 0 || self.mlp.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("zero-sized layer".into()));
        }
        conv_trace(self.input_size, 1, &self.stages)?;
        Ok(())
    }

    /// Flattened dimension entering the CNN's fully connected layer.
    pub fn flat_dim(&self) -> Result<usize> {
        let (maps, size) = conv_trace(self.input_size, 1, &self.stages)?;
        Ok(maps * size * size)
    }

    pub fn param_count(&self) -> Result<usize> {
        let mut total = conv_stack_params(1, &self.stages)?;
        total += dense_params(self.flat_dim()?, self.feature_dim);
        total += lstm_params(self.feature_dim, self.lstm_units);
        total += lstm_params(self.lstm_units, self.lstm_units);
        total += dense_params(self.depth() * self.lstm_units, self.mlp[0]);
        total += dense_params(self.mlp[0], self.mlp[1]);
        total += self.mlp[1] * CLASSES;
        Ok(total)
    }

    pub fn describe(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(
            out,
            "hybrid CNN+LSTM: {0}x{0} patches, {1} slices per stack",
            self.input_size,
            self.depth()
        )
        .unwrap();
        writeln!(out, "{:<18} {:<14} {:>10}", "layer", "output", "params").unwrap();
        let rows = describe_conv_stack(self.input_size, 1, &self.stages)?;
        let mut total = 0usize;
        for (name, shape, p) in rows {
            writeln!(out, "{name:<18} {shape:<14} {p:>10}").unwrap();
            total += p;
        }
        let flat = self.flat_dim()?;
        let fc = dense_params(flat, self.feature_dim);
        writeln!(out, "{:<18} {:<14} {fc:>10}", format!("fc {}", self.feature_dim), format!("{}", self.feature_dim)).unwrap();
        total += fc;
        let l1 = lstm_params(self.feature_dim, self.lstm_units);
        writeln!(out, "{:<18} {:<14} {l1:>10}", format!("lstm {}", self.lstm_units), format!("{} x {}", self.depth(), self.lstm_units)).unwrap();
        total += l1;
        let l2 = lstm_params(self.lstm_units, self.lstm_units);
        writeln!(out, "{:<18} {:<14} {l2:>10}", format!("lstm {}", self.lstm_units), format!("{} x {}", self.depth(), self.lstm_units)).unwrap();
        total += l2;
        let m1 = dense_params(self.depth() * self.lstm_units, self.mlp[0]);
        writeln!(out, "{:<18} {:<14} {m1:>10}", format!("fc {}", self.mlp[0]), format!("{}", self.mlp[0])).unwrap();
        total += m1;
        let m2 = dense_params(self.mlp[0], self.mlp[1]);
        writeln!(out, "{:<18} {:<14} {m2:>10}", format!("fc {}", self.mlp[1]), format!("{}", self.mlp[1])).unwrap();
        total += m2;
        let h = self.mlp[1] * CLASSES;
        writeln!(out, "{:<18} {:<14} {h:>10}", "softmax 2", "2").unwrap();
        total += h;
        writeln!(out, "total parameters: {total}").unwrap();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnBaselineConfig {
    pub input_size: usize,
    /// The 2k+1 slices enter as input channels.
    pub k: usize,
    pub stages: Vec<Stage>,
    /// The two fully connected layers after the convolutional stack.
    pub fc: [usize; 2],
}

impl CnnBaselineConfig {
    pub fn paper() -> Self {
        CnnBaselineConfig {
            input_size: 50,
            k: 3,
            stages: vec![
                Stage::Conv { kernel: 5, maps: 32 },
                Stage::Conv { kernel: 3, maps: 32 },
                Stage::Pool,
                Stage::Conv { kernel: 3, maps: 64 },
                Stage::Conv { kernel: 3, maps: 64 },
                Stage::Pool,
                Stage::Conv { kernel: 2, maps: 96 },
                Stage::Pool,
            ],
            fc: [816, 412],
        }
    }

    pub fn desk() -> Self {
        CnnBaselineConfig {
            input_size: 20,
            k: 3,
            stages: vec![
                Stage::Conv { kernel: 2, maps: 8 },
                Stage::Conv { kernel: 2, maps: 8 },
                Stage::Pool,
                Stage::Conv { kernel: 2, maps: 16 },
                Stage::Conv { kernel: 2, maps: 16 },
                Stage::Pool,
                Stage::Conv { kernel: 2, maps: 32 },
                Stage::Pool,
            ],
            fc: [96, 64],
        }
    }

    pub fn depth(&self) -> usize {
        2 * self.k + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.fc.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("zero-sized layer".into()));
        }
        conv_trace(self.input_size, self.depth(), &self.stages)?;
        Ok(())
    }

    pub fn flat_dim(&self) -> Result<usize> {
        let (maps, size) = conv_trace(self.input_size, self.depth(), &self.stages)?;
        Ok(maps * size * size)
    }

    pub fn param_count(&self) -> Result<usize> {
        let mut total = conv_stack_params(self.depth(), &self.stages)?;
        total += dense_params(self.flat_dim()?, self.fc[0]);
        total += dense_params(self.fc[0], self.fc[1]);
        total += self.fc[1] * CLASSES;
        Ok(total)
    }

    pub fn describe(&self) -> Result<String> {
        let mut out = String::new();
        writeln!(
            out,
            "multi-channel CNN: {0}x{0} patches, {1} slices as channels",
            self.input_size,
            self.depth()
        )
        .unwrap();
        writeln!(out, "{:<18} {:<14} {:>10}", "layer", "output", "params").unwrap();
        let rows = describe_conv_stack(self.input_size, self.depth(), &self.stages)?;
        let mut total = 0usize;
        for (name, shape, p) in rows {
            writeln!(out, "{name:<18} {shape:<14} {p:>10}").unwrap();
            total += p;
        }
        let flat = self.flat_dim()?;
        let f1 = dense_params(flat, self.fc[0]);
        writeln!(out, "{:<18} {:<14} {f1:>10}", format!("fc {}", self.fc[0]), format!("{}", self.fc[0])).unwrap();
        total += f1;
        let f2 = dense_params(self.fc[0], self.fc[1]);
        writeln!(out, "{:<18} {:<14} {f2:>10}", format!("fc {}", self.fc[1]), format!("{}", self.fc[1])).unwrap();
        total += f2;
        let h = self.fc[1] * CLASSES;
        writeln!(out, "{:<18} {:<14} {h:>10}", "softmax 2", "2").unwrap();
        total += h;
        writeln!(out, "total parameters: {total}").unwrap();
        Ok(out)
    }
}

/// Walk a conv stack and return (maps, spatial size) at the end.
fn conv_trace(input_size: usize, in_ch: usize, stages: &[Stage]) -> Result<(usize, usize)> {
    let mut size = input_size;
    let mut maps = in_ch;
    for (i, stage) in stages.iter().enumerate() {
        match *stage {
            Stage::Conv { kernel, maps: m } => {
                if kernel == 0 || m == 0 {
                    return Err(Error::InvalidConfig(format!("stage {i}: zero kernel or maps")));
                }
                if size < kernel {
                    return Err(Error::InvalidConfig(format!(
                        "stage {i}: kernel {kernel} exceeds input {size}"
                    )));
                }
                size = size + 1 - kernel;
                maps = m;
            }
            Stage::Pool => {
                size /= 2;
                if size == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "stage {i}: pooling collapses the feature map"
                    )));
                }
            }
        }
    }
    Ok((maps, size))
}

fn conv_stack_params(in_ch: usize, stages: &[Stage]) -> Result<usize> {
    let mut ch = in_ch;
    let mut total = 0usize;
    for stage in stages {
        if let Stage::Conv { kernel, maps } = *stage {
            total += maps * (ch * kernel * kernel + 1);
            ch = maps;
        }
    }
    Ok(total)
}

fn describe_conv_stack(
    input_size: usize,
    in_ch: usize,
    stages: &[Stage],
) -> Result<Vec<(String, String, usize)>> {
    let mut rows = Vec::new();
    let mut size = input_size;
    let mut ch = in_ch;
    for stage in stages {
        match *stage {
            Stage::Conv { kernel, maps } => {
                if size < kernel {
                    return Err(Error::InvalidConfig("kernel exceeds input".into()));
                }
                size = size + 1 - kernel;
                let p = maps * (ch * kernel * kernel + 1);
                ch = maps;
                rows.push((
                    format!("conv {kernel}x{kernel}x{maps}"),
                    format!("{maps} x {size}x{size}"),
                    p,
                ));
            }
            Stage::Pool => {
                size /= 2;
                rows.push(("maxpool 2x2".into(), format!("{ch} x {size}x{size}"), 0));
            }
        }
    }
    Ok(rows)
}

fn dense_params(in_dim: usize, out_dim: usize) -> usize {
    out_dim * (in_dim + 1)
}

fn lstm_params(in_dim: usize, hidden: usize) -> usize {
    4 * (hidden * in_dim + hidden * hidden + hidden)
}

// ---------------------------------------------------------------------------
// Convolutional feature extractor shared by both architectures
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum CnnLayer<S> {
    Conv(Conv2d<S>),
    Pool,
}

/// Conv stack plus one fully connected feature layer, all rectified.
#[derive(Debug, Clone, PartialEq)]
pub struct Cnn<S> {
    pub layers: Vec<CnnLayer<S>>,
    pub fc: Dense<S>,
}

pub enum CnnLayerCache<S> {
    Conv(ConvCache<S>),
    Pool(PoolCache),
}

pub struct CnnCache<S> {
    layers: Vec<CnnLayerCache<S>>,
    flat_shape: (usize, usize, usize),
    fc: DenseCache<S>,
}

impl<S: Scalar> Cnn<S> {
    pub fn new(
        input_size: usize,
        in_ch: usize,
        stages: &[Stage],
        feature_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (maps, size) = conv_trace(input_size, in_ch, stages)?;
        let mut layers = Vec::new();
        let mut ch = in_ch;
        for stage in stages {
            match *stage {
                Stage::Conv { kernel, maps } => {
                    layers.push(CnnLayer::Conv(Conv2d::new(ch, maps, kernel, true, rng)));
                    ch = maps;
                }
                Stage::Pool => layers.push(CnnLayer::Pool),
            }
        }
        let flat = maps * size * size;
        Ok(Cnn {
            layers,
            fc: Dense::new(flat, feature_dim, true, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Cnn {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    CnnLayer::Conv(c) => CnnLayer::Conv(c.zeros_like()),
                    CnnLayer::Pool => CnnLayer::Pool,
                })
                .collect(),
            fc: self.fc.zeros_like(),
        }
    }

    pub fn forward(&self, input: Image<S>) -> (Vec<S>, CnnCache<S>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = input;
        for layer in &self.layers {
            match layer {
                CnnLayer::Conv(conv) => {
                    let (out, cache) = conv.forward(current);
                    caches.push(CnnLayerCache::Conv(cache));
                    current = out;
                }
                CnnLayer::Pool => {
                    let (out, cache) = MaxPool2.forward(&current);
                    caches.push(CnnLayerCache::Pool(cache));
                    current = out;
                }
            }
        }
        let flat_shape = (current.channels, current.height, current.width);
        let (features, fc_cache) = self.fc.forward(current.data);
        (
            features,
            CnnCache {
                layers: caches,
                flat_shape,
                fc: fc_cache,
            },
        )
    }

    /// Accumulates gradients; the image-level input gradient is dropped
    /// because the input is data, not parameters.
    pub fn backward(&self, cache: &CnnCache<S>, dfeatures: &[S], grads: &mut Cnn<S>) {
        let dflat = self.fc.backward(&cache.fc, dfeatures, &mut grads.fc);
        let (ch, h, w) = cache.flat_shape;
        let mut dimg = Image::from_data(ch, h, w, dflat);
        for idx in (0..self.layers.len()).rev() {
            match (&self.layers[idx], &cache.layers[idx]) {
                (CnnLayer::Conv(conv), CnnLayerCache::Conv(c)) => {
                    let gconv = match &mut grads.layers[idx] {
                        CnnLayer::Conv(g) => g,
                        CnnLayer::Pool => unreachable!("grads mirror the layer list"),
                    };
                    dimg = conv.backward(c, &dimg, gconv);
                }
                (CnnLayer::Pool, CnnLayerCache::Pool(c)) => {
                    dimg = MaxPool2.backward(c, &dimg);
                }
                _ => unreachable!("cache kind matches layer kind"),
            }
        }
    }
}

impl<S: Scalar> Tensors<S> for Cnn<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let CnnLayer::Conv(conv) = layer {
                for (n, s, d) in conv.tensors() {
                    out.push((format!("conv{i}.{n}"), s, d));
                }
            }
        }
        for (n, s, d) in self.fc.tensors() {
            out.push((format!("fc.{n}"), s, d));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let CnnLayer::Conv(conv) = layer {
                for (n, s, d) in conv.tensors_mut() {
                    out.push((format!("conv{i}.{n}"), s, d));
                }
            }
        }
        for (n, s, d) in self.fc.tensors_mut() {
            out.push((format!("fc.{n}"), s, d));
        }
        out
    }
}

fn slice_image<S: Scalar>(stack: &PatchStack, j: usize) -> Image<S> {
    Image::from_data(
        1,
        stack.size,
        stack.size,
        stack.slice(j).iter().map(|&v| S::from_f64(v as f64)).collect(),
    )
}

fn stack_image<S: Scalar>(stack: &PatchStack) -> Image<S> {
    Image::from_data(
        stack.depth,
        stack.size,
        stack.size,
        stack.data.iter().map(|&v| S::from_f64(v as f64)).collect(),
    )
}

// ---------------------------------------------------------------------------
// Hybrid CNN + LSTM
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RectNet<S> {
    pub config: RectNetConfig,
    pub cnn: Cnn<S>,
    pub lstm1: Lstm<S>,
    pub lstm2: Lstm<S>,
    pub mlp1: Dense<S>,
    pub mlp2: Dense<S>,
    pub head: SoftmaxHead<S>,
}

pub struct RectNetCache<S> {
    cnn: Vec<CnnCache<S>>,
    lstm1: Vec<LstmStepCache<S>>,
    lstm2: Vec<LstmStepCache<S>>,
    mlp1: DenseCache<S>,
    mlp2: DenseCache<S>,
    head: SoftmaxCache<S>,
}

impl<S: Scalar> RectNet<S> {
    pub fn new(config: &RectNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = Cnn::new(config.input_size, 1, &config.stages, config.feature_dim, &mut rng)?;
        let lstm1 = Lstm::new(config.feature_dim, config.lstm_units, &mut rng);
        let lstm2 = Lstm::new(config.lstm_units, config.lstm_units, &mut rng);
        let mlp1 = Dense::new(config.depth() * config.lstm_units, config.mlp[0], true, &mut rng);
        let mlp2 = Dense::new(config.mlp[0], config.mlp[1], true, &mut rng);
        let head = SoftmaxHead::new(config.mlp[1], CLASSES, &mut rng);
        Ok(RectNet {
            config: config.clone(),
            cnn,
            lstm1,
            lstm2,
            mlp1,
            mlp2,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        RectNet {
            config: self.config.clone(),
            cnn: self.cnn.zeros_like(),
            lstm1: self.lstm1.zeros_like(),
            lstm2: self.lstm2.zeros_like(),
            mlp1: self.mlp1.zeros_like(),
            mlp2: self.mlp2.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        params::param_count(self)
    }

    pub fn forward(&self, stack: &PatchStack) -> (Vec<S>, RectNetCache<S>) {
        assert_eq!(stack.size, self.config.input_size, "patch size mismatch");
        assert_eq!(stack.depth, self.config.depth(), "stack depth mismatch");
        let mut features = Vec::with_capacity(stack.depth);
        let mut cnn_caches = Vec::with_capacity(stack.depth);
        for j in 0..stack.depth {
            let (f, cache) = self.cnn.forward(slice_image(stack, j));
            features.push(f);
            cnn_caches.push(cache);
        }
        let (h1, lstm1_caches) = self.lstm1.forward_seq(&features);
        let (h2, lstm2_caches) = self.lstm2.forward_seq(&h1);
        let concat: Vec<S> = h2.iter().flatten().copied().collect();
        let (m1, mlp1_cache) = self.mlp1.forward(concat);
        let (m2, mlp2_cache) = self.mlp2.forward(m1);
        let (probs, head_cache) = self.head.forward(m2);
        (
            probs,
            RectNetCache {
                cnn: cnn_caches,
                lstm1: lstm1_caches,
                lstm2: lstm2_caches,
                mlp1: mlp1_cache,
                mlp2: mlp2_cache,
                head: head_cache,
            },
        )
    }

    /// NLL backward for one sample; gradients are scaled by `scale` and
    /// accumulated into `grads`. `freeze_cnn` skips backprop into the
    /// convolutional submodule.
    pub fn backward(
        &self,
        cache: &RectNetCache<S>,
        label: usize,
        scale: S,
        grads: &mut RectNet<S>,
        freeze_cnn: bool,
    ) {
        let dm2 = self.head.backward(&cache.head, label, scale, &mut grads.head);
        let dm1 = self.mlp2.backward(&cache.mlp2, &dm2, &mut grads.mlp2);
        let dconcat = self.mlp1.backward(&cache.mlp1, &dm1, &mut grads.mlp1);
        let b = self.config.lstm_units;
        let dh2: Vec<Vec<S>> = dconcat.chunks(b).map(|c| c.to_vec()).collect();
        let dh1 = self.lstm2.backward_seq(&cache.lstm2, &dh2, &mut grads.lstm2);
        let dv = self.lstm1.backward_seq(&cache.lstm1, &dh1, &mut grads.lstm1);
        if !freeze_cnn {
            for (j, dfeat) in dv.iter().enumerate() {
                self.cnn.backward(&cache.cnn[j], dfeat, &mut grads.cnn);
            }
        }
    }
}

impl<S: Scalar> Tensors<S> for RectNet<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.lstm1.tensors() {
            out.push((format!("lstm1.{n}"), s, d));
        }
        for (n, s, d) in self.lstm2.tensors() {
            out.push((format!("lstm2.{n}"), s, d));
        }
        for (n, s, d) in self.mlp1.tensors() {
            out.push((format!("mlp1.{n}"), s, d));
        }
        for (n, s, d) in self.mlp2.tensors() {
            out.push((format!("mlp2.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors_mut() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.lstm1.tensors_mut() {
            out.push((format!("lstm1.{n}"), s, d));
        }
        for (n, s, d) in self.lstm2.tensors_mut() {
            out.push((format!("lstm2.{n}"), s, d));
        }
        for (n, s, d) in self.mlp1.tensors_mut() {
            out.push((format!("mlp1.{n}"), s, d));
        }
        for (n, s, d) in self.mlp2.tensors_mut() {
            out.push((format!("mlp2.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors_mut() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Multi-channel CNN baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CnnBaseline<S> {
    pub config: CnnBaselineConfig,
    pub cnn: Cnn<S>,
    pub fc2: Dense<S>,
    pub head: SoftmaxHead<S>,
}

pub struct CnnBaselineCache<S> {
    cnn: CnnCache<S>,
    fc2: DenseCache<S>,
    head: SoftmaxCache<S>,
}

impl<S: Scalar> CnnBaseline<S> {
    pub fn new(config: &CnnBaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cnn = Cnn::new(
            config.input_size,
            config.depth(),
            &config.stages,
            config.fc[0],
            &mut rng,
        )?;
        let fc2 = Dense::new(config.fc[0], config.fc[1], true, &mut rng);
        let head = SoftmaxHead::new(config.fc[1], CLASSES, &mut rng);
        Ok(CnnBaseline {
            config: config.clone(),
            cnn,
            fc2,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        CnnBaseline {
            config: self.config.clone(),
            cnn: self.cnn.zeros_like(),
            fc2: self.fc2.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    pub fn param_count(&self) -> usize {
        params::param_count(self)
    }

    pub fn forward(&self, stack: &PatchStack) -> (Vec<S>, CnnBaselineCache<S>) {
        assert_eq!(stack.size, self.config.input_size, "patch size mismatch");
        assert_eq!(stack.depth, self.config.depth(), "stack depth mismatch");
        let (f1, cnn_cache) = self.cnn.forward(stack_image(stack));
        let (f2, fc2_cache) = self.fc2.forward(f1);
        let (probs, head_cache) = self.head.forward(f2);
        (
            probs,
            CnnBaselineCache {
                cnn: cnn_cache,
                fc2: fc2_cache,
                head: head_cache,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &CnnBaselineCache<S>,
        label: usize,
        scale: S,
        grads: &mut CnnBaseline<S>,
    ) {
        let df2 = self.head.backward(&cache.head, label, scale, &mut grads.head);
        let df1 = self.fc2.backward(&cache.fc2, &df2, &mut grads.fc2);
        self.cnn.backward(&cache.cnn, &df1, &mut grads.cnn);
    }
}

impl<S: Scalar> Tensors<S> for CnnBaseline<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.fc2.tensors() {
            out.push((format!("fc2.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors_mut() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.fc2.tensors_mut() {
            out.push((format!("fc2.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors_mut() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Standalone CNN classifier used for pretraining the shared submodule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CnnClassifier<S> {
    pub cnn: Cnn<S>,
    pub head: SoftmaxHead<S>,
}

pub struct CnnClassifierCache<S> {
    cnn: CnnCache<S>,
    head: SoftmaxCache<S>,
}

impl<S: Scalar> CnnClassifier<S> {
    pub fn new(cnn: Cnn<S>, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CnnClassifier {
            cnn,
            head: SoftmaxHead::new(feature_dim, CLASSES, &mut rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CnnClassifier {
            cnn: self.cnn.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Classifies the center slice of a stack.
    pub fn forward(&self, stack: &PatchStack) -> (Vec<S>, CnnClassifierCache<S>) {
        let (f, cnn_cache) = self.cnn.forward(slice_image(stack, stack.depth / 2));
        let (probs, head_cache) = self.head.forward(f);
        (
            probs,
            CnnClassifierCache {
                cnn: cnn_cache,
                head: head_cache,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &CnnClassifierCache<S>,
        label: usize,
        scale: S,
        grads: &mut CnnClassifier<S>,
    ) {
        let df = self.head.backward(&cache.head, label, scale, &mut grads.head);
        self.cnn.backward(&cache.cnn, &df, &mut grads.cnn);
    }
}

impl<S: Scalar> Tensors<S> for CnnClassifier<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        let mut out = Vec::new();
        for (n, s, d) in self.cnn.tensors_mut() {
            out.push((format!("cnn.{n}"), s, d));
        }
        for (n, s, d) in self.head.tensors_mut() {
            out.push((format!("head.{n}"), s, d));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Model wrapper and checkpointing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    RectNet(RectNetConfig),
    CnnBaseline(CnnBaselineConfig),
}

impl ModelSpec {
    pub fn input_size(&self) -> usize {
        match self {
            ModelSpec::RectNet(c) => c.input_size,
            ModelSpec::CnnBaseline(c) => c.input_size,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            ModelSpec::RectNet(c) => c.k,
            ModelSpec::CnnBaseline(c) => c.k,
        }
    }

    pub fn param_count(&self) -> Result<usize> {
        match self {
            ModelSpec::RectNet(c) => c.param_count(),
            ModelSpec::CnnBaseline(c) => c.param_count(),
        }
    }

    pub fn describe(&self) -> Result<String> {
        match self {
            ModelSpec::RectNet(c) => c.describe(),
            ModelSpec::CnnBaseline(c) => c.describe(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model<S> {
    RectNet(RectNet<S>),
    CnnBaseline(CnnBaseline<S>),
}

impl<S: Scalar> Model<S> {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Ok(match spec {
            ModelSpec::RectNet(c) => Model::RectNet(RectNet::new(c, seed)?),
            ModelSpec::CnnBaseline(c) => Model::CnnBaseline(CnnBaseline::new(c, seed)?),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::RectNet(m) => ModelSpec::RectNet(m.config.clone()),
            Model::CnnBaseline(m) => ModelSpec::CnnBaseline(m.config.clone()),
        }
    }

    pub fn input_size(&self) -> usize {
        self.spec().input_size()
    }

    pub fn k(&self) -> usize {
        self.spec().k()
    }

    pub fn param_count(&self) -> usize {
        match self {
            Model::RectNet(m) => m.param_count(),
            Model::CnnBaseline(m) => m.param_count(),
        }
    }

    /// Probability pair (negative, positive) for one stack.
    pub fn predict(&self, stack: &PatchStack) -> Vec<S> {
        match self {
            Model::RectNet(m) => m.forward(stack).0,
            Model::CnnBaseline(m) => m.forward(stack).0,
        }
    }
}

impl<S: Scalar> Tensors<S> for Model<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[S])> {
        match self {
            Model::RectNet(m) => m.tensors(),
            Model::CnnBaseline(m) => m.tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [S])> {
        match self {
            Model::RectNet(m) => m.tensors_mut(),
            Model::CnnBaseline(m) => m.tensors_mut(),
        }
    }
}

pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let tensors = model.tensors();
    let meta = CheckpointMeta {
        model: serde_json::to_value(model.spec()).expect("spec serializes"),
        tensors: tensors
            .iter()
            .map(|(n, s, _)| TensorInfo {
                name: n.clone(),
                shape: s.clone(),
            })
            .collect(),
    };
    let owned: Vec<(String, Vec<usize>, &[f32])> = tensors
        .iter()
        .map(|(n, s, d)| (n.clone(), s.clone(), *d))
        .collect();
    checkpoint::save(path, &meta, &owned)
}

pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let loaded = checkpoint::load(path)?;
    let spec: ModelSpec = serde_json::from_value(loaded.meta.model.clone())
        .map_err(|e| Error::format(path, format!("model spec: {e}")))?;
    let mut model = Model::new(&spec, 0)?;
    let expected = model.param_count();
    if loaded.payload.len() != expected {
        return Err(Error::PayloadSizeMismatch {
            expected,
            actual: loaded.payload.len(),
        });
    }
    params::unflatten(&mut model, &loaded.payload);
    Ok(model)
}
