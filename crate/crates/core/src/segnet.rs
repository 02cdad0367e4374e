//! Toy encoder/classifier segmentation network.
//!
//! Three encoder blocks (3x3 conv, relu, 2x2 mean-pool) take an RGB image
//! from 3 to 16, 32 and 64 channels at 1/8 resolution. A 1x1 convolution maps
//! the 64-channel encoder output to one logit per class, and a bilinear x8
//! resize brings the logits back to input resolution.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{Gradients, PoolMode, Tape, Tensor, TensorError, Var};

pub const ENCODER_CHANNELS: [usize; 4] = [3, 16, 32, 64];
pub const DOWNSAMPLE: usize = 8;
pub const FEATURE_CHANNELS: usize = 64;
const KERNEL: usize = 3;
const MAGIC: &str = "CATSD-WEIGHTS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SegnetError {
    #[error("a model needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("class list must start with background id 0")]
    BackgroundNotFirst,
    #[error("duplicate class id {0}")]
    DuplicateClass(u32),
    #[error("invalid image: {0}")]
    BadImage(String),
    #[error("no gradient for parameter {0}")]
    MissingGrad(String),
    #[error("learning rate {0} must be finite and non-negative")]
    BadLearningRate(f64),
    #[error("weights file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SegnetError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Parameters of the network plus the class id behind each output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub encoder: Vec<ConvLayer>,
    pub classifier: ConvLayer,
    pub class_list: Vec<u32>,
    pub version: u32,
}

fn he_normal(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

fn validate_classes(class_list: &[u32]) -> Result<()> {
    if class_list.len() < 2 {
        return Err(SegnetError::TooFewClasses(class_list.len()));
    }
    if class_list[0] != 0 {
        return Err(SegnetError::BackgroundNotFirst);
    }
    let mut seen = std::collections::BTreeSet::new();
    for &c in class_list {
        if !seen.insert(c) {
            return Err(SegnetError::DuplicateClass(c));
        }
    }
    Ok(())
}

/// Fresh weights predicting classes `0..n_classes`.
pub fn init_weights(seed: u64, n_classes: usize) -> Result<ModelWeights> {
    let classes: Vec<u32> = (0..n_classes as u32).collect();
    ModelWeights::init(seed, &classes)
}

impl ModelWeights {
    /// He-normal kernels and zero biases, deterministic in `seed`.
    pub fn init(seed: u64, class_list: &[u32]) -> Result<Self> {
        validate_classes(class_list)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ENCODER_CHANNELS
            .windows(2)
            .map(|io| ConvLayer { kernel: he_normal(&mut rng, [io[1], io[0], KERNEL, KERNEL]), bias: Tensor::zeros(&[io[1]]) })
            .collect();
        let n = class_list.len();
        let classifier = ConvLayer { kernel: he_normal(&mut rng, [n, FEATURE_CHANNELS, 1, 1]), bias: Tensor::zeros(&[n]) };
        Ok(ModelWeights { encoder, classifier, class_list: class_list.to_vec(), version: FORMAT_VERSION })
    }

    pub fn n_classes(&self) -> usize {
        self.class_list.len()
    }

    /// Output channel predicting `class_id`.
    pub fn channel_of(&self, class_id: u32) -> Option<usize> {
        self.class_list.iter().position(|&c| c == class_id)
    }

    /// Parameter names and tensors in canonical order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(8);
        for (i, l) in self.encoder.iter().enumerate() {
            out.push((format!("enc{i}.kernel"), &l.kernel));
            out.push((format!("enc{i}.bias"), &l.bias));
        }
        out.push(("cls.kernel".to_string(), &self.classifier.kernel));
        out.push(("cls.bias".to_string(), &self.classifier.bias));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(8);
        for l in self.encoder.iter_mut() {
            out.push(&mut l.kernel);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.kernel);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Raw little-endian bytes of every parameter, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "version {}", self.version)?;
        let classes: Vec<String> = self.class_list.iter().map(u32::to_string).collect();
        writeln!(w, "classes {}", classes.join(" "))?;
        for (name, t) in self.params() {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "param {name} {}", dims.join(" "))?;
        }
        writeln!(w, "end")?;
        for (_, t) in self.params() {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(SegnetError::Format("unexpected end of header".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MAGIC {
            return Err(SegnetError::Format("bad magic".into()));
        }
        let version = next_line(&mut r)?
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SegnetError::Format("bad version line".into()))?;
        if version != FORMAT_VERSION {
            return Err(SegnetError::Format(format!("unsupported version {version}")));
        }
        let class_list: Vec<u32> = next_line(&mut r)?
            .strip_prefix("classes ")
            .ok_or_else(|| SegnetError::Format("bad classes line".into()))?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| SegnetError::Format(format!("bad class id {s:?}"))))
            .collect::<Result<_>>()?;
        validate_classes(&class_list)?;
        let mut shapes = Vec::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let mut parts = l.split_whitespace();
            if parts.next() != Some("param") {
                return Err(SegnetError::Format(format!("unexpected header line {l:?}")));
            }
            let name = parts.next().ok_or_else(|| SegnetError::Format("param without name".into()))?.to_string();
            let dims: Vec<usize> =
                parts.map(|d| d.parse().map_err(|_| SegnetError::Format(format!("bad extent {d:?}")))).collect::<Result<_>>()?;
            shapes.push((name, dims));
        }
        let mut template = ModelWeights::init(0, &class_list)?;
        let expected: Vec<(String, Vec<usize>)> = template.params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if shapes != expected {
            return Err(SegnetError::Format("parameter layout does not match the architecture".into()));
        }
        let mut bytes = [0u8; 8];
        for t in template.params_mut() {
            for v in t.data_mut() {
                r.read_exact(&mut bytes)?;
                *v = f64::from_le_bytes(bytes);
            }
        }
        if r.read(&mut bytes)? != 0 {
            return Err(SegnetError::Format("trailing bytes after parameters".into()));
        }
        template.version = version;
        Ok(template)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// Adds output channels for `new_class_ids`, copying every existing parameter.
pub fn expand_classifier(old: &ModelWeights, new_class_ids: &[u32], seed: u64) -> Result<ModelWeights> {
    let mut class_list = old.class_list.clone();
    class_list.extend_from_slice(new_class_ids);
    validate_classes(&class_list)?;
    if new_class_ids.is_empty() {
        return Ok(old.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = he_normal(&mut rng, [new_class_ids.len(), FEATURE_CHANNELS, 1, 1]);
    let mut kernel = old.classifier.kernel.data().to_vec();
    kernel.extend_from_slice(fresh.data());
    let mut bias = old.classifier.bias.data().to_vec();
    bias.extend(std::iter::repeat_n(0.0, new_class_ids.len()));
    let n = class_list.len();
    Ok(ModelWeights {
        encoder: old.encoder.clone(),
        classifier: ConvLayer { kernel: Tensor::new(vec![n, FEATURE_CHANNELS, 1, 1], kernel)?, bias: Tensor::new(vec![n], bias)? },
        class_list,
        version: old.version,
    })
}

/// Tape handles for every parameter of a model, in canonical order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, weights: &ModelWeights, requires_grad: bool) -> Self {
        let vars = weights.params().into_iter().map(|(_, t)| tape.leaf(t.clone(), requires_grad)).collect();
        ParamVars { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Collects the gradient of every parameter after a backward pass.
    pub fn gradients(&self, weights: &ModelWeights, grads: &Gradients) -> Result<ModelGrads> {
        let names = weights.params().into_iter().map(|(n, _)| n);
        let tensors = self.vars.iter().map(|&v| grads.get(v).cloned()).collect();
        Ok(ModelGrads { names: names.collect(), tensors })
    }
}

/// Per-parameter gradients in the canonical parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    names: Vec<String>,
    tensors: Vec<Option<Tensor>>,
}

impl ModelGrads {
    pub fn new(names: Vec<String>, tensors: Vec<Option<Tensor>>) -> Self {
        ModelGrads { names, tensors }
    }

    pub fn tensors(&self) -> &[Option<Tensor>] {
        &self.tensors
    }

    /// Elementwise sum in place; missing entries stay missing.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                _ => *a = None,
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut().flatten() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().flatten().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Plain gradient descent: `w <- w - lr * g` for every parameter.
pub fn sgd_step(weights: &ModelWeights, grads: &ModelGrads, lr: f64) -> Result<ModelWeights> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(SegnetError::BadLearningRate(lr));
    }
    let mut out = weights.clone();
    let names: Vec<String> = weights.params().into_iter().map(|(n, _)| n).collect();
    if grads.tensors.len() != names.len() {
        return Err(SegnetError::MissingGrad(format!("expected {} gradients", names.len())));
    }
    for ((p, g), name) in out.params_mut().into_iter().zip(&grads.tensors).zip(&names) {
        let g = g.as_ref().ok_or_else(|| SegnetError::MissingGrad(name.clone()))?;
        if g.shape() != p.shape() {
            return Err(TensorError::ShapeMismatch { expected: p.shape().to_vec(), got: g.shape().to_vec() }.into());
        }
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(out)
}

/// Plain-value network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    /// Encoder output, `[64, h/8, w/8]`.
    pub features: Tensor,
    /// Full-resolution logits, `[n_classes, h, w]`.
    pub logits: Tensor,
    /// Output of every encoder block; the last entry equals `features`.
    pub block_features: Vec<Tensor>,
}

/// Tape handles of the network outputs.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub features: Var,
    pub logits: Var,
    pub block_features: Vec<Var>,
}

pub fn check_image(image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(SegnetError::BadImage(format!("expected [3, h, w], got {s:?}")));
    }
    if !s[1].is_multiple_of(DOWNSAMPLE) || !s[2].is_multiple_of(DOWNSAMPLE) {
        return Err(SegnetError::BadImage(format!("extents {}x{} not divisible by {DOWNSAMPLE}", s[1], s[2])));
    }
    if let Some(v) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(SegnetError::BadImage(format!("pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Records the forward pass of `params` on `image` (a `[3, h, w]` variable).
pub fn forward_on_tape(tape: &mut Tape, params: &ParamVars, image: Var) -> Result<ForwardVars> {
    check_image(tape.value(image))?;
    let p = params.vars();
    let mut x = image;
    let mut blocks = Vec::with_capacity(3);
    for layer in 0..3 {
        let y = tape.conv2d(x, p[2 * layer], p[2 * layer + 1], KERNEL / 2)?;
        let y = tape.relu(y)?;
        x = tape.pool2d(y, 2, PoolMode::Mean)?;
        blocks.push(x);
    }
    let scores = tape.conv2d(x, p[6], p[7], 0)?;
    let logits = tape.upsample(scores, DOWNSAMPLE)?;
    Ok(ForwardVars { features: x, logits, block_features: blocks })
}

/// Evaluates the network without recording gradients.
pub fn forward(weights: &ModelWeights, image: &Tensor) -> Result<ForwardResult> {
    let mut tape = Tape::new();
    let params = ParamVars::register(&mut tape, weights, false);
    let img = tape.constant(image.clone());
    let out = forward_on_tape(&mut tape, &params, img)?;
    Ok(ForwardResult {
        features: tape.value(out.features).clone(),
        logits: tape.value(out.logits).clone(),
        block_features: out.block_features.iter().map(|&v| tape.value(v).clone()).collect(),
    })
}

/// Per-pixel argmax channel of `[k, h, w]` logits.
pub fn argmax_channels(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let (k, n) = (s[0], s[1] * s[2]);
    let d = logits.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + p] > d[best * n + p] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Predicted class id per pixel.
pub fn predict(weights: &ModelWeights, image: &Tensor) -> Result<Vec<u32>> {
    let out = forward(weights, image)?;
    Ok(argmax_channels(&out.logits).into_iter().map(|c| weights.class_list[c]).collect())
}
