//! Small convolutional classifiers: construction, inference, feature taps
//! and the `BSLB` checkpoint container.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{dim_err, invalid, Error, Result};
use crate::tensor::{ops, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        out_features: usize,
    },
}

impl Layer {
    pub fn has_params(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::Linear { .. })
    }
}

/// Weight and bias of one parameterised layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// How the model's parameters were produced; carried in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainingMode {
    Untrained,
    Natural,
    Adversarial { epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Weights ~ N(0, std²) truncated at two standard deviations, biases constant.
    TruncatedNormal { std: f64, bias: f64, seed: u64 },
}

impl Init {
    pub fn seeded(seed: u64) -> Self {
        Init::TruncatedNormal { std: 0.1, bias: 0.1, seed }
    }
}

/// Configuration of a conv → relu → pool stack followed by fully connected layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallCnnConfig {
    pub input_shape: [usize; 3],
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub fc_widths: Vec<usize>,
    pub num_classes: usize,
    /// Tap `fc1` after the ReLU that follows the first linear layer instead of before it.
    pub tap_post_relu: bool,
}

impl SmallCnnConfig {
    /// conv(32,5×5) → pool → conv(64,5×5) → pool → fc(1024) → fc(10), same padding.
    pub fn mnist() -> Self {
        SmallCnnConfig {
            input_shape: [1, 28, 28],
            conv_channels: vec![32, 64],
            kernel: 5,
            padding: 2,
            fc_widths: vec![1024],
            num_classes: 10,
            tap_post_relu: false,
        }
    }

    /// Same topology with widths scaled down for single-core experiments.
    pub fn desk() -> Self {
        SmallCnnConfig {
            conv_channels: vec![16, 32],
            padding: 0,
            fc_widths: vec![128],
            ..Self::mnist()
        }
    }
}

/// An ordered layer list with its parameters and named feature taps.
///
/// A tap names the layer whose *output* is exposed by [`Model::extract_features`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
    params: Vec<Option<LayerParams>>,
    taps: BTreeMap<String, usize>,
    pub mode: TrainingMode,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl Model {
    /// Validates the layer stack against `input_shape` and initialises parameters.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>, init: Init) -> Result<Model> {
        if input_shape.iter().any(|&d| d == 0) {
            return Err(invalid!("input shape {:?} has a zero extent", input_shape));
        }
        let shapes = infer_shapes(input_shape, &layers)?;
        let mut rng = match init {
            Init::TruncatedNormal { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Zeros => None,
        };
        let mut params = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let in_shape = &shapes[i];
            let (wshape, bshape) = match layer {
                Layer::Conv { out_channels, kernel, .. } => {
                    (vec![*out_channels, in_shape[0], *kernel, *kernel], vec![*out_channels])
                }
                Layer::Linear { out_features } => (vec![in_shape[0], *out_features], vec![*out_features]),
                _ => {
                    params.push(None);
                    continue;
                }
            };
            let p = match (init, rng.as_mut()) {
                (Init::TruncatedNormal { std, bias, .. }, Some(rng)) => {
                    let n: usize = wshape.iter().product();
                    let w = (0..n).map(|_| truncated_normal(rng, std)).collect();
                    LayerParams {
                        weight: Tensor::new(wshape, w)?,
                        bias: Tensor::full(&bshape, bias),
                    }
                }
                _ => LayerParams {
                    weight: Tensor::zeros(&wshape),
                    bias: Tensor::zeros(&bshape),
                },
            };
            params.push(Some(p));
        }
        Ok(Model {
            input_shape,
            layers,
            params,
            taps: BTreeMap::new(),
            mode: TrainingMode::Untrained,
        })
    }

    pub fn small_cnn(config: &SmallCnnConfig, init: Init) -> Result<Model> {
        if config.conv_channels.iter().chain(&config.fc_widths).any(|&w| w == 0) || config.num_classes == 0 {
            return Err(invalid!("layer widths must be at least 1"));
        }
        let mut layers = Vec::new();
        for &c in &config.conv_channels {
            layers.push(Layer::Conv {
                out_channels: c,
                kernel: config.kernel,
                stride: 1,
                padding: config.padding,
            });
            layers.push(Layer::Relu);
            layers.push(Layer::MaxPool { window: 2, stride: 2 });
        }
        layers.push(Layer::Flatten);
        let mut fc1 = None;
        for &w in &config.fc_widths {
            layers.push(Layer::Linear { out_features: w });
            fc1.get_or_insert(layers.len() - 1);
            layers.push(Layer::Relu);
        }
        layers.push(Layer::Linear {
            out_features: config.num_classes,
        });
        let mut model = Model::new(config.input_shape, layers, init)?;
        if let Some(i) = fc1 {
            let idx = if config.tap_post_relu { i + 1 } else { i };
            model.add_tap("fc1", idx)?;
        }
        Ok(model)
    }

    pub fn add_tap(&mut self, name: &str, layer: usize) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(invalid!("tap {} refers to layer {} of {}", name, layer, self.layers.len()));
        }
        self.taps.insert(name.to_string(), layer);
        Ok(())
    }

    pub fn taps(&self) -> &BTreeMap<String, usize> {
        &self.taps
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        *infer_shapes(self.input_shape, &self.layers)
            .expect("validated at construction")
            .last()
            .and_then(|s| s.last())
            .expect("non-empty")
    }

    /// Per-sample output shape of every layer (index 0 is the input).
    pub fn layer_shapes(&self) -> Vec<Vec<usize>> {
        infer_shapes(self.input_shape, &self.layers).expect("validated at construction")
    }

    pub fn layer_params(&self) -> &[Option<LayerParams>] {
        &self.params
    }

    /// Parameter tensors in layer order: weight then bias.
    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().map(Tensor::len).sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.ndim() != 4 || batch.shape()[1..] != self.input_shape {
            return Err(dim_err!(
                "batch shape {:?} does not match model input [N, {:?}]",
                batch.shape(),
                self.input_shape
            ));
        }
        Ok(())
    }

    fn apply_layer(&self, i: usize, x: Tensor) -> Result<Tensor> {
        Ok(match &self.layers[i] {
            Layer::Conv { stride, padding, .. } => {
                let p = self.params[i].as_ref().expect("conv params");
                ops::add_bias(&ops::conv2d(&x, &p.weight, *stride, *padding)?, &p.bias)?
            }
            Layer::MaxPool { window, stride } => ops::maxpool2d(&x, *window, *stride)?.0,
            Layer::Relu => ops::relu(&x),
            Layer::Flatten => {
                let shape = [x.batch_len(), x.sample_len()];
                x.reshape(&shape)?
            }
            Layer::Linear { .. } => {
                let p = self.params[i].as_ref().expect("linear params");
                ops::add_bias(&ops::matmul(&x, &p.weight)?, &p.bias)?
            }
        })
    }

    /// Runs layers `start..end` on activations produced by layer `start - 1`.
    pub fn forward_range(&self, activations: &Tensor, start: usize, end: usize) -> Result<Tensor> {
        if start > end || end > self.layers.len() {
            return Err(invalid!("layer range {}..{} out of bounds", start, end));
        }
        let mut x = activations.clone();
        for i in start..end {
            x = self.apply_layer(i, x)?;
        }
        Ok(x)
    }

    pub fn forward_logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.forward_range(batch, 0, self.layers.len())
    }

    /// Activations at `tap`, flattened to `[N × d_t]`.
    pub fn extract_features(&self, batch: &Tensor, tap: &str) -> Result<Tensor> {
        let &layer = self
            .taps
            .get(tap)
            .ok_or_else(|| invalid!("unknown feature tap '{}'", tap))?;
        self.check_batch(batch)?;
        let out = self.forward_range(batch, 0, layer + 1)?;
        let shape = [out.batch_len(), out.sample_len()];
        out.reshape(&shape)
    }

    /// Feature dimension `d_t` at a tap.
    pub fn tap_dim(&self, tap: &str) -> Result<usize> {
        let &layer = self
            .taps
            .get(tap)
            .ok_or_else(|| invalid!("unknown feature tap '{}'", tap))?;
        Ok(self.layer_shapes()[layer + 1].iter().product())
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward_logits(batch)?;
        Ok((0..logits.batch_len()).map(|i| ops::argmax(logits.sample(i))).collect())
    }

    /// Records the parameters as tape leaves.
    pub fn record_params(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Option<(Var, Var)>> {
        self.params
            .iter()
            .map(|p| {
                p.as_ref().map(|p| {
                    (
                        tape.leaf(p.weight.clone(), requires_grad),
                        tape.leaf(p.bias.clone(), requires_grad),
                    )
                })
            })
            .collect()
    }

    /// Records the forward pass of `input` on `tape` using previously recorded parameters.
    pub fn record_forward(&self, tape: &mut Tape, input: Var, params: &[Option<(Var, Var)>]) -> Result<Var> {
        self.check_batch(tape.value(input))?;
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = params[i].expect("conv params");
                    let y = tape.conv2d(x, w, *stride, *padding)?;
                    tape.add_bias(y, b)?
                }
                Layer::MaxPool { window, stride } => tape.maxpool2d(x, *window, *stride)?,
                Layer::Relu => tape.relu(x)?,
                Layer::Flatten => tape.flatten(x)?,
                Layer::Linear { .. } => {
                    let (w, b) = params[i].expect("linear params");
                    let y = tape.matmul(x, w)?;
                    tape.add_bias(y, b)?
                }
            };
        }
        Ok(x)
    }

    /// Gradient of the mean cross-entropy with respect to the input batch.
    pub fn input_gradient(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false);
        let x = tape.leaf(batch.clone(), true);
        let logits = self.record_forward(&mut tape, x, &params)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss)?;
        Ok((value, grads.take(x).expect("input requires grad")))
    }

    /// Logits and the gradient of `seed · logits` with respect to the input.
    pub fn logits_and_input_gradient(&self, batch: &Tensor, seed: impl FnOnce(&Tensor) -> Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let params = self.record_params(&mut tape, false);
        let x = tape.leaf(batch.clone(), true);
        let logits = self.record_forward(&mut tape, x, &params)?;
        let z = tape.value(logits).clone();
        let s = seed(&z);
        let mut grads = tape.backward_with(logits, s)?;
        Ok((z, grads.take(x).expect("input requires grad")))
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(self);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        checkpoint::decode(&bytes)
    }
}

/// Per-sample shapes: `out[0]` is the input, `out[i + 1]` the output of layer `i`.
fn infer_shapes(input: [usize; 3], layers: &[Layer]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = vec![input.to_vec()];
    for (i, layer) in layers.iter().enumerate() {
        let cur = shapes.last().expect("non-empty");
        let next = match layer {
            Layer::Conv { out_channels, kernel, stride, padding } => {
                if cur.len() != 3 {
                    return Err(dim_err!("layer {}: conv needs a [C,H,W] input, got {:?}", i, cur));
                }
                if *out_channels == 0 || *kernel == 0 {
                    return Err(invalid!("layer {}: conv widths must be positive", i));
                }
                let win = ops::Window { kh: *kernel, kw: *kernel, stride: *stride, padding: *padding };
                let (h, w) = win.output_hw(cur[1], cur[2]).map_err(|e| dim_err!("layer {}: {}", i, e))?;
                vec![*out_channels, h, w]
            }
            Layer::MaxPool { window, stride } => {
                if cur.len() != 3 || cur[1] < *window || cur[2] < *window {
                    return Err(dim_err!("layer {}: pool window {} does not fit {:?}", i, window, cur));
                }
                let win = ops::Window { kh: *window, kw: *window, stride: *stride, padding: 0 };
                let (h, w) = win.output_hw(cur[1], cur[2])?;
                vec![cur[0], h, w]
            }
            Layer::Relu => cur.clone(),
            Layer::Flatten => vec![cur.iter().product()],
            Layer::Linear { out_features } => {
                if cur.len() != 1 {
                    return Err(dim_err!("layer {}: linear needs a flat input, got {:?}", i, cur));
                }
                if *out_features == 0 {
                    return Err(invalid!("layer {}: linear width must be positive", i));
                }
                vec![*out_features]
            }
        };
        shapes.push(next);
    }
    match shapes.last() {
        Some(s) if s.len() == 1 => Ok(shapes),
        Some(s) => Err(dim_err!("model output {:?} is not a flat logit vector", s)),
        None => unreachable!(),
    }
}

/// The `BSLB` container.
///
/// ```text
/// offset  size  field
/// 0       4     magic "BSLB"
/// 4       4     format version, u32 LE
/// 8       4     descriptor length L, u32 LE
/// 12      L     architecture descriptor, UTF-8 lines
/// 12+L    1     training mode: 0 untrained, 1 natural, 2 adversarial
/// 13+L    8     epsilon, f64 LE (0 unless adversarial)
/// 21+L    8     parameter count P, u64 LE
/// 29+L    8·P   parameters, f64 LE, layer order, weight then bias
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: [u8; 4] = *b"BSLB";
    pub const VERSION: u32 = 1;

    pub fn descriptor(model: &Model) -> String {
        let [c, h, w] = model.input_shape;
        let mut s = format!("input {} {} {}\n", c, h, w);
        for layer in &model.layers {
            match layer {
                Layer::Conv { out_channels, kernel, stride, padding } => {
                    s += &format!("conv {} {} {} {}\n", out_channels, kernel, stride, padding)
                }
                Layer::MaxPool { window, stride } => s += &format!("maxpool {} {}\n", window, stride),
                Layer::Relu => s += "relu\n",
                Layer::Flatten => s += "flatten\n",
                Layer::Linear { out_features } => s += &format!("linear {}\n", out_features),
            }
        }
        for (name, idx) in &model.taps {
            s += &format!("tap {} {}\n", name, idx);
        }
        s
    }

    pub fn encode(model: &Model) -> Vec<u8> {
        let desc = descriptor(model);
        let count = model.parameter_count();
        let mut out = Vec::with_capacity(29 + desc.len() + 8 * count);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        let (tag, eps) = match model.mode {
            TrainingMode::Untrained => (0u8, 0.0),
            TrainingMode::Natural => (1, 0.0),
            TrainingMode::Adversarial { epsilon } => (2, epsilon),
        };
        out.push(tag);
        out.extend_from_slice(&f64::to_le_bytes(eps));
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for t in model.parameters() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn parse_descriptor(text: &str) -> Result<([usize; 3], Vec<Layer>, Vec<(String, usize)>)> {
        let bad = |line: &str| Error::Parse(format!("bad descriptor line '{}'", line));
        let mut input = None;
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            let kind = it.next().ok_or_else(|| bad(line))?;
            let rest: Vec<&str> = it.collect();
            let nums = || -> Result<Vec<usize>> {
                rest.iter().map(|t| t.parse::<usize>().map_err(|_| bad(line))).collect()
            };
            match kind {
                "input" => {
                    let n = nums()?;
                    if n.len() != 3 {
                        return Err(bad(line));
                    }
                    input = Some([n[0], n[1], n[2]]);
                }
                "conv" => match nums()?[..] {
                    [out_channels, kernel, stride, padding] => layers.push(Layer::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }),
                    _ => return Err(bad(line)),
                },
                "maxpool" => match nums()?[..] {
                    [window, stride] => layers.push(Layer::MaxPool { window, stride }),
                    _ => return Err(bad(line)),
                },
                "relu" => layers.push(Layer::Relu),
                "flatten" => layers.push(Layer::Flatten),
                "linear" => match nums()?[..] {
                    [out_features] => layers.push(Layer::Linear { out_features }),
                    _ => return Err(bad(line)),
                },
                "tap" => match rest[..] {
                    [name, idx] => taps.push((name.to_string(), idx.parse().map_err(|_| bad(line))?)),
                    _ => return Err(bad(line)),
                },
                _ => return Err(bad(line)),
            }
        }
        let input = input.ok_or_else(|| Error::Parse("descriptor lacks an input line".into()))?;
        Ok((input, layers, taps))
    }

    fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or(Error::TruncatedBlob { expected: at + 4, found: bytes.len() })
    }

    pub fn decode(bytes: &[u8]) -> Result<Model> {
        if bytes.len() < 4 || bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            let n = bytes.len().min(4);
            found[..n].copy_from_slice(&bytes[..n]);
            return Err(Error::BadMagic {
                expected: u32::from_be_bytes(MAGIC),
                found: u32::from_be_bytes(found),
            });
        }
        let version = read_u32(bytes, 4)?;
        if version != VERSION {
            return Err(Error::VersionMismatch { found: version, supported: VERSION });
        }
        let len = read_u32(bytes, 8)? as usize;
        let header_end = 12 + len + 1 + 8 + 8;
        if bytes.len() < header_end {
            return Err(Error::TruncatedBlob { expected: header_end, found: bytes.len() });
        }
        let text = std::str::from_utf8(&bytes[12..12 + len])
            .map_err(|_| Error::Parse("descriptor is not UTF-8".into()))?;
        let (input, layers, taps) = parse_descriptor(text)?;
        let mut model = Model::new(input, layers, Init::Zeros)?;
        for (name, idx) in taps {
            model.add_tap(&name, idx)?;
        }
        let mut at = 12 + len;
        let tag = bytes[at];
        let eps = f64::from_le_bytes(bytes[at + 1..at + 9].try_into().expect("8 bytes"));
        model.mode = match tag {
            0 => TrainingMode::Untrained,
            1 => TrainingMode::Natural,
            2 => TrainingMode::Adversarial { epsilon: eps },
            t => return Err(Error::Parse(format!("unknown training mode tag {}", t))),
        };
        at += 9;
        let declared = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        let count = model.parameter_count();
        let expected = at + 8 * count;
        if declared != count || bytes.len() != expected {
            return Err(Error::TruncatedBlob { expected, found: bytes.len() });
        }
        for t in model.parameters_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
                at += 8;
            }
        }
        Ok(model)
    }
}
