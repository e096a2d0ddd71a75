//! Dense feed-forward denoising autoencoder.
//!
//! The plain variant maps a sorted sample spectrum (length N) to the true
//! spectrum; the adjusted variant also receives `q = N/T` as an extra last
//! input (length N + 1). Training minimizes the mean squared error with
//! mini-batch SGD or Adam; dropout is the inverted kind, so inference needs
//! no rescaling.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::sampling::SampleRecord;

pub const MODEL_FORMAT_HEADER: &str = "eigenclean-mlp";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Rectifier,
    Identity,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Rectifier => "rectifier",
            Activation::Identity => "identity",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "rectifier" => Some(Activation::Rectifier),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Shape, activation and dropout of one dense layer. `dropout_keep` is the
/// probability of keeping each output unit during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
    pub dropout_keep: f64,
}

impl LayerSpec {
    pub fn new(fan_in: usize, fan_out: usize, activation: Activation, dropout_keep: f64) -> Result<Self> {
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::precondition("layer dimensions must be at least 1"));
        }
        if !(dropout_keep > 0.0 && dropout_keep <= 1.0) {
            return Err(Error::precondition(format!(
                "dropout keep probability {dropout_keep} must lie in (0, 1]"
            )));
        }
        Ok(Self {
            fan_in,
            fan_out,
            activation,
            dropout_keep,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Input is the spectrum alone.
    Plain,
    /// Input is the spectrum followed by `q`.
    Adjusted,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::Plain => "plain",
            Variant::Adjusted => "adjusted",
        }
    }
}

/// Forward-pass mode. Training draws dropout masks from the given stream.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    variant: Variant,
    tied: bool,
    layers: Vec<LayerSpec>,
    /// `fan_out × fan_in` per layer.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

struct ForwardCache {
    /// Input to each layer followed by the network output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    /// Per-layer dropout scale (0 or 1/keep), when dropout was applied.
    masks: Vec<Option<Array2<f64>>>,
}

impl MlpModel {
    /// Creates a model with weights uniform in `±sqrt(6/(fan_in+fan_out))` and
    /// zero biases.
    ///
    /// With `tied`, layer `L−1−k` uses the transpose of layer `k`'s weights
    /// (the middle layer of an odd stack stays free); shapes must mirror.
    pub fn new(variant: Variant, layers: Vec<LayerSpec>, tied: bool, rng: &mut Rng) -> Result<Self> {
        let weights = layers
            .iter()
            .map(|l| {
                let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
                Array2::from_shape_fn((l.fan_out, l.fan_in), |_| rng.uniform_range(-limit, limit))
            })
            .collect();
        let biases = layers.iter().map(|l| Array1::zeros(l.fan_out)).collect();
        let mut model = Self::from_parts(variant, layers, tied, weights, biases)?;
        model.sync_tied();
        Ok(model)
    }

    /// Dense autoencoder `N(+1) → hidden… → N` with rectifier hidden layers, a
    /// linear output layer and dropout with probability `dropout` on the
    /// second hidden layer (the first, if there is only one).
    pub fn autoencoder(n: usize, hidden: &[usize], dropout: f64, variant: Variant, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::precondition(format!("dropout probability {dropout} must lie in [0, 1)")));
        }
        let input = match variant {
            Variant::Plain => n,
            Variant::Adjusted => n + 1,
        };
        let dropout_layer = if hidden.len() >= 2 { Some(1) } else { hidden.first().map(|_| 0) };
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(n);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let last = k == dims.len() - 2;
                let activation = if last { Activation::Identity } else { Activation::Rectifier };
                let keep = if Some(k) == dropout_layer { 1.0 - dropout } else { 1.0 };
                LayerSpec::new(w[0], w[1], activation, keep)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(variant, layers, false, &mut Rng::new(seed))
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        variant: Variant,
        layers: Vec<LayerSpec>,
        tied: bool,
        weights: Vec<Array2<f64>>,
        biases: Vec<Array1<f64>>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::precondition("model needs at least one layer"));
        }
        if weights.len() != layers.len() || biases.len() != layers.len() {
            return Err(Error::precondition("one weight matrix and bias per layer required"));
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::precondition(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].fan_out,
                    k + 1,
                    pair[1].fan_in
                )));
            }
        }
        for (k, l) in layers.iter().enumerate() {
            if weights[k].dim() != (l.fan_out, l.fan_in) || biases[k].len() != l.fan_out {
                return Err(Error::precondition(format!("parameter shapes of layer {k} do not match its spec")));
            }
        }
        let input_dim = layers[0].fan_in;
        let output_dim = layers[layers.len() - 1].fan_out;
        let expected_input = match variant {
            Variant::Plain => output_dim,
            Variant::Adjusted => output_dim + 1,
        };
        if input_dim != expected_input {
            return Err(Error::precondition(format!(
                "{} model with output {output_dim} needs input {expected_input}, got {input_dim}",
                variant.name()
            )));
        }
        if tied {
            let last = layers.len() - 1;
            for k in 0..layers.len() / 2 {
                let (a, b) = (&layers[k], &layers[last - k]);
                if a.fan_in != b.fan_out || a.fan_out != b.fan_in {
                    return Err(Error::precondition(format!(
                        "tied weights need layer {k} ({}→{}) to mirror layer {} ({}→{})",
                        a.fan_in,
                        a.fan_out,
                        last - k,
                        b.fan_in,
                        b.fan_out
                    )));
                }
            }
        }
        Ok(Self {
            variant,
            tied,
            layers,
            weights,
            biases,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    /// Mutable access to one parameter, by flat index over all weights then
    /// all biases of each layer in order. Used by gradient checks.
    pub fn parameter_mut(&mut self, layer: usize, index: usize) -> &mut f64 {
        let w = &mut self.weights[layer];
        if index < w.len() {
            let cols = w.ncols();
            &mut w[[index / cols, index % cols]]
        } else {
            &mut self.biases[layer][index - w.len()]
        }
    }

    /// Pairs `(k, L−1−k)` whose weights are tied.
    fn tied_pairs(&self) -> Vec<(usize, usize)> {
        if !self.tied {
            return Vec::new();
        }
        let last = self.layers.len() - 1;
        (0..self.layers.len() / 2).map(|k| (k, last - k)).collect()
    }

    fn sync_tied(&mut self) {
        for (owner, follower) in self.tied_pairs() {
            self.weights[follower] = self.weights[owner].t().to_owned();
        }
    }

    fn forward_cached(&self, input: ArrayView2<f64>, mut rng: Option<&mut Rng>) -> ForwardCache {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut masks = Vec::with_capacity(self.layers.len());
        activations.push(input.to_owned());
        for (k, spec) in self.layers.iter().enumerate() {
            let z = activations[k].dot(&self.weights[k].t()) + &self.biases[k];
            let mut a = match spec.activation {
                Activation::Rectifier => z.mapv(|v| v.max(0.0)),
                Activation::Identity => z.clone(),
            };
            let mask = match rng.as_deref_mut() {
                Some(r) if spec.dropout_keep < 1.0 => {
                    let keep = spec.dropout_keep;
                    let m = Array2::from_shape_fn(a.dim(), |_| if r.uniform() < keep { 1.0 / keep } else { 0.0 });
                    a *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre_activations.push(z);
            masks.push(mask);
            activations.push(a);
        }
        ForwardCache {
            activations,
            pre_activations,
            masks,
        }
    }

    /// Gradient of the batch-mean MSE, folded onto the owning layer when
    /// weights are tied.
    fn backward_cached(&self, cache: &ForwardCache, targets: ArrayView2<f64>) -> Gradients {
        let output = cache.activations.last().expect("output");
        let (batch, dim) = output.dim();
        let mut delta = (output - &targets) * (2.0 / (batch * dim) as f64);
        let mut weights = vec![Array2::zeros((0, 0)); self.layers.len()];
        let mut biases = vec![Array1::zeros(0); self.layers.len()];
        for k in (0..self.layers.len()).rev() {
            if let Some(m) = &cache.masks[k] {
                delta *= m;
            }
            if self.layers[k].activation == Activation::Rectifier {
                ndarray::Zip::from(&mut delta)
                    .and(&cache.pre_activations[k])
                    .for_each(|d, &z| {
                        if z <= 0.0 {
                            *d = 0.0;
                        }
                    });
            }
            weights[k] = delta.t().dot(&cache.activations[k]);
            biases[k] = delta.sum_axis(Axis(0));
            if k > 0 {
                delta = delta.dot(&self.weights[k]);
            }
        }
        for (owner, follower) in self.tied_pairs() {
            let folded = weights[follower].t().to_owned();
            weights[owner] += &folded;
            weights[follower].fill(0.0);
        }
        Gradients { weights, biases }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                found: len,
            });
        }
        Ok(())
    }

    /// Output for one input vector.
    pub fn forward(&self, input: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        self.check_input(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Infer => None,
        };
        let cache = self.forward_cached(x, rng);
        Ok(cache.activations.last().expect("output").row(0).to_vec())
    }

    /// Outputs for a batch of inputs (one per row), inference mode.
    pub fn forward_batch(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(inputs.ncols())?;
        Ok(self.forward_cached(inputs, None).activations.pop().expect("output"))
    }

    /// Exact gradient of `loss(forward(input), target)` under the dropout mask
    /// drawn in `mode`.
    pub fn backward(&self, input: &[f64], target: &[f64], mode: Mode<'_>) -> Result<Gradients> {
        self.check_input(input.len())?;
        if target.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: target.len(),
            });
        }
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let y = ArrayView2::from_shape((1, target.len()), target).expect("row vector");
        let rng = match mode {
            Mode::Train(r) => Some(r),
            Mode::Infer => None,
        };
        let cache = self.forward_cached(x, rng);
        Ok(self.backward_cached(&cache, y))
    }

    /// Model input for a spectrum: sorted ascending, with `q` appended for
    /// the adjusted variant.
    pub fn input_for(&self, spectrum: &[f64], q: f64) -> Vec<f64> {
        let mut x = spectrum.to_vec();
        x.sort_by(f64::total_cmp);
        if self.variant == Variant::Adjusted {
            x.push(q);
        }
        x
    }

    /// Cleaned spectrum for a sample spectrum observed at noise ratio `q`.
    ///
    /// Negative outputs are clamped to zero and the result is sorted; with
    /// `rescale` it is scaled to sum to N unless it is identically zero.
    pub fn clean(&self, sample_spectrum: &[f64], q: f64, rescale: bool) -> Result<CleanOutput> {
        let input = self.input_for(sample_spectrum, q);
        let mut values: Vec<f64> = self.forward(&input, Mode::Infer)?.into_iter().map(|v| v.max(0.0)).collect();
        let inversions = values.windows(2).filter(|w| w[1] < w[0]).count();
        let mut rescaled = false;
        if rescale {
            let sum: f64 = values.iter().sum();
            if sum > 0.0 {
                let scale = values.len() as f64 / sum;
                values.iter_mut().for_each(|v| *v *= scale);
                rescaled = true;
            } else {
                log::warn!("model output is identically zero; emitting it without trace rescaling");
            }
        }
        values.sort_by(f64::total_cmp);
        Ok(CleanOutput {
            values,
            inversions,
            rescaled,
        })
    }

    /// Text serialization; parses back to a bit-identical model.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MODEL_FORMAT_HEADER} {MODEL_FORMAT_VERSION}").unwrap();
        writeln!(s, "variant {}", self.variant.name()).unwrap();
        writeln!(s, "tied {}", u8::from(self.tied)).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(s, "layer {} {} {} {:?}", l.fan_in, l.fan_out, l.activation.name(), l.dropout_keep).unwrap();
        }
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            writeln!(s, "weights {k}").unwrap();
            for row in w.rows() {
                write_numbers(&mut s, row.iter());
            }
            writeln!(s, "bias {k}").unwrap();
            write_numbers(&mut s, b.iter());
        }
        let digest = sha256_hex(s.as_bytes());
        writeln!(s, "checksum sha256 {digest}").unwrap();
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body_end = text
            .rfind("checksum sha256 ")
            .ok_or_else(|| Error::Parse { line: 0, msg: "missing checksum line".into() })?;
        let (body, tail) = text.split_at(body_end);
        let expected = tail["checksum sha256 ".len()..].trim().to_string();
        let computed = sha256_hex(body.as_bytes());
        if expected != computed {
            return Err(Error::Checksum { expected, computed });
        }

        let mut lines = body.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse { line: 0, msg: format!("unexpected end of file, expected {what}") })
        };
        let (ln, header) = next("header")?;
        let mut it = header.split_whitespace();
        if it.next() != Some(MODEL_FORMAT_HEADER) {
            return Err(Error::Parse { line: ln, msg: "not a model file".into() });
        }
        let version: u32 = parse_field(it.next(), ln, "version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Parse { line: ln, msg: format!("unsupported format version {version}") });
        }
        let (ln, line) = next("variant")?;
        let variant = match keyed(line, "variant", ln)? {
            "plain" => Variant::Plain,
            "adjusted" => Variant::Adjusted,
            other => return Err(Error::Parse { line: ln, msg: format!("unknown variant {other:?}") }),
        };
        let (ln, line) = next("tied")?;
        let tied = match keyed(line, "tied", ln)? {
            "0" => false,
            "1" => true,
            other => return Err(Error::Parse { line: ln, msg: format!("bad tied flag {other:?}") }),
        };
        let (ln, line) = next("layers")?;
        let count: usize = parse_field(Some(keyed(line, "layers", ln)?), ln, "layer count")?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = next("layer")?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 5 || f[0] != "layer" {
                return Err(Error::Parse { line: ln, msg: "expected `layer fan_in fan_out activation keep`".into() });
            }
            let activation = Activation::parse(f[3])
                .ok_or_else(|| Error::Parse { line: ln, msg: format!("unknown activation {:?}", f[3]) })?;
            layers.push(LayerSpec::new(
                parse_field(Some(f[1]), ln, "fan_in")?,
                parse_field(Some(f[2]), ln, "fan_out")?,
                activation,
                parse_field(Some(f[4]), ln, "dropout keep")?,
            )?);
        }
        let mut weights = Vec::with_capacity(count);
        let mut biases = Vec::with_capacity(count);
        for (k, l) in layers.iter().enumerate() {
            let (ln, line) = next("weights")?;
            if line != format!("weights {k}") {
                return Err(Error::Parse { line: ln, msg: format!("expected `weights {k}`") });
            }
            let mut data = Vec::with_capacity(l.fan_in * l.fan_out);
            for _ in 0..l.fan_out {
                let (ln, line) = next("weight row")?;
                data.extend(parse_numbers(line, l.fan_in, ln)?);
            }
            weights.push(Array2::from_shape_vec((l.fan_out, l.fan_in), data).expect("row count checked"));
            let (ln, line) = next("bias")?;
            if line != format!("bias {k}") {
                return Err(Error::Parse { line: ln, msg: format!("expected `bias {k}`") });
            }
            let (ln, line) = next("bias row")?;
            biases.push(Array1::from(parse_numbers(line, l.fan_out, ln)?));
        }
        if let Some((ln, extra)) = lines.next() {
            return Err(Error::Parse { line: ln, msg: format!("unexpected trailing content {extra:?}") });
        }
        Self::from_parts(variant, layers, tied, weights, biases)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Output of [`MlpModel::clean`].
#[derive(Debug, Clone, PartialEq)]
pub struct CleanOutput {
    pub values: Vec<f64>,
    /// Adjacent descents in the raw model output, before sorting.
    pub inversions: usize,
    pub rescaled: bool,
}

fn write_numbers<'a>(s: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            s.push(' ');
        }
        first = false;
        write!(s, "{v:?}").unwrap();
    }
    s.push('\n');
}

fn parse_numbers(line: &str, expected: usize, ln: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Parse { line: ln, msg: format!("bad number {t:?}: {e}") }))
        .collect::<Result<Vec<_>>>()?;
    if values.len() != expected {
        return Err(Error::Parse { line: ln, msg: format!("expected {expected} numbers, found {}", values.len()) });
    }
    Ok(values)
}

fn keyed<'a>(line: &'a str, key: &str, ln: usize) -> Result<&'a str> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .map(str::trim)
        .ok_or_else(|| Error::Parse { line: ln, msg: format!("expected `{key} ...`") })
}

fn parse_field<T: std::str::FromStr>(field: Option<&str>, ln: usize, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let f = field.ok_or_else(|| Error::Parse { line: ln, msg: format!("missing {what}") })?;
    f.parse().map_err(|e| Error::Parse { line: ln, msg: format!("bad {what} {f:?}: {e}") })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Mean squared error.
pub fn loss(output: &[f64], target: &[f64]) -> Result<f64> {
    if output.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: target.len(),
            found: output.len(),
        });
    }
    if output.is_empty() {
        return Err(Error::precondition("loss of empty vectors"));
    }
    Ok(output.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / output.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    /// Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    AdaptiveMoment,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Apply each layer's dropout during training.
    pub dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 20,
            seed: 0,
            optimizer: Optimizer::AdaptiveMoment,
            dropout: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::precondition("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::precondition("batch size and epochs must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

struct AdamState {
    step: i32,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update<D: ndarray::Dimension>(
    param: &mut ndarray::Array<f64, D>,
    grad: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr_t: f64,
) {
    ndarray::Zip::from(param).and(grad).and(m).and(v).for_each(|p, &g, m, v| {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr_t * *m / (v.sqrt() + ADAM_EPS);
    });
}

/// Builds the `(inputs, targets)` matrices for `model` from records.
pub fn training_arrays(model: &MlpModel, records: &[SampleRecord]) -> Result<(Array2<f64>, Array2<f64>)> {
    let n = model.output_dim();
    let mut inputs = Array2::zeros((records.len(), model.input_dim()));
    let mut targets = Array2::zeros((records.len(), n));
    for (r, rec) in records.iter().enumerate() {
        if rec.n != n {
            return Err(Error::DimensionMismatch { expected: n, found: rec.n });
        }
        let x = model.input_for(&rec.sample_spectrum, rec.q);
        inputs.row_mut(r).assign(&Array1::from(x));
        let mut y = rec.true_spectrum.clone();
        y.sort_by(f64::total_cmp);
        targets.row_mut(r).assign(&Array1::from(y));
    }
    Ok((inputs, targets))
}

/// Trains on records; see [`train_arrays`].
pub fn train(model: MlpModel, records: &[SampleRecord], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (inputs, targets) = training_arrays(&model, records)?;
    train_arrays(model, inputs.view(), targets.view(), cfg)
}

/// Mini-batch minimization of the mean squared error over `(inputs, targets)`
/// rows. The epoch order is reshuffled from `cfg.seed`, so the result is a
/// deterministic function of its arguments.
pub fn train_arrays(
    mut model: MlpModel,
    inputs: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.check_input(inputs.ncols())?;
    if targets.ncols() != model.output_dim() || targets.nrows() != inputs.nrows() {
        return Err(Error::DimensionMismatch {
            expected: model.output_dim(),
            found: targets.ncols(),
        });
    }
    if inputs.nrows() == 0 {
        return Err(Error::precondition("no training examples"));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.nrows()).collect();
    let mut adam = AdamState {
        step: 0,
        m_w: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        v_w: model.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
        m_b: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        v_b: model.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
    };
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let x = inputs.select(Axis(0), chunk);
            let y = targets.select(Axis(0), chunk);
            let cache = model.forward_cached(x.view(), cfg.dropout.then_some(&mut rng));
            let out = cache.activations.last().expect("output");
            let batch_loss = (out - &y).mapv(|d| d * d).mean().expect("non-empty batch");
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            total += batch_loss * chunk.len() as f64;
            let grads = model.backward_cached(&cache, y.view());
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for k in 0..model.layers.len() {
                        model.weights[k].scaled_add(-cfg.learning_rate, &grads.weights[k]);
                        model.biases[k].scaled_add(-cfg.learning_rate, &grads.biases[k]);
                    }
                }
                Optimizer::AdaptiveMoment => {
                    adam.step += 1;
                    let lr_t = cfg.learning_rate * (1.0 - ADAM_BETA2.powi(adam.step)).sqrt()
                        / (1.0 - ADAM_BETA1.powi(adam.step));
                    for k in 0..model.layers.len() {
                        adam_update(&mut model.weights[k], &grads.weights[k], &mut adam.m_w[k], &mut adam.v_w[k], lr_t);
                        adam_update(&mut model.biases[k], &grads.biases[k], &mut adam.m_b[k], &mut adam.v_b[k], lr_t);
                    }
                }
            }
            model.sync_tied();
        }
        let epoch_loss = total / inputs.nrows() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:e}");
        history.push(epoch_loss);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn spec(i: usize, o: usize, a: Activation, keep: f64) -> LayerSpec {
        LayerSpec::new(i, o, a, keep).unwrap()
    }

    fn small_model(seed: u64) -> MlpModel {
        MlpModel::new(
            Variant::Plain,
            vec![spec(4, 3, Activation::Rectifier, 1.0), spec(3, 4, Activation::Identity, 1.0)],
            false,
            &mut Rng::new(seed),
        )
        .unwrap()
    }

    /// Largest relative error between backprop and central differences.
    fn gradient_error(model: &MlpModel, x: &[f64], y: &[f64]) -> f64 {
        let grads = model.backward(x, y, Mode::Infer).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..model.layers().len() {
            let count = model.weights()[k].len() + model.biases()[k].len();
            for idx in 0..count {
                let analytic = if idx < model.weights()[k].len() {
                    let c = model.weights()[k].ncols();
                    grads.weights[k][[idx / c, idx % c]]
                } else {
                    grads.biases[k][idx - model.weights()[k].len()]
                };
                let mut plus = model.clone();
                *plus.parameter_mut(k, idx) += h;
                plus.sync_tied();
                let mut minus = model.clone();
                *minus.parameter_mut(k, idx) -= h;
                minus.sync_tied();
                let lp = loss(&plus.forward(x, Mode::Infer).unwrap(), y).unwrap();
                let lm = loss(&minus.forward(x, Mode::Infer).unwrap(), y).unwrap();
                let numeric = (lp - lm) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max((analytic - numeric).abs() / scale);
            }
        }
        worst
    }

    #[test]
    fn zero_model_outputs_zero() {
        let layers = vec![spec(3, 2, Activation::Identity, 1.0), spec(2, 3, Activation::Identity, 1.0)];
        let model = MlpModel::from_parts(
            Variant::Plain,
            layers,
            false,
            vec![Array2::zeros((2, 3)), Array2::zeros((3, 2))],
            vec![Array1::zeros(2), Array1::zeros(3)],
        )
        .unwrap();
        assert_eq!(model.forward(&[1.0, -2.0, 3.0], Mode::Infer).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rectifier_identity_layer() {
        let model = MlpModel::from_parts(
            Variant::Plain,
            vec![spec(2, 2, Activation::Rectifier, 1.0)],
            false,
            vec![Array2::eye(2)],
            vec![Array1::zeros(2)],
        )
        .unwrap();
        assert_eq!(model.forward(&[-1.0, 2.0], Mode::Infer).unwrap(), vec![0.0, 2.0]);
        assert!(model.forward(&[1.0], Mode::Infer).is_err());
    }

    #[test]
    fn keep_one_dropout_is_a_no_op() {
        let model = small_model(3);
        let x = [0.3, -0.2, 1.1, 0.7];
        let mut rng = Rng::new(1);
        assert_eq!(
            model.forward(&x, Mode::Train(&mut rng)).unwrap(),
            model.forward(&x, Mode::Infer).unwrap()
        );
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let a = loss(&[0.5, -1.0, 2.0], &[0.0; 3]).unwrap();
        let b = loss(&[1.0, -2.0, 4.0], &[0.0; 3]).unwrap();
        assert!((b - 4.0 * a).abs() < 1e-15);
        assert!(loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let model = small_model(9);
        let mut rng = Rng::new(10);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let err = gradient_error(&model, &x, &y);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn tied_gradient_matches_finite_differences() {
        let model = MlpModel::new(
            Variant::Plain,
            vec![
                spec(5, 3, Activation::Rectifier, 1.0),
                spec(3, 3, Activation::Rectifier, 1.0),
                spec(3, 5, Activation::Identity, 1.0),
            ],
            true,
            &mut Rng::new(2),
        )
        .unwrap();
        assert_eq!(model.weights()[2], model.weights()[0].t());
        let mut rng = Rng::new(3);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        // Only the owning layers are free parameters.
        let grads = model.backward(&x, &y, Mode::Infer).unwrap();
        assert!(grads.weights[2].iter().all(|&g| g == 0.0));
        let err = gradient_error(&model, &x, &y);
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn tied_rejects_mismatched_shapes() {
        let layers = vec![spec(41, 30, Activation::Rectifier, 1.0), spec(30, 40, Activation::Identity, 1.0)];
        assert!(MlpModel::new(Variant::Adjusted, layers, true, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn zero_residual_zero_gradient() {
        let model = small_model(4);
        let x = [0.1, 0.2, 0.3, 0.4];
        let y = model.forward(&x, Mode::Infer).unwrap();
        let g = model.backward(&x, &y, Mode::Infer).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_model_gradient_is_least_squares() {
        // y = Wx + b, L = |y - t|²/d ⇒ ∂L/∂W = 2/d (y - t) xᵗ, ∂L/∂b = 2/d (y - t).
        let model = MlpModel::new(Variant::Plain, vec![spec(3, 3, Activation::Identity, 1.0)], false, &mut Rng::new(6))
            .unwrap();
        let x = [0.5, -1.0, 2.0];
        let t = [1.0, 0.0, -1.0];
        let w = &model.weights()[0];
        let y: Vec<f64> = (0..3).map(|i| (0..3).map(|j| w[[i, j]] * x[j]).sum::<f64>()).collect();
        let g = model.backward(&x, &t, Mode::Infer).unwrap();
        for i in 0..3 {
            let r = 2.0 / 3.0 * (y[i] - t[i]);
            assert!((g.biases[0][i] - r).abs() < 1e-14);
            for j in 0..3 {
                assert!((g.weights[0][[i, j]] - r * x[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dropout_gradient_uses_the_sampled_mask() {
        let model = MlpModel::new(
            Variant::Plain,
            vec![spec(3, 6, Activation::Rectifier, 0.5), spec(6, 3, Activation::Identity, 1.0)],
            false,
            &mut Rng::new(8),
        )
        .unwrap();
        let x = [0.4, 0.9, -0.3];
        let t = [0.0, 1.0, 0.5];
        let g = model.backward(&x, &t, Mode::Train(&mut Rng::new(42))).unwrap();
        // Replay the same mask: a unit dropped in the forward pass gets no
        // gradient in the next layer's weights.
        let out_dropped = model.forward(&x, Mode::Train(&mut Rng::new(42))).unwrap();
        let full = model.forward(&x, Mode::Infer).unwrap();
        assert_ne!(out_dropped, full);
        let dead: Vec<usize> = (0..6).filter(|&c| g.weights[1].column(c).iter().all(|&v| v == 0.0)).collect();
        assert!(!dead.is_empty());
    }

    #[test]
    fn dropout_is_unbiased() {
        let model = MlpModel::new(
            Variant::Plain,
            vec![spec(3, 8, Activation::Identity, 0.75), spec(8, 3, Activation::Identity, 1.0)],
            false,
            &mut Rng::new(12),
        )
        .unwrap();
        let x = [0.7, -0.4, 1.3];
        let expected = model.forward(&x, Mode::Infer).unwrap();
        let mut rng = Rng::new(13);
        let draws = 100_000;
        let mut mean = [0.0; 3];
        for _ in 0..draws {
            for (m, v) in mean.iter_mut().zip(model.forward(&x, Mode::Train(&mut rng)).unwrap()) {
                *m += v / draws as f64;
            }
        }
        for (m, e) in mean.iter().zip(&expected) {
            assert!((m - e).abs() <= 0.01 * e.abs().max(0.1), "{m} vs {e}");
        }
    }

    #[test]
    fn memorizes_small_batch() {
        let n = 8;
        let mut rng = Rng::new(20);
        let inputs = Array2::from_shape_fn((32, n + 1), |_| rng.uniform_range(0.0, 2.0));
        let targets = Array2::from_shape_fn((32, n), |_| rng.uniform_range(0.0, 2.0));
        let model = MlpModel::autoencoder(n, &[64, 64], 0.0, Variant::Adjusted, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2000,
            batch_size: 32,
            ..Default::default()
        };
        let out = train_arrays(model, inputs.view(), targets.view(), &cfg).unwrap();
        let last = *out.history.last().unwrap();
        assert!(last < 1e-3, "{last}");
        assert!(last < out.history[0]);
    }

    #[test]
    fn learns_identity_map() {
        let n = 6;
        let mut rng = Rng::new(30);
        let make = |rng: &mut Rng, rows: usize| {
            let x = Array2::from_shape_fn((rows, n + 1), |_| rng.uniform_range(0.0, 2.0));
            let y = x.slice(ndarray::s![.., ..n]).to_owned();
            (x, y)
        };
        let (x, y) = make(&mut rng, 2000);
        let model = MlpModel::autoencoder(n, &[64, 64], 0.0, Variant::Adjusted, 2).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 32,
            ..Default::default()
        };
        let trained = train_arrays(model, x.view(), y.view(), &cfg).unwrap().model;
        let (vx, vy) = make(&mut rng, 500);
        let pred = trained.forward_batch(vx.view()).unwrap();
        let mse = (&pred - &vy).mapv(|d| d * d).mean().unwrap();
        assert!(mse < 1e-2, "{mse}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = Rng::new(40);
        let x = Array2::from_shape_fn((100, 5), |_| rng.normal());
        let y = Array2::from_shape_fn((100, 4), |_| rng.normal());
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 5,
            ..Default::default()
        };
        let m = || MlpModel::autoencoder(4, &[10, 8], 0.25, Variant::Adjusted, 7).unwrap();
        let a = train_arrays(m(), x.view(), y.view(), &cfg).unwrap();
        let b = train_arrays(m(), x.view(), y.view(), &cfg).unwrap();
        assert_eq!(a.model.to_text(), b.model.to_text());
        assert_eq!(a.history, b.history);
        let sgd = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 0.01, ..cfg };
        let c = train_arrays(m(), x.view(), y.view(), &sgd).unwrap();
        assert!(c.history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn divergence_is_reported() {
        let x = Array2::from_elem((8, 3), 1e200);
        let y = Array2::zeros((8, 3));
        let model = MlpModel::new(Variant::Plain, vec![spec(3, 3, Activation::Identity, 1.0)], false, &mut Rng::new(0))
            .unwrap();
        let cfg = TrainConfig { optimizer: Optimizer::Sgd, learning_rate: 1.0, epochs: 3, ..Default::default() };
        assert!(matches!(train_arrays(model, x.view(), y.view(), &cfg), Err(Error::Divergence { .. })));
    }

    #[test]
    fn paper_architecture_shape() {
        let m = MlpModel::autoencoder(180, &[300, 200], 0.25, Variant::Adjusted, 0).unwrap();
        let dims: Vec<(usize, usize, f64)> = m.layers().iter().map(|l| (l.fan_in, l.fan_out, l.dropout_keep)).collect();
        assert_eq!(dims, vec![(181, 300, 1.0), (300, 200, 0.75), (200, 180, 1.0)]);
        assert_eq!(m.layers()[2].activation, Activation::Identity);
        assert_eq!(m.input_dim(), m.output_dim() + 1);
        let plain = MlpModel::autoencoder(180, &[300, 200], 0.25, Variant::Plain, 0).unwrap();
        assert_eq!(plain.input_dim(), plain.output_dim());
    }

    #[test]
    fn clean_of_zero_model_is_unrescaled_zeros() {
        let layers = vec![spec(4, 3, Activation::Identity, 1.0)];
        let model = MlpModel::from_parts(
            Variant::Adjusted,
            layers,
            false,
            vec![Array2::zeros((3, 4))],
            vec![Array1::zeros(3)],
        )
        .unwrap();
        let out = model.clean(&[0.5, 1.0, 1.5], 0.5, true).unwrap();
        assert_eq!(out.values, vec![0.0; 3]);
        assert!(!out.rescaled);
        assert!(model.clean(&[1.0, 2.0], 0.5, true).is_err());
    }

    #[test]
    fn clean_sorts_and_reports_inversions() {
        // Output reverses the spectrum, so every adjacent pair is inverted.
        let w = Array2::from_shape_fn((3, 4), |(i, j)| if i + j == 2 { 1.0 } else { 0.0 });
        let model = MlpModel::from_parts(
            Variant::Adjusted,
            vec![spec(4, 3, Activation::Identity, 1.0)],
            false,
            vec![w],
            vec![Array1::zeros(3)],
        )
        .unwrap();
        let out = model.clean(&[2.0, 0.5, 0.5], 0.3, true).unwrap();
        assert_eq!(out.inversions, 1);
        assert_eq!(out.values, vec![0.5, 0.5, 2.0]);
    }

    #[test]
    fn serialization_rejects_tampering() {
        let text = small_model(1).to_text();
        let tampered = text.replacen("layer 4 3", "layer 4 2", 1);
        assert!(matches!(MlpModel::from_text(&tampered), Err(Error::Checksum { .. })));
        assert!(MlpModel::from_text("garbage").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn serialization_round_trips_bitwise(seed in any::<u64>(), scale in -300i32..300) {
            let mut model = MlpModel::autoencoder(5, &[7, 6], 0.25, Variant::Adjusted, seed).unwrap();
            // Exercise extreme magnitudes and signed zero.
            *model.parameter_mut(0, 0) *= 10f64.powi(scale);
            *model.parameter_mut(1, 1) = -0.0;
            let back = MlpModel::from_text(&model.to_text()).unwrap();
            for (a, b) in model.weights().iter().zip(back.weights()) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            for (a, b) in model.biases().iter().zip(back.biases()) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(back.layers(), model.layers());
        }
    }
}
