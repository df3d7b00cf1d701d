//! Dense feed-forward networks, Adam, and the `.w16` weight container.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
        }
    }

    /// Derivative expressed through the activation's output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
            Activation::Sigmoid => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Parameter gradients shaped like an `Mlp`.
#[derive(Clone, Debug)]
pub struct MlpGrad {
    pub weights: Vec<DMatrix<f64>>,
    pub bias: Vec<DVector<f64>>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrad {
            weights: net
                .layers
                .iter()
                .map(|l| DMatrix::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
            bias: net.layers.iter().map(|l| DVector::zeros(l.bias.len())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.bias.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidInput(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (n_in, n_out) = (w[0], w[1]);
                let bound = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weights: DMatrix::from_fn(n_out, n_in, |_, _| rng.random_range(-bound..bound)),
                    bias: DVector::zeros(n_out),
                    activation: if k == last { output } else { hidden },
                }
            })
            .collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("network has no layers".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::InvalidInput(format!("layer {k}: bias length mismatch")));
            }
            if k > 0 && layers[k - 1].weights.nrows() != l.weights.ncols() {
                return Err(Error::InvalidInput(format!("layer {k}: input size mismatch")));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weights.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &[f64]) -> DVector<f64> {
        assert_eq!(x.len(), self.input_dim(), "network input size");
        let mut a = DVector::from_column_slice(x);
        for l in &self.layers {
            let mut z = &l.bias + &l.weights * &a;
            z.apply(|v| *v = l.activation.apply(*v));
            a = z;
        }
        a
    }

    /// Activations of every layer for a batch stored one sample per column.
    /// Element 0 is the input itself.
    pub fn forward_cached(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for l in &self.layers {
            let prev = acts.last().unwrap();
            let mut z = &l.weights * prev;
            for mut col in z.column_iter_mut() {
                col += &l.bias;
            }
            z.apply(|v| *v = l.activation.apply(*v));
            acts.push(z);
        }
        acts
    }

    pub fn forward_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).pop().unwrap()
    }

    /// Back-propagates `d_out` (dL/d output activations, one column per
    /// sample) and returns parameter gradients plus dL/d input.
    pub fn backward(&self, acts: &[DMatrix<f64>], d_out: &DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        self.backward_inner(acts, d_out, false)
    }

    /// Like `backward`, but `d_pre` is the gradient with respect to the last
    /// layer's pre-activation (e.g. `sigmoid(z) - y` for cross-entropy).
    pub fn backward_pre(&self, acts: &[DMatrix<f64>], d_pre: &DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        self.backward_inner(acts, d_pre, true)
    }

    fn backward_inner(&self, acts: &[DMatrix<f64>], d: &DMatrix<f64>, pre: bool) -> (MlpGrad, DMatrix<f64>) {
        let mut grad = MlpGrad::zeros_like(self);
        let mut delta = d.clone();
        let last = self.layers.len() - 1;
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            if !(pre && k == last) {
                delta.zip_apply(&acts[k + 1], |d, a| *d *= l.activation.derivative_from_output(a));
            }
            grad.weights[k] = &delta * acts[k].transpose();
            grad.bias[k] = delta.column_sum();
            delta = l.weights.tr_mul(&delta);
        }
        (grad, delta)
    }

    /// Gradient of `d_out . f(x)` with respect to the input.
    pub fn input_gradient(&self, x: &[f64], d_out: &[f64]) -> DVector<f64> {
        let acts = self.forward_cached(&DMatrix::from_column_slice(x.len(), 1, x));
        let (_, dx) = self.backward(&acts, &DMatrix::from_column_slice(d_out.len(), 1, d_out));
        dx.column(0).into_owned()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with a fixed step size.
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: MlpGrad,
    v: MlpGrad,
}

impl Adam {
    pub fn new(net: &Mlp, cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            t: 0,
            m: MlpGrad::zeros_like(net),
            v: MlpGrad::zeros_like(net),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.learning_rate = lr;
    }

    pub fn step(&mut self, net: &mut Mlp, grad: &MlpGrad) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let lr = c.learning_rate;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.epsilon);
            }
        };
        for (k, layer) in net.layers.iter_mut().enumerate() {
            update(
                layer.weights.as_mut_slice(),
                grad.weights[k].as_slice(),
                self.m.weights[k].as_mut_slice(),
                self.v.weights[k].as_mut_slice(),
            );
            update(
                layer.bias.as_mut_slice(),
                grad.bias[k].as_slice(),
                self.m.bias[k].as_mut_slice(),
                self.v.bias[k].as_mut_slice(),
            );
        }
    }
}

pub const WEIGHT_MAGIC: &[u8; 8] = b"TKNW16\0\0";
pub const WEIGHT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NetworkKind {
    Retargeter,
    CollisionClassifier,
}

impl NetworkKind {
    fn code(self) -> u32 {
        match self {
            NetworkKind::Retargeter => 1,
            NetworkKind::CollisionClassifier => 2,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            1 => Some(NetworkKind::Retargeter),
            2 => Some(NetworkKind::CollisionClassifier),
            _ => None,
        }
    }
}

/// Contents of a weight file: the network plus per-output `(lower, upper)`
/// scaling (empty for classifiers).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightFile {
    pub kind: NetworkKind,
    pub net: Mlp,
    pub scaling: Vec<(f64, f64)>,
}

/// Binary layout, all integers u32 LE and floats f64 LE:
/// magic[8], version, kind, n_layers, n_layers x (in, out, activation),
/// per layer weights (row-major) then biases, n_scaling, n_scaling x (lower, upper),
/// then the SHA-256 of everything before it.
pub fn encode_weights(file: &WeightFile) -> Vec<u8> {
    let mut buf = Vec::new();
    let u32le = |buf: &mut Vec<u8>, v: u32| buf.extend_from_slice(&v.to_le_bytes());
    buf.extend_from_slice(WEIGHT_MAGIC);
    u32le(&mut buf, WEIGHT_VERSION);
    u32le(&mut buf, file.kind.code());
    u32le(&mut buf, file.net.layers.len() as u32);
    for l in &file.net.layers {
        u32le(&mut buf, l.weights.ncols() as u32);
        u32le(&mut buf, l.weights.nrows() as u32);
        u32le(&mut buf, l.activation.code());
    }
    for l in &file.net.layers {
        for r in 0..l.weights.nrows() {
            for c in 0..l.weights.ncols() {
                buf.extend_from_slice(&l.weights[(r, c)].to_le_bytes());
            }
        }
        for b in l.bias.iter() {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    u32le(&mut buf, file.scaling.len() as u32);
    for (lo, hi) in &file.scaling {
        buf.extend_from_slice(&lo.to_le_bytes());
        buf.extend_from_slice(&hi.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::WeightFile {
            path: self.path.to_string(),
            message: format!("{} (at byte {})", msg.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_weights(bytes: &[u8], path: &str) -> Result<WeightFile> {
    let werr = |m: &str| Error::WeightFile {
        path: path.to_string(),
        message: m.to_string(),
    };
    if bytes.len() < WEIGHT_MAGIC.len() + 32 || &bytes[..8] != WEIGHT_MAGIC {
        return Err(werr("not a weight file (bad magic)"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(werr("checksum mismatch"));
    }
    let mut r = Reader {
        bytes: body,
        pos: 8,
        path,
    };
    let version = r.u32()?;
    if version != WEIGHT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let kind_code = r.u32()?;
    let kind = NetworkKind::from_code(kind_code)
        .ok_or_else(|| r.err(format!("unknown network kind {kind_code}")))?;
    let n_layers = r.u32()? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(r.err(format!("implausible layer count {n_layers}")));
    }
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let (n_in, n_out) = (r.u32()? as usize, r.u32()? as usize);
        let act_code = r.u32()?;
        let act =
            Activation::from_code(act_code).ok_or_else(|| r.err(format!("unknown activation {act_code}")))?;
        shapes.push((n_in, n_out, act));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (n_in, n_out, activation) in shapes {
        if (n_in * n_out + n_out) * 8 > body.len() {
            return Err(r.err("layer shape exceeds file size"));
        }
        let mut weights = DMatrix::zeros(n_out, n_in);
        for row in 0..n_out {
            for col in 0..n_in {
                weights[(row, col)] = r.f64()?;
            }
        }
        let mut bias = DVector::zeros(n_out);
        for b in bias.iter_mut() {
            *b = r.f64()?;
        }
        layers.push(Layer {
            weights,
            bias,
            activation,
        });
    }
    let n_scaling = r.u32()? as usize;
    let mut scaling = Vec::with_capacity(n_scaling.min(1024));
    for _ in 0..n_scaling {
        scaling.push((r.f64()?, r.f64()?));
    }
    if r.pos != body.len() {
        return Err(r.err("trailing bytes"));
    }
    let net = Mlp::from_layers(layers).map_err(|e| werr(&e.to_string()))?;
    // Retargeters scale outputs; classifiers store input normalization.
    let expected = match kind {
        NetworkKind::Retargeter => net.output_dim(),
        NetworkKind::CollisionClassifier => net.input_dim(),
    };
    if !scaling.is_empty() && scaling.len() != expected {
        return Err(werr(&format!(
            "{} scaling entries, expected {expected}",
            scaling.len()
        )));
    }
    Ok(WeightFile { kind, net, scaling })
}

pub fn save_weights(file: &WeightFile, path: &Path) -> Result<()> {
    std::fs::write(path, encode_weights(file)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: &Path) -> Result<WeightFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, &path.display().to_string())
}

/// Hex SHA-256 of the encoded file.
pub fn weights_checksum(file: &WeightFile) -> String {
    hex::encode(Sha256::digest(encode_weights(file)))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    activation: Activation,
    /// Row-major, one inner list per output.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightJson {
    version: u32,
    kind: NetworkKind,
    layers: Vec<LayerJson>,
    scaling: Vec<(f64, f64)>,
}

/// Lossless text form for inspection.
pub fn weights_to_json(file: &WeightFile) -> String {
    let doc = WeightJson {
        version: WEIGHT_VERSION,
        kind: file.kind,
        layers: file
            .net
            .layers
            .iter()
            .map(|l| LayerJson {
                activation: l.activation,
                weights: l
                    .weights
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
                bias: l.bias.iter().copied().collect(),
            })
            .collect(),
        scaling: file.scaling.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("weights serialize")
}

pub fn weights_from_json(text: &str, source: &str) -> Result<WeightFile> {
    let doc: WeightJson = serde_json::from_str(text)
        .map_err(|e| Error::parse(source, format!("line {}", e.line()), e.to_string()))?;
    let mut layers = Vec::new();
    for (k, l) in doc.layers.into_iter().enumerate() {
        let n_out = l.weights.len();
        let n_in = l.weights.first().map_or(0, Vec::len);
        if l.weights.iter().any(|r| r.len() != n_in) {
            return Err(Error::parse(
                source,
                format!("layers[{k}].weights"),
                "ragged rows",
            ));
        }
        layers.push(Layer {
            weights: DMatrix::from_row_iterator(n_out, n_in, l.weights.into_iter().flatten()),
            bias: DVector::from_vec(l.bias),
            activation: l.activation,
        });
    }
    let net = Mlp::from_layers(layers).map_err(|e| Error::parse(source, "layers", e.to_string()))?;
    Ok(WeightFile {
        kind: doc.kind,
        net,
        scaling: doc.scaling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Mlp {
        Mlp::new(&[3, 5, 4, 2], Activation::Tanh, Activation::Sigmoid, 11).unwrap()
    }

    #[test]
    fn forward_matches_batch() {
        let net = small();
        let x = DMatrix::from_fn(3, 7, |r, c| (r as f64 - c as f64) * 0.3);
        let batch = net.forward_batch(&x);
        for c in 0..7 {
            let single = net.forward(x.column(c).as_slice());
            assert!((single - batch.column(c)).norm() < 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = small();
        let x = DMatrix::from_fn(3, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.2 - 0.4);
        let weights = DMatrix::from_fn(2, 4, |r, c| (r + c) as f64 * 0.1 + 0.1);
        let loss = |n: &Mlp| n.forward_batch(&x).component_mul(&weights).sum();
        let acts = net.forward_cached(&x);
        let (grad, dx) = net.backward(&acts, &weights);
        let h = 1e-6;
        for k in 0..net.layers.len() {
            for i in 0..net.layers[k].weights.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                p.layers[k].weights.as_mut_slice()[i] += h;
                m.layers[k].weights.as_mut_slice()[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - grad.weights[k].as_slice()[i]).abs() < 1e-8);
            }
            for i in 0..net.layers[k].bias.len() {
                let mut p = net.clone();
                let mut m = net.clone();
                p.layers[k].bias[i] += h;
                m.layers[k].bias[i] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - grad.bias[k][i]).abs() < 1e-8);
            }
        }
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_mut_slice()[i] += h;
            xm.as_mut_slice()[i] -= h;
            let f = |x: &DMatrix<f64>| net.forward_batch(x).component_mul(&weights).sum();
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((fd - dx.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(-800.0).is_finite());
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut net = Mlp::new(&[1, 1], Activation::Identity, Activation::Identity, 1).unwrap();
        let mut opt = Adam::new(
            &net,
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
        );
        // fit y = 2x - 1 on a few points
        let x = DMatrix::from_row_slice(1, 4, &[-1.0, 0.0, 1.0, 2.0]);
        let y = x.map(|v| 2.0 * v - 1.0);
        for _ in 0..2000 {
            let acts = net.forward_cached(&x);
            let d = (acts.last().unwrap() - &y) * 0.5;
            let (g, _) = net.backward(&acts, &d);
            opt.step(&mut net, &g);
        }
        assert!((net.layers[0].weights[(0, 0)] - 2.0).abs() < 1e-3);
        assert!((net.layers[0].bias[0] + 1.0).abs() < 1e-3);
    }

    #[test]
    fn weight_file_round_trip() {
        let file = WeightFile {
            kind: NetworkKind::Retargeter,
            net: small(),
            scaling: vec![(-0.196, 1.61), (0.0, 1.0)],
        };
        let bytes = encode_weights(&file);
        let back = decode_weights(&bytes, "mem").unwrap();
        assert_eq!(back, file);
        assert_eq!(encode_weights(&back), bytes);
        assert_eq!(weights_checksum(&back), weights_checksum(&file));

        let json = weights_to_json(&file);
        assert_eq!(weights_from_json(&json, "json").unwrap(), file);
    }

    #[test]
    fn weight_file_rejects_corruption() {
        let file = WeightFile {
            kind: NetworkKind::CollisionClassifier,
            net: small(),
            scaling: vec![],
        };
        let mut bytes = encode_weights(&file);
        bytes[40] ^= 1;
        let err = decode_weights(&bytes, "x.w16").unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        assert!(decode_weights(b"nonsense", "x.w16").is_err());
        let good = encode_weights(&file);
        assert!(decode_weights(&good[..good.len() - 1], "x.w16").is_err());
    }
}
