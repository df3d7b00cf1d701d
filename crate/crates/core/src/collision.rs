//! Capsule self-collision ground truth, labeled data, and the learned
//! collision classifier used as a differentiable penalty.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{toml_error, KinematicChain};
use crate::network::{Activation, Adam, AdamConfig, Mlp, NetworkKind, WeightFile};
use crate::se3::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Capsule {
    pub link: usize,
    pub link_name: String,
    /// Segment endpoints in link-local coordinates.
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct CollisionGeometry {
    chain_name: String,
    capsules: Vec<Capsule>,
    /// Capsule index pairs that are tested.
    pairs: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryDoc {
    chain: String,
    #[serde(default)]
    exclude: Vec<[String; 2]>,
    capsules: Vec<CapsuleDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CapsuleDoc {
    link: String,
    a: [f64; 3],
    b: [f64; 3],
    radius: f64,
}

/// Closest distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
    let (c1, c2) = closest_points(p1, q1, p2, q2);
    (c1 - c2).norm()
}

/// Closest points between two segments (clamped parametric solution).
pub fn closest_points(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> (Vec3, Vec3) {
    const EPS: f64 = 1e-18;
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= EPS && e <= EPS {
        return (*p1, *p2);
    }
    if a <= EPS {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= EPS {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > EPS * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

impl CollisionGeometry {
    pub fn load(source: &str, text: &str, chain: &KinematicChain) -> Result<Self> {
        let doc: GeometryDoc = toml::from_str(text).map_err(|e| toml_error(source, text, e))?;
        if doc.chain != chain.name() {
            return Err(Error::parse(
                source,
                "chain",
                format!("geometry is for chain '{}', got '{}'", doc.chain, chain.name()),
            ));
        }
        let mut capsules = Vec::with_capacity(doc.capsules.len());
        for (k, c) in doc.capsules.iter().enumerate() {
            let link = chain.link_index(&c.link).ok_or_else(|| {
                Error::parse(
                    source,
                    format!("capsules[{k}].link"),
                    format!("unknown link '{}'", c.link),
                )
            })?;
            if !(c.radius > 0.0 && c.radius.is_finite()) {
                return Err(Error::parse(
                    source,
                    format!("capsules[{k}].radius"),
                    "radius must be positive",
                ));
            }
            capsules.push(Capsule {
                link,
                link_name: c.link.clone(),
                a: Vec3::from(c.a),
                b: Vec3::from(c.b),
                radius: c.radius,
            });
        }
        let mut exclude = Vec::new();
        for (k, [x, y]) in doc.exclude.iter().enumerate() {
            let find = |n: &str| {
                chain.link_index(n).ok_or_else(|| {
                    Error::parse(source, format!("exclude[{k}]"), format!("unknown link '{n}'"))
                })
            };
            exclude.push((find(x)?, find(y)?));
        }
        CollisionGeometry::new(chain, capsules, &exclude)
    }

    /// Builds the pair list: capsules on distinct links, skipping adjacent
    /// links (a link and its nearest ancestor that carries geometry) and the
    /// explicitly excluded link pairs.
    pub fn new(chain: &KinematicChain, capsules: Vec<Capsule>, exclude: &[(usize, usize)]) -> Result<Self> {
        for c in &capsules {
            if c.link >= chain.links().len() || chain.links()[c.link].name != c.link_name {
                return Err(Error::InvalidInput(format!(
                    "capsule link '{}' not in chain",
                    c.link_name
                )));
            }
            if !(c.radius > 0.0) {
                return Err(Error::InvalidInput("capsule radius must be positive".into()));
            }
        }
        let has_geometry: HashSet<usize> = capsules.iter().map(|c| c.link).collect();
        let mut skip: HashSet<(usize, usize)> = HashSet::new();
        let mut add = |a: usize, b: usize| {
            skip.insert((a.min(b), a.max(b)));
        };
        for &(a, b) in exclude {
            add(a, b);
        }
        for &link in &has_geometry {
            if let Some(parent) = chain
                .ancestors(link)
                .into_iter()
                .find(|p| has_geometry.contains(p))
            {
                add(link, parent);
            }
        }
        let mut pairs = Vec::new();
        for i in 0..capsules.len() {
            for j in i + 1..capsules.len() {
                let (a, b) = (capsules[i].link, capsules[j].link);
                if a != b && !skip.contains(&(a.min(b), a.max(b))) {
                    pairs.push((i, j));
                }
            }
        }
        Ok(CollisionGeometry {
            chain_name: chain.name().to_string(),
            capsules,
            pairs,
        })
    }

    pub fn capsules(&self) -> &[Capsule] {
        &self.capsules
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Same geometry with every radius grown by `eps`.
    pub fn inflated(&self, eps: f64) -> Self {
        let mut g = self.clone();
        for c in &mut g.capsules {
            c.radius += eps;
        }
        g
    }

    fn check_chain(&self, chain: &KinematicChain) -> Result<()> {
        if chain.name() != self.chain_name || self.capsules.iter().any(|c| c.link >= chain.links().len()) {
            return Err(Error::InvalidInput(format!(
                "collision geometry for '{}' used with chain '{}'",
                self.chain_name,
                chain.name()
            )));
        }
        Ok(())
    }

    /// Capsule segment endpoints in the chain root frame.
    pub fn world_segments(&self, chain: &KinematicChain, q: &[f64]) -> Result<Vec<(Vec3, Vec3)>> {
        self.check_chain(chain)?;
        let frames = chain.link_frames(q)?;
        Ok(self
            .capsules
            .iter()
            .map(|c| {
                let f = &frames[c.link];
                (f.transform_point(&c.a), f.transform_point(&c.b))
            })
            .collect())
    }

    /// Smallest `distance - (r1 + r2)` over tested pairs; negative means contact.
    pub fn min_clearance(&self, chain: &KinematicChain, q: &[f64]) -> Result<f64> {
        let segs = self.world_segments(chain, q)?;
        Ok(self
            .pairs
            .iter()
            .map(|&(i, j)| {
                let d = segment_distance(&segs[i].0, &segs[i].1, &segs[j].0, &segs[j].1);
                d - self.capsules[i].radius - self.capsules[j].radius
            })
            .fold(f64::INFINITY, f64::min))
    }
}

/// True iff any tested capsule pair is closer than the sum of its radii.
pub fn check_self_collision(geom: &CollisionGeometry, chain: &KinematicChain, q: &[f64]) -> Result<bool> {
    Ok(geom.min_clearance(chain, q)? < 0.0)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledConfigSet {
    pub q: Vec<Vec<f64>>,
    /// True for self-colliding configurations.
    pub labels: Vec<bool>,
}

impl LabeledConfigSet {
    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn positive_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|l| **l).count() as f64 / self.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let dim = self.q.first().map_or(0, Vec::len);
        let mut header: Vec<String> = (0..dim).map(|i| format!("q{i}")).collect();
        header.push("label".into());
        let write = |w: &mut std::io::BufWriter<std::fs::File>| -> std::io::Result<()> {
            writeln!(w, "{}", header.join(","))?;
            for (q, l) in self.q.iter().zip(&self.labels) {
                for v in q {
                    write!(w, "{v},")?;
                }
                writeln!(w, "{}", u8::from(*l))?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let src = path.display().to_string();
        let mut set = LabeledConfigSet::default();
        let mut dim = None;
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let lineno = i + 1;
            if i == 0 {
                let cols = line.split(',').count();
                if cols < 2 || !line.ends_with("label") {
                    return Err(Error::parse(
                        &src,
                        format!("line {lineno}"),
                        "expected header ending in 'label'",
                    ));
                }
                dim = Some(cols - 1);
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if Some(fields.len() - 1) != dim {
                return Err(Error::parse(&src, format!("line {lineno}"), "wrong column count"));
            }
            let q = fields[..fields.len() - 1]
                .iter()
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(&src, format!("line {lineno}"), e.to_string()))?;
            let label = match fields[fields.len() - 1].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::parse(
                        &src,
                        format!("line {lineno}"),
                        format!("bad label '{other}'"),
                    ))
                }
            };
            set.q.push(q);
            set.labels.push(label);
        }
        Ok(set)
    }
}

/// `n` configurations drawn uniformly within the joint limits, each labeled
/// by the capsule checker.
pub fn generate_labeled_configs(
    geom: &CollisionGeometry,
    chain: &KinematicChain,
    n: usize,
    seed: u64,
) -> Result<LabeledConfigSet> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = LabeledConfigSet {
        q: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let q: Vec<f64> = chain
            .joints()
            .iter()
            .map(|j| rng.random_range(j.lower..=j.upper))
            .collect();
        set.labels.push(check_self_collision(geom, chain, &q)?);
        set.q.push(q);
    }
    log::info!(
        "generated {n} labeled configurations, {:.1}% colliding",
        100.0 * set.positive_fraction()
    );
    Ok(set)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTraining {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Multiplies the learning rate after every epoch.
    pub lr_decay: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        ClassifierTraining {
            hidden: vec![128, 128, 128],
            epochs: 60,
            batch_size: 256,
            adam: AdamConfig {
                learning_rate: 4e-3,
                ..Default::default()
            },
            lr_decay: 0.93,
            holdout_fraction: 0.1,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassifierReport {
    /// Mean weighted cross-entropy per epoch on the training split.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub holdout_size: usize,
    pub positive_fraction: f64,
    /// Loss weight of the minority class (the majority class has weight 1).
    pub minority_weight: f64,
    pub minority_is_positive: bool,
    pub wall_time_s: f64,
}

/// Frozen network mapping a joint vector to a collision probability.
/// Inputs are normalized to [-1, 1] by the joint limits stored with it.
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionClassifier {
    net: Mlp,
    limits: Vec<(f64, f64)>,
}

impl CollisionClassifier {
    pub fn new(net: Mlp, limits: Vec<(f64, f64)>) -> Result<Self> {
        if net.input_dim() != limits.len() || net.output_dim() != 1 {
            return Err(Error::InvalidInput(format!(
                "classifier expects {} inputs and 1 output, got {:?}",
                limits.len(),
                net.sizes()
            )));
        }
        if net.layers().last().unwrap().activation != Activation::Sigmoid {
            return Err(Error::InvalidInput("classifier output must be a sigmoid".into()));
        }
        if limits.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidInput("classifier limits need lower < upper".into()));
        }
        Ok(CollisionClassifier { net, limits })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn dim(&self) -> usize {
        self.limits.len()
    }

    fn normalize_into(&self, q: &[f64], out: &mut [f64]) {
        for ((o, v), (lo, hi)) in out.iter_mut().zip(q).zip(&self.limits) {
            *o = 2.0 * (v - lo) / (hi - lo) - 1.0;
        }
    }

    fn normalized_batch(&self, qs: &[&[f64]]) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.dim(), qs.len());
        for (c, q) in qs.iter().enumerate() {
            self.normalize_into(q, x.column_mut(c).as_mut_slice());
        }
        x
    }

    pub fn score(&self, q: &[f64]) -> f64 {
        let mut x = vec![0.0; self.dim()];
        self.normalize_into(q, &mut x);
        self.net.forward(&x)[0]
    }

    pub fn predict(&self, q: &[f64]) -> bool {
        self.score(q) >= 0.5
    }

    /// Score and its exact gradient with respect to `q`.
    pub fn score_and_gradient(&self, q: &[f64]) -> (f64, DVector<f64>) {
        let mut x = vec![0.0; self.dim()];
        self.normalize_into(q, &mut x);
        let acts = self
            .net
            .forward_cached(&DMatrix::from_column_slice(x.len(), 1, &x));
        let s = acts.last().unwrap()[0];
        let (_, dx) = self.net.backward(&acts, &DMatrix::from_element(1, 1, 1.0));
        let grad = DVector::from_iterator(
            self.dim(),
            dx.iter()
                .zip(&self.limits)
                .map(|(d, (lo, hi))| d * 2.0 / (hi - lo)),
        );
        (s, grad)
    }

    /// Batched scores and input gradients, one column per joint vector.
    pub fn score_and_gradient_batch(&self, q: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
        let mut x = q.clone();
        for mut col in x.column_iter_mut() {
            let v: Vec<f64> = col.iter().copied().collect();
            self.normalize_into(&v, col.as_mut_slice());
        }
        let acts = self.net.forward_cached(&x);
        let scores = acts.last().unwrap().iter().copied().collect();
        let (_, mut dx) = self
            .net
            .backward(&acts, &DMatrix::from_element(1, q.ncols(), 1.0));
        for (r, (lo, hi)) in self.limits.iter().enumerate() {
            dx.row_mut(r).scale_mut(2.0 / (hi - lo));
        }
        (scores, dx)
    }

    pub fn accuracy(&self, data: &LabeledConfigSet) -> f64 {
        if data.is_empty() {
            return 0.0;
        }
        let correct = data
            .q
            .iter()
            .zip(&data.labels)
            .filter(|(q, l)| self.predict(q) == **l)
            .count();
        correct as f64 / data.len() as f64
    }

    pub fn to_weight_file(&self) -> WeightFile {
        WeightFile {
            kind: NetworkKind::CollisionClassifier,
            net: self.net.clone(),
            scaling: self.limits.clone(),
        }
    }

    /// The file's scaling entries hold the input normalization limits.
    pub fn from_weight_file(file: WeightFile) -> Result<Self> {
        if file.kind != NetworkKind::CollisionClassifier {
            return Err(Error::InvalidInput(
                "weight file does not hold a collision classifier".into(),
            ));
        }
        CollisionClassifier::new(file.net, file.scaling)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::network::save_weights(&self.to_weight_file(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CollisionClassifier::from_weight_file(crate::network::load_weights(path)?)
    }
}

/// Splits `data` deterministically into training and held-out parts.
pub fn split_holdout(
    data: &LabeledConfigSet,
    fraction: f64,
    seed: u64,
) -> (LabeledConfigSet, LabeledConfigSet) {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
    let n_hold = ((data.len() as f64) * fraction).round() as usize;
    let pick = |ids: &[usize]| LabeledConfigSet {
        q: ids.iter().map(|&i| data.q[i].clone()).collect(),
        labels: ids.iter().map(|&i| data.labels[i]).collect(),
    };
    (pick(&idx[n_hold..]), pick(&idx[..n_hold]))
}

/// Trains a classifier with class-reweighted binary cross-entropy and Adam.
/// `limits` are the per-joint ranges used to normalize inputs.
pub fn train_collision_classifier(
    data: &LabeledConfigSet,
    limits: &[(f64, f64)],
    hp: &ClassifierTraining,
) -> Result<(CollisionClassifier, ClassifierReport)> {
    let started = Instant::now();
    let n_pos = data.labels.iter().filter(|l| **l).count();
    if n_pos == 0 || n_pos == data.len() {
        return Err(Error::Training(
            "collision training data contains a single class".into(),
        ));
    }
    if data.q.iter().any(|q| q.len() != limits.len()) {
        return Err(Error::Training(
            "configuration width differs from the joint count".into(),
        ));
    }
    if hp.batch_size == 0 || hp.epochs == 0 {
        return Err(Error::Training("batch size and epochs must be positive".into()));
    }
    let (train, holdout) = split_holdout(data, hp.holdout_fraction, hp.seed);
    let train_pos = train.labels.iter().filter(|l| **l).count();
    let train_neg = train.len() - train_pos;
    if train_pos == 0 || train_neg == 0 {
        return Err(Error::Training("training split contains a single class".into()));
    }
    let minority_is_positive = train_pos <= train_neg;
    let minority_weight = if minority_is_positive {
        train_neg as f64 / train_pos as f64
    } else {
        train_pos as f64 / train_neg as f64
    };
    log::info!(
        "collision classifier: {} train / {} held out, minority ({}) weight {minority_weight:.3}",
        train.len(),
        holdout.len(),
        if minority_is_positive { "colliding" } else { "free" }
    );
    let weight_of = |label: bool| {
        if label == minority_is_positive {
            minority_weight
        } else {
            1.0
        }
    };

    let mut sizes = vec![limits.len()];
    sizes.extend(&hp.hidden);
    sizes.push(1);
    let net = Mlp::new(&sizes, Activation::Tanh, Activation::Sigmoid, hp.seed)?;
    let mut clf = CollisionClassifier::new(net, limits.to_vec())?;
    let mut adam_cfg = hp.adam.clone();
    let mut opt = Adam::new(&clf.net, adam_cfg.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hp.epochs);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut total_w = 0.0;
        for (b, chunk) in order.chunks(hp.batch_size).enumerate() {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| train.q[i].as_slice()).collect();
            let x = clf.normalized_batch(&rows);
            let acts = clf.net.forward_cached(&x);
            let out = acts.last().unwrap();
            let w: Vec<f64> = chunk.iter().map(|&i| weight_of(train.labels[i])).collect();
            let wsum: f64 = w.iter().sum();
            let mut dz = DMatrix::zeros(1, chunk.len());
            let mut loss = 0.0;
            for (c, &i) in chunk.iter().enumerate() {
                let s = out[(0, c)];
                let y = if train.labels[i] { 1.0 } else { 0.0 };
                let p = s.clamp(1e-15, 1.0 - 1e-15);
                loss += -w[c] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                dz[(0, c)] = w[c] * (s - y) / wsum;
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: b,
                    detail: "collision classifier cross-entropy".into(),
                });
            }
            total += loss;
            total_w += wsum;
            let (grad, _) = clf.net.backward_pre(&acts, &dz);
            opt_step(&mut opt, &mut clf.net, &grad, epoch, b)?;
        }
        epoch_loss.push(total / total_w);
        adam_cfg.learning_rate *= hp.lr_decay;
        opt.set_learning_rate(adam_cfg.learning_rate);
        log::debug!("collision epoch {epoch}: loss {:.5}", total / total_w);
    }
    let report = ClassifierReport {
        epoch_loss,
        train_accuracy: clf.accuracy(&train),
        holdout_accuracy: clf.accuracy(&holdout),
        holdout_size: holdout.len(),
        positive_fraction: data.positive_fraction(),
        minority_weight,
        minority_is_positive,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    log::info!(
        "collision classifier held-out accuracy {:.4}",
        report.holdout_accuracy
    );
    Ok((clf, report))
}

fn opt_step(
    opt: &mut Adam,
    net: &mut Mlp,
    grad: &crate::network::MlpGrad,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch,
            batch,
            detail: "non-finite gradient".into(),
        });
    }
    opt.step(net, grad);
    Ok(())
}

/// Scores for a batch of joint vectors without gradients.
pub fn score_batch(clf: &CollisionClassifier, qs: &[Vec<f64>]) -> Vec<f64> {
    let rows: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
    clf.net
        .forward_batch(&clf.normalized_batch(&rows))
        .iter()
        .copied()
        .collect()
}

/// Frozen-classifier penalty used while training the retargeter.
pub fn collision_score_and_gradient(clf: &CollisionClassifier, q: &[f64]) -> (f64, DVector<f64>) {
    clf.score_and_gradient(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{hand_chain, hand_collision};

    fn brute_distance(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> f64 {
        let n = 400;
        let mut best = f64::INFINITY;
        for i in 0..=n {
            let a = p1 + (q1 - p1) * (i as f64 / n as f64);
            for j in 0..=n {
                let b = p2 + (q2 - p2) * (j as f64 / n as f64);
                best = best.min((a - b).norm());
            }
        }
        best
    }

    #[test]
    fn segment_distance_cases() {
        let o = Vec3::zeros();
        let x = Vec3::x();
        // parallel, offset
        let d = segment_distance(&o, &x, &Vec3::new(0.5, 1.0, 0.0), &Vec3::new(1.5, 1.0, 0.0));
        assert!((d - 1.0).abs() < 1e-15);
        // crossing
        let d = segment_distance(
            &Vec3::new(-1.0, 0.0, 0.0),
            &x,
            &Vec3::new(0.0, -1.0, 0.5),
            &Vec3::new(0.0, 1.0, 0.5),
        );
        assert!((d - 0.5).abs() < 1e-15);
        // endpoint to endpoint, collinear and disjoint
        let d = segment_distance(&o, &x, &Vec3::new(3.0, 0.0, 0.0), &Vec3::new(4.0, 0.0, 0.0));
        assert!((d - 2.0).abs() < 1e-15);
        // point segments
        assert!((segment_distance(&o, &o, &x, &x) - 1.0).abs() < 1e-15);
        assert!(
            (segment_distance(&o, &o, &Vec3::new(-1.0, 1.0, 0.0), &Vec3::new(1.0, 1.0, 0.0)) - 1.0).abs()
                < 1e-15
        );
    }

    #[test]
    fn segment_distance_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut pt = || {
            Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
        };
        for _ in 0..100 {
            let (a, b, c, d) = (pt(), pt(), pt(), pt());
            let exact = segment_distance(&a, &b, &c, &d);
            let brute = brute_distance(&a, &b, &c, &d);
            assert!(exact <= brute + 1e-12);
            assert!(brute - exact < 1e-2);
            assert!((segment_distance(&c, &d, &a, &b) - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn open_hand_is_free() {
        let chain = hand_chain();
        let geom = hand_collision();
        assert!(!check_self_collision(&geom, &chain, &vec![0.0; 16]).unwrap());
    }

    #[test]
    fn thumb_curled_into_index_collides() {
        let chain = hand_chain();
        let geom = hand_collision();
        let mut q = vec![0.0; 16];
        for j in 1..4 {
            q[j] = chain.joints()[j].upper;
        }
        for j in 12..16 {
            q[j] = chain.joints()[j].upper;
        }
        assert!(check_self_collision(&geom, &chain, &q).unwrap());
    }

    #[test]
    fn adjacent_links_are_not_tested() {
        let chain = hand_chain();
        let geom = hand_collision();
        for &(i, j) in geom.pairs() {
            let (a, b) = (geom.capsules()[i].link, geom.capsules()[j].link);
            assert_ne!(a, b);
            assert_ne!(chain.links()[a].parent, Some(b));
            assert_ne!(chain.links()[b].parent, Some(a));
        }
        let palm = chain.link_index("hand_root").unwrap();
        let prox = chain.link_index("index_proximal").unwrap();
        assert!(!geom.pairs().iter().any(|&(i, j)| {
            let l = (geom.capsules()[i].link, geom.capsules()[j].link);
            l == (palm, prox) || l == (prox, palm)
        }));
    }

    #[test]
    fn inflation_is_monotone() {
        let chain = hand_chain();
        let geom = hand_collision();
        let fat = geom.inflated(0.002);
        let data = generate_labeled_configs(&geom, &chain, 2000, 3).unwrap();
        for (q, l) in data.q.iter().zip(&data.labels) {
            if *l {
                assert!(check_self_collision(&fat, &chain, q).unwrap());
            }
        }
    }

    #[test]
    fn labeled_data_is_deterministic_and_consistent() {
        let chain = hand_chain();
        let geom = hand_collision();
        let a = generate_labeled_configs(&geom, &chain, 500, 12).unwrap();
        let b = generate_labeled_configs(&geom, &chain, 500, 12).unwrap();
        assert_eq!(a, b);
        for (q, l) in a.q.iter().zip(&a.labels) {
            assert!(chain.within_limits(q));
            assert_eq!(check_self_collision(&geom, &chain, q).unwrap(), *l);
        }
        assert!(a.positive_fraction() > 0.0 && a.positive_fraction() < 1.0);
    }

    #[test]
    fn geometry_must_match_chain() {
        let arm = crate::models::arm_chain();
        let geom = hand_collision();
        assert!(check_self_collision(&geom, &arm, &[0.0; 6]).is_err());
        let text =
            "chain = \"hand16\"\n[[capsules]]\nlink = \"nope\"\na = [0,0,0]\nb = [0,0,1]\nradius = 0.1\n";
        let err = CollisionGeometry::load("g", text, &hand_chain())
            .unwrap_err()
            .to_string();
        assert!(err.contains("capsules[0].link"), "{err}");
        let text = "chain = \"hand16\"\n[[capsules]]\nlink = \"hand_root\"\na = [0,0,0]\nb = [0,0,1]\nradius = 0.0\n";
        assert!(CollisionGeometry::load("g", text, &hand_chain()).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let chain = hand_chain();
        let geom = hand_collision();
        let data = generate_labeled_configs(&geom, &chain, 50, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("configs.csv");
        data.write_csv(&path).unwrap();
        assert_eq!(LabeledConfigSet::read_csv(&path).unwrap(), data);
    }

    fn toy(n: usize, seed: u64) -> LabeledConfigSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = LabeledConfigSet::default();
        while set.len() < n {
            let q: Vec<f64> = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let margin = q[0] + 0.5 * q[1] - 0.2;
            if margin.abs() < 0.02 {
                continue;
            }
            set.labels.push(margin > 0.0);
            set.q.push(q);
        }
        set
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy(4000, 1);
        let hp = ClassifierTraining {
            hidden: vec![16],
            epochs: 20,
            batch_size: 64,
            seed: 3,
            ..Default::default()
        };
        let (clf, report) = train_collision_classifier(&data, &[(-1.0, 1.0), (-1.0, 1.0)], &hp).unwrap();
        assert!(report.holdout_accuracy >= 0.99, "{}", report.holdout_accuracy);
        let fresh = toy(1000, 2);
        assert!(clf.accuracy(&fresh) >= 0.99);
    }

    #[test]
    fn full_batch_loss_is_non_increasing() {
        let data = toy(400, 5);
        let hp = ClassifierTraining {
            hidden: vec![8],
            epochs: 60,
            batch_size: 10_000,
            adam: AdamConfig {
                learning_rate: 0.01,
                ..Default::default()
            },
            lr_decay: 1.0,
            seed: 4,
            ..Default::default()
        };
        let (_, report) = train_collision_classifier(&data, &[(-1.0, 1.0), (-1.0, 1.0)], &hp).unwrap();
        for w in report.epoch_loss.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "{:?}", w);
        }
    }

    #[test]
    fn single_class_rejected() {
        let data = LabeledConfigSet {
            q: vec![vec![0.0, 0.0]; 10],
            labels: vec![false; 10],
        };
        let err = train_collision_classifier(&data, &[(-1.0, 1.0), (-1.0, 1.0)], &Default::default());
        assert!(matches!(err, Err(Error::Training(_))));
    }

    fn untrained(seed: u64) -> CollisionClassifier {
        let chain = hand_chain();
        let net = Mlp::new(&[16, 32, 32, 1], Activation::Tanh, Activation::Sigmoid, seed).unwrap();
        let limits = chain.joints().iter().map(|j| (j.lower, j.upper)).collect();
        CollisionClassifier::new(net, limits).unwrap()
    }

    #[test]
    fn score_gradient_matches_finite_differences() {
        let clf = untrained(8);
        let chain = hand_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let q: Vec<f64> = chain
                .joints()
                .iter()
                .map(|j| rng.random_range(j.lower..j.upper))
                .collect();
            let (s, g) = clf.score_and_gradient(&q);
            assert_eq!(s, clf.score(&q));
            for i in 0..16 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += 1e-6;
                qm[i] -= 1e-6;
                let fd = (clf.score(&qp) - clf.score(&qm)) / 2e-6;
                assert!((fd - g[i]).abs() <= 1e-5 * fd.abs().max(g[i].abs()).max(1e-6));
            }
            let qm = DMatrix::from_column_slice(16, 1, &q);
            let (sb, gb) = clf.score_and_gradient_batch(&qm);
            assert!((sb[0] - s).abs() < 1e-15);
            assert!((gb.column(0) - &g).norm() < 1e-14);
        }
    }

    #[test]
    fn score_in_unit_interval_at_limits() {
        let clf = untrained(10);
        let chain = hand_chain();
        for q in [
            chain.lower_limits(),
            chain.upper_limits(),
            vec![1e6; 16],
            vec![-1e6; 16],
        ] {
            let s = clf.score(&q);
            assert!(s >= 0.0 && s <= 1.0);
            assert_eq!(s.to_bits(), clf.score(&q).to_bits());
        }
    }

    #[test]
    fn classifier_weight_file_round_trip() {
        let clf = untrained(11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.w16");
        clf.save(&path).unwrap();
        assert_eq!(CollisionClassifier::load(&path).unwrap(), clf);
    }
}
