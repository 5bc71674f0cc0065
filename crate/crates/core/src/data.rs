//! Few-shot datasets and the synthetic task generator that stands in for
//! downstream datasets of varying transfer difficulty.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, Mode, ModelState};
use crate::rng::{self, Domain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Labelled feature vectors. Labels are zero-based class indices in `0..classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    splits: Vec<Split>,
    pub classes: usize,
    /// Shots per class of the training split when built by sampling.
    pub shots: usize,
}

impl FewShotDataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        classes: usize,
        shots: usize,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("dim", "must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension {
                expected: labels.len() * dim,
                actual: features.len(),
                context: "dataset feature matrix",
            });
        }
        if splits.len() != labels.len() {
            return Err(Error::Dimension {
                expected: labels.len(),
                actual: splits.len(),
                context: "dataset split tags",
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            dim,
            features,
            labels,
            splits,
            classes,
            shots,
        })
    }

    /// Build from rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>], labels: Vec<usize>, classes: usize) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        let mut features = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    actual: r.len(),
                    context: "dataset row",
                });
            }
            features.extend_from_slice(r);
        }
        let n = labels.len();
        Self::new(dim, features, labels, vec![Split::Train; n], classes, 0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// New dataset holding the given rows (in order), split tags preserved.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let mut features = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            features.extend_from_slice(self.x(i));
        }
        Self {
            dim: self.dim,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            splits: idx.iter().map(|&i| self.splits[i]).collect(),
            classes: self.classes,
            shots: self.shots,
        }
    }

    pub fn split(&self, split: Split) -> Self {
        self.subset(&self.indices(split))
    }

    pub fn with_split_tag(mut self, split: Split) -> Self {
        self.splits.fill(split);
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    /// Fraction of examples the model classifies correctly (0 for empty sets).
    pub fn accuracy(&self, model: &ModelState) -> Result<f64> {
        if self.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for i in 0..self.len() {
            if model.predict(self.x(i))? == self.y(i) {
                hits += 1;
            }
        }
        Ok(hits as f64 / self.len() as f64)
    }
}

/// Generator of Gaussian-cluster classification tasks.
///
/// Class information lives in `informative_dims` coordinates; the remaining
/// coordinates are nuisance noise. `shift` in `[0, 1]` rotates the informative
/// subspace into the nuisance subspace (angle `shift·π/2`) and blends the class
/// means toward freshly drawn ones, so `shift = 0` reproduces the pretraining
/// distribution and `shift = 1` moves class information where the pretrained
/// backbone does not look.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub seed: u64,
    pub classes: usize,
    pub input_dim: usize,
    pub informative_dims: usize,
    pub shift: f64,
    pub class_sep: f64,
    pub noise: f64,
    pub nuisance_noise: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 5,
            input_dim: 16,
            informative_dims: 6,
            shift: 0.0,
            class_sep: 1.5,
            noise: 1.0,
            nuisance_noise: 1.0,
        }
    }
}

/// Resolved class means and rotation for one task.
#[derive(Clone, Debug)]
pub struct TaskGeometry {
    /// Class means in the unrotated frame (`classes × input_dim`).
    pub means: Vec<Vec<f64>>,
    /// Per-coordinate noise std in the unrotated frame.
    pub noise: Vec<f64>,
    pub angle: f64,
    pub informative_dims: usize,
}

impl TaskGeometry {
    /// Apply the plane rotations pairing coordinate `i` with `k + i`.
    pub fn rotate(&self, v: &mut [f64]) {
        let (s, c) = self.angle.sin_cos();
        let k = self.informative_dims;
        for i in 0..k {
            let (a, b) = (v[i], v[k + i]);
            v[i] = c * a - s * b;
            v[k + i] = s * a + c * b;
        }
    }

    /// Mean of class `c` in the observed (rotated) frame.
    pub fn observed_mean(&self, c: usize) -> Vec<f64> {
        let mut m = self.means[c].clone();
        self.rotate(&mut m);
        m
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        if self.informative_dims == 0 || 2 * self.informative_dims > self.input_dim {
            return Err(Error::param(
                "informative_dims",
                "must be positive and at most input_dim / 2",
            ));
        }
        if !(0.0..=1.0).contains(&self.shift) {
            return Err(Error::param("shift", "must lie in [0, 1]"));
        }
        if !(self.noise > 0.0 && self.nuisance_noise > 0.0 && self.class_sep > 0.0) {
            return Err(Error::param("noise", "noise scales and class_sep must be positive"));
        }
        Ok(())
    }

    /// The pretraining (source) distribution: same seed, zero shift.
    pub fn source(&self) -> Self {
        Self {
            shift: 0.0,
            ..self.clone()
        }
    }

    pub fn geometry(&self) -> TaskGeometry {
        let k = self.informative_dims;
        let draw = |index: u64| -> Vec<Vec<f64>> {
            let mut r = rng::stream(self.seed, Domain::TaskGeometry, index);
            (0..self.classes)
                .map(|_| (0..k).map(|_| self.class_sep * rng::standard_normal(&mut r)).collect())
                .collect()
        };
        let source = draw(0);
        let fresh = draw(1);
        let means = source
            .iter()
            .zip(&fresh)
            .map(|(a, b)| {
                let mut m = vec![0.0; self.input_dim];
                for i in 0..k {
                    m[i] = (1.0 - self.shift) * a[i] + self.shift * b[i];
                }
                m
            })
            .collect();
        let noise = (0..self.input_dim)
            .map(|i| if i < k { self.noise } else { self.nuisance_noise })
            .collect();
        TaskGeometry {
            means,
            noise,
            angle: self.shift * FRAC_PI_2,
            informative_dims: k,
        }
    }

    /// Draw `per_class` examples of every class, tagged `split`. `stream_index`
    /// selects an independent stream so train and test draws never overlap.
    pub fn sample(&self, per_class: usize, split: Split, sample_seed: u64, stream_index: u64) -> Result<FewShotDataset> {
        self.validate()?;
        let geo = self.geometry();
        let mut r = rng::stream(rng::child_seed(sample_seed, Domain::TaskSample, self.seed), Domain::TaskSample, stream_index);
        let n = per_class * self.classes;
        let mut features = Vec::with_capacity(n * self.input_dim);
        let mut labels = Vec::with_capacity(n);
        let mut v = vec![0.0; self.input_dim];
        for _ in 0..per_class {
            for c in 0..self.classes {
                for i in 0..self.input_dim {
                    v[i] = geo.means[c][i] + geo.noise[i] * rng::standard_normal(&mut r);
                }
                geo.rotate(&mut v);
                features.extend_from_slice(&v);
                labels.push(c);
            }
        }
        FewShotDataset::new(self.input_dim, features, labels, vec![split; n], self.classes, per_class)
    }

    /// `|D| = C·S` training examples plus a held-out test split.
    pub fn few_shot(&self, shots: usize, test_per_class: usize, sample_seed: u64) -> Result<FewShotDataset> {
        let train = self.sample(shots, Split::Train, sample_seed, 0)?;
        let test = self.sample(test_per_class, Split::Test, sample_seed, 1)?;
        let mut all = train;
        all.features.extend_from_slice(&test.features);
        all.labels.extend_from_slice(&test.labels);
        all.splits.extend_from_slice(&test.splits);
        all.shots = shots;
        Ok(all)
    }

    /// Monte-Carlo accuracy of the Bayes classifier that knows the geometry
    /// (equal priors, shared diagonal covariance in the unrotated frame).
    pub fn bayes_accuracy(&self, per_class: usize, sample_seed: u64) -> Result<f64> {
        let data = self.sample(per_class, Split::Test, sample_seed, 7)?;
        let geo = self.geometry();
        let (s, c) = geo.angle.sin_cos();
        let k = geo.informative_dims;
        let mut hits = 0;
        for n in 0..data.len() {
            let mut v = data.x(n).to_vec();
            // inverse rotation
            for i in 0..k {
                let (a, b) = (v[i], v[k + i]);
                v[i] = c * a + s * b;
                v[k + i] = -s * a + c * b;
            }
            let mut best = (f64::INFINITY, 0);
            for (cls, m) in geo.means.iter().enumerate() {
                let d: f64 = v
                    .iter()
                    .zip(m)
                    .zip(&geo.noise)
                    .map(|((x, mu), sd)| ((x - mu) / sd).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, cls);
                }
            }
            if best.1 == data.y(n) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Settings for the non-private source-task pretraining of the backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub per_class: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            per_class: 200,
            steps: 400,
            learning_rate: 0.01,
            weight_decay: 1e-2,
        }
    }
}

/// Train the full network on the source task (full-batch Adam with weight
/// decay on the dense weights), then fold FiLM into the weights and reset the
/// head and FiLM parameters. The returned model is in `Mode::Head`.
pub fn pretrain_backbone(
    task: &SyntheticTaskSpec,
    arch: Architecture,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<ModelState> {
    if arch.input_dim != task.input_dim || arch.classes != task.classes {
        return Err(Error::Input("architecture does not match task dimensions".into()));
    }
    let data = task.source().sample(cfg.per_class, Split::Train, seed, 99)?;
    let mut model = ModelState::new(arch, Mode::All, seed)?;
    let n = model.trainable_len();
    let film = arch.trainable_len(Mode::Head)..arch.trainable_len(Mode::Film);
    let dense = arch.trainable_len(Mode::Film)..n;
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut acc = vec![0.0; n];
    for step in 1..=cfg.steps {
        acc.fill(0.0);
        for i in 0..data.len() {
            model.grad_into(data.x(i), data.y(i), &mut g);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi;
            }
        }
        let inv = 1.0 / data.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        acc[film.clone()].fill(0.0);
        {
            let p = model.params();
            for j in dense.clone() {
                acc[j] += cfg.weight_decay * p[j];
            }
        }
        let c1 = 1.0 - f64::powi(b1, step as i32);
        let c2 = 1.0 - f64::powi(b2, step as i32);
        let p = model.trainable_mut();
        for j in 0..n {
            m[j] = b1 * m[j] + (1.0 - b1) * acc[j];
            v[j] = b2 * v[j] + (1.0 - b2) * acc[j] * acc[j];
            p[j] -= cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
    model.fold_film();
    model.reset_adapters();
    Ok(model.with_mode(Mode::Head))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_task() {
        let spec = SyntheticTaskSpec {
            seed: 11,
            ..Default::default()
        };
        let a = spec.few_shot(3, 4, 5).unwrap();
        let b = spec.few_shot(3, 4, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.indices(Split::Train).len(), 15);
        assert_eq!(a.indices(Split::Test).len(), 20);
        assert_eq!(a.split(Split::Train).class_counts(), vec![3; 5]);
    }

    #[test]
    fn zero_shift_matches_source() {
        let spec = SyntheticTaskSpec {
            seed: 3,
            shift: 0.0,
            ..Default::default()
        };
        let a = spec.sample(10, Split::Train, 1, 0).unwrap();
        let b = spec.source().sample(10, Split::Train, 1, 0).unwrap();
        assert_eq!(a, b);
        let shifted = SyntheticTaskSpec { shift: 0.5, ..spec };
        assert_ne!(shifted.sample(10, Split::Train, 1, 0).unwrap(), a);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(FewShotDataset::from_rows(&[vec![1.0, 2.0], vec![1.0]], vec![0, 1], 2).is_err());
        assert!(FewShotDataset::from_rows(&[vec![1.0], vec![1.0]], vec![0, 2], 2).is_err());
    }
}
