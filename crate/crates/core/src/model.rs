//! The desk-scale classifier `f(x) = head(backbone(x))`.
//!
//! The backbone is two dense ReLU layers. Each hidden pre-activation is
//! followed by a per-channel FiLM scale/offset, so the three parameter modes
//! (head only, head plus FiLM, everything) differ only in which prefix of the
//! flat parameter vector is trainable:
//!
//! ```text
//! [ head W (C x d_b) | head b (C) | γ1 β1 (w) | γ2 β2 (d_b) | W1 b1 | W2 b2 ]
//!   \______ Head ______________/
//!   \______________ FiLM _____________________________/
//!   \______________________ All _______________________________________/
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};

/// Which parameters are learnable during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Head,
    Film,
    All,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Head, Mode::Film, Mode::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Head => "head",
            Mode::Film => "film",
            Mode::All => "all",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "head" => Ok(Mode::Head),
            "film" => Ok(Mode::Film),
            "all" => Ok(Mode::All),
            other => Err(Error::Input(format!("unknown mode `{other}`"))),
        }
    }
}

/// Shape of the dense backbone plus head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    /// Backbone output dimension `d_b`; also the width of the second hidden layer.
    pub feature_dim: usize,
    pub classes: usize,
}

/// Offsets into the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    head_w: usize,
    head_b: usize,
    gamma1: usize,
    beta1: usize,
    gamma2: usize,
    beta2: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    film_end: usize,
    total: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_width: usize, feature_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden_width,
            feature_dim,
            classes,
        }
    }

    fn layout(&self) -> Layout {
        let (d, w, db, c) = (self.input_dim, self.hidden_width, self.feature_dim, self.classes);
        let head_w = 0;
        let head_b = head_w + c * db;
        let gamma1 = head_b + c;
        let beta1 = gamma1 + w;
        let gamma2 = beta1 + w;
        let beta2 = gamma2 + db;
        let w1 = beta2 + db;
        let b1 = w1 + w * d;
        let w2 = b1 + w;
        let b2 = w2 + db * w;
        Layout {
            head_w,
            head_b,
            gamma1,
            beta1,
            gamma2,
            beta2,
            w1,
            b1,
            w2,
            b2,
            film_end: w1,
            total: b2 + db,
        }
    }

    pub fn head_params(&self) -> usize {
        self.feature_dim * self.classes + self.classes
    }

    /// Number of FiLM-decorated channels (both hidden layers).
    pub fn film_channels(&self) -> usize {
        self.hidden_width + self.feature_dim
    }

    pub fn total_params(&self) -> usize {
        self.layout().total
    }

    /// Length of the trainable prefix for `mode`.
    pub fn trainable_len(&self, mode: Mode) -> usize {
        match mode {
            Mode::Head => self.head_params(),
            Mode::Film => self.head_params() + 2 * self.film_channels(),
            Mode::All => self.total_params(),
        }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("hidden_width", self.hidden_width),
            ("feature_dim", self.feature_dim),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if self.classes < 2 {
            return Err(Error::param("classes", "need at least two classes"));
        }
        Ok(())
    }
}

/// Parameter-count descriptor for a reference architecture that is not
/// instantiated (e.g. a ResNet); used for learnable-count and payload maths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDescriptor {
    pub name: String,
    /// Backbone parameter count, FiLM-able normalization parameters included.
    pub backbone_params: u64,
    pub film_params: u64,
    pub feature_dim: u64,
    pub classes: u64,
}

impl ArchitectureDescriptor {
    pub fn resnet18(classes: u64) -> Self {
        Self {
            name: "R-18".into(),
            backbone_params: 11_200_000,
            film_params: 7808,
            feature_dim: 512,
            classes,
        }
    }

    pub fn resnet50(classes: u64) -> Self {
        Self {
            name: "R-50".into(),
            backbone_params: 23_500_000,
            film_params: 11_648,
            feature_dim: 2048,
            classes,
        }
    }

    pub fn head_params(&self) -> u64 {
        self.feature_dim * self.classes + self.classes
    }

    pub fn learnable(&self, mode: Mode) -> u64 {
        match mode {
            Mode::Head => self.head_params(),
            Mode::Film => self.film_params + self.head_params(),
            Mode::All => self.backbone_params + self.head_params(),
        }
    }
}

/// Elementwise FiLM transform `γ·a + β`.
pub fn film_apply(activations: &[f64], gamma: &[f64], beta: &[f64]) -> Result<Vec<f64>> {
    let n = activations.len();
    for (len, ctx) in [(gamma.len(), "film gamma"), (beta.len(), "film beta")] {
        if len != n {
            return Err(Error::Dimension {
                expected: n,
                actual: len,
                context: ctx,
            });
        }
    }
    Ok(activations
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((a, g), b)| g * a + b)
        .collect())
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    z1: Vec<f64>,
    a1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    h2: Vec<f64>,
    logits: Vec<f64>,
}

/// Backbone weights, FiLM parameters and head, plus the active mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub arch: Architecture,
    pub mode: Mode,
    params: Vec<f64>,
}

impl ModelState {
    /// Fresh model: He-initialised backbone, identity FiLM, zero head.
    pub fn new(arch: Architecture, mode: Mode, seed: u64) -> Result<Self> {
        arch.validate()?;
        let lay = arch.layout();
        let mut params = vec![0.0; lay.total];
        params[lay.gamma1..lay.beta1].fill(1.0);
        params[lay.gamma2..lay.beta2].fill(1.0);
        let mut rng = rng::stream(seed, Domain::ModelInit, 0);
        let s1 = (2.0 / arch.input_dim as f64).sqrt();
        for p in &mut params[lay.w1..lay.b1] {
            *p = s1 * rng::standard_normal(&mut rng);
        }
        let s2 = (2.0 / arch.hidden_width as f64).sqrt();
        for p in &mut params[lay.w2..lay.b2] {
            *p = s2 * rng::standard_normal(&mut rng);
        }
        Ok(Self { arch, mode, params })
    }

    pub fn from_params(arch: Architecture, mode: Mode, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.total_params() {
            return Err(Error::Dimension {
                expected: arch.total_params(),
                actual: params.len(),
                context: "flat parameter vector",
            });
        }
        Ok(Self { arch, mode, params })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the whole vector; callers own the frozen-set contract.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn trainable_len(&self) -> usize {
        self.arch.trainable_len(self.mode)
    }

    pub fn trainable(&self) -> &[f64] {
        &self.params[..self.trainable_len()]
    }

    pub fn trainable_mut(&mut self) -> &mut [f64] {
        let n = self.trainable_len();
        &mut self.params[..n]
    }

    pub fn gamma1(&self) -> &[f64] {
        let l = self.arch.layout();
        &self.params[l.gamma1..l.beta1]
    }

    pub fn beta1(&self) -> &[f64] {
        let l = self.arch.layout();
        &self.params[l.beta1..l.gamma2]
    }

    pub fn gamma2(&self) -> &[f64] {
        let l = self.arch.layout();
        &self.params[l.gamma2..l.beta2]
    }

    pub fn beta2(&self) -> &[f64] {
        let l = self.arch.layout();
        &self.params[l.beta2..l.w1]
    }

    /// Zero the head (`φ = 0`) and reset FiLM to identity.
    pub fn reset_adapters(&mut self) {
        let l = self.arch.layout();
        self.params[l.head_w..l.gamma1].fill(0.0);
        self.params[l.gamma1..l.beta1].fill(1.0);
        self.params[l.beta1..l.gamma2].fill(0.0);
        self.params[l.gamma2..l.beta2].fill(1.0);
        self.params[l.beta2..l.film_end].fill(0.0);
    }

    /// Fold the current FiLM transform into the dense layers so that FiLM can
    /// be reset to identity without changing the function computed.
    pub fn fold_film(&mut self) {
        let l = self.arch.layout();
        let (d, w, db) = (self.arch.input_dim, self.arch.hidden_width, self.arch.feature_dim);
        for j in 0..w {
            let g = self.params[l.gamma1 + j];
            let b = self.params[l.beta1 + j];
            for i in 0..d {
                self.params[l.w1 + j * d + i] *= g;
            }
            self.params[l.b1 + j] = g * self.params[l.b1 + j] + b;
        }
        for j in 0..db {
            let g = self.params[l.gamma2 + j];
            let b = self.params[l.beta2 + j];
            for i in 0..w {
                self.params[l.w2 + j * w + i] *= g;
            }
            self.params[l.b2 + j] = g * self.params[l.b2 + j] + b;
        }
        self.params[l.gamma1..l.beta1].fill(1.0);
        self.params[l.beta1..l.gamma2].fill(0.0);
        self.params[l.gamma2..l.beta2].fill(1.0);
        self.params[l.beta2..l.film_end].fill(0.0);
    }

    /// Learnable-parameter count for the active mode.
    pub fn count_learnable(&self) -> usize {
        self.trainable_len()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::Dimension {
                expected: self.arch.input_dim,
                actual: x.len(),
                context: "input features",
            });
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let l = self.arch.layout();
        let (d, w, db, c) = (
            self.arch.input_dim,
            self.arch.hidden_width,
            self.arch.feature_dim,
            self.arch.classes,
        );
        let p = &self.params;
        let z1: Vec<f64> = (0..w).map(|j| dot(&p[l.w1 + j * d..l.w1 + (j + 1) * d], x) + p[l.b1 + j]).collect();
        let a1: Vec<f64> = (0..w).map(|j| p[l.gamma1 + j] * z1[j] + p[l.beta1 + j]).collect();
        let h1: Vec<f64> = a1.iter().map(|&a| relu(a)).collect();
        let z2: Vec<f64> = (0..db).map(|j| dot(&p[l.w2 + j * w..l.w2 + (j + 1) * w], &h1) + p[l.b2 + j]).collect();
        let a2: Vec<f64> = (0..db).map(|j| p[l.gamma2 + j] * z2[j] + p[l.beta2 + j]).collect();
        let h2: Vec<f64> = a2.iter().map(|&a| relu(a)).collect();
        let logits: Vec<f64> = (0..c)
            .map(|k| dot(&p[l.head_w + k * db..l.head_w + (k + 1) * db], &h2) + p[l.head_b + k])
            .collect();
        Trace {
            z1,
            a1,
            h1,
            z2,
            a2,
            h2,
            logits,
        }
    }

    /// Backbone output `b_θ(x)` (FiLM included).
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).h2)
    }

    /// Smallest |pre-activation| over all ReLU units; distance to a kink.
    pub fn relu_margin(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let t = self.trace(x);
        Ok(t.a1.iter().chain(&t.a2).fold(f64::INFINITY, |m, a| m.min(a.abs())))
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).logits)
    }

    /// Class probabilities `p(y | x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let z = self.logits(x)?;
        Ok(argmax(&z))
    }

    /// Cross-entropy loss of one example.
    pub fn loss(&self, x: &[f64], y: usize) -> Result<f64> {
        let z = self.logits(x)?;
        self.check_label(y)?;
        Ok(log_sum_exp(&z) - z[y])
    }

    /// Logit-scaled confidence `log(p_y / (1 - p_y))`, clamped to ±40.
    pub fn confidence_logit(&self, x: &[f64], y: usize) -> Result<f64> {
        let z = self.logits(x)?;
        self.check_label(y)?;
        let others: Vec<f64> = z.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| v).collect();
        Ok((z[y] - log_sum_exp(&others)).clamp(-40.0, 40.0))
    }

    fn check_label(&self, y: usize) -> Result<()> {
        if y >= self.arch.classes {
            return Err(Error::Input(format!(
                "label {y} out of range for {} classes",
                self.arch.classes
            )));
        }
        Ok(())
    }

    /// Gradient of the cross-entropy loss over the trainable prefix.
    pub fn per_example_grad(&self, x: &[f64], y: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        self.check_label(y)?;
        let mut g = vec![0.0; self.trainable_len()];
        self.grad_into(x, y, &mut g);
        Ok(g)
    }

    /// Writes the trainable-prefix gradient into `out` (length must match).
    pub(crate) fn grad_into(&self, x: &[f64], y: usize, out: &mut [f64]) {
        let l = self.arch.layout();
        let (d, w, db, c) = (
            self.arch.input_dim,
            self.arch.hidden_width,
            self.arch.feature_dim,
            self.arch.classes,
        );
        let p = &self.params;
        let t = self.trace(x);

        let mut dlogits = softmax(&t.logits);
        dlogits[y] -= 1.0;
        for k in 0..c {
            let row = &mut out[l.head_w + k * db..l.head_w + (k + 1) * db];
            for (o, h) in row.iter_mut().zip(&t.h2) {
                *o = dlogits[k] * h;
            }
            out[l.head_b + k] = dlogits[k];
        }
        if self.mode == Mode::Head {
            return;
        }

        let mut dz2 = vec![0.0; db];
        for j in 0..db {
            let mut dh = 0.0;
            for k in 0..c {
                dh += p[l.head_w + k * db + j] * dlogits[k];
            }
            let da = if t.a2[j] > 0.0 { dh } else { 0.0 };
            out[l.gamma2 + j] = da * t.z2[j];
            out[l.beta2 + j] = da;
            dz2[j] = da * p[l.gamma2 + j];
        }
        let mut dz1 = vec![0.0; w];
        for i in 0..w {
            let mut dh = 0.0;
            for j in 0..db {
                dh += p[l.w2 + j * w + i] * dz2[j];
            }
            let da = if t.a1[i] > 0.0 { dh } else { 0.0 };
            out[l.gamma1 + i] = da * t.z1[i];
            out[l.beta1 + i] = da;
            dz1[i] = da * p[l.gamma1 + i];
        }
        if self.mode == Mode::Film {
            return;
        }

        for j in 0..w {
            for i in 0..d {
                out[l.w1 + j * d + i] = dz1[j] * x[i];
            }
            out[l.b1 + j] = dz1[j];
        }
        for j in 0..db {
            for i in 0..w {
                out[l.w2 + j * w + i] = dz2[j] * t.h1[i];
            }
            out[l.b2 + j] = dz2[j];
        }
    }
}

#[inline]
fn relu(a: f64) -> f64 {
    if a > 0.0 {
        a
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Architecture {
        Architecture::new(6, 5, 4, 3)
    }

    #[test]
    fn film_apply_examples() {
        assert_eq!(film_apply(&[1.0, -1.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap(), vec![1.0, -1.0]);
        assert_eq!(film_apply(&[1.0, -1.0], &[2.0, 2.0], &[1.0, 1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(
            film_apply(&[1.0], &[1.0, 2.0], &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = ModelState::new(arch(), Mode::Film, 1).unwrap();
        let p = m.forward(&[0.3, -1.0, 2.0, 0.1, 0.0, 5.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(m.gamma1().iter().all(|&g| g == 1.0));
        assert!(m.beta2().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn counts_follow_formulas() {
        let a = Architecture::new(32, 64, 64, 10);
        let m = ModelState::new(a, Mode::Head, 0).unwrap();
        assert_eq!(m.count_learnable(), 650);
        assert_eq!(m.clone().with_mode(Mode::Film).count_learnable(), 906);
        let all = m.with_mode(Mode::All).count_learnable();
        assert_eq!(all, 906 + 64 * 32 + 64 + 64 * 64 + 64);
    }

    #[test]
    fn descriptor_counts() {
        let r50 = ArchitectureDescriptor::resnet50(10);
        assert_eq!(r50.learnable(Mode::Film), 11_648 + 2048 * 10 + 10);
        let r18 = ArchitectureDescriptor::resnet18(17);
        assert_eq!(r18.learnable(Mode::Film), 7808 + 512 * 17 + 17);
        assert_eq!(r18.learnable(Mode::All), 11_200_000 + 512 * 17 + 17);
    }

    #[test]
    fn wrong_dimension_rejected() {
        let m = ModelState::new(arch(), Mode::All, 1).unwrap();
        assert!(m.forward(&[1.0; 5]).is_err());
        assert!(m.per_example_grad(&[1.0; 6], 3).is_err());
    }

    #[test]
    fn fold_film_preserves_function() {
        let mut m = ModelState::new(arch(), Mode::All, 4).unwrap();
        let l = m.arch.layout();
        for (i, p) in m.params_mut()[l.gamma1..l.film_end].iter_mut().enumerate() {
            *p += 0.1 * ((i % 7) as f64 - 3.0);
        }
        let x = [0.5, -0.2, 1.0, 0.3, -0.7, 0.9];
        let before = m.features(&x).unwrap();
        m.fold_film();
        let after = m.features(&x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn confidence_logit_matches_probability() {
        let mut m = ModelState::new(arch(), Mode::All, 2).unwrap();
        m.params_mut()[0] = 0.7;
        m.params_mut()[5] = -0.4;
        let x = [0.5, -0.2, 1.0, 0.3, -0.7, 0.9];
        let p = m.forward(&x).unwrap()[1];
        let c = m.confidence_logit(&x, 1).unwrap();
        assert!((c - (p / (1.0 - p)).ln()).abs() < 1e-12);
    }
}
