//! Guidance models: prior over the global action vocabulary plus a value
//! estimate for a state encoding.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Probabilities over the full action vocabulary.
    pub policy: Vec<f64>,
    pub value: f64,
}

/// One training target: visit distribution and return from a visited state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub encoding: Vec<f64>,
    /// Sparse `(action id, probability)` pairs summing to one.
    pub policy: Vec<(usize, f64)>,
    pub value: f64,
}

pub trait GuidanceModel {
    fn predict(&self, encoding: &[f64]) -> Prediction;

    /// One update on `batch`; returns the loss before the update.
    fn train(&mut self, batch: &[TrainingExample]) -> f64;

    fn name(&self) -> &'static str;
}

/// Restricts a policy to the legal actions and renormalizes. Falls back to a
/// uniform distribution when the legal mass vanishes.
pub fn masked_priors(policy: &[f64], legal: &[u32]) -> Vec<f64> {
    let raw: Vec<f64> = legal.iter().map(|&a| policy[a as usize].max(0.0)).collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 && total.is_finite() {
        raw.into_iter().map(|p| p / total).collect()
    } else {
        vec![1.0 / legal.len() as f64; legal.len()]
    }
}

/// Uniform priors and zero value; never learns.
#[derive(Clone, Debug)]
pub struct UniformGuidance {
    actions: usize,
}

impl UniformGuidance {
    pub fn new(actions: usize) -> Self {
        UniformGuidance { actions }
    }
}

impl GuidanceModel for UniformGuidance {
    fn predict(&self, _encoding: &[f64]) -> Prediction {
        Prediction { policy: vec![1.0 / self.actions as f64; self.actions], value: 0.0 }
    }

    fn train(&mut self, _batch: &[TrainingExample]) -> f64 {
        0.0
    }

    fn name(&self) -> &'static str {
        "uniform"
    }
}

/// Two hidden ReLU layers with a softmax policy head and a tanh value head,
/// trained by plain SGD on cross-entropy plus squared value error.
#[derive(Clone, Debug)]
pub struct MlpGuidance {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
    wp: Array2<f64>,
    bp: Array1<f64>,
    wv: Array1<f64>,
    bv: f64,
    pub learning_rate: f64,
    pub value_weight: f64,
}

pub const DEFAULT_HIDDEN: usize = 128;

struct Forward {
    h1: Array1<f64>,
    h2: Array1<f64>,
    probs: Array1<f64>,
    value: f64,
}

impl MlpGuidance {
    pub fn new(inputs: usize, hidden: usize, actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |rows: usize, cols: usize, fan_in: usize| {
            let scale = (2.0 / fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| scale * rng.sample::<f64, _>(StandardNormal))
        };
        let w1 = init(inputs, hidden, inputs.max(1));
        let w2 = init(hidden, hidden, hidden);
        let wp = init(hidden, actions, hidden) * 0.1;
        let wv = init(hidden, 1, hidden).index_axis(Axis(1), 0).to_owned() * 0.1;
        MlpGuidance {
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(hidden),
            wp,
            bp: Array1::zeros(actions),
            wv,
            bv: 0.0,
            learning_rate: 0.01,
            value_weight: 1.0,
        }
    }

    pub fn actions(&self) -> usize {
        self.bp.len()
    }

    fn forward(&self, x: &[f64]) -> Forward {
        // inputs are one-hot and mostly zero
        let mut h1 = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                h1.scaled_add(xi, &self.w1.row(i));
            }
        }
        h1.mapv_inplace(|v| v.max(0.0));
        let mut h2 = h1.dot(&self.w2) + &self.b2;
        h2.mapv_inplace(|v| v.max(0.0));
        let logits = h2.dot(&self.wp) + &self.bp;
        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut probs = logits.mapv(|l| (l - m).exp());
        let z = probs.sum();
        probs /= z;
        let value = (h2.dot(&self.wv) + self.bv).tanh();
        Forward { h1, h2, probs, value }
    }

    fn example_loss(&self, f: &Forward, ex: &TrainingExample) -> f64 {
        let ce: f64 = ex.policy.iter().map(|&(a, p)| -p * f.probs[a].max(1e-300).ln()).sum();
        ce + self.value_weight * (f.value - ex.value).powi(2)
    }

    /// Mean loss over a batch.
    pub fn loss(&self, batch: &[TrainingExample]) -> f64 {
        batch.iter().map(|ex| self.example_loss(&self.forward(&ex.encoding), ex)).sum::<f64>()
            / batch.len() as f64
    }

    /// Loss and its gradient, flattened in [`MlpGuidance::params`] order.
    pub fn gradient(&self, batch: &[TrainingExample]) -> (f64, Vec<f64>) {
        let mut gw1 = Array2::<f64>::zeros(self.w1.dim());
        let mut gb1 = Array1::<f64>::zeros(self.b1.len());
        let mut gw2 = Array2::<f64>::zeros(self.w2.dim());
        let mut gb2 = Array1::<f64>::zeros(self.b2.len());
        let mut gwp = Array2::<f64>::zeros(self.wp.dim());
        let mut gbp = Array1::<f64>::zeros(self.bp.len());
        let mut gwv = Array1::<f64>::zeros(self.wv.len());
        let mut gbv = 0.0;
        let n = batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            let f = self.forward(&ex.encoding);
            loss += self.example_loss(&f, ex);
            // softmax + cross-entropy: probs - target
            let mut dlogits = f.probs.clone();
            let mass: f64 = ex.policy.iter().map(|p| p.1).sum();
            dlogits *= mass;
            for &(a, p) in &ex.policy {
                dlogits[a] -= p;
            }
            dlogits /= n;
            let dv = self.value_weight * 2.0 * (f.value - ex.value) * (1.0 - f.value * f.value) / n;

            let h2c = f.h2.view().insert_axis(Axis(1));
            gwp += &h2c.dot(&dlogits.view().insert_axis(Axis(0)));
            gbp += &dlogits;
            gwv.scaled_add(dv, &f.h2);
            gbv += dv;

            let mut dh2 = self.wp.dot(&dlogits) + &(&self.wv * dv);
            dh2.zip_mut_with(&f.h2, |g, &h| if h <= 0.0 { *g = 0.0 });
            gw2 += &f.h1.view().insert_axis(Axis(1)).dot(&dh2.view().insert_axis(Axis(0)));
            gb2 += &dh2;

            let mut dh1 = self.w2.dot(&dh2);
            dh1.zip_mut_with(&f.h1, |g, &h| if h <= 0.0 { *g = 0.0 });
            for (i, &xi) in ex.encoding.iter().enumerate() {
                if xi != 0.0 {
                    gw1.row_mut(i).scaled_add(xi, &dh1);
                }
            }
            gb1 += &dh1;
        }
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(gw1.iter());
        flat.extend(gb1.iter());
        flat.extend(gw2.iter());
        flat.extend(gb2.iter());
        flat.extend(gwp.iter());
        flat.extend(gbp.iter());
        flat.extend(gwv.iter());
        flat.push(gbv);
        (loss / n, flat)
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.wp.len() + self.bp.len()
            + self.wv.len()
            + 1
    }

    pub fn params(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(self.w1.iter());
        flat.extend(self.b1.iter());
        flat.extend(self.w2.iter());
        flat.extend(self.b2.iter());
        flat.extend(self.wp.iter());
        flat.extend(self.bp.iter());
        flat.extend(self.wv.iter());
        flat.push(self.bv);
        flat
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut it = flat.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.wp.iter_mut())
            .chain(self.bp.iter_mut())
            .chain(self.wv.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        self.bv = it.next().expect("length checked");
    }

    fn sgd_step(&mut self, grad: &[f64]) {
        let lr = self.learning_rate;
        // clip the global norm to keep early updates stable
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > 5.0 { 5.0 / norm } else { 1.0 };
        let mut g = grad.iter().copied();
        for v in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
            .chain(self.wp.iter_mut())
            .chain(self.bp.iter_mut())
            .chain(self.wv.iter_mut())
        {
            *v -= lr * scale * g.next().expect("gradient length");
        }
        self.bv -= lr * scale * g.next().expect("gradient length");
    }
}

impl GuidanceModel for MlpGuidance {
    fn predict(&self, encoding: &[f64]) -> Prediction {
        let f = self.forward(encoding);
        Prediction { policy: f.probs.to_vec(), value: f.value }
    }

    fn train(&mut self, batch: &[TrainingExample]) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let (loss, grad) = self.gradient(batch);
        self.sgd_step(&grad);
        loss
    }

    fn name(&self) -> &'static str {
        "mlp"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(inputs: usize, actions: usize, n: usize, seed: u64) -> Vec<TrainingExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let encoding = (0..inputs).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
                let a = rng.random_range(0..actions);
                TrainingExample { encoding, policy: vec![(a, 1.0)], value: rng.random_range(-0.5..0.5) }
            })
            .collect()
    }

    #[test]
    fn untrained_policy_is_distribution() {
        let m = MlpGuidance::new(40, 16, 25, 1);
        let p = m.predict(&[1.0; 40]);
        assert!((p.policy.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(p.policy.iter().all(|&v| v >= 0.0));
        assert!(p.value.abs() <= 1.0);
    }

    #[test]
    fn training_reduces_loss() {
        let mut m = MlpGuidance::new(20, 32, 6, 2);
        let b = batch(20, 6, 16, 3);
        let before = m.loss(&b);
        for _ in 0..200 {
            m.train(&b);
        }
        assert!(m.loss(&b) < before);
    }

    #[test]
    fn masking_renormalizes() {
        let p = masked_priors(&[0.1, 0.2, 0.3, 0.4], &[1, 3]);
        assert!((p[0] - 1.0 / 3.0).abs() < 1e-12 && (p[1] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(masked_priors(&[0.0, 0.0], &[0, 1]), vec![0.5, 0.5]);
        let u = UniformGuidance::new(4).predict(&[]);
        assert_eq!(u.policy, vec![0.25; 4]);
        assert_eq!(u.value, 0.0);
    }

    #[test]
    fn params_roundtrip() {
        let mut m = MlpGuidance::new(5, 4, 3, 9);
        let p = m.params();
        assert_eq!(p.len(), m.param_count());
        m.set_params(&p);
        assert_eq!(m.params(), p);
    }
}
