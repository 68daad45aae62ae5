//! Per-layer routers: a linear map from the [CLS] row to one score per task,
//! relaxed with a Gumbel-sigmoid (or, for comparison, a softmax).

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{config, contract, Result};
use crate::io::{self, Manifest};
use crate::tensor::{sigmoid, softmax_in_place, Tape, Tensor, Var};

/// Uniform draws are kept inside `[U_EPS, 1 - U_EPS]`.
pub const U_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relaxation {
    GumbelSigmoid,
    Softmax,
}

impl Relaxation {
    pub fn name(self) -> &'static str {
        match self {
            Relaxation::GumbelSigmoid => "gumbel-sigmoid",
            Relaxation::Softmax => "softmax",
        }
    }
}

/// `log(u / (1 - u))` with `u` clamped away from 0 and 1.
pub fn logistic_noise(u: f64) -> f64 {
    let u = u.clamp(U_EPS, 1.0 - U_EPS);
    u.ln() - (1.0 - u).ln()
}

/// Relaxed gate for logit `z`, uniform draw `u` and temperature `tau`:
/// `σ(log[σ(z)·u / ((1 − σ(z))·(1 − u))] / τ)`, evaluated as
/// `σ((z + log u − log(1 − u)) / τ)` to stay finite for large `|z|`.
pub fn gumbel_sigmoid(z: f64, u: f64, tau: f64) -> f64 {
    sigmoid((z + logistic_noise(u)) / tau)
}

/// Where the uniform draws of a stochastic forward pass come from.
pub enum Noise<'a> {
    /// `σ(z/τ)`, the `u = 0.5` limit.
    Deterministic,
    /// Independent draws per layer and per component.
    Sampled(&'a mut ChaCha8Rng),
    /// Given draws, indexed `[layer][task]`.
    Fixed(&'a [Vec<f64>]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterLayer {
    /// `[T, d]`.
    pub weight: Tensor,
    /// `[T]`.
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterStack {
    layers: Vec<RouterLayer>,
    relaxation: Relaxation,
    temperature: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundRouterLayer {
    pub weight: Var,
    pub bias: Var,
    weight_t: Var,
}

#[derive(Clone, Debug)]
pub struct BoundRouter {
    pub layers: Vec<BoundRouterLayer>,
    pub relaxation: Relaxation,
    pub temperature: f64,
}

pub fn validate_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(config("router.temperature", format!("{tau} must be positive")))
    }
}

impl RouterStack {
    /// Zero weights and biases for `num_layers` layers and `num_tasks` tasks.
    pub fn zeros(
        num_layers: usize,
        dim: usize,
        num_tasks: usize,
        relaxation: Relaxation,
        temperature: f64,
    ) -> Result<Self> {
        validate_temperature(temperature)?;
        if num_tasks == 0 {
            return Err(contract("a router needs at least one task"));
        }
        Ok(Self {
            layers: (0..num_layers)
                .map(|_| RouterLayer {
                    weight: Tensor::zeros(&[num_tasks, dim]),
                    bias: Tensor::zeros(&[num_tasks]),
                })
                .collect(),
            relaxation,
            temperature,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_tasks(&self) -> usize {
        self.layers.first().map_or(0, |l| l.bias.numel())
    }

    pub fn relaxation(&self) -> Relaxation {
        self.relaxation
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn layers(&self) -> &[RouterLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [RouterLayer] {
        &mut self.layers
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        for l in &mut self.layers {
            l.weight.set_requires_grad(on);
            l.bias.set_requires_grad(on);
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Raw scores `z = W·h + b` of one layer.
    pub fn logits(&self, layer: usize, h: &[f64]) -> Result<Vec<f64>> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| contract(format!("router layer {layer} out of range")))?;
        let d = l.weight.shape()[1];
        if h.len() != d {
            return Err(contract(format!("router expects width {d}, got {}", h.len())));
        }
        Ok(l.weight
            .data()
            .chunks(d)
            .zip(l.bias.data())
            .map(|(w, b)| w.iter().zip(h).map(|(x, y)| x * y).sum::<f64>() + b)
            .collect())
    }

    /// Routing vector of one layer. `u` supplies one uniform draw per task
    /// for a stochastic Gumbel-sigmoid pass; `None` routes deterministically.
    pub fn route(&self, layer: usize, h: &[f64], u: Option<&[f64]>) -> Result<Vec<f64>> {
        let z = self.logits(layer, h)?;
        let tau = self.temperature;
        Ok(match self.relaxation {
            Relaxation::GumbelSigmoid => match u {
                Some(u) => {
                    if u.len() != z.len() {
                        return Err(contract("one uniform draw per task is required"));
                    }
                    z.iter().zip(u).map(|(&z, &u)| gumbel_sigmoid(z, u, tau)).collect()
                }
                None => z.iter().map(|&z| sigmoid(z / tau)).collect(),
            },
            Relaxation::Softmax => {
                let mut s: Vec<f64> = z.iter().map(|&z| z / tau).collect();
                softmax_in_place(&mut s);
                s
            }
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundRouter> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (tape.leaf(&l.weight), tape.leaf(&l.bias));
                BoundRouterLayer::new(tape, w, b)
            })
            .collect::<Result<_>>()?;
        Ok(BoundRouter {
            layers,
            relaxation: self.relaxation,
            temperature: self.temperature,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (manifest, tensors) = self.manifest();
        io::bundle_bytes(&manifest, &tensors)
    }

    fn manifest(&self) -> (Manifest, Vec<&Tensor>) {
        let mut named = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            named.push((format!("layer{i}.weight"), &l.weight));
            named.push((format!("layer{i}.bias"), &l.bias));
        }
        let meta = json!({
            "relaxation": self.relaxation,
            "temperature": self.temperature,
        });
        let tensors = named.iter().map(|(_, t)| *t).collect();
        (Manifest::new("router", meta, &named), tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, tensors) = io::read_bundle(path)?;
        if manifest.kind != "router" || tensors.len() % 2 != 0 {
            return Err(contract("not a router bundle"));
        }
        let relaxation: Relaxation = serde_json::from_value(manifest.meta["relaxation"].clone())?;
        let temperature = manifest.meta["temperature"]
            .as_f64()
            .ok_or_else(|| contract("router bundle lacks a temperature"))?;
        validate_temperature(temperature)?;
        let mut it = tensors.into_iter();
        let mut layers = Vec::new();
        while let (Some(weight), Some(bias)) = (it.next(), it.next()) {
            layers.push(RouterLayer { weight, bias });
        }
        Ok(Self {
            layers,
            relaxation,
            temperature,
        })
    }
}

impl BoundRouterLayer {
    /// Wraps `[T, d]` weight and `[T]` bias nodes already on `tape`.
    pub fn new(tape: &mut Tape, weight: Var, bias: Var) -> Result<Self> {
        Ok(Self {
            weight,
            bias,
            weight_t: tape.transpose(weight)?,
        })
    }
}

impl BoundRouter {
    pub fn num_tasks(&self, tape: &Tape) -> usize {
        self.layers.first().map_or(0, |l| tape.shape(l.bias)[0])
    }

    /// Routing vector `[1, T]` for the `[1, d]` row `cls` at `layer`.
    /// `u`, when given, holds one uniform draw per task.
    pub fn route(&self, tape: &mut Tape, layer: usize, cls: Var, u: Option<&[f64]>) -> Result<Var> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| contract(format!("router layer {layer} out of range")))?;
        let z = tape.matmul(cls, l.weight_t)?;
        let z = tape.add(z, l.bias)?;
        let inv_tau = 1.0 / self.temperature;
        match self.relaxation {
            Relaxation::GumbelSigmoid => {
                let z = match u {
                    Some(u) => {
                        let noise = u.iter().map(|&u| logistic_noise(u)).collect::<Vec<_>>();
                        let n = tape.constant(vec![1, noise.len()], noise)?;
                        tape.add(z, n)?
                    }
                    None => z,
                };
                let z = tape.scale(z, inv_tau);
                Ok(tape.sigmoid(z))
            }
            Relaxation::Softmax => {
                let z = tape.scale(z, inv_tau);
                Ok(tape.softmax(z))
            }
        }
    }

    /// Draws (or looks up) the uniforms for one layer under `noise`.
    pub fn draws(&self, noise: &mut Noise<'_>, layer: usize, num_tasks: usize) -> Option<Vec<f64>> {
        if self.relaxation == Relaxation::Softmax {
            return None;
        }
        match noise {
            Noise::Deterministic => None,
            Noise::Sampled(rng) => Some((0..num_tasks).map(|_| rng.random::<f64>()).collect()),
            Noise::Fixed(u) => u.get(layer).cloned(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn stack(relaxation: Relaxation) -> RouterStack {
        let mut s = RouterStack::zeros(2, 3, 4, relaxation, 1.0).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for t in s.tensors_mut() {
            for x in t.data_mut() {
                *x = r.random_range(-1.0..1.0);
            }
        }
        s
    }

    #[test]
    fn half_draw_collapses_to_sigmoid() {
        for z in [-30.0, -2.5, 0.0, 1.0, 7.0] {
            assert!((gumbel_sigmoid(z, 0.5, 1.0) - sigmoid(z)).abs() < 1e-12);
        }
        assert_eq!(gumbel_sigmoid(0.0, 0.5, 1.0), 0.5);
        let s = stack(Relaxation::GumbelSigmoid);
        let h = [0.3, -0.2, 0.9];
        let det = s.route(1, &h, None).unwrap();
        let half = s.route(1, &h, Some(&[0.5; 4])).unwrap();
        for (a, b) in det.iter().zip(&half) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        assert!(RouterStack::zeros(1, 2, 2, Relaxation::GumbelSigmoid, 0.0).is_err());
        assert!(RouterStack::zeros(1, 2, 2, Relaxation::Softmax, -1.0).is_err());
    }

    #[test]
    fn zero_stack_scores() {
        let g = RouterStack::zeros(2, 3, 5, Relaxation::GumbelSigmoid, 1.0).unwrap();
        assert_eq!(g.route(0, &[1.0, 2.0, 3.0], None).unwrap(), vec![0.5; 5]);
        let s = RouterStack::zeros(2, 3, 5, Relaxation::Softmax, 1.0).unwrap();
        for v in s.route(1, &[1.0, 2.0, 3.0], None).unwrap() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn extremes_stay_finite_and_open() {
        for z in [-1e6, -745.0, -50.0, 50.0, 745.0, 1e6] {
            for u in [0.0, 1e-300, 0.5, 1.0 - 1e-17, 1.0] {
                let g = gumbel_sigmoid(z, u, 1.0);
                assert!(g.is_finite());
                assert!((0.0..=1.0).contains(&g));
            }
        }
        for z in [-20.0, 0.0, 20.0] {
            for u in [0.0, 0.3, 1.0] {
                let g = gumbel_sigmoid(z, u, 1.0);
                assert!(g > 0.0 && g < 1.0);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let s = stack(Relaxation::Softmax);
        let v = s.route(0, &[5.0, -3.0, 0.1], None).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_route_matches_plain_route() {
        for relaxation in [Relaxation::GumbelSigmoid, Relaxation::Softmax] {
            let s = stack(relaxation);
            let h = [0.4, 0.1, -0.7];
            let u = [0.1, 0.7, 0.5, 0.99];
            let mut tape = Tape::new();
            let b = s.bind(&mut tape).unwrap();
            let cls = tape.constant(vec![1, 3], h.to_vec()).unwrap();
            let v = b.route(&mut tape, 1, cls, Some(&u)).unwrap();
            let plain = s.route(1, &h, Some(&u)).unwrap();
            for (a, p) in tape.value(v).iter().zip(&plain) {
                assert!((a - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn bundle_round_trip() {
        let s = stack(Relaxation::Softmax);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("router.bin");
        s.save(&p).unwrap();
        assert_eq!(RouterStack::load(&p).unwrap(), s);
    }

    #[test]
    fn sampled_mean_matches_quadrature() {
        let n = 200_000;
        let quad = (0..n)
            .map(|i| gumbel_sigmoid(1.0, (i as f64 + 0.5) / n as f64, 1.0))
            .sum::<f64>()
            / n as f64;
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let draws = 100_000;
        let mc = (0..draws)
            .map(|_| gumbel_sigmoid(1.0, r.random::<f64>(), 1.0))
            .sum::<f64>()
            / draws as f64;
        assert!((mc - quad).abs() < 0.01, "{mc} vs {quad}");
    }

    proptest! {
        #[test]
        fn monotone_in_logit(u in 0.0f64..1.0, z in -20.0f64..20.0, dz in 1e-3f64..5.0) {
            prop_assert!(gumbel_sigmoid(z + dz, u, 1.0) > gumbel_sigmoid(z, u, 1.0));
        }
    }
}
