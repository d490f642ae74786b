//! Gaussian-action MLP policies conditioned on a dropout mask, plus the
//! value baseline and an observation normalizer.
//!
//! Hidden activations of layer `k` are multiplied elementwise by the mask
//! slice for that layer before entering layer `k + 1`. The output layer and
//! the state-independent action log-std are never masked.


use serde::{Deserialize, Serialize};

use crate::dropoutdist::{DropoutDistribution, DropoutMask};
use crate::error::{Error, Result};
use crate::rng::{normal, StreamRng};
use crate::tensorgraph::{Graph, Tensor, Var};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    inputs: usize,
    outputs: usize,
    /// Row-major `inputs × outputs`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, gain: f64, rng: &mut StreamRng) -> Self {
        Linear {
            inputs,
            outputs,
            weight: orthogonal(inputs, outputs, gain, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Scaled orthogonal initialization via Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut StreamRng) -> Vec<f64> {
    // orthonormalize `count` vectors of length `dim`
    let (count, dim) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(count);
    while vecs.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-10 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { vecs[c][r] } else { vecs[r][c] };
        }
    }
    out
}

/// Tanh MLP; hidden widths fixed at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(sizes: &[usize], output_gain: f64, rng: &mut StreamRng) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { output_gain } else { 1.0 };
                Linear::new(sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Units per hidden layer, i.e. the dropout layout.
    pub fn hidden_layout(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Linear::num_params).sum()
    }

    fn flat_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
    }

    fn set_flat_from(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        at
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = Tensor::matrix(l.inputs, l.outputs, l.weight.clone()).expect("layer shape");
                let b = Tensor::row(l.bias.clone());
                if trainable {
                    (g.param(w), g.param(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        MlpVars { layers }
    }

    /// Single-row forward without a graph. `mask` is the flat concatenation
    /// of all hidden-layer masks.
    pub fn forward_row(&self, x: &[f64], mask: Option<&[f64]>) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        let mut at = 0;
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = l.bias.clone();
            for (i, hi) in h.iter().enumerate() {
                let row = &l.weight[i * l.outputs..(i + 1) * l.outputs];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += hi * w;
                }
            }
            if k < last {
                for o in out.iter_mut() {
                    *o = o.tanh();
                }
                if let Some(z) = mask {
                    for (o, m) in out.iter_mut().zip(&z[at..at + l.outputs]) {
                        *o *= m;
                    }
                    at += l.outputs;
                }
            }
            h = out;
        }
        h
    }

    /// Batch forward of an `n × input` node. `masks[k]`, when present, is an
    /// `n × width_k` node multiplied into hidden layer `k`'s activation.
    pub fn forward(&self, g: &mut Graph, vars: &MlpVars, x: Var, masks: &[Option<Var>]) -> Result<Var> {
        let rows = g.value(x).shape()[0];
        let last = vars.layers.len() - 1;
        let mut h = x;
        for (k, &(w, b)) in vars.layers.iter().enumerate() {
            let hw = g.matmul(h, w)?;
            let bias = g.repeat_rows(b, rows)?;
            let pre = g.add(hw, bias)?;
            if k == last {
                return Ok(pre);
            }
            h = g.tanh(pre);
            if let Some(Some(m)) = masks.get(k) {
                let ms = g.value(*m).shape().to_vec();
                if ms != g.value(h).shape() {
                    return Err(Error::Shape {
                        op: "dropout mask",
                        left: ms,
                        right: g.value(h).shape().to_vec(),
                    });
                }
                h = g.mul(h, *m)?;
            }
        }
        unreachable!("an MLP has at least one layer")
    }
}

#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

impl MlpVars {
    fn grads_into(&self, g: &Graph, out: &mut Vec<f64>) {
        for &(w, b) in &self.layers {
            out.extend(g.grad(w));
            out.extend(g.grad(b));
        }
    }
}

/// Diagonal Gaussian over actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl ActionDistribution {
    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, action: &[f64]) -> f64 {
        log_prob_action(self, action)
    }

    pub fn sample(&self, rng: &mut StreamRng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, l)| m + l.exp() * normal(rng))
            .collect()
    }
}

/// Diagonal-Gaussian log density.
pub fn log_prob_action(dist: &ActionDistribution, action: &[f64]) -> f64 {
    dist.mean
        .iter()
        .zip(&dist.log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn per_state_kl(p: &ActionDistribution, q: &ActionDistribution) -> f64 {
    let mut kl = 0.0;
    for i in 0..p.mean.len() {
        let (sp, sq) = (p.log_std[i].exp(), q.log_std[i].exp());
        let dm = p.mean[i] - q.mean[i];
        kl += q.log_std[i] - p.log_std[i] + (sp * sp + dm * dm) / (2.0 * sq * sq) - 0.5;
    }
    kl
}

/// Row-wise diagonal-Gaussian log density on the graph: `n × 1`.
pub fn log_prob_graph(g: &mut Graph, mean: Var, log_std: Var, actions: &[f64]) -> Result<Var> {
    let shape = g.value(mean).shape().to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let a = g.constant(Tensor::matrix(rows, cols, actions.to_vec())?);
    let diff = g.sub(a, mean)?;
    let ls = g.repeat_rows(log_std, rows)?;
    let neg_ls = g.neg(ls);
    let inv_std = g.exp(neg_ls);
    let z = g.mul(diff, inv_std)?;
    let z2 = g.square(z);
    let quad = g.scale(z2, -0.5);
    let t = g.sub(quad, ls)?;
    let t = g.add_scalar(t, -0.5 * LN_2PI);
    g.row_sums(t)
}

/// `π_θ(a|s)`: MLP `obs → hidden… → act` with tanh and a learned log-std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    mlp: Mlp,
    log_std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PolicyVars {
    pub mlp: MlpVars,
    pub log_std: Var,
}

impl PolicyNet {
    pub fn new(obs_dim: usize, hidden: &[usize], act_dim: usize, rng: &mut StreamRng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(act_dim);
        PolicyNet {
            mlp: Mlp::new(&sizes, 0.01, rng),
            log_std: vec![0.0; act_dim],
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn obs_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn hidden_layout(&self) -> Vec<usize> {
        self.mlp.hidden_layout()
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params() + self.log_std.len()
    }

    /// Network weights and biases followed by the log-std.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mlp.flat_into(&mut out);
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Length(format!(
                "policy expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let at = self.mlp.set_flat_from(flat);
        self.log_std.copy_from_slice(&flat[at..]);
        Ok(())
    }

    /// Copy with `noise` added to every weight and bias (log-std untouched).
    pub fn perturbed(&self, noise: &[f64]) -> Result<PolicyNet> {
        let n = self.mlp.num_params();
        if noise.len() != n {
            return Err(Error::Length(format!("perturbation has {} values, network has {n}", noise.len())));
        }
        let mut flat = self.flat();
        flat[..n].iter_mut().zip(noise).for_each(|(p, e)| *p += e);
        let mut out = self.clone();
        out.set_flat(&flat)?;
        Ok(out)
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        let mlp = self.mlp.bind(g, trainable);
        let ls = Tensor::row(self.log_std.clone());
        let log_std = if trainable { g.param(ls) } else { g.constant(ls) };
        PolicyVars { mlp, log_std }
    }

    /// Flat gradient in [`flat`](Self::flat) order.
    pub fn grads(&self, g: &Graph, vars: &PolicyVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        vars.mlp.grads_into(g, &mut out);
        out.extend(g.grad(vars.log_std));
        out
    }

    /// Batch forward: returns the `n × act` mean node.
    pub fn forward_graph(&self, g: &mut Graph, vars: &PolicyVars, obs: Var, masks: &[Option<Var>]) -> Result<Var> {
        self.mlp.forward(g, &vars.mlp, obs, masks)
    }

    /// `π_{θ|z}(·|s)` for a single observation.
    pub fn forward_policy(&self, obs: &[f64], mask: Option<&[f64]>) -> Result<ActionDistribution> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Shape {
                op: "policy observation",
                left: vec![obs.len()],
                right: vec![self.obs_dim()],
            });
        }
        if let Some(z) = mask {
            let units: usize = self.hidden_layout().iter().sum();
            if z.len() != units {
                return Err(Error::Shape {
                    op: "dropout mask layout",
                    left: vec![z.len()],
                    right: self.hidden_layout(),
                });
            }
        }
        Ok(ActionDistribution {
            mean: self.mlp.forward_row(obs, mask),
            log_std: self.log_std.clone(),
        })
    }

    /// `π_θ = π_{θ|z̄}` with the distribution's expected mask.
    pub fn mean_policy_forward(&self, obs: &[f64], dist: &DropoutDistribution) -> Result<ActionDistribution> {
        self.forward_policy(obs, Some(&dist.mean_mask().values()))
    }

    pub fn forward_mask(&self, obs: &[f64], mask: &DropoutMask) -> Result<ActionDistribution> {
        self.forward_policy(obs, Some(&mask.values()))
    }
}

/// Split a flat mask into per-layer slices.
pub fn split_mask(z: &[f64], layout: &[usize]) -> Result<Vec<Vec<f64>>> {
    let total: usize = layout.iter().sum();
    if z.len() != total {
        return Err(Error::Shape {
            op: "dropout mask layout",
            left: vec![z.len()],
            right: layout.to_vec(),
        });
    }
    let mut at = 0;
    Ok(layout
        .iter()
        .map(|&n| {
            let part = z[at..at + n].to_vec();
            at += n;
            part
        })
        .collect())
}

/// State-value baseline; same MLP shape with a scalar head and no dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    mlp: Mlp,
}

impl ValueNet {
    pub fn new(obs_dim: usize, hidden: &[usize], rng: &mut StreamRng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        ValueNet {
            mlp: Mlp::new(&sizes, 1.0, rng),
        }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn num_params(&self) -> usize {
        self.mlp.num_params()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.mlp.flat_into(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Length(format!(
                "value net expects {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        self.mlp.set_flat_from(flat);
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        self.mlp.bind(g, trainable)
    }

    pub fn grads(&self, g: &Graph, vars: &MlpVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        vars.grads_into(g, &mut out);
        out
    }

    /// `n × 1` value node.
    pub fn forward_graph(&self, g: &mut Graph, vars: &MlpVars, obs: Var) -> Result<Var> {
        self.mlp.forward(g, vars, obs, &[])
    }

    pub fn value_row(&self, obs: &[f64]) -> f64 {
        self.mlp.forward_row(obs, None)[0]
    }

    /// Values for `n` stacked observations.
    pub fn values(&self, obs: &[f64]) -> Result<Vec<f64>> {
        let d = self.mlp.input_dim();
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::matrix(obs.len() / d, d, obs.to_vec())?);
        let v = self.forward_graph(&mut g, &vars, x)?;
        Ok(g.value(v).data().to_vec())
    }
}

/// Running mean/variance of observations; statistics stay frozen while a
/// batch is being collected and are refreshed between iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    enabled: bool,
    count: f64,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl ObsNormalizer {
    const CLIP: f64 = 10.0;

    pub fn new(dim: usize, enabled: bool) -> Self {
        ObsNormalizer {
            enabled,
            count: 1e-4,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn normalize(&self, obs: &[f64]) -> Vec<f64> {
        if !self.enabled {
            return obs.to_vec();
        }
        obs.iter()
            .zip(self.mean.iter().zip(&self.var))
            .map(|(x, (m, v))| ((x - m) / (v + 1e-8).sqrt()).clamp(-Self::CLIP, Self::CLIP))
            .collect()
    }

    /// Merge the moments of `n` stacked raw observations.
    pub fn update(&mut self, obs: &[f64]) {
        if !self.enabled || obs.is_empty() {
            return;
        }
        let d = self.mean.len();
        let n = (obs.len() / d) as f64;
        for j in 0..d {
            let col = obs.iter().skip(j).step_by(d);
            let bm = col.clone().sum::<f64>() / n;
            let bv = col.map(|x| (x - bm) * (x - bm)).sum::<f64>() / n;
            let delta = bm - self.mean[j];
            let total = self.count + n;
            let m2 = self.var[j] * self.count + bv * n + delta * delta * self.count * n / total;
            self.mean[j] += delta * n / total;
            self.var[j] = m2 / total;
        }
        self.count += n;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dropoutdist::DropoutKind;
    use crate::rng::stream;

    fn net(seed: u64) -> PolicyNet {
        let mut rng = stream(seed, 0);
        PolicyNet::new(3, &[8, 8], 2, &mut rng)
    }

    #[test]
    fn all_ones_mask_matches_maskless() {
        let p = net(1);
        let obs = [0.3, -0.2, 1.1];
        let a = p.forward_policy(&obs, None).unwrap();
        let b = p.forward_policy(&obs, Some(&[1.0; 16])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mask_leaves_output_bias() {
        let mut p = net(2);
        let mut flat = p.flat();
        let n = p.mlp().num_params();
        // give the output bias a recognizable value
        flat[n - 2] = 0.25;
        flat[n - 1] = -0.75;
        p.set_flat(&flat).unwrap();
        let d = p.forward_policy(&[1.0, 2.0, 3.0], Some(&[0.0; 16])).unwrap();
        assert_eq!(d.mean, vec![0.25, -0.75]);
    }

    #[test]
    fn layout_mismatch_is_dimension_error() {
        let p = net(3);
        assert!(matches!(
            p.forward_policy(&[0.0; 3], Some(&[1.0; 10])),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(p.forward_policy(&[0.0; 2], None), Err(Error::Shape { .. })));
    }

    #[test]
    fn log_prob_at_mode() {
        let d = ActionDistribution {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        assert!((d.log_prob(&[0.0]) + 0.918_938_533_204_672_7).abs() < 1e-12);
        let shifted = ActionDistribution {
            mean: vec![3.5],
            log_std: vec![0.0],
        };
        assert!((d.log_prob(&[0.4]) - shifted.log_prob(&[3.9])).abs() < 1e-12);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        let d = ActionDistribution {
            mean: vec![0.3],
            log_std: vec![-0.4],
        };
        let (lo, hi, n) = (-10.0, 10.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..=n {
            let x = lo + i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            total += w * d.log_prob(&[x]).exp();
        }
        assert!((total * h - 1.0).abs() < 1e-4);
    }

    #[test]
    fn kl_examples() {
        let a = ActionDistribution {
            mean: vec![0.0],
            log_std: vec![0.0],
        };
        assert_eq!(per_state_kl(&a, &a), 0.0);
        let b = ActionDistribution {
            mean: vec![1.0],
            log_std: vec![0.0],
        };
        assert!((per_state_kl(&a, &b) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mean_policy_of_gaussian_is_maskless() {
        let p = net(4);
        let d = DropoutDistribution::uniform(DropoutKind::Gaussian, p.hidden_layout(), 0.3).unwrap();
        let obs = [0.5, 0.1, -0.3];
        assert_eq!(p.mean_policy_forward(&obs, &d).unwrap(), p.forward_policy(&obs, None).unwrap());
    }

    #[test]
    fn normalizer_tracks_moments() {
        let mut n = ObsNormalizer::new(2, true);
        let data: Vec<f64> = (0..1000).flat_map(|i| [i as f64, 2.0]).collect();
        n.update(&data);
        assert!((n.mean()[0] - 499.5).abs() < 0.1);
        assert!((n.var()[0] - 83333.25).abs() < 50.0);
        assert!(n.var()[1] < 1e-3);
        let off = ObsNormalizer::new(2, false);
        assert_eq!(off.normalize(&[5.0, 6.0]), vec![5.0, 6.0]);
    }

    #[test]
    fn orthogonal_columns() {
        let mut rng = stream(5, 0);
        let w = orthogonal(6, 4, 1.0, &mut rng);
        for a in 0..4 {
            for b in 0..4 {
                let d: f64 = (0..6).map(|r| w[r * 4 + a] * w[r * 4 + b]).sum();
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }
}
