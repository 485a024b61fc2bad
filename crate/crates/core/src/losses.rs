//! Training objectives: binary cross entropy for the first phase, the pairwise
//! KL clustering loss for the instance phase, and the schedule between them.

use std::fmt;
use std::str::FromStr;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{InstanceMap, K_MAX};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Binary,
    Instance,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Binary => "binary",
            Phase::Instance => "instance",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(Phase::Binary),
            "instance" => Ok(Phase::Instance),
            other => Err(Error::Config(format!("unknown training phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub phase: Phase,
    pub epoch: usize,
    pub switch_epoch: usize,
}

impl CurriculumState {
    pub fn new(switch_epoch: usize) -> Self {
        Self {
            phase: phase_at(0, switch_epoch),
            epoch: 0,
            switch_epoch,
        }
    }
}

fn phase_at(epoch: usize, switch_epoch: usize) -> Phase {
    if epoch < switch_epoch {
        Phase::Binary
    } else {
        Phase::Instance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumStep {
    pub state: CurriculumState,
    /// Set exactly once, on the epoch where binary turns into instance: the
    /// trainer must swap the 2-channel head for a `K_MAX + 1` one.
    pub reinit_head: bool,
}

pub fn curriculum_step(state: &CurriculumState, epoch: usize) -> CurriculumStep {
    let phase = phase_at(epoch, state.switch_epoch);
    CurriculumStep {
        state: CurriculumState {
            phase,
            epoch,
            switch_epoch: state.switch_epoch,
        },
        reinit_head: state.phase == Phase::Binary && phase == Phase::Instance,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceLossConfig {
    pub margin: f64,
    pub pair_budget: usize,
    pub symmetric: bool,
}

impl Default for InstanceLossConfig {
    fn default() -> Self {
        Self {
            margin: 2.0,
            pair_budget: 4096,
            symmetric: true,
        }
    }
}

impl InstanceLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.margin.is_nan() || self.margin <= 0.0 {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if self.pair_budget == 0 {
            return Err(Error::Config("pair_budget must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean binary cross entropy of a `(B, 2, H, W)` logit tensor against a
/// `(B, H, W)` mask (nonzero = boundary). With a two-way softmax head the
/// boundary probability is `sigmoid(z1 - z0)`, so this is ordinary BCE.
pub fn binary_phase_loss(logits: &Tensor, gt_mask: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 || gt_mask.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "binary loss needs logits (B, 2, H, W) and mask (B, H, W), got {:?} and {:?}",
            logits.dims(),
            gt_mask.dims()
        )));
    }
    let flat = logits.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, 2))?;
    let target = gt_mask.ne(0u32)?.to_dtype(candle_core::DType::U32)?.flatten_all()?;
    Ok(candle_nn::loss::cross_entropy(&flat, &target)?)
}

/// A sampled pixel pair, as row-major pixel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelPair {
    pub p: usize,
    pub q: usize,
    pub same: bool,
}

/// Stratified pair sampling. Half the budget (rounded up) goes to same-instance
/// pairs: pick a present label uniformly, background included, then two of
/// its pixels. The rest picks two distinct labels and one pixel of each. When
/// only one label is present the whole budget is same-instance.
pub fn sample_pairs(map: &InstanceMap, budget: usize, seed: u64) -> Vec<PixelPair> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); K_MAX + 1];
    for (i, &v) in map.data().iter().enumerate() {
        groups[v as usize].push(i);
    }
    let present: Vec<&Vec<usize>> = groups.iter().filter(|g| !g.is_empty()).collect();
    if present.is_empty() {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_diff = if present.len() > 1 { budget / 2 } else { 0 };
    let mut pairs = Vec::with_capacity(budget);
    for _ in 0..budget - n_diff {
        let g = present.choose(&mut rng).expect("non-empty");
        let p = rng.random_range(0..g.len());
        let q = if g.len() > 1 {
            // a different pixel of the same label
            (p + rng.random_range(1..g.len())) % g.len()
        } else {
            p
        };
        pairs.push(PixelPair {
            p: g[p],
            q: g[q],
            same: true,
        });
    }
    for _ in 0..n_diff {
        let a = rng.random_range(0..present.len());
        let b = (a + rng.random_range(1..present.len())) % present.len();
        pairs.push(PixelPair {
            p: *present[a].choose(&mut rng).expect("non-empty"),
            q: *present[b].choose(&mut rng).expect("non-empty"),
            same: false,
        });
    }
    pairs
}

fn kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&la, &lb)| la.exp() * (la - lb)).sum()
}

fn pair_cost(la: &[f64], lb: &[f64], same: bool, cfg: &InstanceLossConfig) -> f64 {
    let forward = kl(la, lb);
    let backward = || kl(lb, la);
    if same {
        forward + if cfg.symmetric { backward() } else { 0.0 }
    } else {
        let hinge = |k: f64| (cfg.margin - k).max(0.0);
        hinge(forward) + if cfg.symmetric { hinge(backward()) } else { 0.0 }
    }
}

fn check_layout(len: usize, channels: usize, map: &InstanceMap) -> Result<usize> {
    let hw = map.width() as usize * map.height() as usize;
    if channels < 2 || len != channels * hw {
        return Err(Error::Shape(format!(
            "expected {channels} x {} x {} values, got {len}",
            map.height(),
            map.width()
        )));
    }
    if let Some(&v) = map.data().iter().find(|&&v| v as usize > K_MAX) {
        return Err(Error::InstanceBudget {
            count: v as usize,
            max: K_MAX,
        });
    }
    Ok(hw)
}

/// Mean pairwise cost over `cfg.pair_budget` pairs drawn with `seed`, from
/// channel-major per-pixel probabilities (`channels × H × W`).
pub fn instance_pair_loss(
    probabilities: &[f32],
    channels: usize,
    map: &InstanceMap,
    cfg: &InstanceLossConfig,
    seed: u64,
) -> Result<f64> {
    cfg.validate()?;
    let hw = check_layout(probabilities.len(), channels, map)?;
    let log_at = |p: usize| -> Vec<f64> {
        (0..channels)
            .map(|c| (probabilities[c * hw + p] as f64).max(PROB_EPS).ln())
            .collect()
    };
    let pairs = sample_pairs(map, cfg.pair_budget, seed);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pairs
        .iter()
        .map(|pr| pair_cost(&log_at(pr.p), &log_at(pr.q), pr.same, cfg))
        .sum();
    Ok(total / pairs.len() as f64)
}

fn log_softmax_at(logits: &[f64], hw: usize, channels: usize, p: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..channels).map(|c| logits[c * hw + p]).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Same loss on logits, with its exact gradient with respect to the logits.
pub fn instance_pair_loss_with_grad(
    logits: &[f64],
    channels: usize,
    map: &InstanceMap,
    cfg: &InstanceLossConfig,
    seed: u64,
) -> Result<(f64, Vec<f64>)> {
    cfg.validate()?;
    let hw = check_layout(logits.len(), channels, map)?;
    let pairs = sample_pairs(map, cfg.pair_budget, seed);
    let mut grad = vec![0.0; logits.len()];
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut total = 0.0;
    // d KL(P||Q) / dz_p = P * ((a - b) - KL),  d KL(P||Q) / dz_q = Q - P
    let add_kl_grad = |grad: &mut [f64], a: &[f64], b: &[f64], k: f64, p: usize, q: usize, w: f64| {
        for c in 0..channels {
            let (pa, qb) = (a[c].exp(), b[c].exp());
            grad[c * hw + p] += w * pa * ((a[c] - b[c]) - k);
            grad[c * hw + q] += w * (qb - pa);
        }
    };
    for pr in &pairs {
        let a = log_softmax_at(logits, hw, channels, pr.p);
        let b = log_softmax_at(logits, hw, channels, pr.q);
        let directions: &[(usize, usize, &[f64], &[f64])] = if cfg.symmetric {
            &[(pr.p, pr.q, &a, &b), (pr.q, pr.p, &b, &a)]
        } else {
            &[(pr.p, pr.q, &a, &b)]
        };
        for &(p, q, la, lb) in directions {
            let k = kl(la, lb);
            if pr.same {
                total += k;
                add_kl_grad(&mut grad, la, lb, k, p, q, scale);
            } else if k < cfg.margin {
                total += cfg.margin - k;
                add_kl_grad(&mut grad, la, lb, k, p, q, -scale);
            }
        }
    }
    Ok((total * scale, grad))
}

/// Autograd node for the instance loss over a `(B, C, H, W)` logit tensor:
/// forward is the batch mean of per-image losses, backward uses the analytic
/// gradient.
pub struct InstanceLossOp {
    pub maps: Vec<InstanceMap>,
    pub seeds: Vec<u64>,
    pub config: InstanceLossConfig,
}

impl InstanceLossOp {
    fn per_image(&self, logits: &[f32], dims: &[usize]) -> candle_core::Result<(f64, Vec<f32>)> {
        let (b, c) = (dims[0], dims[1]);
        if b != self.maps.len() || b != self.seeds.len() {
            candle_core::bail!("instance loss: {} maps for batch of {b}", self.maps.len());
        }
        let per = logits.len() / b;
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(logits.len());
        for i in 0..b {
            let z: Vec<f64> = logits[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
            let (l, g) = instance_pair_loss_with_grad(&z, c, &self.maps[i], &self.config, self.seeds[i])
                .map_err(candle_core::Error::wrap)?;
            loss += l / b as f64;
            grad.extend(g.into_iter().map(|v| (v / b as f64) as f32));
        }
        Ok((loss, grad))
    }

    /// Applies the loss to `logits`, returning a scalar tensor.
    pub fn loss(self, logits: &Tensor) -> Result<Tensor> {
        Ok(logits.contiguous()?.apply_op1(self)?)
    }
}

impl CustomOp1 for InstanceLossOp {
    fn name(&self) -> &'static str {
        "instance-pair-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let data = storage.as_slice::<f32>()?;
        let Some((start, end)) = layout.contiguous_offsets() else {
            candle_core::bail!("instance loss needs contiguous logits");
        };
        let (loss, _) = self.per_image(&data[start..end], layout.dims())?;
        Ok((CpuStorage::F32(vec![loss as f32]), Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let values: Vec<f32> = arg.flatten_all()?.to_vec1()?;
        let (_, grad) = self.per_image(&values, arg.dims())?;
        let grad = Tensor::from_vec(grad, arg.dims(), arg.device())?;
        Ok(Some(grad.broadcast_mul(grad_res)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn random_map(rng: &mut ChaCha8Rng, w: u32, h: u32, labels: u8) -> InstanceMap {
        let data = (0..w * h).map(|_| rng.random_range(0..labels)).collect();
        InstanceMap::from_data(w, h, data).unwrap()
    }

    fn softmax(logits: &[f64], channels: usize) -> Vec<f32> {
        let hw = logits.len() / channels;
        let mut out = vec![0.0f32; logits.len()];
        for p in 0..hw {
            let ls = log_softmax_at(logits, hw, channels, p);
            for c in 0..channels {
                out[c * hw + p] = ls[c].exp() as f32;
            }
        }
        out
    }

    #[test]
    fn curriculum_switches_once() {
        let s = CurriculumState::new(50);
        assert_eq!(curriculum_step(&s, 10).state.phase, Phase::Binary);
        assert_eq!(curriculum_step(&s, 50).state.phase, Phase::Instance);
        let mut state = s;
        let mut transitions = 0;
        for epoch in 0..=150 {
            let step = curriculum_step(&state, epoch);
            transitions += step.reinit_head as usize;
            assert_eq!(step.state.phase == Phase::Binary, epoch < 50);
            state = step.state;
        }
        assert_eq!(transitions, 1);
        assert_eq!(CurriculumState::new(0).phase, Phase::Instance);
    }

    #[test]
    fn bce_limits_and_oracle() {
        let dev = Device::Cpu;
        let mask = Tensor::new(&[[[1u32, 0], [0, 1]]], &dev).unwrap();
        let z: Vec<f32> = vec![-10.0, 10.0, 10.0, -10.0, 10.0, -10.0, -10.0, 10.0];
        let logits = Tensor::from_vec(z, (1, 2, 2, 2), &dev).unwrap();
        let l: f32 = binary_phase_loss(&logits, &mask).unwrap().to_scalar().unwrap();
        assert!(l <= 1e-3);
        let zeros = Tensor::zeros((1, 2, 2, 2), candle_core::DType::F32, &dev).unwrap();
        let l: f32 = binary_phase_loss(&zeros, &mask).unwrap().to_scalar().unwrap();
        assert!((l as f64 - 2f64.ln()).abs() <= 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (6, 7);
        let z: Vec<f32> = (0..2 * h * w).map(|_| rng.random_range(-4.0..4.0)).collect();
        let y: Vec<u32> = (0..h * w).map(|_| rng.random_range(0..2)).collect();
        let mut expect = 0.0f64;
        for i in 0..h * w {
            let d = (z[h * w + i] - z[i]) as f64;
            let p = 1.0 / (1.0 + (-d).exp());
            let t = y[i] as f64;
            expect -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        expect /= (h * w) as f64;
        let logits = Tensor::from_vec(z, (1, 2, h, w), &dev).unwrap();
        let mask = Tensor::from_vec(y, (1, h, w), &dev).unwrap();
        let l: f32 = binary_phase_loss(&logits, &mask).unwrap().to_scalar().unwrap();
        assert!((l as f64 - expect).abs() < 1e-5);
        assert!(binary_phase_loss(&logits, &mask.reshape((1, w, h)).unwrap()).is_err());
    }

    #[test]
    fn zero_loss_cases() {
        let map = InstanceMap::zeros(8, 8);
        let probs = vec![0.2f32; 5 * 64];
        assert_eq!(
            instance_pair_loss(&probs, 5, &map, &Default::default(), 1).unwrap(),
            0.0
        );

        // two instances, each one-hot on its own channel
        let data: Vec<u8> = (0..64).map(|i| if i % 8 < 4 { 1 } else { 2 }).collect();
        let map = InstanceMap::from_data(8, 8, data.clone()).unwrap();
        let mut probs = vec![0.0f32; 5 * 64];
        for (p, &v) in data.iter().enumerate() {
            probs[v as usize * 64 + p] = 1.0;
        }
        assert_eq!(
            instance_pair_loss(&probs, 5, &map, &Default::default(), 2).unwrap(),
            0.0
        );
    }

    #[test]
    fn matches_direct_pair_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = random_map(&mut rng, 8, 8, 3);
        let logits: Vec<f64> = (0..5 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let probs = softmax(&logits, 5);
        for symmetric in [true, false] {
            let cfg = InstanceLossConfig {
                margin: 1.5,
                pair_budget: 300,
                symmetric,
            };
            let pairs = sample_pairs(&map, cfg.pair_budget, 77);
            assert_eq!(pairs.len(), 300);
            let mut sum = 0.0;
            for pr in &pairs {
                assert_eq!(pr.same, map.data()[pr.p] == map.data()[pr.q]);
                let dir = |x: usize, y: usize| {
                    let mut k = 0.0;
                    for c in 0..5 {
                        let px = (probs[c * 64 + x] as f64).max(PROB_EPS);
                        let py = (probs[c * 64 + y] as f64).max(PROB_EPS);
                        k += px * (px / py).ln();
                    }
                    if pr.same {
                        k
                    } else {
                        (1.5 - k).max(0.0)
                    }
                };
                sum += dir(pr.p, pr.q);
                if symmetric {
                    sum += dir(pr.q, pr.p);
                }
            }
            let got = instance_pair_loss(&probs, 5, &map, &cfg, 77).unwrap();
            assert!((got - sum / 300.0).abs() < 1e-6, "{got} vs {}", sum / 300.0);
            let (from_logits, _) = instance_pair_loss_with_grad(&logits, 5, &map, &cfg, 77).unwrap();
            assert!((got - from_logits).abs() < 1e-5);
        }
    }

    #[test]
    fn stratification() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, 8, 8, 5);
        let pairs = sample_pairs(&map, 101, 3);
        assert_eq!(pairs.iter().filter(|p| p.same).count(), 51);
        assert!(pairs.iter().all(|p| p.same == (map.data()[p.p] == map.data()[p.q])));
        // a single-label map yields only same-instance pairs
        let pairs = sample_pairs(&InstanceMap::zeros(4, 4), 10, 3);
        assert!(pairs.len() == 10 && pairs.iter().all(|p| p.same));
    }

    #[test]
    fn margin_is_monotone_and_loss_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let map = random_map(&mut rng, 8, 8, 4);
            let logits: Vec<f64> = (0..5 * 64).map(|_| rng.random_range(-3.0..3.0)).collect();
            let probs = softmax(&logits, 5);
            let mut last = 0.0;
            for margin in [0.1, 0.5, 1.0, 2.0, 4.0, 8.0] {
                let cfg = InstanceLossConfig {
                    margin,
                    ..Default::default()
                };
                let l = instance_pair_loss(&probs, 5, &map, &cfg, 5).unwrap();
                assert!(l >= 0.0 && l >= last);
                last = l;
            }
        }
    }

    #[test]
    fn custom_op_gradient_matches_analytic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let maps: Vec<InstanceMap> = (0..2).map(|_| random_map(&mut rng, 4, 4, 3)).collect();
        let z: Vec<f32> = (0..2 * 5 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = candle_core::Var::from_vec(z.clone(), (2, 5, 4, 4), &Device::Cpu).unwrap();
        let cfg = InstanceLossConfig {
            pair_budget: 64,
            ..Default::default()
        };
        let op = InstanceLossOp {
            maps: maps.clone(),
            seeds: vec![1, 2],
            config: cfg,
        };
        let loss = op.loss(var.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f32> = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mut expect_loss = 0.0;
        for i in 0..2 {
            let zi: Vec<f64> = z[i * 80..(i + 1) * 80].iter().map(|&v| v as f64).collect();
            let (l, gi) = instance_pair_loss_with_grad(&zi, 5, &maps[i], &cfg, [1, 2][i]).unwrap();
            expect_loss += l / 2.0;
            for (a, b) in g[i * 80..(i + 1) * 80].iter().zip(gi) {
                assert!((*a as f64 - b / 2.0).abs() < 1e-6);
            }
        }
        let l: f32 = loss.to_scalar().unwrap();
        assert!((l as f64 - expect_loss).abs() < 1e-5);
    }
}
