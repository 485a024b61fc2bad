//! Layers, seeded parameter storage and checkpoint files shared by both
//! networks.
//!
//! Parameters are drawn from a ChaCha stream owned by the store rather than
//! from the tensor backend, so a seed fully determines the initial weights.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, ModuleT, Tensor, Var, D};
use candle_nn::BatchNorm;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: u32 = 1;

pub struct ParamStore {
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0f32, std as f32).expect("positive std");
        let data: Vec<f32> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.param(name, Tensor::from_vec(data, dims, &self.device)?)
    }

    fn constant(&mut self, name: &str, n: usize, value: f32, trainable: bool) -> Result<Tensor> {
        let t = Tensor::full(value, n, &self.device)?;
        if trainable {
            self.param(name, t)
        } else {
            let var = Var::from_tensor(&t)?;
            self.buffers.push((name.to_string(), var.clone()));
            Ok(var.as_tensor().clone())
        }
    }

    pub fn param(&mut self, name: &str, init: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&init)?;
        self.params.push((name.to_string(), var.clone()));
        Ok(var.as_tensor().clone())
    }

    /// Kaiming-normal weights, zero bias.
    pub fn conv2d(&mut self, name: &str, spec: ConvSpec) -> Result<Conv> {
        let fan_in = spec.cin * spec.kernel.0 * spec.kernel.1;
        let weight = self.normal(
            &format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.kernel.0, spec.kernel.1],
            (2.0 / fan_in as f64).sqrt(),
        )?;
        let bias = if spec.bias {
            Some(self.constant(&format!("{name}.bias"), spec.cout, 0.0, true)?)
        } else {
            None
        };
        Ok(Conv { weight, bias, spec })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv_transpose2d(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<ConvTranspose> {
        let fan_in = cin * kernel * kernel / (stride * stride);
        let weight = self.normal(
            &format!("{name}.weight"),
            &[cin, cout, kernel, kernel],
            (2.0 / fan_in.max(1) as f64).sqrt(),
        )?;
        let bias = self.constant(&format!("{name}.bias"), cout, 0.0, true)?;
        Ok(ConvTranspose {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn batch_norm(&mut self, name: &str, n: usize, eps: f64) -> Result<BatchNorm> {
        let mean = self.constant(&format!("{name}.running_mean"), n, 0.0, false)?;
        let var = self.constant(&format!("{name}.running_var"), n, 1.0, false)?;
        let weight = self.constant(&format!("{name}.weight"), n, 1.0, true)?;
        let bias = self.constant(&format!("{name}.bias"), n, 0.0, true)?;
        Ok(BatchNorm::new(n, mean, var, weight, bias, eps)?)
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<candle_nn::Linear> {
        let w = self.normal(&format!("{name}.weight"), &[output, input], (2.0 / input as f64).sqrt())?;
        let b = self.constant(&format!("{name}.bias"), output, 0.0, true)?;
        Ok(candle_nn::Linear::new(w, Some(b)))
    }

    /// Drops every parameter whose name starts with `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|(n, _)| !n.starts_with(prefix));
        self.buffers.retain(|(n, _)| !n.starts_with(prefix));
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters and buffers by name, detached copies.
    pub fn snapshot(&self) -> Result<Vec<(String, Tensor)>> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(n, v)| Ok((n.clone(), v.as_detached_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every stored tensor from `tensors`; names and shapes must
    /// match exactly.
    pub fn restore(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        let all: Vec<&(String, Var)> = self.params.iter().chain(&self.buffers).collect();
        if all.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                all.len(),
                tensors.len()
            )));
        }
        for (name, var) in all {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::Shape(format!("missing tensor {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor {name}: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    /// Padding as (rows, columns).
    pub padding: (usize, usize),
    pub dilation: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel with "same" padding.
    pub fn square(cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            cin,
            cout,
            kernel: (k, k),
            stride,
            padding: (k / 2, k / 2),
            dilation: 1,
            bias: true,
        }
    }
}

pub struct Conv {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub spec: ConvSpec,
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (ph, pw) = self.spec.padding;
        // the backend pads rows and columns equally
        let y = if ph == pw {
            x.conv2d(&self.weight, ph, self.spec.stride, self.spec.dilation, 1)?
        } else {
            let x = x.pad_with_zeros(2, ph, ph)?.pad_with_zeros(3, pw, pw)?;
            x.conv2d(&self.weight, 0, self.spec.stride, self.spec.dilation, 1)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

pub struct ConvTranspose {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl Module for ConvTranspose {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.conv_transpose2d(&self.weight, self.padding, self.output_padding, self.stride, 1)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Convolution, batch norm, ReLU.
pub struct ConvBnRelu {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(store: &mut ParamStore, name: &str, mut spec: ConvSpec) -> Result<Self> {
        spec.bias = false;
        Ok(Self {
            conv: store.conv2d(&format!("{name}.conv"), spec)?,
            bn: store.batch_norm(&format!("{name}.bn"), spec.cout, 1e-5)?,
        })
    }
}

impl ModuleT for ConvBnRelu {
    fn forward_t(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        self.bn.forward_t(&self.conv.forward(x)?, train)?.relu()
    }
}

/// Polynomial learning-rate decay: `base * (1 - progress)^power`.
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step.min(total) as f64 / total as f64).powf(power)
}

/// Adam without weight decay. Moment estimates are plain tensors so a
/// training run can be checkpointed and resumed exactly.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64) -> Result<Self> {
        let zeros = |v: &Var| v.zeros_like();
        let m = vars.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        let v = vars.iter().map(zeros).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            m,
            v,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        })
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, var) in self.vars.iter().enumerate() {
            // gradients carry their own graph; keeping it in the moments would
            // chain every step's activations together
            let Some(g) = grads.get(var).map(Tensor::detach) else {
                continue;
            };
            let g = &g;
            self.m[i] = ((&self.m[i] * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let update = ((&self.m[i] / c1)? / ((&self.v[i] / c2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Moment tensors by name plus the step count.
    pub fn state(&self) -> (Vec<(String, Tensor)>, usize) {
        let tensors = self
            .m
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("adam.m.{i}"), t.clone()))
            .chain(
                self.v
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (format!("adam.v.{i}"), t.clone())),
            )
            .collect();
        (tensors, self.step)
    }

    pub fn restore(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for i in 0..self.vars.len() {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = tensors
                    .get(&format!("adam.{prefix}.{i}"))
                    .ok_or_else(|| Error::Shape(format!("missing optimizer state adam.{prefix}.{i}")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Shape(format!(
                        "optimizer state adam.{prefix}.{i} has wrong shape"
                    )));
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Softmax over the channel axis of a `(B, C, H, W)` tensor.
pub fn channel_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, 1)?)
}

pub fn mean_all(t: &Tensor) -> Result<f32> {
    Ok(t.mean_all()?.to_scalar::<f32>()?)
}

/// Global average pool over the two trailing spatial axes.
pub fn global_avg_pool(x: &Tensor) -> candle_core::Result<Tensor> {
    x.mean(D::Minus1)?.mean(D::Minus1)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes tensors with string metadata; `format_version` is added.
pub fn save_checkpoint(path: &Path, tensors: &[(String, Tensor)], mut metadata: HashMap<String, String>) -> Result<()> {
    metadata.insert("format_version".into(), CHECKPOINT_FORMAT.to_string());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(tensors.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata), path).map_err(|e| {
        Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(HashMap<String, Tensor>, HashMap<String, String>)> {
    use candle_core::safetensors::Load;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
    let metadata = header.metadata().clone().unwrap_or_default();
    match metadata.get("format_version").map(String::as_str) {
        Some(v) if v == CHECKPOINT_FORMAT.to_string() => {}
        other => return Err(bad(format!("unsupported format version {other:?}"))),
    }
    let tensors = st
        .tensors()
        .into_iter()
        .map(|(name, view)| Ok((name, view.load(&Device::Cpu)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    Ok((tensors, metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::new(1);
        let mut b = ParamStore::new(1);
        let ca = a.conv2d("c", ConvSpec::square(3, 4, 3, 1)).unwrap();
        let cb = b.conv2d("c", ConvSpec::square(3, 4, 3, 1)).unwrap();
        let va: Vec<f32> = ca.weight.flatten_all().unwrap().to_vec1().unwrap();
        let vb: Vec<f32> = cb.weight.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(va, vb);
        assert_eq!(a.param_count(), 4 * 3 * 9 + 4);
    }

    #[test]
    fn asymmetric_padding_keeps_size() {
        let mut s = ParamStore::new(0);
        let conv = s
            .conv2d(
                "c",
                ConvSpec {
                    cin: 2,
                    cout: 3,
                    kernel: (3, 1),
                    stride: 1,
                    padding: (2, 0),
                    dilation: 2,
                    bias: true,
                },
            )
            .unwrap();
        let x = Tensor::zeros((1, 2, 8, 6), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(conv.forward(&x).unwrap().dims(), &[1, 3, 8, 6]);
    }

    #[test]
    fn poly_decay_endpoints() {
        assert_eq!(poly_lr(5e-4, 0, 150, 0.9), 5e-4);
        assert_eq!(poly_lr(5e-4, 150, 150, 0.9), 0.0);
        assert!((poly_lr(1.0, 75, 150, 0.9) - 0.5f64.powf(0.9)).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.safetensors");
        let mut s = ParamStore::new(4);
        s.batch_norm("bn", 3, 1e-5).unwrap();
        s.linear("fc", 3, 2).unwrap();
        let snap = s.snapshot().unwrap();
        let meta = HashMap::from([("kind".to_string(), "test".to_string())]);
        save_checkpoint(&path, &snap, meta).unwrap();
        let (tensors, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(meta["kind"], "test");
        assert_eq!(meta["format_version"], "1");
        let mut other = ParamStore::new(99);
        other.batch_norm("bn", 3, 1e-5).unwrap();
        other.linear("fc", 3, 2).unwrap();
        other.restore(&tensors).unwrap();
        for ((n1, t1), (n2, t2)) in snap.iter().zip(other.snapshot().unwrap()) {
            assert_eq!(n1, &n2);
            let a: Vec<f32> = t1.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = t2.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b);
        }
    }
}
