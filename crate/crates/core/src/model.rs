//! Classifier architectures and checkpoint files.
//!
//! Two architectures are provided: a ReLU MLP and a small CNN
//! (two 3x3-style conv + 2x2 max-pool blocks followed by two dense layers).
//! Parameter names, shapes and order are a pure function of the
//! [`ModelSpec`], so a checkpoint only needs the model spec plus raw arrays.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! b"FBM1"
//! u32      length of the ModelSpec JSON
//! [u8]     spec as compact JSON
//! u64      init seed
//! [f32]    every parameter array, in declaration order
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::optim::Param;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FBM1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        n_classes: usize,
    },
    SmallCnn {
        /// `[channels, height, width]`
        input_shape: [usize; 3],
        channels: [usize; 2],
        kernel: usize,
        hidden: usize,
        n_classes: usize,
    },
}

impl ModelSpec {
    pub fn mlp(input_dim: usize, hidden: &[usize], n_classes: usize) -> Self {
        Self::Mlp {
            input_dim,
            hidden: hidden.to_vec(),
            n_classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Self::Mlp { n_classes, .. } | Self::SmallCnn { n_classes, .. } => *n_classes,
        }
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Self::Mlp { input_dim, .. } => vec![*input_dim],
            Self::SmallCnn { input_shape, .. } => input_shape.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes() < 2 {
            return Err(Error::Config(format!(
                "a classifier needs at least 2 classes, got {}",
                self.n_classes()
            )));
        }
        match self {
            Self::Mlp {
                input_dim, hidden, ..
            } => {
                if *input_dim == 0 || hidden.contains(&0) {
                    return Err(Error::Config(format!(
                        "zero-width layer in mlp {input_dim} -> {hidden:?}"
                    )));
                }
            }
            Self::SmallCnn {
                input_shape,
                channels,
                kernel,
                hidden,
                ..
            } => {
                if input_shape.contains(&0) || channels.contains(&0) || *hidden == 0 {
                    return Err(Error::Config("zero-width layer in small_cnn".into()));
                }
                if *kernel == 0 || kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv kernel must be odd and positive, got {kernel}"
                    )));
                }
                if input_shape[1] < 4 || input_shape[2] < 4 {
                    return Err(Error::Config(format!(
                        "small_cnn needs spatial size >= 4x4, got {input_shape:?}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Self::Mlp {
                input_dim,
                hidden,
                n_classes,
            } => {
                let mut dims = vec![*input_dim];
                dims.extend(hidden);
                dims.push(*n_classes);
                dims.windows(2)
                    .enumerate()
                    .flat_map(|(i, w)| {
                        [
                            (format!("fc{}.weight", i + 1), vec![w[0], w[1]]),
                            (format!("fc{}.bias", i + 1), vec![w[1]]),
                        ]
                    })
                    .collect()
            }
            Self::SmallCnn {
                input_shape: [c, h, w],
                channels: [c1, c2],
                kernel: k,
                hidden,
                n_classes,
            } => {
                let flat = c2 * (h / 4) * (w / 4);
                vec![
                    ("conv1.weight".into(), vec![*c1, *c, *k, *k]),
                    ("conv1.bias".into(), vec![*c1]),
                    ("conv2.weight".into(), vec![*c2, *c1, *k, *k]),
                    ("conv2.bias".into(), vec![*c2]),
                    ("fc1.weight".into(), vec![flat, *hidden]),
                    ("fc1.bias".into(), vec![*hidden]),
                    ("fc2.weight".into(), vec![*hidden, *n_classes]),
                    ("fc2.bias".into(), vec![*n_classes]),
                ]
            }
        }
    }
}

/// Parameters inserted into a particular graph.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    params: Vec<Param>,
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases.
/// The same `(spec, seed)` always yields bit-identical parameters.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = spec
        .param_layout()
        .into_iter()
        .map(|(name, shape)| {
            let numel = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![0.0; numel]
            } else {
                let fan_in: usize = match shape.len() {
                    4 => shape[1..].iter().product(),
                    _ => shape[0],
                };
                let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt())
                    .expect("positive std");
                (0..numel).map(|_| normal.sample(&mut rng)).collect()
            };
            Ok(Param::new(name, Tensor::new(shape, data)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        spec: spec.clone(),
        seed,
        params,
    })
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Inserts the parameters into `g`, differentiable iff `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| {
                    if trainable {
                        g.variable(&p.value)
                    } else {
                        g.constant(&p.value)
                    }
                })
                .collect(),
        )
    }

    /// Logits `[batch, K]` for a batch `x: [batch, input_shape...]`.
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let expected = self.spec.input_shape();
        let got = g.shape(x);
        if got.len() != expected.len() + 1 || got[1..] != expected[..] {
            return Err(shape_err(
                "logits",
                format!("input {got:?}, model expects [batch, {expected:?}]"),
            ));
        }
        let p = bound.vars();
        match &self.spec {
            ModelSpec::Mlp { .. } => {
                let layers = p.len() / 2;
                let mut h = x;
                for l in 0..layers {
                    h = g.matmul(h, p[2 * l])?;
                    h = g.add_row(h, p[2 * l + 1])?;
                    if l + 1 < layers {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
            ModelSpec::SmallCnn { kernel, .. } => {
                let pad = kernel / 2;
                let mut h = g.conv2d(x, p[0], p[1], pad)?;
                h = g.relu(h);
                h = g.max_pool2d(h, 2)?;
                h = g.conv2d(h, p[2], p[3], pad)?;
                h = g.relu(h);
                h = g.max_pool2d(h, 2)?;
                h = g.flatten(h)?;
                h = g.matmul(h, p[4])?;
                h = g.add_row(h, p[5])?;
                h = g.relu(h);
                h = g.matmul(h, p[6])?;
                g.add_row(h, p[7])
            }
        }
    }

    /// Non-differentiable forward pass.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let xv = g.constant(x);
        let out = self.forward(&mut g, &bound, xv)?;
        Ok(g.tensor(out))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(predict(&self.logits(x)?))
    }

    /// Adds the gradients computed in `g` into the parameters' grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(bound.vars()) {
            let grad = g.grad(v).ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            p.value.accumulate_grad(grad)?;
        }
        Ok(())
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        let json = serde_json::to_vec(&self.spec)?;
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&self.seed.to_le_bytes())?;
        for p in &self.params {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let mut len = [0u8; 4];
        read_exact(r, &mut len, "spec length")?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        read_exact(r, &mut json, "spec")?;
        let spec: ModelSpec = serde_json::from_slice(&json)?;
        spec.validate()?;
        let mut seed = [0u8; 8];
        read_exact(r, &mut seed, "seed")?;
        let params = spec
            .param_layout()
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let mut raw = vec![0u8; numel * 4];
                read_exact(r, &mut raw, &name)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Ok(Param::new(name, Tensor::new(shape, data)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::InvalidData("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            spec,
            seed: u64::from_le_bytes(seed),
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("while reading {what}")),
        _ => Error::Io(e),
    })
}

/// Row-wise argmax of `[batch, K]` logits; ties go to the lowest index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    predict_rows(logits.data(), k)
}

pub fn predict_rows(values: &[f32], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
