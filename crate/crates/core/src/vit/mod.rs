//! Frozen ViT encoder.
//!
//! Pre-norm transformer: `R = x + MHA(LN1(x))`, `y = R + MLP(LN2(R))` with a
//! GELU MLP, followed by a final layer norm. Images become 16x16 patch tokens
//! (flattened channel, row, column), projected to `D`, with a class token
//! prepended and learned positional embeddings added. All arithmetic is `f32`.
//!
//! Linear layers are stored as `in x out` and applied as `x @ W`, except the
//! patch projection, stored `D x (3 p p)` and applied as `W p`. The fused
//! attention projection `qkv.w` has columns `[Q | K | V]`, each split into
//! heads of `D / h` consecutive columns.

mod ops;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::NormalizedTensor;
use crate::container::{Container, ContainerError, Tensor};
use crate::rng;

pub use ops::{attention_weights, gelu, layer_norm, sdpa, softmax_rows, Matrix};

/// Token matrix, one row per token.
pub type TokenMatrix = Matrix;

#[derive(Debug, Error)]
pub enum VitError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("weights are missing tensor {0}")]
    Missing(String),
    #[error("weights contain unknown tensor {0}")]
    Unknown(String),
    #[error("tensor {name} has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("weights carry no encoder config and none was supplied")]
    NoConfig,
    #[error("input has {found} values, expected {expected}")]
    Input { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub mlp_dim: usize,
    pub use_class_token: bool,
    pub layernorm_eps: f32,
}

impl VitConfig {
    /// ViT-Base/16 at 224x224.
    pub const fn base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            n_blocks: 12,
            n_heads: 12,
            mlp_dim: 3072,
            use_class_token: true,
            layernorm_eps: 1e-6,
        }
    }

    /// A small encoder over 224x224 inputs for tests and smoke runs.
    pub const fn toy(embed_dim: usize, n_blocks: usize, n_heads: usize) -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            embed_dim,
            n_blocks,
            n_heads,
            mlp_dim: 4 * embed_dim,
            use_class_token: true,
            layernorm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let fail = |m: String| Err(VitError::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embedding width {} is not divisible into {} heads",
                self.embed_dim, self.n_heads
            ));
        }
        if self.mlp_dim != 4 * self.embed_dim {
            return fail(format!("mlp width {} must be 4 x {}", self.mlp_dim, self.embed_dim));
        }
        if !(self.layernorm_eps > 0.0) {
            return fail("layer norm epsilon must be positive".into());
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn n_tokens(&self) -> usize {
        self.n_patches() + usize::from(self.use_class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn patch_len(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Every tensor name with its expected shape, in load order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut v = vec![
            ("patch.proj.w".to_string(), vec![d, self.patch_len()]),
            ("patch.proj.b".to_string(), vec![d]),
        ];
        if self.use_class_token {
            v.push(("cls".into(), vec![d]));
        }
        v.push(("pos".into(), vec![self.n_tokens(), d]));
        for i in 0..self.n_blocks {
            let p = |s: &str| format!("block.{i}.{s}");
            v.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("qkv.w"), vec![d, 3 * d]),
                (p("qkv.b"), vec![3 * d]),
                (p("out.w"), vec![d, d]),
                (p("out.b"), vec![d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp1.w"), vec![d, self.mlp_dim]),
                (p("mlp1.b"), vec![self.mlp_dim]),
                (p("mlp2.w"), vec![self.mlp_dim, d]),
                (p("mlp2.b"), vec![d]),
            ]);
        }
        v.push(("final_ln.g".into(), vec![d]));
        v.push(("final_ln.b".into(), vec![d]));
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1_g: Vec<f32>,
    pub ln1_b: Vec<f32>,
    pub qkv_w: Matrix,
    pub qkv_b: Vec<f32>,
    pub out_w: Matrix,
    pub out_b: Vec<f32>,
    pub ln2_g: Vec<f32>,
    pub ln2_b: Vec<f32>,
    pub mlp1_w: Matrix,
    pub mlp1_b: Vec<f32>,
    pub mlp2_w: Matrix,
    pub mlp2_b: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights {
    pub config: VitConfig,
    pub patch_w: Matrix,
    pub patch_b: Vec<f32>,
    /// Empty when the config has no class token.
    pub cls: Vec<f32>,
    pub pos: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_ln_g: Vec<f32>,
    pub final_ln_b: Vec<f32>,
}

fn mat(t: Tensor) -> Matrix {
    Matrix::new(t.shape[0], t.shape[1], t.data)
}

impl VitWeights {
    /// Builds weights from a container, checking every tensor against
    /// `config`. Missing, extra and mis-shaped tensors are reported by name.
    pub fn from_container(mut c: Container, config: VitConfig) -> Result<Self, VitError> {
        config.validate()?;
        for (name, shape) in config.tensor_shapes() {
            match c.tensors.get(&name) {
                None => return Err(VitError::Missing(name)),
                Some(t) if t.shape != shape => {
                    return Err(VitError::Shape {
                        name,
                        expected: shape,
                        found: t.shape.clone(),
                    })
                }
                Some(_) => {}
            }
        }
        let expected = config.tensor_shapes().len();
        if c.tensors.len() != expected {
            let known: std::collections::HashSet<String> = config.tensor_shapes().into_iter().map(|(n, _)| n).collect();
            let extra = c
                .tensors
                .keys()
                .find(|k| !known.contains(*k))
                .cloned()
                .unwrap_or_default();
            return Err(VitError::Unknown(extra));
        }
        let mut take = |name: &str| c.tensors.remove(name).expect("presence checked");
        let patch_w = mat(take("patch.proj.w"));
        let patch_b = take("patch.proj.b").data;
        let cls = if config.use_class_token {
            take("cls").data
        } else {
            Vec::new()
        };
        let pos = mat(take("pos"));
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let mut t = |s: &str| take(&format!("block.{i}.{s}"));
            blocks.push(BlockWeights {
                ln1_g: t("ln1.g").data,
                ln1_b: t("ln1.b").data,
                qkv_w: mat(t("qkv.w")),
                qkv_b: t("qkv.b").data,
                out_w: mat(t("out.w")),
                out_b: t("out.b").data,
                ln2_g: t("ln2.g").data,
                ln2_b: t("ln2.b").data,
                mlp1_w: mat(t("mlp1.w")),
                mlp1_b: t("mlp1.b").data,
                mlp2_w: mat(t("mlp2.w")),
                mlp2_b: t("mlp2.b").data,
            });
        }
        Ok(Self {
            config,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            final_ln_g: take("final_ln.g").data,
            final_ln_b: take("final_ln.b").data,
        })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        let m = |m: &Matrix| Tensor::new(vec![m.rows(), m.cols()], m.data().to_vec());
        let v = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec());
        c.insert("patch.proj.w", m(&self.patch_w));
        c.insert("patch.proj.b", v(&self.patch_b));
        if self.config.use_class_token {
            c.insert("cls", v(&self.cls));
        }
        c.insert("pos", m(&self.pos));
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block.{i}.{s}");
            c.insert(p("ln1.g"), v(&b.ln1_g));
            c.insert(p("ln1.b"), v(&b.ln1_b));
            c.insert(p("qkv.w"), m(&b.qkv_w));
            c.insert(p("qkv.b"), v(&b.qkv_b));
            c.insert(p("out.w"), m(&b.out_w));
            c.insert(p("out.b"), v(&b.out_b));
            c.insert(p("ln2.g"), v(&b.ln2_g));
            c.insert(p("ln2.b"), v(&b.ln2_b));
            c.insert(p("mlp1.w"), m(&b.mlp1_w));
            c.insert(p("mlp1.b"), v(&b.mlp1_b));
            c.insert(p("mlp2.w"), m(&b.mlp2_w));
            c.insert(p("mlp2.b"), v(&b.mlp2_b));
        }
        c.insert("final_ln.g", v(&self.final_ln_g));
        c.insert("final_ln.b", v(&self.final_ln_b));
        c.metadata.insert(
            "vit_config".into(),
            serde_json::to_string(&self.config).expect("config serializes"),
        );
        c
    }

    pub fn save(&self, path: &Path) -> Result<(), VitError> {
        Ok(self.to_container().save(path)?)
    }

    /// Seeded random weights: layer norms at identity, linear layers uniform
    /// in `+-1/sqrt(fan_in)`, embeddings uniform in `+-0.02`.
    pub fn random(config: VitConfig, seed: u64) -> Result<Self, VitError> {
        config.validate()?;
        let mut c = Container::new();
        for (name, shape) in config.tensor_shapes() {
            let mut stream = rng::stream(seed, "vit-init", &[name.as_str().into()]);
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name.ends_with("ln1.g") || name.ends_with("ln2.g") || name == "final_ln.g" {
                vec![1.0; n]
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let a = match name.as_str() {
                    "cls" | "pos" => 0.02,
                    "patch.proj.w" => 1.0 / (shape[1] as f32).sqrt(),
                    _ => 1.0 / (shape[0] as f32).sqrt(),
                };
                (0..n).map(|_| stream.gen_range(-a..=a)).collect()
            };
            c.insert(name, Tensor::new(shape, data));
        }
        Self::from_container(c, config)
    }
}

/// Reads encoder weights. The config comes from `config` when given and
/// otherwise from the container's metadata.
pub fn load_weights(path: &Path, config: Option<VitConfig>) -> Result<VitWeights, VitError> {
    let c = Container::load(path)?;
    let config = match config {
        Some(cfg) => cfg,
        None => {
            let raw = c.metadata.get("vit_config").ok_or(VitError::NoConfig)?;
            serde_json::from_str(raw).map_err(|e| VitError::Config(e.to_string()))?
        }
    };
    VitWeights::from_container(c, config)
}

/// Splits a channel-first image into patch rows (scan left to right, top to
/// bottom; each patch flattened channel, row, column), projects them, prepends
/// the class token and adds positional embeddings.
pub fn patch_embed(input: &[f32], weights: &VitWeights) -> Result<TokenMatrix, VitError> {
    let cfg = &weights.config;
    let s = cfg.image_size;
    if input.len() != 3 * s * s {
        return Err(VitError::Input {
            expected: 3 * s * s,
            found: input.len(),
        });
    }
    let p = cfg.patch_size;
    let per_row = s / p;
    let patches = Matrix::from_fn(cfg.n_patches(), cfg.patch_len(), |i, j| {
        let (py, px) = (i / per_row, i % per_row);
        let (c, rem) = (j / (p * p), j % (p * p));
        let (y, x) = (py * p + rem / p, px * p + rem % p);
        input[c * s * s + y * s + x]
    });
    let mut projected = patches.matmul_t(&weights.patch_w);
    projected.add_row(&weights.patch_b);
    let mut tokens = if cfg.use_class_token {
        let mut data = weights.cls.clone();
        data.extend_from_slice(projected.data());
        Matrix::new(cfg.n_tokens(), cfg.embed_dim, data)
    } else {
        projected
    };
    tokens.add(&weights.pos);
    Ok(tokens)
}

/// Multi-head self-attention with the fused projection and output layer.
pub fn multi_head_attention(x: &TokenMatrix, block: &BlockWeights, n_heads: usize) -> TokenMatrix {
    let d = x.cols();
    let dk = d / n_heads;
    let mut qkv = x.matmul(&block.qkv_w);
    qkv.add_row(&block.qkv_b);
    let mut concat = Matrix::zeros(x.rows(), d);
    for h in 0..n_heads {
        let q = qkv.columns(h * dk, dk);
        let k = qkv.columns(d + h * dk, dk);
        let v = qkv.columns(2 * d + h * dk, dk);
        let out = sdpa(&q, &k, &v);
        for r in 0..x.rows() {
            concat.row_mut(r)[h * dk..(h + 1) * dk].copy_from_slice(out.row(r));
        }
    }
    let mut y = concat.matmul(&block.out_w);
    y.add_row(&block.out_b);
    y
}

fn mlp(x: &Matrix, block: &BlockWeights) -> Matrix {
    let mut h = x.matmul(&block.mlp1_w);
    h.add_row(&block.mlp1_b);
    let mut y = h.map(gelu).matmul(&block.mlp2_w);
    y.add_row(&block.mlp2_b);
    y
}

/// One pre-norm encoder block.
pub fn encoder_block(x: &TokenMatrix, block: &BlockWeights, config: &VitConfig) -> TokenMatrix {
    let eps = config.layernorm_eps;
    let mut r = x.clone();
    r.add(&multi_head_attention(
        &layer_norm(x, &block.ln1_g, &block.ln1_b, eps),
        block,
        config.n_heads,
    ));
    let branch = mlp(&layer_norm(&r, &block.ln2_g, &block.ln2_b, eps), block);
    r.add(&branch);
    r
}

/// All output tokens after the final layer norm.
pub fn encode_tokens(input: &[f32], weights: &VitWeights) -> Result<TokenMatrix, VitError> {
    let mut x = patch_embed(input, weights)?;
    for block in &weights.blocks {
        x = encoder_block(&x, block, &weights.config);
    }
    Ok(layer_norm(
        &x,
        &weights.final_ln_g,
        &weights.final_ln_b,
        weights.config.layernorm_eps,
    ))
}

/// Image feature: the class-token row, or the token mean without one.
pub fn encode(input: &NormalizedTensor, weights: &VitWeights) -> Result<Vec<f32>, VitError> {
    let tokens = encode_tokens(input.data(), weights)?;
    Ok(if weights.config.use_class_token {
        tokens.row(0).to_vec()
    } else {
        let n = tokens.rows() as f32;
        (0..tokens.cols())
            .map(|c| (0..tokens.rows()).map(|r| tokens.get(r, c)).sum::<f32>() / n)
            .collect()
    })
}
