//! Architecture hyperparameters and the named parameter store.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 77;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_layers: usize,
    pub text_layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub projection_dim: usize,
    pub vocab_size: usize,
    pub max_tokens: usize,
    pub frames: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Two-layer, 32-wide configuration used for desk-scale experiments.
    pub fn desk() -> Self {
        Self {
            image_layers: 2,
            text_layers: 2,
            hidden_dim: 32,
            heads: 4,
            patch_size: 4,
            image_height: 16,
            image_width: 16,
            projection_dim: 16,
            vocab_size: 64,
            max_tokens: MAX_TOKENS,
            frames: 4,
            mlp_ratio: 4,
        }
    }

    /// ViT-B/16 sized configuration.
    pub fn vitb16() -> Self {
        Self {
            image_layers: 12,
            text_layers: 12,
            hidden_dim: 768,
            heads: 12,
            patch_size: 16,
            image_height: 224,
            image_width: 224,
            projection_dim: 512,
            vocab_size: 49408,
            max_tokens: MAX_TOKENS,
            frames: 8,
            mlp_ratio: 4,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "vitb16" => Ok(Self::vitb16()),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0
            || !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.projection_dim == 0 || self.projection_dim > self.hidden_dim {
            return fail(format!(
                "projection_dim {} must be in 1..={}",
                self.projection_dim, self.hidden_dim
            ));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        if self.max_tokens < 2 || self.max_tokens > MAX_TOKENS {
            return fail(format!("max_tokens must be in 2..={MAX_TOKENS}"));
        }
        if self.frames == 0 || self.mlp_ratio == 0 || self.vocab_size == 0 {
            return fail("frames, mlp_ratio and vocab_size must be positive".into());
        }
        Ok(())
    }

    /// Every parameter name with its shape, in a stable order.
    pub fn parameter_shapes(&self) -> Vec<(String, [usize; 2])> {
        let d = self.hidden_dim;
        let mut out = vec![
            (names::PATCH_PROJ.to_string(), [self.patch_dim(), d]),
            (names::CLS_TOKEN.to_string(), [1, d]),
            (names::IMAGE_POS.to_string(), [self.num_patches() + 1, d]),
        ];
        for l in 0..self.image_layers {
            out.extend(block_shapes(&format!("visual.blocks.{l}"), d, self.mlp_ratio));
        }
        out.push(("visual.ln_post.weight".into(), [1, d]));
        out.push(("visual.ln_post.bias".into(), [1, d]));
        out.push((names::IMAGE_PROJ.into(), [d, self.projection_dim]));

        out.push((names::TOKEN_EMBED.into(), [self.vocab_size, d]));
        out.push((names::TEXT_POS.into(), [self.max_tokens, d]));
        for l in 0..self.text_layers {
            out.extend(block_shapes(&format!("text.blocks.{l}"), d, self.mlp_ratio));
        }
        out.push(("text.ln_final.weight".into(), [1, d]));
        out.push(("text.ln_final.bias".into(), [1, d]));
        out.push((names::TEXT_PROJ.into(), [d, self.projection_dim]));
        out.push((names::LOG_TAU.into(), [1, 1]));
        out
    }
}

fn block_shapes(prefix: &str, d: usize, mlp_ratio: usize) -> Vec<(String, [usize; 2])> {
    let m = d * mlp_ratio;
    [
        ("ln_1.weight", [1, d]),
        ("ln_1.bias", [1, d]),
        ("attn.in_proj.weight", [d, 3 * d]),
        ("attn.in_proj.bias", [1, 3 * d]),
        ("attn.out_proj.weight", [d, d]),
        ("attn.out_proj.bias", [1, d]),
        ("ln_2.weight", [1, d]),
        ("ln_2.bias", [1, d]),
        ("mlp.fc.weight", [d, m]),
        ("mlp.fc.bias", [1, m]),
        ("mlp.proj.weight", [m, d]),
        ("mlp.proj.bias", [1, d]),
    ]
    .into_iter()
    .map(|(n, s)| (format!("{prefix}.{n}"), s))
    .collect()
}

/// Stable names of the parameters other modules address directly.
pub mod names {
    pub const PATCH_PROJ: &str = "visual.patch_proj";
    pub const CLS_TOKEN: &str = "visual.class_embedding";
    pub const IMAGE_POS: &str = "visual.positional_embedding";
    pub const IMAGE_PROJ: &str = "visual.proj";
    pub const TOKEN_EMBED: &str = "text.token_embedding";
    pub const TEXT_POS: &str = "text.positional_embedding";
    pub const TEXT_PROJ: &str = "text.proj";
    pub const LOG_TAU: &str = "logit.log_tau";
}

/// Whether decoupled weight decay applies to the named parameter. Norm
/// gains, biases, the class token, positional embeddings and the
/// temperature are exempt.
pub fn decays(name: &str) -> bool {
    let norm_gain = name.contains(".ln_") && name.ends_with(".weight");
    !(norm_gain
        || name.ends_with(".bias")
        || name == names::CLS_TOKEN
        || name == names::IMAGE_POS
        || name == names::TEXT_POS
        || name == names::LOG_TAU)
}

/// A configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64, tau_init: f64) -> Result<Self> {
        let params = ParameterStore::init(&config, seed, tau_init)?;
        Ok(Self { config, params })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    /// Seeded cold start: truncated-normal weights scaled by fan-in, zero
    /// biases, unit norm gains, small random class token and positional
    /// embeddings, and `log τ = ln(tau_init)`.
    pub fn init(config: &ModelConfig, seed: u64, tau_init: f64) -> Result<Self> {
        config.validate()?;
        if !(tau_init > 0.0) {
            return Err(Error::Config(format!("tau_init must be positive, got {tau_init}")));
        }
        let mut rng = seeded(seed, "init", 0);
        let mut tensors = BTreeMap::new();
        for (name, [rows, cols]) in config.parameter_shapes() {
            let t = if name == names::LOG_TAU {
                Tensor::scalar(tau_init.ln())
            } else if name.ends_with(".bias") {
                Tensor::zeros(rows, cols)
            } else if name.contains(".ln_") {
                Tensor::filled(rows, cols, 1.0)
            } else if name == names::CLS_TOKEN
                || name == names::IMAGE_POS
                || name == names::TEXT_POS
                || name == names::TOKEN_EMBED
            {
                truncated_normal(rows, cols, 0.02, &mut rng)
            } else {
                truncated_normal(rows, cols, 1.0 / (rows as f64).sqrt(), &mut rng)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes match `config` exactly.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.parameter_shapes();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing parameter `{name}`")));
                }
                Some(t) if t.shape() != *shape => {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                Some(_) => {}
            }
        }
        if self.tensors.len() != expected.len() {
            let known: std::collections::HashSet<_> = expected.iter().map(|(n, _)| n).collect();
            let extra: Vec<_> = self.tensors.keys().filter(|n| !known.contains(n)).collect();
            return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// Copies externally supplied arrays into the store by name. Every
    /// supplied name must exist with an identical shape; names that are not
    /// supplied keep their current values. Returns the number imported.
    pub fn import_named(&mut self, arrays: &BTreeMap<String, Tensor>) -> Result<usize> {
        for (name, t) in arrays {
            let current = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown imported parameter `{name}`")))?;
            if current.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: current.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        for (name, t) in arrays {
            self.tensors.insert(name.clone(), t.clone());
        }
        Ok(arrays.len())
    }

    pub fn tau(&self) -> f64 {
        self.get(names::LOG_TAU).as_scalar().exp()
    }
}

fn truncated_normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| loop {
            // Box-Muller, rejecting beyond two standard deviations.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::vitb16().validate().unwrap();
        assert_eq!(ModelConfig::vitb16().num_patches(), 196);
        assert_eq!(ModelConfig::vitb16().patch_dim(), 768);
    }

    #[test]
    fn indivisible_image_rejected() {
        let mut c = ModelConfig::desk();
        c.image_width = 18;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_matches_declared_shapes_and_is_seeded() {
        let c = ModelConfig::desk();
        let a = ParameterStore::init(&c, 3, 0.07).unwrap();
        let b = ParameterStore::init(&c, 3, 0.07).unwrap();
        let other = ParameterStore::init(&c, 4, 0.07).unwrap();
        a.check_against(&c).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, other);
        assert!((a.tau() - 0.07).abs() < 1e-12);
        assert!(a.get("visual.blocks.0.attn.out_proj.bias").max_abs() == 0.0);
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays(names::IMAGE_PROJ));
        assert!(decays("text.blocks.1.mlp.fc.weight"));
        assert!(!decays("text.blocks.1.mlp.fc.bias"));
        assert!(!decays("visual.blocks.0.ln_1.weight"));
        assert!(!decays("visual.ln_post.weight"));
        assert!(!decays(names::CLS_TOKEN));
        assert!(!decays(names::IMAGE_POS));
        assert!(!decays(names::LOG_TAU));
    }

    #[test]
    fn import_rejects_shape_mismatch() {
        let c = ModelConfig::desk();
        let mut p = ParameterStore::init(&c, 0, 0.07).unwrap();
        let mut bad = BTreeMap::new();
        bad.insert(names::IMAGE_PROJ.to_string(), Tensor::zeros(3, 3));
        assert!(matches!(
            p.import_named(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
        let mut good = BTreeMap::new();
        good.insert(names::IMAGE_PROJ.to_string(), Tensor::zeros(32, 16));
        assert_eq!(p.import_named(&good).unwrap(), 1);
        assert_eq!(p.get(names::IMAGE_PROJ).max_abs(), 0.0);
    }
}
