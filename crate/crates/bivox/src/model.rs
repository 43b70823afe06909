//! Model parameters: creation, naming, families and checkpoint conversion.
//!
//! Parameters live in an insertion-ordered name→tensor map. Forward code
//! fetches tensors by path (`backbone.l0.attn.wq.weight`); the trainer,
//! merger and gradient checker iterate uniformly. The map order is fixed at
//! construction so checkpoints and optimizer state are deterministic.

use crate::checkpoint::{Checkpoint, TensorData};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter groups used by gradient checking and freeze policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamFamily {
    TextEmbed,
    SpeechEmbed,
    GroupProj,
    Backbone,
    UngroupProj,
    Srh,
    Heads,
}

impl ParamFamily {
    pub const ALL: [ParamFamily; 7] = [
        ParamFamily::TextEmbed,
        ParamFamily::SpeechEmbed,
        ParamFamily::GroupProj,
        ParamFamily::Backbone,
        ParamFamily::UngroupProj,
        ParamFamily::Srh,
        ParamFamily::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamFamily::TextEmbed => "text_embed",
            ParamFamily::SpeechEmbed => "speech_embed",
            ParamFamily::GroupProj => "group_proj",
            ParamFamily::Backbone => "backbone",
            ParamFamily::UngroupProj => "ungroup_proj",
            ParamFamily::Srh => "srh",
            ParamFamily::Heads => "heads",
        }
    }
}

/// Family of a parameter, derived from its path.
pub fn family_of(name: &str) -> ParamFamily {
    if name == "embed.text" {
        ParamFamily::TextEmbed
    } else if name == "embed.speech" {
        ParamFamily::SpeechEmbed
    } else if name.starts_with("group.") {
        ParamFamily::GroupProj
    } else if name.starts_with("backbone.") || name == "embed.pos" {
        ParamFamily::Backbone
    } else if name.starts_with("ungroup.") {
        ParamFamily::UngroupProj
    } else if name.starts_with("srh.") {
        ParamFamily::Srh
    } else if name.starts_with("head.") {
        ParamFamily::Heads
    } else {
        panic!("unknown parameter path `{name}`")
    }
}

/// Parameters of the text-only base model. Everything else is a new module
/// that an interpolation step copies straight from the trained side.
pub fn is_base_param(name: &str) -> bool {
    matches!(family_of(name), ParamFamily::TextEmbed | ParamFamily::Backbone)
        || name.starts_with("head.text")
}

/// Parameters trained during refiner pretraining: the refiner itself plus
/// the projections that feed it. Everything else stays frozen.
pub fn is_srh_pretrain_param(name: &str) -> bool {
    name.starts_with("srh.") || name.starts_with("ungroup.") || name.starts_with("head.speech")
}

pub struct Model<S: Scalar> {
    pub config: ModelConfig,
    params: IndexMap<String, Tensor<S>>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> Model<S> {
    /// Fresh model with Gaussian weights, unit norm gains and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p: IndexMap<String, Tensor<S>> = IndexMap::new();
        let c = &config;

        let w = |p: &mut IndexMap<String, Tensor<S>>, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            p.insert(name.to_string(), Tensor::randn(rows, cols, INIT_STD, rng));
        };

        w(&mut p, "embed.text", c.v_t as usize, c.d_h, &mut rng);
        w(&mut p, "embed.pos", c.max_steps, c.d_h, &mut rng);
        w(&mut p, "embed.speech", c.v_s as usize, c.d_s, &mut rng);
        w(&mut p, "group.weight", c.d_h, c.k * c.d_s, &mut rng);
        p.insert("group.bias".into(), Tensor::zeros(1, c.d_h));

        for l in 0..c.n_layers {
            push_block(&mut p, &format!("backbone.l{l}"), c.d_h, c.d_ff, &mut rng);
        }
        p.insert("backbone.ln_f.gain".into(), Tensor::filled(1, c.d_h, S::one()));
        p.insert("backbone.ln_f.bias".into(), Tensor::zeros(1, c.d_h));

        if !c.tie_text_head {
            w(&mut p, "head.text.weight", c.v_t as usize, c.d_h, &mut rng);
        }
        p.insert("head.text.bias".into(), Tensor::zeros(1, c.v_t as usize));

        if c.srh_enabled {
            w(&mut p, "ungroup.weight", c.d_g, c.d_h, &mut rng);
            p.insert("ungroup.bias".into(), Tensor::zeros(1, c.d_g));
            w(&mut p, "srh.embed.speech", c.v_s as usize, c.srh_d, &mut rng);
            w(&mut p, "srh.embed.bos", 1, c.srh_d, &mut rng);
            w(&mut p, "srh.embed.pos", c.max_speech_positions(), c.srh_d, &mut rng);
            w(&mut p, "srh.chunk.weight", c.srh_d, c.chunk_width(), &mut rng);
            p.insert("srh.chunk.bias".into(), Tensor::zeros(1, c.srh_d));
            for l in 0..c.srh_layers {
                push_block(&mut p, &format!("srh.l{l}"), c.srh_d, c.srh_ff(), &mut rng);
            }
            p.insert("srh.ln_f.gain".into(), Tensor::filled(1, c.srh_d, S::one()));
            p.insert("srh.ln_f.bias".into(), Tensor::zeros(1, c.srh_d));
            w(&mut p, "head.speech.weight", c.v_s as usize, c.srh_d, &mut rng);
            p.insert("head.speech.bias".into(), Tensor::zeros(1, c.v_s as usize));
        } else {
            w(&mut p, "head.split.weight", c.k * c.v_s as usize, c.d_h, &mut rng);
            p.insert(
                "head.split.bias".into(),
                Tensor::zeros(1, c.k * c.v_s as usize),
            );
        }

        Ok(Model { config, params: p })
    }

    pub fn param(&self, name: &str) -> &Tensor<S> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor<S> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Text head weight matrix, honoring the tied-embedding switch.
    pub fn text_head_weight(&self) -> &Tensor<S> {
        if self.config.tie_text_head {
            self.param("embed.text")
        } else {
            self.param("head.text.weight")
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(Some(self.config.clone()));
        for (name, t) in &self.params {
            let data = match S::DTYPE {
                Dtype::F32 => {
                    TensorData::F32(t.data().iter().map(|x| x.as_f64() as f32).collect())
                }
                Dtype::F64 => TensorData::F64(t.data().iter().map(|x| x.as_f64()).collect()),
            };
            ck.insert(name.clone(), vec![t.rows(), t.cols()], data);
        }
        ck
    }

    /// The base-model subset (text embeddings, backbone, text head) as its
    /// own checkpoint; this is the `M_0` side of the two-stage interpolation.
    pub fn base_checkpoint(&self) -> Checkpoint {
        let mut ck = self.to_checkpoint();
        ck.retain(is_base_param);
        ck
    }

    /// Rebuilds a model from a checkpoint. The checkpoint must carry a
    /// configuration unless one is supplied, must cover exactly the expected
    /// parameter set, and 64-bit payloads never load into a 32-bit model.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: Option<ModelConfig>) -> Result<Self> {
        let config = match config.or_else(|| ckpt.config.clone()) {
            Some(c) => c,
            None => {
                return Err(Error::CheckpointFormat(
                    "checkpoint carries no model configuration".into(),
                ))
            }
        };
        let mut model = Model::<S>::init(config, 0)?;
        for name in model.names() {
            let entry = ckpt.get(&name).ok_or_else(|| {
                Error::CheckpointFormat(format!("checkpoint is missing `{name}`"))
            })?;
            let t = model.param_mut(&name);
            let expect = vec![t.rows(), t.cols()];
            if entry.shape != expect {
                return Err(Error::ShapeMismatch {
                    name,
                    left: expect,
                    right: entry.shape.clone(),
                });
            }
            let data: Vec<S> = match (&entry.data, S::DTYPE) {
                (TensorData::F32(v), _) => v.iter().map(|&x| S::from_f64(x as f64)).collect(),
                (TensorData::F64(v), Dtype::F64) => {
                    v.iter().map(|&x| S::from_f64(x)).collect()
                }
                (TensorData::F64(_), Dtype::F32) => {
                    return Err(Error::CheckpointFormat(format!(
                        "`{name}` is 64-bit; refusing lossy load into a 32-bit model"
                    )))
                }
            };
            *t = Tensor::from_vec(t.rows(), t.cols(), data);
        }
        let extra: Vec<&str> = ckpt
            .names()
            .filter(|n| !model.params.contains_key(*n))
            .collect();
        if !extra.is_empty() {
            return Err(Error::CheckpointFormat(format!(
                "checkpoint has unexpected tensors: {extra:?}"
            )));
        }
        Ok(model)
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }
}

fn push_block<S: Scalar>(
    p: &mut IndexMap<String, Tensor<S>>,
    prefix: &str,
    d: usize,
    d_ff: usize,
    rng: &mut ChaCha8Rng,
) {
    p.insert(format!("{prefix}.ln1.gain"), Tensor::filled(1, d, S::one()));
    p.insert(format!("{prefix}.ln1.bias"), Tensor::zeros(1, d));
    for proj in ["wq", "wk", "wv", "wo"] {
        p.insert(
            format!("{prefix}.attn.{proj}.weight"),
            Tensor::randn(d, d, INIT_STD, rng),
        );
        p.insert(format!("{prefix}.attn.{proj}.bias"), Tensor::zeros(1, d));
    }
    p.insert(format!("{prefix}.ln2.gain"), Tensor::filled(1, d, S::one()));
    p.insert(format!("{prefix}.ln2.bias"), Tensor::zeros(1, d));
    p.insert(
        format!("{prefix}.ffn.w1.weight"),
        Tensor::randn(d_ff, d, INIT_STD, rng),
    );
    p.insert(format!("{prefix}.ffn.w1.bias"), Tensor::zeros(1, d_ff));
    p.insert(
        format!("{prefix}.ffn.w2.weight"),
        Tensor::randn(d, d_ff, INIT_STD, rng),
    );
    p.insert(format!("{prefix}.ffn.w2.bias"), Tensor::zeros(1, d));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Model::<f32>::init(ModelConfig::default(), 5).unwrap();
        let b = Model::<f32>::init(ModelConfig::default(), 5).unwrap();
        let c = Model::<f32>::init(ModelConfig::default(), 6).unwrap();
        assert_eq!(a.names(), b.names());
        for (name, t) in a.iter() {
            assert_eq!(t.data(), b.param(name).data());
        }
        assert_ne!(a.param("embed.text").data(), c.param("embed.text").data());
    }

    #[test]
    fn every_family_is_populated() {
        let m = Model::<f32>::init(ModelConfig::default(), 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (name, _) in m.iter() {
            seen.insert(family_of(name));
        }
        for fam in ParamFamily::ALL {
            assert!(seen.contains(&fam), "family {fam:?} has no parameters");
        }
    }

    #[test]
    fn base_params_are_the_text_only_model() {
        let m = Model::<f32>::init(ModelConfig::default(), 1).unwrap();
        let base = m.base_checkpoint();
        for name in base.names() {
            assert!(is_base_param(name));
        }
        assert!(base.get("embed.speech").is_none());
        assert!(base.get("srh.embed.speech").is_none());
        assert!(base.get("ungroup.weight").is_none());
        assert!(base.get("group.weight").is_none());
        assert!(base.get("backbone.l0.attn.wq.weight").is_some());
        assert!(base.get("head.text.weight").is_some());
    }

    #[test]
    fn checkpoint_round_trip_preserves_values() {
        let m = Model::<f32>::init(ModelConfig::default(), 3).unwrap();
        let ck = m.to_checkpoint();
        let back = Model::<f32>::from_checkpoint(&ck, None).unwrap();
        for (name, t) in m.iter() {
            assert_eq!(t.data(), back.param(name).data(), "{name}");
        }
    }

    #[test]
    fn f64_checkpoint_refuses_lossy_f32_load() {
        let m = Model::<f64>::init(ModelConfig::default(), 3).unwrap();
        let ck = m.to_checkpoint();
        assert!(Model::<f32>::from_checkpoint(&ck, None).is_err());
        assert!(Model::<f64>::from_checkpoint(&ck, None).is_ok());
    }

    #[test]
    fn split_head_variant_swaps_parameter_set() {
        let mut cfg = ModelConfig::default();
        cfg.srh_enabled = false;
        let m = Model::<f32>::init(cfg, 1).unwrap();
        assert!(m.params.contains_key("head.split.weight"));
        assert!(!m.params.contains_key("srh.embed.speech"));
        assert!(!m.params.contains_key("ungroup.weight"));
    }

    #[test]
    fn tied_head_reuses_embedding() {
        let mut cfg = ModelConfig::default();
        cfg.tie_text_head = true;
        let m = Model::<f32>::init(cfg, 1).unwrap();
        assert!(!m.params.contains_key("head.text.weight"));
        assert_eq!(m.text_head_weight().rows(), 128);
    }
}
