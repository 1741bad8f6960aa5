//! The full recommender: shared transformer, user and candidate poly-attention
//! layers and the gated scoring head, with checkpoint persistence.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::minilm::{checkpoint, Transformer, TransformerConfig, INIT_STD};
use crate::numerics::{ParamId, ParamSet, Tensor};
use crate::textdata::{build_sessions, Dataset, Vocab};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Candidates are represented by their `[SOS]` encoder state alone.
    pub no_cpe: bool,
    /// Every history item is encoded as its own session.
    pub no_sessions: bool,
    /// A single user-interest code.
    pub upe_size_1: bool,
    /// The summarization loss is dropped from the objective.
    pub no_sum_loss: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 4] = ["no_cpe", "no_sessions", "upe_size_1", "no_sum_loss"];

    pub fn only(name: &str) -> Result<Ablations> {
        let mut a = Ablations::default();
        match name {
            "no_cpe" => a.no_cpe = true,
            "no_sessions" => a.no_sessions = true,
            "upe_size_1" => a.upe_size_1 = true,
            "no_sum_loss" => a.no_sum_loss = true,
            "none" | "full" => {}
            other => return Err(Error::config(format!("unknown ablation {other:?}"))),
        }
        Ok(a)
    }
}

/// Where the user's global vector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalMode {
    /// Decoder fed `[SOS] + summary`; hidden state at the final position.
    TrainTeacherForced,
    /// Greedy decoding; hidden state at the step that emitted `[EOS]`.
    InferGenerate,
    /// Decoder fed `[SOS]` alone.
    AblationSosOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub transformer: TransformerConfig,
    /// `m`
    pub upe_codes: usize,
    /// `n`
    pub cpe_codes: usize,
    pub code_dim: usize,
    /// Most recent history items used (`k`).
    pub k_history: usize,
    pub items_per_session: usize,
    /// Token budget per session (`l`).
    pub session_max_tokens: usize,
    pub max_summary_len: usize,
    pub ablations: Ablations,
    pub eval_global_mode: GlobalMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            transformer: TransformerConfig::default(),
            upe_codes: 32,
            cpe_codes: 4,
            code_dim: 64,
            k_history: 60,
            items_per_session: 15,
            session_max_tokens: 512,
            max_summary_len: 64,
            ablations: Ablations::default(),
            eval_global_mode: GlobalMode::InferGenerate,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.transformer.validate()?;
        if self.upe_codes == 0 || self.cpe_codes == 0 || self.code_dim == 0 {
            return Err(Error::config("upe_codes, cpe_codes and code_dim must be positive"));
        }
        if self.k_history == 0 || self.items_per_session == 0 {
            return Err(Error::config("k_history and items_per_session must be positive"));
        }
        if self.session_max_tokens == 0 || self.session_max_tokens > self.transformer.max_positions {
            return Err(Error::config(format!(
                "session_max_tokens {} must lie in 1..={}",
                self.session_max_tokens, self.transformer.max_positions
            )));
        }
        if self.max_summary_len == 0 || self.max_summary_len >= self.transformer.max_positions {
            return Err(Error::config("max_summary_len must be positive and below max_positions"));
        }
        Ok(())
    }

    /// `m`, or 1 under the single-code ablation.
    pub fn effective_upe_codes(&self) -> usize {
        if self.ablations.upe_size_1 {
            1
        } else {
            self.upe_codes
        }
    }

    /// `n`, or 1 when candidates use their `[SOS]` state.
    pub fn effective_cpe_codes(&self) -> usize {
        if self.ablations.no_cpe {
            1
        } else {
            self.cpe_codes
        }
    }

    pub fn effective_items_per_session(&self) -> usize {
        if self.ablations.no_sessions {
            1
        } else {
            self.items_per_session
        }
    }

    /// Trainable scalars of the whole model.
    pub fn param_count(&self) -> usize {
        let d = self.transformer.d_model;
        let c = self.code_dim;
        let user = self.effective_upe_codes() * c + d * c;
        let cand = if self.ablations.no_cpe { 0 } else { self.cpe_codes * c + d * c };
        self.transformer.param_count() + user + cand + d * d
    }
}

/// Context codes and projection of one poly-attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyLayer {
    pub codes: ParamId,
    pub proj: ParamId,
}

/// Tokenized inputs of one user: sessions of items, each item a token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserInput {
    pub sessions: Vec<Vec<Vec<u32>>>,
    pub summary: Option<Vec<u32>>,
}

impl UserInput {
    pub fn is_cold_start(&self) -> bool {
        self.sessions.iter().all(|s| s.iter().all(Vec::is_empty))
    }

    pub fn num_items(&self) -> usize {
        self.sessions.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone)]
pub struct EmbSum {
    pub config: ModelConfig,
    pub transformer: Transformer,
    pub user_poly: PolyLayer,
    /// Absent under the `no_cpe` ablation.
    pub cand_poly: Option<PolyLayer>,
    pub head_ws: ParamId,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    vocab: Vocab,
}

impl EmbSum {
    pub fn init<R: Rng>(config: ModelConfig, params: &mut ParamSet, rng: &mut R) -> Result<EmbSum> {
        config.validate()?;
        let transformer = Transformer::init(config.transformer.clone(), params, rng)?;
        let d = config.transformer.d_model;
        let c = config.code_dim;
        let mut normal = |params: &mut ParamSet, name: &str, shape: &[usize]| {
            params.add(name, Tensor::randn(shape, INIT_STD, rng))
        };
        let user_poly = PolyLayer {
            codes: normal(params, "user.codes", &[config.effective_upe_codes(), c])?,
            proj: normal(params, "user.proj", &[d, c])?,
        };
        let cand_poly = if config.ablations.no_cpe {
            None
        } else {
            Some(PolyLayer {
                codes: normal(params, "cand.codes", &[config.cpe_codes, c])?,
                proj: normal(params, "cand.proj", &[d, c])?,
            })
        };
        let head_ws = normal(params, "head.w_s", &[d, d])?;
        Ok(EmbSum {
            config,
            transformer,
            user_poly,
            cand_poly,
            head_ws,
        })
    }

    /// Resolves parameter handles in a populated set, checking every shape.
    pub fn bind(config: ModelConfig, params: &mut ParamSet) -> Result<EmbSum> {
        config.validate()?;
        let transformer = Transformer::bind(config.transformer.clone(), params)?;
        let d = config.transformer.d_model;
        let c = config.code_dim;
        let find = |params: &ParamSet, name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let user_poly = PolyLayer {
            codes: find(params, "user.codes", &[config.effective_upe_codes(), c])?,
            proj: find(params, "user.proj", &[d, c])?,
        };
        let cand_poly = if config.ablations.no_cpe {
            None
        } else {
            Some(PolyLayer {
                codes: find(params, "cand.codes", &[config.cpe_codes, c])?,
                proj: find(params, "cand.proj", &[d, c])?,
            })
        };
        let head_ws = find(params, "head.w_s", &[d, d])?;
        if params.len() != transformer.param_ids().len() + 3 + if cand_poly.is_some() { 2 } else { 0 } {
            return Err(Error::Format("checkpoint holds tensors this model does not use".into()));
        }
        Ok(EmbSum {
            config,
            transformer,
            user_poly,
            cand_poly,
            head_ws,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.transformer.d_model
    }

    pub fn save(&self, path: &Path, params: &ParamSet, vocab: &Vocab) -> Result<()> {
        let meta = serde_json::to_string(&Meta {
            config: self.config.clone(),
            vocab: vocab.clone(),
        })?;
        checkpoint::save(path, &meta, params)
    }

    pub fn load(path: &Path) -> Result<(EmbSum, ParamSet, Vocab)> {
        let (meta, tensors) = checkpoint::load(path)?;
        let meta: Meta = serde_json::from_str(&meta)?;
        if meta.vocab.len() != meta.config.transformer.vocab_size {
            return Err(Error::Format(format!(
                "checkpoint vocabulary has {} tokens, model expects {}",
                meta.vocab.len(),
                meta.config.transformer.vocab_size
            )));
        }
        let mut params = ParamSet::new();
        for (name, t) in tensors {
            params.add(name, t)?;
        }
        let model = EmbSum::bind(meta.config, &mut params)?;
        Ok((model, params, meta.vocab))
    }

    /// Tokenized history sessions and summary of a dataset user.
    pub fn user_input(&self, data: &Dataset, user_id: &str) -> Result<UserInput> {
        let items = data.history_tokens(user_id, self.config.k_history)?;
        let items: Vec<Vec<u32>> = items.into_iter().map(<[u32]>::to_vec).collect();
        let sessions = build_sessions(
            &items,
            self.config.effective_items_per_session(),
            self.config.session_max_tokens,
        )?;
        Ok(UserInput {
            sessions,
            summary: data.summary_ids(user_id)?,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    pub(crate) fn tiny_config(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            transformer: TransformerConfig {
                vocab_size,
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ff: 32,
                max_positions: 128,
                dropout: 0.0,
            },
            upe_codes: 4,
            cpe_codes: 2,
            code_dim: 8,
            k_history: 6,
            items_per_session: 3,
            session_max_tokens: 120,
            max_summary_len: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn param_count_matches_registered_scalars() {
        for name in ["none", "no_cpe", "no_sessions", "upe_size_1", "no_sum_loss"] {
            let mut cfg = tiny_config(30);
            cfg.ablations = Ablations::only(name).unwrap();
            let mut ps = ParamSet::new();
            EmbSum::init(cfg.clone(), &mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(ps.num_scalars(), cfg.param_count(), "{name}");
        }
    }

    #[test]
    fn upe_size_1_drops_exactly_the_extra_codes() {
        let full = tiny_config(30);
        let mut one = full.clone();
        one.ablations.upe_size_1 = true;
        assert_eq!(full.param_count() - one.param_count(), (full.upe_codes - 1) * full.code_dim);
    }

    #[test]
    fn save_load_round_trip() {
        let cfg = tiny_config(6);
        let mut ps = ParamSet::new();
        let m = EmbSum::init(cfg.clone(), &mut ps, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let vocab = Vocab::build(["x y"], 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.embm");
        m.save(&path, &ps, &vocab).unwrap();
        let (m2, ps2, v2) = EmbSum::load(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(m2.config, cfg);
        for ((n1, t1), (n2, t2)) in ps.iter().zip(ps2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        assert_eq!(m2.head_ws, m.head_ws);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny_config(30);
        c.session_max_tokens = 1000;
        assert!(c.validate().is_err());
        let mut c = tiny_config(30);
        c.upe_codes = 0;
        assert!(c.validate().is_err());
        assert!(Ablations::only("bogus").is_err());
    }
}
