use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gated_score, gated_score_values, nce_loss, total_loss};
use crate::candmodel::{candidate_embedding, infer_cpe};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, mean_rouge, ImpressionResult, MetricsReport};
use crate::model::{EmbSum, GlobalMode, ModelConfig, UserInput};
use crate::numerics::{optim, OptimizerConfig, ParamSet, Tape, Tensor, Var};
use crate::textdata::{Dataset, Split, TrainInstance};
use crate::usermodel::{infer_upe, user_poly_embedding};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    /// `None` picks 128, or 32 when an epoch holds fewer than 5,000 instances.
    pub batch_size: Option<usize>,
    pub epochs: usize,
    pub lambda: f64,
    /// Negatives per positive (`R`).
    pub neg_ratio: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lr: 5e-4,
            batch_size: None,
            epochs: 10,
            lambda: 0.05,
            neg_ratio: 4,
            seed: 0,
            clip_norm: 1.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if self.neg_ratio == 0 {
            return Err(Error::config("neg_ratio must be at least 1"));
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == Some(0) {
            return Err(Error::config("lr, epochs and batch_size must be positive"));
        }
        if self.clip_norm < 0.0 {
            return Err(Error::config("clip_norm must be non-negative"));
        }
        Ok(())
    }

    pub fn effective_batch_size(&self, instances: usize) -> usize {
        self.batch_size.unwrap_or(if instances < 5_000 { 32 } else { 128 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_nce: f64,
    pub train_sum: Option<f64>,
    pub dev_auc: Option<f64>,
    pub dev_mrr: Option<f64>,
    pub dev_ndcg5: Option<f64>,
    pub dev_ndcg10: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmbSum,
    /// Parameters of the best dev-AUC epoch (the last epoch without dev data).
    pub params: ParamSet,
    /// Parameters after the final epoch.
    pub last_params: ParamSet,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_dev_auc: Option<f64>,
}

struct InstanceLoss {
    total: f64,
    nce: f64,
    sum: Option<f64>,
}

fn user_inputs(model: &EmbSum, data: &Dataset, split: Split) -> Result<HashMap<String, UserInput>> {
    data.split_users(split)
        .into_iter()
        .map(|u| Ok((u.to_string(), model.user_input(data, u)?)))
        .collect()
}

/// Tokens the summarization loss of `user` averages over (summary plus `[EOS]`).
fn summary_targets(model: &EmbSum, user: &UserInput) -> usize {
    match user.summary.as_deref() {
        Some(s) if !s.is_empty() && !user.is_cold_start() && !model.config.ablations.no_sum_loss => s.len() + 1,
        _ => 0,
    }
}

#[allow(clippy::too_many_arguments)]
fn instance_forward(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    user: &UserInput,
    candidates: &[&[u32]],
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, InstanceLoss, Option<Var>)> {
    let dropout = model.config.transformer.dropout > 0.0;
    let mut drop = if dropout { Some(&mut *rng) } else { None };
    let u = user_poly_embedding(model, tape, params, user, GlobalMode::TrainTeacherForced, &mut drop)?;
    let w_s = tape.param(params, model.head_ws);
    let mut scores = Vec::with_capacity(candidates.len());
    for ids in candidates {
        let c = candidate_embedding(model, tape, params, ids, &mut drop)?;
        scores.push(gated_score(tape, u.upe, c.cpe, w_s)?.score);
    }
    let scores = tape.concat_rows(&scores)?;
    let nce = nce_loss(tape, scores, 0)?;
    let sum = if model.config.ablations.no_sum_loss { None } else { u.sum_loss };
    let total = total_loss(tape, nce, sum, lambda)?;
    let stats = InstanceLoss {
        total: tape.scalar(total)?,
        nce: tape.scalar(nce)?,
        sum: sum.map(|s| tape.scalar(s)).transpose()?,
    };
    Ok((total, stats, sum))
}

/// Trains from scratch. Writes the best checkpoint and a JSON-lines epoch log when paths are given.
pub fn train(data: &Dataset, cfg: &TrainConfig, checkpoint: Option<&Path>, log_path: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.transformer.vocab_size == 0 {
        model_cfg.transformer.vocab_size = data.vocab.len();
    }
    if model_cfg.transformer.vocab_size != data.vocab.len() {
        return Err(Error::config(format!(
            "model vocabulary {} differs from data vocabulary {}",
            model_cfg.transformer.vocab_size,
            data.vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::new();
    let model = EmbSum::init(model_cfg, &mut params, &mut rng)?;
    let mut optimizer = optim::build(cfg.optimizer, &params);
    let users = user_inputs(&model, data, Split::Train)?;
    let mut log_file = match log_path {
        Some(p) => Some(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let has_dev = data.split(Split::Dev).next().is_some();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut instances: Vec<TrainInstance> = data.train_instances(cfg.neg_ratio, &mut rng)?;
        if instances.is_empty() {
            return Err(Error::config("no training instances"));
        }
        instances.shuffle(&mut rng);
        let batch = cfg.effective_batch_size(instances.len());
        let (mut tot, mut nce, mut sum, mut sum_n) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in instances.chunks(batch).enumerate() {
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            };
            params.zero_grad();
            let batch_users = chunk
                .iter()
                .map(|inst| {
                    users
                        .get(&inst.user_id)
                        .ok_or_else(|| Error::UnknownId(format!("user {}", inst.user_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            // The summary term is a mean over every target token of the batch.
            let targets: Vec<f64> = batch_users.iter().map(|u| summary_targets(&model, u) as f64).collect();
            let batch_targets: f64 = targets.iter().sum();
            for ((inst, user), n_targets) in chunk.iter().zip(batch_users).zip(targets) {
                let sum_weight = if batch_targets > 0.0 {
                    n_targets * chunk.len() as f64 / batch_targets
                } else {
                    0.0
                };
                let mut cands: Vec<&[u32]> = vec![data.item(&inst.positive)?.token_ids.as_slice()];
                for n in &inst.negatives {
                    cands.push(&data.item(n)?.token_ids);
                }
                let mut tape = Tape::new();
                let (loss, stats, _) =
                    instance_forward(&model, &mut tape, &params, user, &cands, cfg.lambda * sum_weight, &mut rng).map_err(diverged)?;
                tape.backward(loss).map_err(diverged)?;
                tape.accumulate_param_grads(&mut params, 1.0 / chunk.len() as f64)?;
                tot += stats.total;
                nce += stats.nce;
                if let Some(s) = stats.sum {
                    sum += s;
                    sum_n += 1;
                }
            }
            if !params.grads_finite() {
                return Err(Error::Diverged { epoch, batch: b });
            }
            if cfg.clip_norm > 0.0 {
                params.clip_grad_norm(cfg.clip_norm);
            }
            optimizer.step(&mut params, cfg.lr)?;
        }
        let n = instances.len() as f64;
        let dev = if has_dev {
            Some(evaluate(&model, &params, data, Split::Dev)?.report)
        } else {
            None
        };
        let entry = EpochLog {
            epoch,
            train_loss: tot / n,
            train_nce: nce / n,
            train_sum: (sum_n > 0).then(|| sum / sum_n as f64),
            dev_auc: dev.as_ref().map(|d| d.auc),
            dev_mrr: dev.as_ref().map(|d| d.mrr),
            dev_ndcg5: dev.as_ref().map(|d| d.ndcg5),
            dev_ndcg10: dev.as_ref().map(|d| d.ndcg10),
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} nce {:.4} dev_auc {:?} ({:.1}s)",
            entry.train_loss,
            entry.train_nce,
            entry.dev_auc,
            entry.seconds
        );
        if let (Some(f), Some(p)) = (log_file.as_mut(), log_path) {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p, e))?;
        }
        let score = entry.dev_auc.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || !has_dev) {
            best = Some((score, epoch, params.clone()));
            if let Some(path) = checkpoint {
                model.save(path, &params, &data.vocab)?;
            }
        }
        log.push(entry);
    }
    let (score, best_epoch, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        params: best_params,
        last_params: params,
        log,
        best_epoch,
        best_dev_auc: has_dev.then_some(score),
    })
}

#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub results: Vec<ImpressionResult>,
    /// Generated summary text per user, in the greedy-decoding mode.
    pub summaries: BTreeMap<String, String>,
}

fn embeddings_for(
    model: &EmbSum,
    params: &ParamSet,
    data: &Dataset,
    split: Split,
) -> Result<(HashMap<String, (Tensor, Option<Vec<u32>>)>, HashMap<String, Tensor>)> {
    let mut upes = HashMap::new();
    for (id, input) in user_inputs(model, data, split)? {
        upes.insert(id, infer_upe(model, params, &input)?);
    }
    let mut cpes = HashMap::new();
    for imp in data.split(split) {
        for (id, _) in &imp.candidates {
            if !cpes.contains_key(id) {
                cpes.insert(id.clone(), infer_cpe(model, params, &data.item(id)?.token_ids)?);
            }
        }
    }
    Ok((upes, cpes))
}

/// Scores every impression of `split` with frozen parameters.
pub fn evaluate(model: &EmbSum, params: &ParamSet, data: &Dataset, split: Split) -> Result<EvalOutput> {
    evaluate_with_summaries(model, params, data, split, false)
}

/// Like [`evaluate`]; with `rouge` set, also scores generated summaries against references.
pub fn evaluate_with_summaries(model: &EmbSum, params: &ParamSet, data: &Dataset, split: Split, rouge: bool) -> Result<EvalOutput> {
    let (upes, cpes) = embeddings_for(model, params, data, split)?;
    let w_s = params.get(model.head_ws);
    let mut results = Vec::new();
    for imp in data.split(split) {
        let (upe, _) = &upes[&imp.user_id];
        let scores = imp
            .candidates
            .iter()
            .map(|(id, _)| Ok(gated_score_values(upe, &cpes[id], w_s)?.s))
            .collect::<Result<Vec<f64>>>()?;
        results.push(ImpressionResult {
            scores,
            labels: imp.labels(),
        });
    }
    let mut report = aggregate(&results)?;
    let summaries: BTreeMap<String, String> = upes
        .iter()
        .filter_map(|(u, (_, g))| g.as_ref().map(|g| (u.clone(), data.vocab.decode(g))))
        .collect();
    if rouge {
        let mut pairs = Vec::new();
        for (u, text) in &summaries {
            if let Some(reference) = data.user(u)?.summary.as_deref() {
                pairs.push((text.as_str(), reference));
            }
        }
        report.rouge = mean_rouge(pairs);
    }
    Ok(EvalOutput {
        report,
        results,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::textdata::{synth_generate, DataOptions, SynthConfig};

    fn tiny_data() -> Dataset {
        let cfg = SynthConfig {
            n_users: 12,
            n_items: 24,
            n_topics: 3,
            k_history: 4,
            vocab_words_per_topic: 6,
            title_len: 3,
            abstract_len: 3,
            max_preferred: 2,
            impressions_per_user: 2,
            dev_fraction: 0.25,
            test_fraction: 0.25,
            seed: 1,
            ..SynthConfig::default()
        };
        Dataset::from_synth(&synth_generate(&cfg).unwrap(), &DataOptions::default(), None).unwrap()
    }

    #[test]
    fn summary_targets_count_eos_and_respect_ablation() {
        let mut ps = ParamSet::new();
        let mut cfg = tiny_config(24);
        let model = EmbSum::init(cfg.clone(), &mut ps, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut user = UserInput {
            sessions: vec![vec![vec![1, 5, 2]]],
            summary: Some(vec![5, 6, 7]),
        };
        assert_eq!(summary_targets(&model, &user), 4);
        cfg.ablations.no_sum_loss = true;
        let ablated = EmbSum::init(cfg, &mut ParamSet::new(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(summary_targets(&ablated, &user), 0);
        user.summary = None;
        assert_eq!(summary_targets(&model, &user), 0);
        user.summary = Some(vec![5]);
        user.sessions = vec![vec![vec![]]];
        assert_eq!(summary_targets(&model, &user), 0);
    }

    fn tiny_train(data: &Dataset) -> TrainConfig {
        let mut model = tiny_config(data.vocab.len());
        model.k_history = 4;
        model.items_per_session = 2;
        model.max_summary_len = 12;
        TrainConfig {
            model,
            lr: 3e-3,
            batch_size: Some(4),
            epochs: 2,
            neg_ratio: 2,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_runs_and_logs() {
        let data = tiny_data();
        let cfg = tiny_train(&data);
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best.embm");
        let lg = dir.path().join("log.jsonl");
        let out = train(&data, &cfg, Some(&ck), Some(&lg)).unwrap();
        assert_eq!(out.log.len(), 2);
        let lines: Vec<serde_json::Value> = std::fs::read_to_string(&lg)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        for key in ["epoch", "train_loss", "train_nce", "train_sum", "dev_auc", "dev_mrr", "dev_ndcg5", "dev_ndcg10", "seconds"] {
            assert!(lines[0].get(key).is_some(), "{key}");
        }
        let (m, ps, _) = EmbSum::load(&ck).unwrap();
        let a = evaluate(&m, &ps, &data, Split::Dev).unwrap();
        let b = evaluate(&out.model, &out.params, &data, Split::Dev).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(Some(a.report.auc), out.best_dev_auc);
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_data();
        let mut cfg = tiny_train(&data);
        cfg.epochs = 1;
        let a = train(&data, &cfg, None, None).unwrap();
        let b = train(&data, &cfg, None, None).unwrap();
        assert_eq!(a.log[0].train_loss, b.log[0].train_loss);
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn vocab_mismatch_and_bad_config() {
        let data = tiny_data();
        let mut cfg = tiny_train(&data);
        cfg.model.transformer.vocab_size = data.vocab.len() + 1;
        assert!(train(&data, &cfg, None, None).is_err());
        let mut cfg = tiny_train(&data);
        cfg.neg_ratio = 0;
        assert!(train(&data, &cfg, None, None).is_err());
    }

    #[test]
    fn no_sum_loss_makes_total_equal_nce() {
        let data = tiny_data();
        let mut cfg = tiny_train(&data);
        cfg.epochs = 1;
        cfg.model.ablations.no_sum_loss = true;
        let out = train(&data, &cfg, None, None).unwrap();
        assert_eq!(out.log[0].train_loss, out.log[0].train_nce);
        assert!(out.log[0].train_sum.is_none());
    }

    #[test]
    fn divergence_reports_batch() {
        let data = tiny_data();
        let mut cfg = tiny_train(&data);
        cfg.lr = 1e300;
        cfg.clip_norm = 0.0;
        cfg.optimizer = OptimizerConfig::Sgd;
        match train(&data, &cfg, None, None) {
            Err(Error::Diverged { epoch, batch }) => assert_eq!((epoch, batch), (1, 1)),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }
}
