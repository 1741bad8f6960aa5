//! User side: independent session encoding, summarization, the global
//! decoder vector and the user poly-embedding.

use crate::error::{Error, Result};
use crate::minilm::{DropoutRng, EncoderOutput};
use crate::model::{EmbSum, GlobalMode, PolyLayer, UserInput};
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::textdata::{EOS, SOS};

#[derive(Debug, Clone, Copy)]
pub struct PolyOutput {
    /// `num_codes × d`
    pub out: Var,
    /// `num_codes × r`, rows sum to one.
    pub weights: Var,
}

/// `softmax(codes · tanh(Z·proj)ᵀ) · Z`, with rows of `z` excluded where `keep` is false.
pub fn poly_attention(tape: &mut Tape, z: Var, codes: Var, proj: Var, keep: Option<&[bool]>) -> Result<PolyOutput> {
    if tape.value(z).rows() == 0 {
        return Err(Error::dim("poly-attention over zero rows"));
    }
    let h = tape.matmul(z, proj)?;
    let h = tape.tanh(h)?;
    let logits = tape.matmul_nt(codes, h)?;
    let weights = tape.softmax(logits, keep)?;
    let out = tape.matmul(weights, z)?;
    Ok(PolyOutput { out, weights })
}

pub fn poly_layer(tape: &mut Tape, params: &ParamSet, z: Var, layer: PolyLayer, keep: Option<&[bool]>) -> Result<PolyOutput> {
    let codes = tape.param(params, layer.codes);
    let proj = tape.param(params, layer.proj);
    poly_attention(tape, z, codes, proj, keep)
}

#[derive(Debug, Clone)]
pub struct SessionStates {
    /// `k × d`, each item's `[SOS]` state.
    pub content_vecs: Var,
    /// Every session's token states, concatenated in order.
    pub tokens: EncoderOutput,
}

/// Encodes each session on its own; items inside a session are concatenated.
pub fn encode_sessions(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    sessions: &[Vec<Vec<u32>>],
    rng: &mut DropoutRng<'_>,
) -> Result<SessionStates> {
    let mut contents = Vec::new();
    let mut states = Vec::new();
    for session in sessions.iter().filter(|s| s.iter().any(|it| !it.is_empty())) {
        let mut ids = Vec::new();
        let mut starts = Vec::new();
        for item in session.iter().filter(|it| !it.is_empty()) {
            starts.push(ids.len());
            ids.extend_from_slice(item);
        }
        let enc = model
            .transformer
            .encode(tape, params, &ids, &vec![false; ids.len()], rng.as_deref_mut())?;
        contents.push(tape.gather(enc.states, &starts)?);
        states.push(enc.states);
    }
    if states.is_empty() {
        return Err(Error::ColdStart("no non-empty session to encode".into()));
    }
    let content_vecs = tape.concat_rows(&contents)?;
    let all = tape.concat_rows(&states)?;
    let rows = tape.value(all).rows();
    Ok(SessionStates {
        content_vecs,
        tokens: EncoderOutput {
            states: all,
            pad: vec![false; rows],
        },
    })
}

fn check_summary(model: &EmbSum, summary: &[u32]) -> Result<()> {
    if summary.is_empty() {
        return Err(Error::config("summary is empty"));
    }
    if summary.len() >= model.config.transformer.max_positions {
        return Err(Error::config(format!(
            "summary of {} tokens does not fit max_positions {}",
            summary.len(),
            model.config.transformer.max_positions
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherForced {
    /// Mean token negative log-likelihood.
    pub loss: Var,
    /// `1 × d` hidden state at the position whose target is `[EOS]`.
    pub last_hidden: Var,
}

/// Decoder input `[SOS] + y`, targets `y + [EOS]`, cross-attending over `states`.
pub fn summarization_loss(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    states: &EncoderOutput,
    summary: &[u32],
    rng: &mut DropoutRng<'_>,
) -> Result<TeacherForced> {
    check_summary(model, summary)?;
    let mut input = Vec::with_capacity(summary.len() + 1);
    input.push(SOS);
    input.extend_from_slice(summary);
    let targets: Vec<usize> = summary.iter().chain([&EOS]).map(|&t| t as usize).collect();
    let out = model.transformer.decode(tape, params, &input, states, rng.as_deref_mut())?;
    let loss = tape.cross_entropy(out.logits, &targets)?;
    let last_hidden = tape.slice_rows(out.hidden, summary.len(), 1)?;
    Ok(TeacherForced { loss, last_hidden })
}

/// Greedy decoding of at most `max_len` tokens. Returns the tokens (without
/// `[EOS]`) and the hidden state of the final step.
pub fn greedy_generate(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    states: &EncoderOutput,
    max_len: usize,
) -> Result<(Vec<u32>, Var)> {
    let cache = model.transformer.cross_cache(tape, params, states)?;
    let mut input = vec![SOS];
    loop {
        let out = model.transformer.decode_cached(tape, params, &input, &cache, None)?;
        let step = input.len() - 1;
        let logits = tape.value(out.logits);
        let row = logits.row(step);
        let next = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .expect("non-empty vocabulary") as u32;
        if next == EOS || input.len() >= max_len {
            let hidden = tape.slice_rows(out.hidden, step, 1)?;
            let mut generated = input.split_off(1);
            if next != EOS {
                generated.push(next);
            }
            return Ok((generated, hidden));
        }
        input.push(next);
    }
}

#[derive(Debug, Clone)]
pub struct GlobalRep {
    /// `1 × d`
    pub vec: Var,
    pub sum_loss: Option<Var>,
    pub generated: Option<Vec<u32>>,
}

pub fn global_representation(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    states: &EncoderOutput,
    summary: Option<&[u32]>,
    mode: GlobalMode,
    rng: &mut DropoutRng<'_>,
) -> Result<GlobalRep> {
    match mode {
        GlobalMode::TrainTeacherForced => {
            let summary = summary.ok_or_else(|| Error::config("teacher-forced global vector needs a summary"))?;
            let tf = summarization_loss(model, tape, params, states, summary, rng)?;
            Ok(GlobalRep {
                vec: tf.last_hidden,
                sum_loss: Some(tf.loss),
                generated: None,
            })
        }
        GlobalMode::InferGenerate => {
            let (generated, vec) = greedy_generate(model, tape, params, states, model.config.max_summary_len)?;
            Ok(GlobalRep {
                vec,
                sum_loss: None,
                generated: Some(generated),
            })
        }
        GlobalMode::AblationSosOnly => {
            let out = model.transformer.decode(tape, params, &[SOS], states, rng.as_deref_mut())?;
            Ok(GlobalRep {
                vec: out.hidden,
                sum_loss: None,
                generated: None,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct UserEncoding {
    /// `m × d`
    pub upe: Var,
    /// `m × (k+1)`
    pub weights: Var,
    /// `(k+1) × d`: content vectors then the global vector.
    pub z: Var,
    pub sum_loss: Option<Var>,
    pub generated: Option<Vec<u32>>,
    pub cold_start: bool,
}

/// Builds `Z` from the content vectors and the global vector and applies the
/// user poly-attention layer.
///
/// Teacher forcing falls back to the `[SOS]`-only decoder for users without a
/// summary. Users without history get `Z` = the `[SOS]`-only global vector
/// computed over an empty `[SOS] [EOS]` item.
pub fn user_poly_embedding(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    input: &UserInput,
    mode: GlobalMode,
    rng: &mut DropoutRng<'_>,
) -> Result<UserEncoding> {
    if input.is_cold_start() {
        log::debug!("cold-start user: global-vector-only embedding");
        let enc = model.transformer.encode(tape, params, &[SOS, EOS], &[false, false], rng.as_deref_mut())?;
        let g = global_representation(model, tape, params, &enc, None, GlobalMode::AblationSosOnly, rng)?;
        let poly = poly_layer(tape, params, g.vec, model.user_poly, None)?;
        return Ok(UserEncoding {
            upe: poly.out,
            weights: poly.weights,
            z: g.vec,
            sum_loss: None,
            generated: None,
            cold_start: true,
        });
    }
    let sessions = encode_sessions(model, tape, params, &input.sessions, rng)?;
    let summary = input.summary.as_deref().filter(|s| !s.is_empty());
    let mode = match (mode, summary) {
        (GlobalMode::TrainTeacherForced, None) => GlobalMode::AblationSosOnly,
        (m, _) => m,
    };
    let g = global_representation(model, tape, params, &sessions.tokens, summary, mode, rng)?;
    let z = tape.concat_rows(&[sessions.content_vecs, g.vec])?;
    let poly = poly_layer(tape, params, z, model.user_poly, None)?;
    Ok(UserEncoding {
        upe: poly.out,
        weights: poly.weights,
        z,
        sum_loss: g.sum_loss,
        generated: g.generated,
        cold_start: false,
    })
}

/// Frozen-parameter UPE in the configured evaluation mode, plus the generated summary.
pub fn infer_upe(model: &EmbSum, params: &ParamSet, input: &UserInput) -> Result<(Tensor, Option<Vec<u32>>)> {
    infer_upe_with(model, params, input, model.config.eval_global_mode)
}

pub fn infer_upe_with(model: &EmbSum, params: &ParamSet, input: &UserInput, mode: GlobalMode) -> Result<(Tensor, Option<Vec<u32>>)> {
    let mut tape = Tape::new();
    let enc = user_poly_embedding(model, &mut tape, params, input, mode, &mut None)?;
    Ok((tape.value(enc.upe).clone(), enc.generated))
}
