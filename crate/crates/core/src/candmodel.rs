//! Candidate side: content poly-embedding over an item's token states.

use crate::error::{Error, Result};
use crate::minilm::DropoutRng;
use crate::model::EmbSum;
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::textdata::{PAD, SOS};
use crate::usermodel::poly_layer;

#[derive(Debug, Clone, Copy)]
pub struct CandidateEncoding {
    /// `t × d`
    pub token_states: Var,
    /// `n × d`, or `1 × d` for the `[SOS]` representation.
    pub cpe: Var,
    /// `n × t` poly-attention weights; `None` for the `[SOS]` representation.
    pub weights: Option<Var>,
}

fn encode(model: &EmbSum, tape: &mut Tape, params: &ParamSet, ids: &[u32], rng: &mut DropoutRng<'_>) -> Result<(Var, Vec<bool>)> {
    if ids.is_empty() || ids.iter().all(|&t| t == PAD) {
        return Err(Error::config("candidate item has no tokens"));
    }
    let pad: Vec<bool> = ids.iter().map(|&t| t == PAD).collect();
    let enc = model.transformer.encode(tape, params, ids, &pad, rng.as_deref_mut())?;
    Ok((enc.states, pad))
}

/// Poly-attention with the candidate codes over the item's non-pad token states.
pub fn content_poly_embedding(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    ids: &[u32],
    rng: &mut DropoutRng<'_>,
) -> Result<CandidateEncoding> {
    let layer = model
        .cand_poly
        .ok_or_else(|| Error::config("model was built without candidate poly-attention"))?;
    let (states, pad) = encode(model, tape, params, ids, rng)?;
    let keep: Vec<bool> = pad.iter().map(|p| !p).collect();
    let poly = poly_layer(tape, params, states, layer, Some(&keep))?;
    Ok(CandidateEncoding {
        token_states: states,
        cpe: poly.out,
        weights: Some(poly.weights),
    })
}

/// Encoder state at the leading `[SOS]`.
pub fn sos_embedding(model: &EmbSum, tape: &mut Tape, params: &ParamSet, ids: &[u32], rng: &mut DropoutRng<'_>) -> Result<CandidateEncoding> {
    if ids.first() != Some(&SOS) {
        return Err(Error::config("candidate sequence must start with [SOS]"));
    }
    let (states, _) = encode(model, tape, params, ids, rng)?;
    let cpe = tape.slice_rows(states, 0, 1)?;
    Ok(CandidateEncoding {
        token_states: states,
        cpe,
        weights: None,
    })
}

/// The representation the model scores with: CPE, or `[SOS]` under `no_cpe`.
pub fn candidate_embedding(
    model: &EmbSum,
    tape: &mut Tape,
    params: &ParamSet,
    ids: &[u32],
    rng: &mut DropoutRng<'_>,
) -> Result<CandidateEncoding> {
    if model.config.ablations.no_cpe {
        sos_embedding(model, tape, params, ids, rng)
    } else {
        content_poly_embedding(model, tape, params, ids, rng)
    }
}

/// Frozen-parameter candidate embedding.
pub fn infer_cpe(model: &EmbSum, params: &ParamSet, ids: &[u32]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let enc = candidate_embedding(model, &mut tape, params, ids, &mut None)?;
    Ok(tape.value(enc.cpe).clone())
}
