//! Small pre-LayerNorm encoder-decoder transformer trained from scratch.
//!
//! Learned absolute positions, bias-free projections, LayerNorm with gain and
//! offset, and a decoder output projection tied to the token embedding.

pub mod checkpoint;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            vocab_size: 0,
            d_model: 32,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 64,
            max_positions: 512,
            dropout: 0.0,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size must cover the four special tokens"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_positions == 0 {
            return Err(Error::config("d_ff and max_positions must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Closed-form count of trainable scalars.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let ff = self.d_ff;
        let embeddings = self.vocab_size * d + 2 * self.max_positions * d;
        let enc_layer = 4 * d * d + 2 * d * ff + 2 * 2 * d;
        let dec_layer = 8 * d * d + 2 * d * ff + 3 * 2 * d;
        let final_norms = 2 * 2 * d;
        embeddings + self.n_enc_layers * enc_layer + self.n_dec_layers * dec_layer + final_norms
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

/// Encoder hidden states for one sequence.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub states: Var,
    /// `true` marks a pad position.
    pub pad: Vec<bool>,
}

impl EncoderOutput {
    pub fn keep(&self) -> Vec<bool> {
        self.pad.iter().map(|p| !p).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    pub hidden: Var,
    pub logits: Var,
}

/// Cross-attention keys and values of every decoder layer.
#[derive(Debug, Clone)]
pub struct CrossCache {
    kv: Vec<(Var, Var)>,
    keep: Vec<bool>,
}

/// Dropout source for a forward pass; `None` means evaluation mode.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Parameter handles of the transformer inside a shared [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: TransformerConfig,
    tok_emb: ParamId,
    enc_pos: ParamId,
    dec_pos: ParamId,
    enc_layers: Vec<EncLayer>,
    enc_norm: Norm,
    dec_layers: Vec<DecLayer>,
    dec_norm: Norm,
}

struct Registrar<'a, R: Rng> {
    params: &'a mut ParamSet,
    rng: Option<&'a mut R>,
}

impl<R: Rng> Registrar<'_, R> {
    fn get(&mut self, name: String, shape: &[usize], init: Init) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    Init::Normal => Tensor::randn(shape, INIT_STD, rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::full(shape, 1.0),
                };
                self.params.add(name, t)
            }
            None => {
                let id = self
                    .params
                    .id(&name)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
                if self.params.get(id).shape() != shape {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        self.params.get(id).shape(),
                        shape
                    )));
                }
                Ok(id)
            }
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.get(format!("{prefix}.g"), &[1, d], Init::Ones)?,
            bias: self.get(format!("{prefix}.b"), &[1, d], Init::Zeros)?,
        })
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<Attn> {
        Ok(Attn {
            wq: self.get(format!("{prefix}.wq"), &[d, d], Init::Normal)?,
            wk: self.get(format!("{prefix}.wk"), &[d, d], Init::Normal)?,
            wv: self.get(format!("{prefix}.wv"), &[d, d], Init::Normal)?,
            wo: self.get(format!("{prefix}.wo"), &[d, d], Init::Normal)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Result<Ffn> {
        Ok(Ffn {
            w1: self.get(format!("{prefix}.w1"), &[d, ff], Init::Normal)?,
            w2: self.get(format!("{prefix}.w2"), &[ff, d], Init::Normal)?,
        })
    }
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

impl Transformer {
    /// Registers freshly initialized parameters under `tok_emb`, `enc.*` and `dec.*`.
    pub fn init<R: Rng>(config: TransformerConfig, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        Self::register(config, params, Some(rng))
    }

    /// Looks up the parameters of an already populated set (e.g. from a checkpoint).
    pub fn bind(config: TransformerConfig, params: &mut ParamSet) -> Result<Self> {
        Self::register::<ChaCha8Rng>(config, params, None)
    }

    fn register<R: Rng>(config: TransformerConfig, params: &mut ParamSet, rng: Option<&mut R>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut reg = Registrar { params, rng };
        let tok_emb = reg.get("tok_emb".into(), &[config.vocab_size, d], Init::Normal)?;
        let enc_pos = reg.get("enc.pos_emb".into(), &[config.max_positions, d], Init::Normal)?;
        let dec_pos = reg.get("dec.pos_emb".into(), &[config.max_positions, d], Init::Normal)?;
        let mut enc_layers = Vec::with_capacity(config.n_enc_layers);
        for i in 0..config.n_enc_layers {
            enc_layers.push(EncLayer {
                ln_attn: reg.norm(&format!("enc.{i}.ln_attn"), d)?,
                attn: reg.attn(&format!("enc.{i}.attn"), d)?,
                ln_ffn: reg.norm(&format!("enc.{i}.ln_ffn"), d)?,
                ffn: reg.ffn(&format!("enc.{i}.ffn"), d, config.d_ff)?,
            });
        }
        let enc_norm = reg.norm("enc.ln_f", d)?;
        let mut dec_layers = Vec::with_capacity(config.n_dec_layers);
        for i in 0..config.n_dec_layers {
            dec_layers.push(DecLayer {
                ln_self: reg.norm(&format!("dec.{i}.ln_self"), d)?,
                self_attn: reg.attn(&format!("dec.{i}.self_attn"), d)?,
                ln_cross: reg.norm(&format!("dec.{i}.ln_cross"), d)?,
                cross_attn: reg.attn(&format!("dec.{i}.cross_attn"), d)?,
                ln_ffn: reg.norm(&format!("dec.{i}.ln_ffn"), d)?,
                ffn: reg.ffn(&format!("dec.{i}.ffn"), d, config.d_ff)?,
            });
        }
        let dec_norm = reg.norm("dec.ln_f", d)?;
        Ok(Transformer {
            config,
            tok_emb,
            enc_pos,
            dec_pos,
            enc_layers,
            enc_norm,
            dec_layers,
            dec_norm,
        })
    }

    fn check_ids(&self, ids: &[u32]) -> Result<Vec<usize>> {
        if ids.len() > self.config.max_positions {
            return Err(Error::dim(format!(
                "sequence of {} tokens exceeds max_positions {}",
                ids.len(),
                self.config.max_positions
            )));
        }
        ids.iter()
            .map(|&id| {
                let id = id as usize;
                if id >= self.config.vocab_size {
                    Err(Error::dim(format!("token id {id} outside vocabulary of {}", self.config.vocab_size)))
                } else {
                    Ok(id)
                }
            })
            .collect()
    }

    fn embed(&self, tape: &mut Tape, params: &ParamSet, ids: &[usize], pos_table: ParamId) -> Result<Var> {
        let table = tape.param(params, self.tok_emb);
        let tok = tape.gather(table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos_table = tape.param(params, pos_table);
        let pos = tape.gather(pos_table, &positions)?;
        tape.add(tok, pos)
    }

    fn norm(&self, tape: &mut Tape, params: &ParamSet, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(params, n.gain);
        let b = tape.param(params, n.bias);
        tape.layer_norm(x, g, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        a: Attn,
        query: Var,
        memory: Var,
        keep: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let wq = tape.param(params, a.wq);
        let wk = tape.param(params, a.wk);
        let wv = tape.param(params, a.wv);
        let wo = tape.param(params, a.wo);
        let q = tape.matmul(query, wq)?;
        let k = tape.matmul(memory, wk)?;
        let v = tape.matmul(memory, wv)?;
        let o = tape.attention(q, k, v, self.config.n_heads, keep, causal)?;
        tape.matmul(o, wo)
    }

    fn ffn(&self, tape: &mut Tape, params: &ParamSet, f: Ffn, x: Var) -> Result<Var> {
        let w1 = tape.param(params, f.w1);
        let w2 = tape.param(params, f.w2);
        let h = tape.matmul(x, w1)?;
        let h = tape.gelu(h)?;
        tape.matmul(h, w2)
    }

    fn residual(&self, tape: &mut Tape, x: Var, delta: Var, rng: &mut DropoutRng<'_>) -> Result<Var> {
        let delta = match rng.as_deref_mut() {
            Some(r) => tape.dropout(delta, self.config.dropout, r)?,
            None => delta,
        };
        tape.add(x, delta)
    }

    /// Bidirectional encoding of one sequence; `pad[i] == true` excludes position `i` as a key.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        token_ids: &[u32],
        pad: &[bool],
        mut rng: DropoutRng<'_>,
    ) -> Result<EncoderOutput> {
        if pad.len() != token_ids.len() {
            return Err(Error::dim(format!("{} pad flags for {} tokens", pad.len(), token_ids.len())));
        }
        if token_ids.is_empty() {
            return Err(Error::dim("cannot encode an empty sequence"));
        }
        let ids = self.check_ids(token_ids)?;
        let keep: Vec<bool> = pad.iter().map(|p| !p).collect();
        let mut x = self.embed(tape, params, &ids, self.enc_pos)?;
        for layer in &self.enc_layers {
            let h = self.norm(tape, params, x, layer.ln_attn)?;
            let a = self.attention(tape, params, layer.attn, h, h, Some(&keep), false)?;
            x = self.residual(tape, x, a, &mut rng)?;
            let h = self.norm(tape, params, x, layer.ln_ffn)?;
            let f = self.ffn(tape, params, layer.ffn, h)?;
            x = self.residual(tape, x, f, &mut rng)?;
        }
        let states = self.norm(tape, params, x, self.enc_norm)?;
        Ok(EncoderOutput {
            states,
            pad: pad.to_vec(),
        })
    }

    /// Projects `cross` into per-layer cross-attention keys and values, reusable
    /// across decoder calls over the same memory.
    pub fn cross_cache(&self, tape: &mut Tape, params: &ParamSet, cross: &EncoderOutput) -> Result<CrossCache> {
        let rows = tape.value(cross.states).rows();
        if rows == 0 || cross.pad.len() != rows {
            return Err(Error::dim("decoder needs non-empty cross states with one pad flag per row"));
        }
        let mut kv = Vec::with_capacity(self.dec_layers.len());
        for layer in &self.dec_layers {
            let wk = tape.param(params, layer.cross_attn.wk);
            let wv = tape.param(params, layer.cross_attn.wv);
            let k = tape.matmul(cross.states, wk)?;
            let v = tape.matmul(cross.states, wv)?;
            kv.push((k, v));
        }
        Ok(CrossCache { kv, keep: cross.keep() })
    }

    /// Causal decoding with cross-attention over `cross` (pad positions excluded).
    pub fn decode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        decoder_ids: &[u32],
        cross: &EncoderOutput,
        rng: DropoutRng<'_>,
    ) -> Result<DecoderOutput> {
        let cache = self.cross_cache(tape, params, cross)?;
        self.decode_cached(tape, params, decoder_ids, &cache, rng)
    }

    pub fn decode_cached(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        decoder_ids: &[u32],
        cache: &CrossCache,
        mut rng: DropoutRng<'_>,
    ) -> Result<DecoderOutput> {
        if decoder_ids.is_empty() {
            return Err(Error::dim("decoder input must hold at least one token"));
        }
        let ids = self.check_ids(decoder_ids)?;
        let mut x = self.embed(tape, params, &ids, self.dec_pos)?;
        for (layer, &(k, v)) in self.dec_layers.iter().zip(&cache.kv) {
            let h = self.norm(tape, params, x, layer.ln_self)?;
            let a = self.attention(tape, params, layer.self_attn, h, h, None, true)?;
            x = self.residual(tape, x, a, &mut rng)?;
            let h = self.norm(tape, params, x, layer.ln_cross)?;
            let wq = tape.param(params, layer.cross_attn.wq);
            let wo = tape.param(params, layer.cross_attn.wo);
            let q = tape.matmul(h, wq)?;
            let o = tape.attention(q, k, v, self.config.n_heads, Some(&cache.keep), false)?;
            let c = tape.matmul(o, wo)?;
            x = self.residual(tape, x, c, &mut rng)?;
            let h = self.norm(tape, params, x, layer.ln_ffn)?;
            let f = self.ffn(tape, params, layer.ffn, h)?;
            x = self.residual(tape, x, f, &mut rng)?;
        }
        let hidden = self.norm(tape, params, x, self.dec_norm)?;
        let table = tape.param(params, self.tok_emb);
        let logits = tape.matmul_nt(hidden, table)?;
        Ok(DecoderOutput { hidden, logits })
    }

    /// Names of every tensor this transformer owns, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.enc_pos, self.dec_pos];
        let norm = |n: &Norm| [n.gain, n.bias];
        let attn = |a: &Attn| [a.wq, a.wk, a.wv, a.wo];
        for l in &self.enc_layers {
            ids.extend(norm(&l.ln_attn));
            ids.extend(attn(&l.attn));
            ids.extend(norm(&l.ln_ffn));
            ids.extend([l.ffn.w1, l.ffn.w2]);
        }
        ids.extend(norm(&self.enc_norm));
        for l in &self.dec_layers {
            ids.extend(norm(&l.ln_self));
            ids.extend(attn(&l.self_attn));
            ids.extend(norm(&l.ln_cross));
            ids.extend(attn(&l.cross_attn));
            ids.extend(norm(&l.ln_ffn));
            ids.extend([l.ffn.w1, l.ffn.w2]);
        }
        ids.extend(norm(&self.dec_norm));
        ids
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn tiny(vocab: usize, heads: usize, enc: usize, dec: usize) -> (Transformer, ParamSet) {
        let cfg = TransformerConfig {
            vocab_size: vocab,
            d_model: 16,
            n_heads: heads,
            n_enc_layers: enc,
            n_dec_layers: dec,
            d_ff: 24,
            max_positions: 32,
            dropout: 0.0,
        };
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Transformer::init(cfg, &mut ps, &mut rng).unwrap();
        // Larger weights than the 0.02 init make position/causality effects visible.
        for id in ps.ids().collect::<Vec<_>>() {
            if ps.name(id).ends_with(".g") || ps.name(id).ends_with(".b") {
                continue;
            }
            ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 25.0);
        }
        (t, ps)
    }

    #[test]
    fn encode_shape() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let mut tape = Tape::new();
        let ids = [1, 5, 6, 7, 8, 9, 10, 2];
        let out = t.encode(&mut tape, &ps, &ids, &[false; 8], None).unwrap();
        assert_eq!(tape.value(out.states).shape(), &[8, 16]);
    }

    #[test]
    fn appended_pads_leave_states_unchanged() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let mut tape = Tape::new();
        let base = t.encode(&mut tape, &ps, &[1, 5, 6, 2], &[false; 4], None).unwrap();
        let padded = t
            .encode(&mut tape, &ps, &[1, 5, 6, 2, 0, 0, 0], &[false, false, false, false, true, true, true], None)
            .unwrap();
        let a = tape.value(base.states).data().to_vec();
        let b = &tape.value(padded.states).data()[..a.len()];
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let mut tape = Tape::new();
        let a = t.encode(&mut tape, &ps, &[1, 5, 6, 2], &[false; 4], None).unwrap();
        let b = t.encode(&mut tape, &ps, &[1, 6, 5, 2], &[false; 4], None).unwrap();
        let (ra, rb) = (tape.value(a.states).row(0).to_vec(), tape.value(b.states).row(0).to_vec());
        assert!(ra.iter().zip(&rb).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn decoder_is_causal() {
        for (heads, layers) in [(1, 1), (2, 2), (4, 3)] {
            let (t, ps) = tiny(20, heads, 1, layers);
            let mut tape = Tape::new();
            let enc = t.encode(&mut tape, &ps, &[1, 7, 8, 2], &[false; 4], None).unwrap();
            let a = t.decode(&mut tape, &ps, &[1, 4, 5, 6, 7], &enc, None).unwrap();
            let b = t.decode(&mut tape, &ps, &[1, 4, 5, 11, 12], &enc, None).unwrap();
            let (la, lb) = (tape.value(a.logits), tape.value(b.logits));
            for pos in 0..3 {
                for (x, y) in la.row(pos).iter().zip(lb.row(pos)) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
            assert!(la.row(4).iter().zip(lb.row(4)).any(|(x, y)| (x - y).abs() > 1e-9));
        }
    }

    #[test]
    fn sos_only_decoder_gives_one_row() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let mut tape = Tape::new();
        let enc = t.encode(&mut tape, &ps, &[1, 7, 2], &[false; 3], None).unwrap();
        let out = t.decode(&mut tape, &ps, &[1], &enc, None).unwrap();
        assert_eq!(tape.value(out.hidden).shape(), &[1, 16]);
        assert_eq!(tape.value(out.logits).shape(), &[1, 20]);
    }

    #[test]
    fn masked_cross_position_equals_deleted() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let mut tape = Tape::new();
        let full = t.encode(&mut tape, &ps, &[1, 7, 8, 9, 2], &[false; 5], None).unwrap();
        let masked = EncoderOutput {
            states: full.states,
            pad: vec![false, false, true, false, false],
        };
        let kept = [0usize, 1, 3, 4];
        let rows: Vec<Var> = kept.iter().map(|&r| tape.slice_rows(full.states, r, 1).unwrap()).collect();
        let deleted = EncoderOutput {
            states: tape.concat_rows(&rows).unwrap(),
            pad: vec![false; 4],
        };
        let a = t.decode(&mut tape, &ps, &[1, 4, 5], &masked, None).unwrap();
        let b = t.decode(&mut tape, &ps, &[1, 4, 5], &deleted, None).unwrap();
        for (x, y) in tape.value(a.logits).data().iter().zip(tape.value(b.logits).data()) {
            assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn param_count_matches_formula() {
        for (vocab, enc, dec) in [(20, 2, 2), (37, 1, 3), (11, 0, 1)] {
            let (t, ps) = tiny(vocab, 4, enc, dec);
            assert_eq!(ps.num_scalars(), t.config.param_count());
            assert_eq!(t.param_ids().len(), ps.len());
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let (t, ps) = tiny(20, 4, 1, 1);
        let mut tape = Tape::new();
        assert!(t.encode(&mut tape, &ps, &[1, 25], &[false; 2], None).is_err());
        assert!(t.encode(&mut tape, &ps, &[1; 33], &[false; 33], None).is_err());
        let enc = t.encode(&mut tape, &ps, &[1, 2], &[false; 2], None).unwrap();
        assert!(t.decode(&mut tape, &ps, &[], &enc, None).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let (t, ps) = tiny(20, 4, 2, 2);
        let run = || {
            let mut tape = Tape::new();
            let enc = t.encode(&mut tape, &ps, &[1, 7, 8, 2], &[false; 4], None).unwrap();
            let out = t.decode(&mut tape, &ps, &[1, 3], &enc, None).unwrap();
            tape.value(out.logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
