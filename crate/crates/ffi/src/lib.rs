//! C ABI for loading EmbSum checkpoints, computing embeddings and scoring.
//!
//! Every function returns an [`EmbsumStatus`]. On failure the message is
//! available from [`embsum_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Output buffers are
//! caller-owned; functions writing embeddings take the buffer capacity in
//! `f64` elements and fail with `EMBSUM_STATUS_BUFFER_TOO_SMALL` when it is short.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use embsum::ctr::gated_score_values;
use embsum::embstore::{EmbeddingFile, EmbeddingKind};
use embsum::metrics::auc;
use embsum::model::{EmbSum, GlobalMode, UserInput};
use embsum::numerics::{ParamSet, Tensor};
use embsum::textdata::{build_sessions, Vocab, EOS, SOS};
use embsum::{candmodel, usermodel, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbsumStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    UnknownId = 5,
    Dimension = 6,
    BufferTooSmall = 7,
    Undefined = 8,
    Panic = 9,
    Internal = 10,
}

/// A loaded checkpoint: model, parameters and vocabulary.
pub struct EmbsumModel {
    model: EmbSum,
    params: ParamSet,
    vocab: Vocab,
}

/// A read-only embedding file.
pub struct EmbsumStore {
    file: EmbeddingFile,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(EmbsumStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => EmbsumStatus::Io,
            Error::Format(_) | Error::Parse { .. } | Error::Json(_) => EmbsumStatus::Format,
            Error::UnknownId(_) => EmbsumStatus::UnknownId,
            Error::Dimension(_) => EmbsumStatus::Dimension,
            Error::Config(_) | Error::ColdStart(_) => EmbsumStatus::InvalidArgument,
            _ => EmbsumStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: EmbsumStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> EmbsumStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error("");
            EmbsumStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside embsum");
            EmbsumStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(EmbsumStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(EmbsumStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(EmbsumStatus::NullArgument, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(EmbsumStatus::NullArgument, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(EmbsumStatus::NullArgument, format!("{what} is null")))
}

unsafe fn write_tensor(t: &Tensor, out: *mut f64, capacity: usize) -> Result<(), Failure> {
    let data = t.data();
    if capacity < data.len() {
        return Err(fail(
            EmbsumStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", data.len()),
        ));
    }
    if out.is_null() {
        return Err(fail(EmbsumStatus::NullArgument, "output buffer is null"));
    }
    std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next embsum call on the same thread.
#[no_mangle]
pub extern "C" fn embsum_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_load(path: *const c_char, out: *mut *mut EmbsumModel) -> EmbsumStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let (model, params, vocab) = EmbSum::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(EmbsumModel { model, params, vocab }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `embsum_model_load` and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_free(model: *mut EmbsumModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model width `d`, user codes `m` and candidate codes `n` (1 under the SOS ablation).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_dims(
    model: *const EmbsumModel,
    d: *mut usize,
    upe_codes: *mut usize,
    cpe_codes: *mut usize,
) -> EmbsumStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.model;
        *out_arg(d, "d")? = m.d_model();
        *out_arg(upe_codes, "upe_codes")? = m.config.effective_upe_codes();
        *out_arg(cpe_codes, "cpe_codes")? = m.config.effective_cpe_codes();
        Ok(())
    })
}

/// Tokenizes already formatted item text as `[SOS] tokens [EOS]` with the
/// checkpoint vocabulary. Writes the full length to `out_len` even when
/// `capacity` is too small.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` hold `capacity` ids.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_tokenize(
    model: *const EmbsumModel,
    text: *const c_char,
    out: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> EmbsumStatus {
    guard(|| {
        let h = ref_arg(model, "model")?;
        let text = str_arg(text, "text")?;
        let mut ids = vec![SOS];
        ids.extend(h.vocab.encode(text));
        ids.push(EOS);
        *out_arg(out_len, "out_len")? = ids.len();
        if capacity < ids.len() {
            return Err(fail(EmbsumStatus::BufferTooSmall, format!("buffer holds {capacity} ids, {} needed", ids.len())));
        }
        if out.is_null() {
            return Err(fail(EmbsumStatus::NullArgument, "output buffer is null"));
        }
        std::ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
        Ok(())
    })
}

/// Candidate embedding (`n × d`, row-major) of one tokenized item starting with `[SOS]`.
///
/// # Safety
/// `tokens` must hold `len` ids and `out` room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_item_cpe(
    model: *const EmbsumModel,
    tokens: *const u32,
    len: usize,
    out: *mut f64,
    capacity: usize,
) -> EmbsumStatus {
    guard(|| {
        let h = ref_arg(model, "model")?;
        let ids = slice_arg(tokens, len, "tokens")?;
        check_tokens(h, ids)?;
        let cpe = candmodel::infer_cpe(&h.model, &h.params, ids)?;
        write_tensor(&cpe, out, capacity)
    })
}

fn check_tokens(h: &EmbsumModel, ids: &[u32]) -> Result<(), Failure> {
    let v = h.model.config.transformer.vocab_size;
    match ids.iter().find(|&&t| t as usize >= v) {
        Some(t) => Err(fail(EmbsumStatus::InvalidArgument, format!("token id {t} outside vocabulary of {v}"))),
        None => Ok(()),
    }
}

/// User embedding (`m × d`) from the most recent history items, oldest first.
/// Item `i` occupies `item_lens[i]` ids of `tokens`. Zero items gives the
/// cold-start embedding. Uses greedy summary generation.
///
/// # Safety
/// `tokens` must hold the sum of `item_lens`, `item_lens` `n_items` entries.
#[no_mangle]
pub unsafe extern "C" fn embsum_model_user_upe(
    model: *const EmbsumModel,
    tokens: *const u32,
    item_lens: *const usize,
    n_items: usize,
    out: *mut f64,
    capacity: usize,
) -> EmbsumStatus {
    guard(|| {
        let h = ref_arg(model, "model")?;
        let lens = slice_arg(item_lens, n_items, "item_lens")?;
        let total = lens.iter().try_fold(0usize, |a, &l| a.checked_add(l));
        let total = total.ok_or_else(|| fail(EmbsumStatus::InvalidArgument, "item lengths overflow"))?;
        let all = slice_arg(tokens, total, "tokens")?;
        check_tokens(h, all)?;
        let mut items = Vec::with_capacity(n_items);
        let mut at = 0;
        for &l in lens {
            items.push(all[at..at + l].to_vec());
            at += l;
        }
        let cfg = &h.model.config;
        let k = cfg.k_history;
        let recent = &items[items.len().saturating_sub(k)..];
        let sessions = build_sessions(recent, cfg.effective_items_per_session(), cfg.session_max_tokens)?;
        let input = UserInput { sessions, summary: None };
        let (upe, _) = usermodel::infer_upe_with(&h.model, &h.params, &input, GlobalMode::InferGenerate)?;
        write_tensor(&upe, out, capacity)
    })
}

/// Gated relevance score of a user embedding (`m × d`) and candidate embedding (`n × d`).
///
/// # Safety
/// `upe` must hold `upe_len` and `cpe` `cpe_len` values.
#[no_mangle]
pub unsafe extern "C" fn embsum_score(
    model: *const EmbsumModel,
    upe: *const f64,
    upe_len: usize,
    cpe: *const f64,
    cpe_len: usize,
    out_score: *mut f64,
) -> EmbsumStatus {
    guard(|| {
        let h = ref_arg(model, "model")?;
        let d = h.model.d_model();
        let as_matrix = |p, len, what: &str| -> Result<Tensor, Failure> {
            let v = slice_arg(p, len, what)?;
            if len == 0 || len % d != 0 {
                return Err(fail(EmbsumStatus::Dimension, format!("{what} length {len} is not a positive multiple of d={d}")));
            }
            Ok(Tensor::new(vec![len / d, d], v.to_vec())?)
        };
        let a = as_matrix(upe, upe_len, "upe")?;
        let b = as_matrix(cpe, cpe_len, "cpe")?;
        let s = gated_score_values(&a, &b, h.params.get(h.model.head_ws))?.s;
        *out_arg(out_score, "out_score")? = s;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn embsum_store_open(path: *const c_char, out: *mut *mut EmbsumStore) -> EmbsumStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        let file = EmbeddingFile::read(Path::new(path))?;
        *out = Box::into_raw(Box::new(EmbsumStore { file }));
        Ok(())
    })
}

/// # Safety
/// `store` must come from `embsum_store_open` and not be used afterwards. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn embsum_store_free(store: *mut EmbsumStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Record count, kind (0 = CPE, 1 = UPE), codes per record and width.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn embsum_store_info(
    store: *const EmbsumStore,
    count: *mut usize,
    kind: *mut u8,
    num_codes: *mut usize,
    d: *mut usize,
) -> EmbsumStatus {
    guard(|| {
        let f = &ref_arg(store, "store")?.file;
        *out_arg(count, "count")? = f.len();
        *out_arg(kind, "kind")? = f.kind() as u8;
        *out_arg(num_codes, "num_codes")? = f.num_codes();
        *out_arg(d, "d")? = f.d();
        Ok(())
    })
}

/// Copies the stored embedding of `id`.
///
/// # Safety
/// `id` must be a NUL-terminated string and `out` hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn embsum_store_get(store: *const EmbsumStore, id: *const c_char, out: *mut f64, capacity: usize) -> EmbsumStatus {
    guard(|| {
        let f = &ref_arg(store, "store")?.file;
        let id = str_arg(id, "id")?;
        let t = f
            .get(id)
            .ok_or_else(|| fail(EmbsumStatus::UnknownId, format!("unknown id {id}")))?;
        write_tensor(t, out, capacity)
    })
}

/// Ranks `n` candidates for a user from stored embeddings with the model's head.
/// Writes candidate indices in descending score order (ties by id) and the matching scores.
///
/// # Safety
/// `candidates` must hold `n` NUL-terminated strings; `out_order` and `out_scores` `n` slots.
#[no_mangle]
pub unsafe extern "C" fn embsum_score_offline(
    model: *const EmbsumModel,
    upes: *const EmbsumStore,
    cpes: *const EmbsumStore,
    user_id: *const c_char,
    candidates: *const *const c_char,
    n: usize,
    out_order: *mut usize,
    out_scores: *mut f64,
) -> EmbsumStatus {
    guard(|| {
        let h = ref_arg(model, "model")?;
        let upes = &ref_arg(upes, "upes")?.file;
        let cpes = &ref_arg(cpes, "cpes")?.file;
        if upes.kind() != EmbeddingKind::Upe || cpes.kind() != EmbeddingKind::Cpe {
            return Err(fail(EmbsumStatus::InvalidArgument, "expected a UPE store and a CPE store"));
        }
        let user = str_arg(user_id, "user_id")?;
        let ptrs = slice_arg(candidates, n, "candidates")?;
        let ids = ptrs
            .iter()
            .map(|&p| str_arg(p, "candidate id"))
            .collect::<Result<Vec<&str>, Failure>>()?;
        if n > 0 && (out_order.is_null() || out_scores.is_null()) {
            return Err(fail(EmbsumStatus::NullArgument, "output buffer is null"));
        }
        let w_s = h.params.get(h.model.head_ws);
        let ranked = embsum::embstore::score_offline(upes, cpes, w_s, user, &ids, None)?;
        let mut used = vec![false; n];
        for (slot, (id, s)) in ranked.iter().enumerate() {
            let idx = (0..n)
                .find(|&i| !used[i] && ids[i] == id)
                .ok_or_else(|| fail(EmbsumStatus::Internal, "ranking lost a candidate"))?;
            used[idx] = true;
            *out_order.add(slot) = idx;
            *out_scores.add(slot) = *s;
        }
        Ok(())
    })
}

/// Impression AUC; `EMBSUM_STATUS_UNDEFINED` when all labels are equal.
///
/// # Safety
/// `scores` and `labels` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn embsum_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> EmbsumStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let l = slice_arg(labels, n, "labels")?;
        if l.iter().any(|&x| x > 1) {
            return Err(fail(EmbsumStatus::InvalidArgument, "labels must be 0 or 1"));
        }
        let v = auc(s, l).ok_or_else(|| fail(EmbsumStatus::Undefined, "AUC needs both a positive and a negative"))?;
        *out_arg(out, "out")? = v;
        Ok(())
    })
}
