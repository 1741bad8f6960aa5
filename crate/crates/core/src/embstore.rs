//! Precomputed CPE/UPE files and scoring from stored embeddings.
//!
//! File layout, little-endian: `"EMBS"`, `u32` version, `u8` kind (0 = CPE,
//! 1 = UPE), `u32` codes, `u32` d, `u64` count, then per record a `u32`-length
//! UTF-8 id and `codes × d` `f64` values.

use std::collections::HashMap;
use std::path::Path;

use crate::candmodel::infer_cpe;
use crate::ctr::gated_score_values;
use crate::error::{Error, Result};
use crate::minilm::checkpoint::{self, Cursor};
use crate::model::{EmbSum, GlobalMode, UserInput};
use crate::numerics::{ParamSet, Tensor};
use crate::textdata::{Dataset, Split};
use crate::usermodel::infer_upe_with;

const MAGIC: &[u8; 4] = b"EMBS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Cpe = 0,
    Upe = 1,
}

impl EmbeddingKind {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            0 => Ok(EmbeddingKind::Cpe),
            1 => Ok(EmbeddingKind::Upe),
            _ => Err(Error::Format(format!("unknown embedding kind {b}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    kind: EmbeddingKind,
    num_codes: usize,
    d: usize,
    ids: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl EmbeddingFile {
    pub fn new(kind: EmbeddingKind, num_codes: usize, d: usize) -> Self {
        EmbeddingFile {
            kind,
            num_codes,
            d,
            ids: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn num_codes(&self) -> usize {
        self.num_codes
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&Tensor> {
        self.index.get(id).map(|&i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.ids.iter().map(String::as_str).zip(&self.values)
    }

    pub fn push(&mut self, id: impl Into<String>, value: Tensor) -> Result<()> {
        let id = id.into();
        if value.shape() != [self.num_codes, self.d] {
            return Err(Error::dim(format!(
                "embedding for {id} has shape {:?}, file holds {}x{}",
                value.shape(),
                self.num_codes,
                self.d
            )));
        }
        if self.index.contains_key(&id) {
            return Err(Error::config(format!("duplicate id {id}")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.values.push(value);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let u32_of = |n: usize| u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")));
        let mut buf = Vec::with_capacity(25 + self.len() * (8 + self.num_codes * self.d * 8));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.push(self.kind as u8);
        buf.extend_from_slice(&u32_of(self.num_codes)?.to_le_bytes());
        buf.extend_from_slice(&u32_of(self.d)?.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, t) in self.iter() {
            buf.extend_from_slice(&u32_of(id.len())?.to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4)? != MAGIC {
            return Err(Error::Format("not an embedding file".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let kind = EmbeddingKind::from_u8(c.u8()?)?;
        let num_codes = c.u32()? as usize;
        let d = c.u32()? as usize;
        let count = c.u64()?;
        let mut file = EmbeddingFile::new(kind, num_codes, d);
        for _ in 0..count {
            let id = c.string()?;
            let data = (0..num_codes * d).map(|_| c.f64()).collect::<Result<Vec<f64>>>()?;
            file.push(id, Tensor::new(vec![num_codes, d], data)?)
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        if !c.is_done() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(file)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn precompute_cpe<'a>(
    model: &EmbSum,
    params: &ParamSet,
    items: impl IntoIterator<Item = (&'a str, &'a [u32])>,
) -> Result<EmbeddingFile> {
    let mut file = EmbeddingFile::new(EmbeddingKind::Cpe, model.config.effective_cpe_codes(), model.d_model());
    for (id, ids) in items {
        if file.get(id).is_some() {
            return Err(Error::config(format!("duplicate id {id}")));
        }
        file.push(id, infer_cpe(model, params, ids)?)?;
    }
    Ok(file)
}

/// UPEs with the greedily generated global representation.
pub fn precompute_upe<'a>(
    model: &EmbSum,
    params: &ParamSet,
    users: impl IntoIterator<Item = (&'a str, &'a UserInput)>,
) -> Result<EmbeddingFile> {
    let mut file = EmbeddingFile::new(EmbeddingKind::Upe, model.config.effective_upe_codes(), model.d_model());
    for (id, input) in users {
        if file.get(id).is_some() {
            return Err(Error::config(format!("duplicate id {id}")));
        }
        let (upe, _) = infer_upe_with(model, params, input, GlobalMode::InferGenerate)?;
        file.push(id, upe)?;
    }
    Ok(file)
}

/// Every item in the dataset, in id order.
pub fn precompute_dataset_cpe(model: &EmbSum, params: &ParamSet, data: &Dataset) -> Result<EmbeddingFile> {
    precompute_cpe(model, params, data.items.iter().map(|it| (it.id.as_str(), it.token_ids.as_slice())))
}

/// Users of one split, or all users.
pub fn precompute_dataset_upe(model: &EmbSum, params: &ParamSet, data: &Dataset, split: Option<Split>) -> Result<EmbeddingFile> {
    let ids: Vec<String> = match split {
        Some(s) => data.split_users(s).into_iter().map(str::to_string).collect(),
        None => data.users.keys().cloned().collect(),
    };
    let inputs = ids
        .iter()
        .map(|u| model.user_input(data, u))
        .collect::<Result<Vec<_>>>()?;
    precompute_upe(model, params, ids.iter().map(String::as_str).zip(&inputs))
}

/// `W_s` from a checkpoint, without building the model.
pub fn load_head(path: &Path) -> Result<Tensor> {
    let (_, tensors) = checkpoint::load(path)?;
    tensors
        .into_iter()
        .find(|(name, _)| name == "head.w_s")
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Format(format!("{} has no head.w_s tensor", path.display())))
}

/// Ranks candidates for a user from stored embeddings: descending score,
/// ties by id; `top_k` truncates.
pub fn score_offline(
    upes: &EmbeddingFile,
    cpes: &EmbeddingFile,
    w_s: &Tensor,
    user_id: &str,
    candidate_ids: &[&str],
    top_k: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    if upes.kind() != EmbeddingKind::Upe || cpes.kind() != EmbeddingKind::Cpe {
        return Err(Error::config("expected a UPE file and a CPE file"));
    }
    if upes.d() != cpes.d() || w_s.shape() != [upes.d(), upes.d()] {
        return Err(Error::dim(format!(
            "UPE d {}, CPE d {} and W_s {:?} disagree",
            upes.d(),
            cpes.d(),
            w_s.shape()
        )));
    }
    let upe = upes
        .get(user_id)
        .ok_or_else(|| Error::UnknownId(format!("user {user_id}")))?;
    let mut ranked = candidate_ids
        .iter()
        .map(|&id| {
            let cpe = cpes.get(id).ok_or_else(|| Error::UnknownId(format!("item {id}")))?;
            Ok((id.to_string(), gated_score_values(upe, cpe, w_s)?.s))
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(k) = top_k {
        ranked.truncate(k);
    }
    Ok(ranked)
}
