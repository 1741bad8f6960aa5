use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use embsum::ctr::{gated_score_values, train, TrainConfig};
use embsum::embstore::{precompute_dataset_cpe, precompute_dataset_upe, score_offline};
use embsum::minilm::TransformerConfig;
use embsum::model::ModelConfig;
use embsum::textdata::{synth_generate, DataOptions, Dataset, Split, SynthConfig};
use embsum_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    data: Dataset,
    ck: PathBuf,
    upe: PathBuf,
    cpe: PathBuf,
}

fn fixture() -> Fixture {
    let sc = SynthConfig {
        n_users: 16,
        n_items: 30,
        n_topics: 4,
        k_history: 4,
        title_len: 3,
        abstract_len: 3,
        impressions_per_user: 1,
        seed: 2,
        ..SynthConfig::default()
    };
    let data = Dataset::from_synth(&synth_generate(&sc).unwrap(), &DataOptions::default(), None).unwrap();
    let model = ModelConfig {
        transformer: TransformerConfig {
            d_model: 16,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            d_ff: 32,
            max_positions: 128,
            ..TransformerConfig::default()
        },
        upe_codes: 3,
        cpe_codes: 2,
        code_dim: 8,
        k_history: 4,
        items_per_session: 2,
        max_summary_len: 6,
        session_max_tokens: 120,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        model,
        epochs: 1,
        batch_size: Some(8),
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.embm");
    let out = train(&data, &cfg, Some(&ck), None).unwrap();
    let upe = dir.path().join("u.embs");
    let cpe = dir.path().join("c.embs");
    precompute_dataset_upe(&out.model, &out.params, &data, None).unwrap().write(&upe).unwrap();
    precompute_dataset_cpe(&out.model, &out.params, &data).unwrap().write(&cpe).unwrap();
    Fixture {
        _dir: dir,
        data,
        ck,
        upe,
        cpe,
    }
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(embsum_last_error_message()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn load(p: &Path) -> *mut EmbsumModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { embsum_model_load(cpath(p).as_ptr(), &mut m) }, EmbsumStatus::Ok);
    m
}

fn open(p: &Path) -> *mut EmbsumStore {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { embsum_store_open(cpath(p).as_ptr(), &mut s) }, EmbsumStatus::Ok);
    s
}

#[test]
fn model_embeddings_and_scores_match_library() {
    let fx = fixture();
    let (model, params, _) = embsum::model::EmbSum::load(&fx.ck).unwrap();
    let m = load(&fx.ck);
    let (mut d, mut mu, mut n) = (0, 0, 0);
    assert_eq!(unsafe { embsum_model_dims(m, &mut d, &mut mu, &mut n) }, EmbsumStatus::Ok);
    assert_eq!((d, mu, n), (16, 3, 2));

    let item = &fx.data.items[0];
    let mut cpe = vec![0.0; n * d];
    let st = unsafe { embsum_model_item_cpe(m, item.token_ids.as_ptr(), item.token_ids.len(), cpe.as_mut_ptr(), cpe.len()) };
    assert_eq!(st, EmbsumStatus::Ok);
    let lib = embsum::candmodel::infer_cpe(&model, &params, &item.token_ids).unwrap();
    assert_eq!(cpe, lib.data());

    let mut small = vec![0.0; 3];
    let st = unsafe { embsum_model_item_cpe(m, item.token_ids.as_ptr(), item.token_ids.len(), small.as_mut_ptr(), small.len()) };
    assert_eq!(st, EmbsumStatus::BufferTooSmall);
    assert!(last_error().contains("needed"));

    let text = CString::new(item.formatted.clone()).unwrap();
    let mut ids = vec![0u32; 64];
    let mut len = 0;
    let st = unsafe { embsum_model_tokenize(m, text.as_ptr(), ids.as_mut_ptr(), ids.len(), &mut len) };
    assert_eq!(st, EmbsumStatus::Ok);
    assert_eq!(ids[0], embsum::textdata::SOS);
    assert_eq!(ids[len - 1], embsum::textdata::EOS);

    let user = fx.data.split_users(Split::Train)[0].to_string();
    let hist = fx.data.history_tokens(&user, 4).unwrap();
    let flat: Vec<u32> = hist.iter().flat_map(|t| t.iter().copied()).collect();
    let lens: Vec<usize> = hist.iter().map(|t| t.len()).collect();
    let mut upe = vec![0.0; mu * d];
    let st = unsafe { embsum_model_user_upe(m, flat.as_ptr(), lens.as_ptr(), lens.len(), upe.as_mut_ptr(), upe.len()) };
    assert_eq!(st, EmbsumStatus::Ok, "{}", last_error());
    let store = embsum::embstore::EmbeddingFile::read(&fx.upe).unwrap();
    assert_eq!(upe, store.get(&user).unwrap().data());

    let st = unsafe { embsum_model_user_upe(m, ptr::null(), ptr::null(), 0, upe.as_mut_ptr(), upe.len()) };
    assert_eq!(st, EmbsumStatus::Ok, "cold start: {}", last_error());

    let mut s = 0.0;
    assert_eq!(unsafe { embsum_score(m, upe.as_ptr(), upe.len(), cpe.as_ptr(), cpe.len(), &mut s) }, EmbsumStatus::Ok);
    let a = embsum::numerics::Tensor::new(vec![mu, d], upe.clone()).unwrap();
    let expect = gated_score_values(&a, &lib, params.get(model.head_ws)).unwrap().s;
    assert_eq!(s, expect);
    assert_eq!(unsafe { embsum_score(m, upe.as_ptr(), 5, cpe.as_ptr(), cpe.len(), &mut s) }, EmbsumStatus::Dimension);

    let bad = [embsum::textdata::SOS, 1_000_000];
    let st = unsafe { embsum_model_item_cpe(m, bad.as_ptr(), 2, cpe.as_mut_ptr(), cpe.len()) };
    assert_eq!(st, EmbsumStatus::InvalidArgument);
    unsafe { embsum_model_free(m) };
}

#[test]
fn stores_and_offline_ranking() {
    let fx = fixture();
    let m = load(&fx.ck);
    let u = open(&fx.upe);
    let c = open(&fx.cpe);
    let (mut count, mut kind, mut codes, mut d) = (0, 9u8, 0, 0);
    assert_eq!(unsafe { embsum_store_info(c, &mut count, &mut kind, &mut codes, &mut d) }, EmbsumStatus::Ok);
    assert_eq!((count, kind, codes, d), (fx.data.items.len(), 0, 2, 16));
    assert_eq!(unsafe { embsum_store_info(u, &mut count, &mut kind, &mut codes, &mut d) }, EmbsumStatus::Ok);
    assert_eq!((kind, codes), (1, 3));

    let id = CString::new(fx.data.items[3].id.clone()).unwrap();
    let mut buf = vec![0.0; 32];
    assert_eq!(unsafe { embsum_store_get(c, id.as_ptr(), buf.as_mut_ptr(), buf.len()) }, EmbsumStatus::Ok);
    let missing = CString::new("nope").unwrap();
    assert_eq!(unsafe { embsum_store_get(c, missing.as_ptr(), buf.as_mut_ptr(), buf.len()) }, EmbsumStatus::UnknownId);

    let user = fx.data.users.keys().next().unwrap().clone();
    let cands: Vec<CString> = fx.data.items[..6].iter().map(|i| CString::new(i.id.clone()).unwrap()).collect();
    let ptrs: Vec<*const std::ffi::c_char> = cands.iter().map(|c| c.as_ptr()).collect();
    let cuser = CString::new(user.clone()).unwrap();
    let mut order = vec![0usize; 6];
    let mut scores = vec![0.0; 6];
    let st = unsafe { embsum_score_offline(m, u, c, cuser.as_ptr(), ptrs.as_ptr(), 6, order.as_mut_ptr(), scores.as_mut_ptr()) };
    assert_eq!(st, EmbsumStatus::Ok, "{}", last_error());

    let upes = embsum::embstore::EmbeddingFile::read(&fx.upe).unwrap();
    let cpes = embsum::embstore::EmbeddingFile::read(&fx.cpe).unwrap();
    let w = embsum::embstore::load_head(&fx.ck).unwrap();
    let ids: Vec<&str> = fx.data.items[..6].iter().map(|i| i.id.as_str()).collect();
    let lib = score_offline(&upes, &cpes, &w, &user, &ids, None).unwrap();
    for (k, (id, s)) in lib.iter().enumerate() {
        assert_eq!(ids[order[k]], id);
        assert_eq!(scores[k], *s);
    }
    let st = unsafe { embsum_score_offline(m, c, u, cuser.as_ptr(), ptrs.as_ptr(), 6, order.as_mut_ptr(), scores.as_mut_ptr()) };
    assert_eq!(st, EmbsumStatus::InvalidArgument);
    unsafe {
        embsum_store_free(u);
        embsum_store_free(c);
        embsum_model_free(m);
    }
}

#[test]
fn errors_are_reported() {
    let mut m = ptr::null_mut();
    let p = CString::new("/definitely/not/here.embm").unwrap();
    assert_eq!(unsafe { embsum_model_load(p.as_ptr(), &mut m) }, EmbsumStatus::Io);
    assert!(m.is_null());
    assert!(last_error().contains("not/here"));
    assert_eq!(unsafe { embsum_model_load(ptr::null(), &mut m) }, EmbsumStatus::NullArgument);
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.embs");
    std::fs::write(&junk, b"EMBSxxxx").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { embsum_store_open(cpath(&junk).as_ptr(), &mut s) }, EmbsumStatus::Format);
    let mut d = 0;
    assert_eq!(unsafe { embsum_model_dims(ptr::null(), &mut d, &mut d, &mut d) }, EmbsumStatus::NullArgument);
    unsafe {
        embsum_model_free(ptr::null_mut());
        embsum_store_free(ptr::null_mut());
    }
}

#[test]
fn auc_entry_point() {
    let scores = [0.9, 0.1, 0.5, 0.5];
    let labels = [1u8, 0, 1, 0];
    let mut v = 0.0;
    assert_eq!(unsafe { embsum_auc(scores.as_ptr(), labels.as_ptr(), 4, &mut v) }, EmbsumStatus::Ok);
    assert_eq!(v, embsum::metrics::auc(&scores, &labels).unwrap());
    assert_eq!(v, 0.875);
    assert_eq!(last_error(), "");
    let same = [1u8; 4];
    assert_eq!(unsafe { embsum_auc(scores.as_ptr(), same.as_ptr(), 4, &mut v) }, EmbsumStatus::Undefined);
    let bad = [2u8, 0, 0, 0];
    assert_eq!(unsafe { embsum_auc(scores.as_ptr(), bad.as_ptr(), 4, &mut v) }, EmbsumStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/embsum.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12);
    for f in exports {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct EmbsumModel EmbsumModel;"));
    assert!(header.contains("EMBSUM_STATUS_OK = 0"));
}

/// Compiles and runs a C program against the header and the static library.
#[test]
fn c_program_links_against_header() {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    let lib_dir = deps.parent().unwrap();
    let lib = lib_dir.join("libembsum_ffi.a");
    if !lib.exists() || std::process::Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: static library or C compiler unavailable");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("smoke.c");
    std::fs::write(
        &c,
        r#"
#include <stdio.h>
#include <string.h>
#include "embsum.h"
int main(void) {
    double s[3] = {0.2, 0.9, 0.4};
    uint8_t l[3] = {0, 1, 0};
    double auc = 0.0;
    if (embsum_auc(s, l, 3, &auc) != EMBSUM_STATUS_OK || auc != 1.0) return 1;
    EmbsumModel *m = NULL;
    if (embsum_model_load("/missing.embm", &m) != EMBSUM_STATUS_IO) return 2;
    if (strlen(embsum_last_error_message()) == 0) return 3;
    embsum_model_free(m);
    puts("ok");
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("smoke");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let status = std::process::Command::new("cc")
        .arg(&c)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = std::process::Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C smoke exited {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}
