use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use shiftlab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(shiftlab_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn suppress_row_matches_hand_values_and_aliases() {
    let mut row = [0.5, 0.3, 0.2];
    let mask = [0u8, 1, 0];
    let st = unsafe { shiftlab_suppress_row(row.as_ptr(), mask.as_ptr(), 3, 0.5, row.as_mut_ptr()) };
    assert_eq!(st, ShiftlabStatus::Ok);
    let d = 0.85;
    for (got, want) in row.iter().zip([0.5 / d, 0.15 / d, 0.2 / d]) {
        assert!((got - want).abs() < 1e-12);
    }

    let mut out = [0.0; 3];
    let st = unsafe { shiftlab_suppress_row(row.as_ptr(), mask.as_ptr(), 3, 1.5, out.as_mut_ptr()) };
    assert_eq!(st, ShiftlabStatus::InvalidArgument);
    assert!(last_error().contains("lambda"));
}

#[test]
fn kl_and_rouge() {
    let (p, q) = ([0.5, 0.5], [0.25, 0.75]);
    let mut kl = f64::NAN;
    assert_eq!(unsafe { shiftlab_kl(p.as_ptr(), q.as_ptr(), 1, 2, &mut kl) }, ShiftlabStatus::Ok);
    assert!((kl - 0.143841).abs() < 1e-6);
    assert_eq!(unsafe { shiftlab_kl(p.as_ptr(), p.as_ptr(), 1, 2, &mut kl) }, ShiftlabStatus::Ok);
    assert_eq!(kl, 0.0);

    let (c, r) = ([4u32, 5, 6], [4u32, 6]);
    let mut f = f64::NAN;
    assert_eq!(unsafe { shiftlab_rouge_l(c.as_ptr(), 3, r.as_ptr(), 2, &mut f) }, ShiftlabStatus::Ok);
    assert!((f - 0.8).abs() < 1e-12, "{f}");
    assert_eq!(unsafe { shiftlab_rouge_l(c.as_ptr(), 3, ptr::null(), 0, &mut f) }, ShiftlabStatus::InvalidArgument);
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    assert_eq!(unsafe { shiftlab_kl(ptr::null(), ptr::null(), 2, 2, ptr::null_mut()) }, ShiftlabStatus::NullPointer);
    assert!(last_error().contains("null"));
    assert_eq!(unsafe { shiftlab_corpus_generate(0, 12, 2, ptr::null_mut()) }, ShiftlabStatus::NullPointer);
    assert_eq!(unsafe { shiftlab_corpus_vocab_size(ptr::null()) }, 0);
    unsafe {
        shiftlab_corpus_free(ptr::null_mut());
        shiftlab_model_free(ptr::null_mut());
    }
}

#[test]
fn corpus_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { shiftlab_corpus_generate(4, 12, 2, &mut c) }, ShiftlabStatus::Ok);
    let counts: Vec<usize> = [SHIFTLAB_SPLIT_FORGET, SHIFTLAB_SPLIT_NEIGHBOUR, SHIFTLAB_SPLIT_GENERAL]
        .iter()
        .map(|&s| unsafe { shiftlab_corpus_record_count(c, s) })
        .collect();
    assert_eq!(counts.iter().sum::<usize>(), 24);
    assert_eq!(unsafe { shiftlab_corpus_record_count(c, 7) }, 0);

    let path = cpath(&dir.path().join("c.txt"));
    assert_eq!(unsafe { shiftlab_corpus_save(c, path.as_ptr()) }, ShiftlabStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { shiftlab_corpus_load(path.as_ptr(), &mut back) }, ShiftlabStatus::Ok);
    assert_eq!(unsafe { shiftlab_corpus_vocab_size(back) }, unsafe { shiftlab_corpus_vocab_size(c) });

    let mut m = ptr::null_mut();
    let missing = cpath(&dir.path().join("none.safetensors"));
    assert_eq!(unsafe { shiftlab_model_load(missing.as_ptr(), &mut m) }, ShiftlabStatus::Io);
    assert!(last_error().contains("none.safetensors"));
    assert!(m.is_null());

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { shiftlab_corpus_generate(0, 0, 2, &mut bad) }, ShiftlabStatus::InvalidArgument);
    unsafe {
        shiftlab_corpus_free(c);
        shiftlab_corpus_free(back);
    }
}

#[test]
fn model_metrics_agree_with_the_library() {
    use shiftlab::model::checkpoint::Checkpoint;
    use shiftlab::model::{ModelConfig, Parameters};

    let dir = tempfile::tempdir().unwrap();
    let corpus = shiftlab::corpus::generate_corpus(2, 12, 2).unwrap();
    let mut cfg = ModelConfig::new(corpus.vocab.len());
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_model = 16;
    cfg.max_seq = 32;
    let params = Parameters::init(&cfg, 0).unwrap();
    let ck_path = dir.path().join("m.safetensors");
    Checkpoint::new(params, corpus.hash()).save(&ck_path).unwrap();
    let corpus_path = dir.path().join("c.txt");
    corpus.save(&corpus_path).unwrap();

    let (mut c, mut m) = (ptr::null_mut(), ptr::null_mut());
    unsafe {
        assert_eq!(shiftlab_corpus_load(cpath(&corpus_path).as_ptr(), &mut c), ShiftlabStatus::Ok);
        assert_eq!(shiftlab_model_load(cpath(&ck_path).as_ptr(), &mut m), ShiftlabStatus::Ok);
        assert_eq!(shiftlab_model_has_adapters(m), 0);

        let mut em = f64::NAN;
        assert_eq!(shiftlab_model_exact_match(m, c, SHIFTLAB_SPLIT_FORGET, &mut em), ShiftlabStatus::Ok);
        assert!((0.0..=1.0).contains(&em));
        let mut metrics = ShiftlabSplitMetrics::default();
        assert_eq!(shiftlab_model_evaluate(m, c, SHIFTLAB_SPLIT_FORGET, 5, 10, &mut metrics), ShiftlabStatus::Ok);
        assert_eq!(metrics.records, shiftlab_corpus_record_count(c, SHIFTLAB_SPLIT_FORGET));
        assert_eq!(metrics.exact_match, em);
        assert_eq!(
            shiftlab_model_evaluate(m, c, SHIFTLAB_SPLIT_FORGET, 0, 10, &mut metrics),
            ShiftlabStatus::InvalidArgument
        );

        // a different corpus is refused
        let mut other = ptr::null_mut();
        assert_eq!(shiftlab_corpus_generate(9, 12, 2, &mut other), ShiftlabStatus::Ok);
        assert_eq!(
            shiftlab_model_exact_match(m, other, SHIFTLAB_SPLIT_FORGET, &mut em),
            ShiftlabStatus::InvalidArgument
        );
        assert!(last_error().contains("different corpus"));
        shiftlab_corpus_free(other);
        shiftlab_corpus_free(c);
        shiftlab_model_free(m);
    }
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include/shiftlab.h")
}

#[test]
fn header_declares_the_whole_surface() {
    let h = std::fs::read_to_string(header()).unwrap();
    for name in [
        "shiftlab_last_error",
        "shiftlab_version",
        "shiftlab_corpus_generate",
        "shiftlab_corpus_load",
        "shiftlab_corpus_save",
        "shiftlab_corpus_vocab_size",
        "shiftlab_corpus_record_count",
        "shiftlab_corpus_free",
        "shiftlab_model_load",
        "shiftlab_model_has_adapters",
        "shiftlab_model_free",
        "shiftlab_model_exact_match",
        "shiftlab_model_evaluate",
        "shiftlab_suppress_row",
        "shiftlab_kl",
        "shiftlab_rouge_l",
        "SHIFTLAB_STATUS_OK = 0",
        "typedef struct ShiftlabCorpus ShiftlabCorpus",
    ] {
        assert!(h.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found, skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        r#"#include "shiftlab.h"
int main(void) {
    ShiftlabCorpus *c = NULL;
    double kl = 0.0, p[2] = {0.5, 0.5};
    if (shiftlab_corpus_generate(0, 12, 2, &c) != SHIFTLAB_STATUS_OK) return 1;
    shiftlab_corpus_free(c);
    return shiftlab_kl(p, p, 1, 2, &kl) == SHIFTLAB_STATUS_OK ? 0 : 1;
}
"#,
    )
    .unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let status = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
