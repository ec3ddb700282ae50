use std::ffi::{CStr, CString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use spa_ffi::*;

const CONFIG: &str = r#"
k = 2
[data]
n_topics = 2
n_per_topic = 20
seq_len = 4
vocab_size = 16
eval_per_topic = 2
[model]
embed_dim = 6
hidden_dim = 8
[attribution]
candidates = 4
[finetune]
steps = 10
[train]
steps = 20
[eval.sampler]
max_len = 4
"#;

fn c(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = spa_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

/// Runs the pipeline through the C entry point and returns the work directory.
fn pipeline(dir: &Path) -> PathBuf {
    let cfg = dir.join("spa.toml");
    fs::write(&cfg, format!("workdir = \"work\"\n{CONFIG}")).unwrap();
    let status = unsafe { spa_pipeline_run(c(&cfg).as_ptr(), 0.0) };
    assert_eq!(status, SpaStatus::Ok, "{}", last_error());
    assert!(spa_last_error_message().is_null());
    dir.join("work")
}

#[test]
fn pass_at_k_and_error_reporting() {
    let mut v = 0.0;
    assert_eq!(unsafe { spa_pass_at_k(5, 1, 1, &mut v) }, SpaStatus::Ok);
    assert!((v - 0.2).abs() < 1e-15);
    assert!(spa_last_error_message().is_null());
    assert_eq!(unsafe { spa_pass_at_k(2, 3, 1, &mut v) }, SpaStatus::Input);
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { spa_pass_at_k(5, 1, 1, ptr::null_mut()) },
        SpaStatus::NullArgument
    );
    assert!(last_error().contains("out_value"));
}

#[test]
fn missing_files_and_null_paths() {
    let mut corpus = ptr::null_mut();
    let missing = CString::new("/nonexistent/vocab.txt").unwrap();
    assert_eq!(
        unsafe { spa_corpus_load(missing.as_ptr(), missing.as_ptr(), &mut corpus) },
        SpaStatus::Io
    );
    assert!(corpus.is_null());
    assert!(last_error().contains("/nonexistent/vocab.txt"));
    assert_eq!(
        unsafe { spa_corpus_load(ptr::null(), missing.as_ptr(), &mut corpus) },
        SpaStatus::NullArgument
    );
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { spa_matrix_load(missing.as_ptr(), &mut m) },
        SpaStatus::Io
    );
    unsafe {
        spa_corpus_free(ptr::null_mut());
        spa_matrix_free(ptr::null_mut());
        spa_adaptations_free(ptr::null_mut());
    }
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "k = 0\n").unwrap();
    assert_eq!(
        unsafe { spa_pipeline_run(c(&cfg).as_ptr(), 0.0) },
        SpaStatus::Config
    );
    assert!(last_error().contains("k"));
}

#[test]
fn handles_over_pipeline_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let work = pipeline(dir.path());
    unsafe {
        let mut corpus = ptr::null_mut();
        let status = spa_corpus_load(
            c(&work.join("vocab.txt")).as_ptr(),
            c(&work.join("corpus.jsonl")).as_ptr(),
            &mut corpus,
        );
        assert_eq!(status, SpaStatus::Ok, "{}", last_error());
        let mut n = 0;
        assert_eq!(spa_corpus_len(corpus, &mut n), SpaStatus::Ok);
        assert_eq!(n, 40 - 4);
        spa_corpus_free(corpus);

        let mut m = ptr::null_mut();
        let status = spa_matrix_load(
            c(&work.join("attribution-influence-exact.csv")).as_ptr(),
            &mut m,
        );
        assert_eq!(status, SpaStatus::Ok, "{}", last_error());
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(spa_matrix_dims(m, &mut rows, &mut cols), SpaStatus::Ok);
        assert_eq!((rows, cols), (4, n));
        let mut x = f64::NAN;
        assert_eq!(spa_matrix_get(m, 3, cols - 1, &mut x), SpaStatus::Ok);
        assert!(x.is_finite());
        assert_eq!(spa_matrix_get(m, 4, 0, &mut x), SpaStatus::OutOfRange);

        let mut assign = vec![usize::MAX; cols];
        assert_eq!(
            spa_partition_argmax(m, true, assign.as_mut_ptr(), cols),
            SpaStatus::Ok
        );
        assert!(assign.iter().all(|&a| a < rows));
        assert_eq!(
            spa_partition_argmax(m, false, assign.as_mut_ptr(), cols - 1),
            SpaStatus::BufferTooSmall
        );
        spa_matrix_free(m);

        let mut set = ptr::null_mut();
        let status = spa_adaptations_load(
            c(&work.join("base.bin")).as_ptr(),
            c(&work.join("adapt-random")).as_ptr(),
            &mut set,
        );
        assert_eq!(status, SpaStatus::Ok, "{}", last_error());
        let mut k = 0;
        assert_eq!(spa_adaptations_count(set, &mut k), SpaStatus::Ok);
        assert_eq!(k, 2);
        let prompt = [1usize, 2];
        let mut toks = [0usize; 6];
        let mut len = 0;
        let gen = |seed, toks: &mut [usize; 6], len: &mut usize| {
            spa_adaptations_generate(
                set,
                1,
                prompt.as_ptr(),
                2,
                6,
                0.0,
                -1,
                seed,
                toks.as_mut_ptr(),
                6,
                len,
            )
        };
        assert_eq!(gen(0, &mut toks, &mut len), SpaStatus::Ok);
        assert_eq!(len, 6);
        assert!(toks.iter().all(|&t| t < 16));
        let mut again = [0usize; 6];
        assert_eq!(gen(9, &mut again, &mut len), SpaStatus::Ok);
        assert_eq!(toks, again, "greedy decoding ignores the seed");
        assert_eq!(
            spa_adaptations_generate(
                set,
                2,
                prompt.as_ptr(),
                2,
                6,
                0.0,
                -1,
                0,
                toks.as_mut_ptr(),
                6,
                &mut len
            ),
            SpaStatus::OutOfRange
        );
        assert_eq!(
            spa_adaptations_generate(
                set,
                0,
                ptr::null(),
                0,
                6,
                0.0,
                -1,
                0,
                toks.as_mut_ptr(),
                6,
                &mut len
            ),
            SpaStatus::Ok
        );
        let bad = [99usize];
        assert_ne!(
            spa_adaptations_generate(
                set,
                0,
                bad.as_ptr(),
                1,
                6,
                0.0,
                -1,
                0,
                toks.as_mut_ptr(),
                6,
                &mut len
            ),
            SpaStatus::Ok
        );
        spa_adaptations_free(set);

        let mut wrong = ptr::null_mut();
        let other = tempfile::tempdir().unwrap();
        let cfg = other.path().join("spa.toml");
        fs::write(&cfg, format!("seed = 9\nworkdir = \"work\"\n{CONFIG}")).unwrap();
        assert_eq!(spa_pipeline_run(c(&cfg).as_ptr(), 0.0), SpaStatus::Ok);
        let status = spa_adaptations_load(
            c(&other.path().join("work/base.bin")).as_ptr(),
            c(&work.join("adapt-random")).as_ptr(),
            &mut wrong,
        );
        assert_eq!(status, SpaStatus::Version);
        assert!(wrong.is_null());
    }
}

/// Directory holding the static library built alongside this test.
// the archive cargo builds next to this test binary; the copy one level up is
// only refreshed by `cargo build` and can be stale
fn artifact_dir() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let deps = exe.parent()?;
    deps.join("libspa_ffi.a")
        .exists()
        .then(|| deps.to_path_buf())
}

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("spa.h").exists());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    fs::write(
        &src,
        r#"#include <stdio.h>
#include "spa.h"
int main(void) {
    double v = 0.0;
    if (spa_pass_at_k(4, 2, 2, &v) != SPA_STATUS_OK) return 1;
    if (v < 0.8333 || v > 0.8334) return 2;
    if (spa_pass_at_k(1, 2, 1, &v) != SPA_STATUS_INPUT) return 3;
    if (spa_last_error_message() == NULL) return 4;
    SpaMatrix *m = NULL;
    if (spa_matrix_load("/nonexistent.csv", &m) != SPA_STATUS_IO || m != NULL) return 5;
    printf("ok\n");
    return 0;
}
"#,
    )
    .unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let Some(lib) = artifact_dir() else {
        let status = Command::new(&cc)
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(&include)
            .arg(&src)
            .status()
            .unwrap();
        assert!(status.success());
        return;
    };
    let exe = dir.path().join("smoke");
    let status = Command::new(&cc)
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(lib.join("libspa_ffi.a"))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "compiling the C smoke test failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout), "ok\n");
}
