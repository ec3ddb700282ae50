//! C interface to the spa library.
//!
//! Every function returns a [`SpaStatus`]; on failure the message is kept in
//! thread-local storage and read with [`spa_last_error_message`]. Handles are
//! opaque, created by a `*_load` function and released with the matching
//! `*_free`. Panics never cross the boundary; they surface as
//! [`SpaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spa::adapt::AdaptationSet;
use spa::attribution::AttributionMatrix;
use spa::corpus::{self, Corpus, Vocab};
use spa::model;
use spa::partition::{assign_argmax, normalize_matrix};
use spa::pipeline::{run_sweep, PipelineConfig};
use spa::sample::{generate, SamplerConfig};
use spa::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Vocab = 4,
    Config = 5,
    Input = 6,
    Size = 7,
    Numerical = 8,
    Divergence = 9,
    Version = 10,
    Io = 11,
    BufferTooSmall = 12,
    OutOfRange = 13,
    Panic = 14,
}

/// A training corpus with its vocabulary.
pub struct SpaCorpus {
    corpus: Corpus,
}

/// An attribution matrix with its id maps.
pub struct SpaMatrix {
    matrix: AttributionMatrix,
}

/// A base model with its trained adaptations.
pub struct SpaAdaptationSet {
    set: AdaptationSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: SpaStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::Parse { .. } => SpaStatus::Parse,
            Error::UnknownToken { .. } | Error::Vocab(_) => SpaStatus::Vocab,
            Error::Config(_) => SpaStatus::Config,
            Error::Input(_) => SpaStatus::Input,
            Error::Size(_) => SpaStatus::Size,
            Error::Numerical(_) => SpaStatus::Numerical,
            Error::Divergence { .. } => SpaStatus::Divergence,
            Error::Version { .. } => SpaStatus::Version,
            Error::Io { .. } => SpaStatus::Io,
            Error::Context { .. } => unreachable!("root strips context"),
        };
        Failure {
            status,
            message: e.to_string(),
        }
    }
}

fn fail(status: SpaStatus, message: impl Into<String>) -> Failure {
    Failure {
        status,
        message: message.into(),
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `body`, recording any error or panic as the last error message.
fn guard(body: impl FnOnce() -> Result<(), Failure>) -> SpaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => SpaStatus::Ok,
        Ok(Err(f)) => {
            set_error(f.message);
            f.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SpaStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, name: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(SpaStatus::NullArgument, format!("{name} is null")));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SpaStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| fail(SpaStatus::NullArgument, format!("{name} is null")))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| fail(SpaStatus::NullArgument, format!("{name} is null")))
}

/// Message for the most recent failure on this thread, or null if the last
/// call succeeded. The pointer is valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn spa_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a vocabulary file and a JSONL corpus.
///
/// # Safety
/// Paths must be null or nul-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_corpus_load(
    vocab_path: *const c_char,
    corpus_path: *const c_char,
    out_corpus: *mut *mut SpaCorpus,
) -> SpaStatus {
    guard(|| {
        let slot = out(out_corpus, "out_corpus")?;
        *slot = ptr::null_mut();
        let vocab = Vocab::load(&path_arg(vocab_path, "vocab_path")?)?;
        let corpus = corpus::load_corpus(&path_arg(corpus_path, "corpus_path")?, &vocab)?;
        *slot = Box::into_raw(Box::new(SpaCorpus { corpus }));
        Ok(())
    })
}

/// # Safety
/// `corpus` must come from [`spa_corpus_load`]; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_corpus_len(
    corpus: *const SpaCorpus,
    out_len: *mut usize,
) -> SpaStatus {
    guard(|| {
        *out(out_len, "out_len")? = handle(corpus, "corpus")?.corpus.len();
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or come from [`spa_corpus_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn spa_corpus_free(corpus: *mut SpaCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Loads an attribution matrix file and its id map.
///
/// # Safety
/// `path` must be null or a nul-terminated string; `out_matrix` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn spa_matrix_load(
    path: *const c_char,
    out_matrix: *mut *mut SpaMatrix,
) -> SpaStatus {
    guard(|| {
        let slot = out(out_matrix, "out_matrix")?;
        *slot = ptr::null_mut();
        let matrix = AttributionMatrix::load(&path_arg(path, "path")?)?;
        *slot = Box::into_raw(Box::new(SpaMatrix { matrix }));
        Ok(())
    })
}

/// # Safety
/// `matrix` must come from [`spa_matrix_load`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_matrix_dims(
    matrix: *const SpaMatrix,
    out_queries: *mut usize,
    out_examples: *mut usize,
) -> SpaStatus {
    guard(|| {
        let m = &handle(matrix, "matrix")?.matrix;
        *out(out_queries, "out_queries")? = m.n_queries();
        *out(out_examples, "out_examples")? = m.n_examples();
        Ok(())
    })
}

/// # Safety
/// `matrix` must come from [`spa_matrix_load`]; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_matrix_get(
    matrix: *const SpaMatrix,
    query: usize,
    example: usize,
    out_value: *mut f64,
) -> SpaStatus {
    guard(|| {
        let m = &handle(matrix, "matrix")?.matrix;
        if query >= m.n_queries() || example >= m.n_examples() {
            return Err(fail(
                SpaStatus::OutOfRange,
                format!(
                    "entry ({query}, {example}) outside a {}x{} matrix",
                    m.n_queries(),
                    m.n_examples()
                ),
            ));
        }
        *out(out_value, "out_value")? = m.get(query, example);
        Ok(())
    })
}

/// # Safety
/// `matrix` must be null or come from [`spa_matrix_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn spa_matrix_free(matrix: *mut SpaMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Assigns each example (column) to its highest-scoring query row, ties to
/// the lowest row. With `normalize` set, rows are standardized first.
/// `out_assignments` receives one subset index per example.
///
/// # Safety
/// `matrix` must come from [`spa_matrix_load`]; `out_assignments` must hold
/// `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn spa_partition_argmax(
    matrix: *const SpaMatrix,
    normalize: bool,
    out_assignments: *mut usize,
    capacity: usize,
) -> SpaStatus {
    guard(|| {
        let m = &handle(matrix, "matrix")?.matrix;
        if out_assignments.is_null() {
            return Err(fail(SpaStatus::NullArgument, "out_assignments is null"));
        }
        if capacity < m.n_examples() {
            return Err(fail(
                SpaStatus::BufferTooSmall,
                format!("need {} assignment slots, got {capacity}", m.n_examples()),
            ));
        }
        let p = if normalize {
            assign_argmax(&normalize_matrix(m).matrix)?
        } else {
            assign_argmax(m)?
        };
        std::slice::from_raw_parts_mut(out_assignments, m.n_examples())
            .copy_from_slice(p.assignments());
        Ok(())
    })
}

/// Unbiased pass@k from `n` samples of which `correct` passed.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_pass_at_k(
    n: usize,
    correct: usize,
    k: usize,
    out_value: *mut f64,
) -> SpaStatus {
    guard(|| {
        *out(out_value, "out_value")? = spa::metrics::pass_at_k(n, correct, k)?;
        Ok(())
    })
}

/// Runs every pipeline stage for the TOML config at `config_path` (null for
/// defaults) at one sampling temperature. Up-to-date stages are skipped.
///
/// # Safety
/// `config_path` must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn spa_pipeline_run(
    config_path: *const c_char,
    temperature: f64,
) -> SpaStatus {
    guard(|| {
        let config = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&path_arg(config_path, "config_path")?)?
        };
        run_sweep(&config, &[temperature], &[])?;
        Ok(())
    })
}

/// Loads a base model file and the adaptation directory trained on it.
///
/// # Safety
/// Paths must be null or nul-terminated strings; `out_set` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_adaptations_load(
    base_path: *const c_char,
    dir: *const c_char,
    out_set: *mut *mut SpaAdaptationSet,
) -> SpaStatus {
    guard(|| {
        let slot = out(out_set, "out_set")?;
        *slot = ptr::null_mut();
        let base = model::read_base_model(&path_arg(base_path, "base_path")?)?;
        let set = AdaptationSet::load_dir(&path_arg(dir, "dir")?, base)?;
        *slot = Box::into_raw(Box::new(SpaAdaptationSet { set }));
        Ok(())
    })
}

/// # Safety
/// `set` must come from [`spa_adaptations_load`]; `out_k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spa_adaptations_count(
    set: *const SpaAdaptationSet,
    out_k: *mut usize,
) -> SpaStatus {
    guard(|| {
        *out(out_k, "out_k")? = handle(set, "set")?.set.k();
        Ok(())
    })
}

/// Decodes up to `max_len` tokens after `prompt` with adaptation `index`.
/// Temperature 0 is greedy. A negative `eos` disables early stopping.
/// `out_len` receives the number of tokens written to `out_tokens`.
///
/// # Safety
/// `set` must come from [`spa_adaptations_load`]; `prompt` must hold
/// `prompt_len` ids (it may be null when `prompt_len` is 0); `out_tokens`
/// must hold `capacity` elements.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn spa_adaptations_generate(
    set: *const SpaAdaptationSet,
    index: usize,
    prompt: *const usize,
    prompt_len: usize,
    max_len: usize,
    temperature: f64,
    eos: i64,
    seed: u64,
    out_tokens: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> SpaStatus {
    guard(|| {
        let set = &handle(set, "set")?.set;
        let len = out(out_len, "out_len")?;
        *len = 0;
        if index >= set.k() {
            return Err(fail(
                SpaStatus::OutOfRange,
                format!("adaptation {index} of {}", set.k()),
            ));
        }
        if out_tokens.is_null() {
            return Err(fail(SpaStatus::NullArgument, "out_tokens is null"));
        }
        if capacity < max_len {
            return Err(fail(
                SpaStatus::BufferTooSmall,
                format!("need {max_len} token slots, got {capacity}"),
            ));
        }
        let prompt: &[usize] = if prompt_len == 0 {
            &[]
        } else if prompt.is_null() {
            return Err(fail(SpaStatus::NullArgument, "prompt is null"));
        } else {
            std::slice::from_raw_parts(prompt, prompt_len)
        };
        let cfg = SamplerConfig {
            temperature,
            max_len,
            seed,
            ..SamplerConfig::default()
        };
        let eos = usize::try_from(eos).ok();
        let g = generate(set.base(), Some(set.adaptation(index)), prompt, eos, &cfg)?;
        std::slice::from_raw_parts_mut(out_tokens, g.tokens.len()).copy_from_slice(&g.tokens);
        *len = g.tokens.len();
        Ok(())
    })
}

/// # Safety
/// `set` must be null or come from [`spa_adaptations_load`], and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn spa_adaptations_free(set: *mut SpaAdaptationSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
