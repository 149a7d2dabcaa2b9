//! C ABI for cssnet.
//!
//! Every fallible call returns a [`CssStatus`]. On failure the message is
//! available from [`cssnet_last_error`] until the next failing call on the
//! same thread. Handles are opaque and released with their `_free`
//! function; strings handed out through out-parameters are released with
//! [`cssnet_string_free`]. JSON configuration arguments may be null, which
//! selects the defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cssnet::dataset::Corpus;
use cssnet::error::CssError;
use cssnet::eval::{embed_gallery, embed_queries, joint_scores, SimilarityBundle};
use cssnet::experiments::{full_model_gradcheck, ExperimentConfig};
use cssnet::model::{Model, ModelConfig};
use cssnet::runs::weights_for;
use cssnet::trainer::{Checkpoint, Trainer};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CssStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// A precondition on shapes, indices or values failed.
    Contract = 3,
    /// Malformed or inconsistent configuration.
    Config = 4,
    MissingInput = 5,
    Io = 6,
    Json = 7,
    /// Non-finite values or a diverged training run.
    Numeric = 8,
    /// The corpus generator could not satisfy the request.
    Generation = 9,
    /// A Rust panic was caught at the boundary.
    Panic = 10,
}

/// A generated or loaded corpus.
pub struct CssCorpus {
    inner: Corpus,
}

/// A trained model together with the checkpoint it came from.
pub struct CssModel {
    checkpoint: Checkpoint,
    model: Model,
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(CssError),
}

impl From<CssError> for Failure {
    fn from(e: CssError) -> Self {
        Failure::Core(e)
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &CssError) -> CssStatus {
    match e {
        CssError::Contract(_) | CssError::Vocabulary(_) => CssStatus::Contract,
        CssError::Config(_) => CssStatus::Config,
        CssError::MissingInput(_) => CssStatus::MissingInput,
        CssError::Io { .. } => CssStatus::Io,
        CssError::Json { .. } => CssStatus::Json,
        CssError::NumericFault { .. } | CssError::Diverged { .. } => CssStatus::Numeric,
        CssError::Capacity { .. } | CssError::NoTriplet(_) => CssStatus::Generation,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CssStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CssStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            CssStatus::NullArgument
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            CssStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CssStatus::Panic
        }
    }
}

unsafe fn opt_str<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p).to_str().map(Some).map_err(|_| Failure::Utf8(what))
}

unsafe fn req_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    opt_str(p, what)?.ok_or(Failure::Null(what))
}

unsafe fn req_ref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn check_out<T>(p: *mut T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

fn parse_config(json: Option<&str>) -> Result<ExperimentConfig, Failure> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| Failure::Core(CssError::Config(e.to_string()))),
        None => Ok(ExperimentConfig::default()),
    }
}

fn json_string<T: serde::Serialize>(value: &T, what: &str) -> Result<*mut c_char, Failure> {
    let s = serde_json::to_string(value).map_err(|e| CssError::Config(format!("serializing {what}: {e}")))?;
    Ok(CString::new(s).expect("JSON has no nul bytes").into_raw())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cssnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn cssnet_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn cssnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a corpus from the `data` and `schema` sections of an
/// experiment config.
///
/// # Safety
/// `config_json` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_generate(config_json: *const c_char, out: *mut *mut CssCorpus) -> CssStatus {
    guard(|| {
        check_out(out, "out")?;
        let cfg = parse_config(opt_str(config_json, "config_json")?)?;
        let corpus = Corpus::generate(&cfg.load_schema()?, &cfg.data)?;
        *out = Box::into_raw(Box::new(CssCorpus { inner: corpus }));
        Ok(())
    })
}

/// Reads a corpus directory written by `cssnet_corpus_write` or the CLI.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_read(dir: *const c_char, out: *mut *mut CssCorpus) -> CssStatus {
    guard(|| {
        check_out(out, "out")?;
        let dir = PathBuf::from(req_str(dir, "dir")?);
        *out = Box::into_raw(Box::new(CssCorpus {
            inner: Corpus::read(&dir)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; `dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_write(corpus: *const CssCorpus, dir: *const c_char) -> CssStatus {
    guard(|| {
        let corpus = req_ref(corpus, "corpus")?;
        corpus.inner.write(&PathBuf::from(req_str(dir, "dir")?))?;
        Ok(())
    })
}

/// Catalog size, training triplets and held-out queries. Any out pointer
/// may be null.
///
/// # Safety
/// `corpus` is a live handle; non-null out pointers are writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_sizes(
    corpus: *const CssCorpus,
    items: *mut usize,
    train: *mut usize,
    queries: *mut usize,
) -> CssStatus {
    guard(|| {
        let c = &req_ref(corpus, "corpus")?.inner;
        for (p, v) in [(items, c.catalog.len()), (train, c.train.len()), (queries, c.test.len())] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Valid-set statistics of the training split as JSON.
///
/// # Safety
/// `corpus` is a live handle; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_stats(corpus: *const CssCorpus, out_json: *mut *mut c_char) -> CssStatus {
    guard(|| {
        check_out(out_json, "out_json")?;
        let c = &req_ref(corpus, "corpus")?.inner;
        *out_json = json_string(&c.train_stats()?, "statistics")?;
        Ok(())
    })
}

/// # Safety
/// `corpus` is null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cssnet_corpus_free(corpus: *mut CssCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains on the corpus' training split with the `model` and `train`
/// sections of an experiment config.
///
/// # Safety
/// `corpus` is a live handle; `config_json` is null or NUL-terminated;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_train(
    corpus: *const CssCorpus,
    config_json: *const c_char,
    out: *mut *mut CssModel,
) -> CssStatus {
    guard(|| {
        check_out(out, "out")?;
        let c = &req_ref(corpus, "corpus")?.inner;
        let cfg = parse_config(opt_str(config_json, "config_json")?)?;
        let model_cfg = ModelConfig::from_settings(c.schema(), &c.config.render, &cfg.model);
        let mut trainer = Trainer::new(model_cfg, cfg.train, &c.catalog, &c.train)?;
        trainer.run(|_| {})?;
        let checkpoint = trainer.checkpoint();
        *out = Box::into_raw(Box::new(CssModel {
            checkpoint,
            model: trainer.model,
        }));
        Ok(())
    })
}

/// # Safety
/// `path` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_load(path: *const c_char, out: *mut *mut CssModel) -> CssStatus {
    guard(|| {
        check_out(out, "out")?;
        let checkpoint = Checkpoint::load(&PathBuf::from(req_str(path, "path")?))?;
        let model = checkpoint.model()?;
        *out = Box::into_raw(Box::new(CssModel { checkpoint, model }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_save(model: *const CssModel, path: *const c_char) -> CssStatus {
    guard(|| {
        let m = req_ref(model, "model")?;
        m.checkpoint.save(&PathBuf::from(req_str(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_free(model: *mut CssModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn read_alphas(alphas: *const f64) -> [f64; 4] {
    if alphas.is_null() {
        ExperimentConfig::default().eval.alphas
    } else {
        let s = std::slice::from_raw_parts(alphas, 4);
        [s[0], s[1], s[2], s[3]]
    }
}

/// Recall metrics on the held-out queries, as the same JSON document the
/// CLI writes to `metrics.json`. `alphas` points to four weights or is
/// null; `ks` may be null when `n_ks` is 0, selecting 1, 10 and 50.
///
/// # Safety
/// Handles are live; `alphas` holds 4 values when non-null; `ks` holds
/// `n_ks` values; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_evaluate(
    model: *const CssModel,
    corpus: *const CssCorpus,
    alphas: *const f64,
    ks: *const usize,
    n_ks: usize,
    out_json: *mut *mut c_char,
) -> CssStatus {
    guard(|| {
        check_out(out_json, "out_json")?;
        let m = req_ref(model, "model")?;
        let c = &req_ref(corpus, "corpus")?.inner;
        let ks = if n_ks == 0 {
            ExperimentConfig::default().eval.ks
        } else if ks.is_null() {
            return Err(Failure::Null("ks"));
        } else {
            std::slice::from_raw_parts(ks, n_ks).to_vec()
        };
        m.checkpoint.model.check_corpus(&c.catalog)?;
        let weights = weights_for(&m.model.config.heads(), &read_alphas(alphas))?;
        let ev = cssnet::eval::evaluate(&m.model, &c.catalog, &c.test, &weights, &ks)?;
        *out_json = json_string(&ev.metrics, "metrics")?;
        Ok(())
    })
}

/// Joint similarity of held-out query `query` to every catalog item,
/// written to `out_scores[0..len]`; `len` must equal the catalog size.
///
/// # Safety
/// Handles are live; `alphas` holds 4 values when non-null; `out_scores`
/// has room for `len` values.
#[no_mangle]
pub unsafe extern "C" fn cssnet_model_scores(
    model: *const CssModel,
    corpus: *const CssCorpus,
    query: usize,
    alphas: *const f64,
    out_scores: *mut f64,
    len: usize,
) -> CssStatus {
    guard(|| {
        check_out(out_scores, "out_scores")?;
        let m = req_ref(model, "model")?;
        let c = &req_ref(corpus, "corpus")?.inner;
        if len != c.catalog.len() {
            return Err(CssError::contract(format!("buffer holds {len} scores, catalog has {}", c.catalog.len())).into());
        }
        let q = c
            .test
            .get(query..=query)
            .ok_or_else(|| CssError::contract(format!("query {query} out of range ({} queries)", c.test.len())))?;
        m.checkpoint.model.check_corpus(&c.catalog)?;
        let heads = m.model.config.heads();
        let weights = weights_for(&heads, &read_alphas(alphas))?;
        let bundle = SimilarityBundle::from_embeddings(
            &embed_queries(&m.model, &c.catalog, q, &heads)?,
            &embed_gallery(&m.model, &c.catalog, &heads)?,
        )?;
        let scores = joint_scores(&bundle, &weights)?;
        std::slice::from_raw_parts_mut(out_scores, len).copy_from_slice(scores.data());
        Ok(())
    })
}

/// Finite-difference gradient check of a tiny full model, configured by
/// the `gradcheck` section of an experiment config.
///
/// # Safety
/// `config_json` is null or NUL-terminated; `out_max_rel_error` is writable.
#[no_mangle]
pub unsafe extern "C" fn cssnet_gradcheck(config_json: *const c_char, out_max_rel_error: *mut f64) -> CssStatus {
    guard(|| {
        check_out(out_max_rel_error, "out_max_rel_error")?;
        let cfg = parse_config(opt_str(config_json, "config_json")?)?;
        *out_max_rel_error = full_model_gradcheck(&cfg.gradcheck)?.max_rel_error;
        Ok(())
    })
}
