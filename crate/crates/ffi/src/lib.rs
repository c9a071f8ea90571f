//! C ABI over `patient-gnn`: load a split graph and a checkpoint, predict, score.
//!
//! Every fallible function returns a [`PgnnStatus`]; on failure the message is
//! available from [`pgnn_last_error`] on the same thread. Handles are opaque and
//! must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use patient_gnn::gnn::{load_checkpoint, AttentionDump, GnnModel};
use patient_gnn::graph::{read_graph, SimilarityGraph, Split};
use patient_gnn::metrics::{evaluate, MetricReport};
use patient_gnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Io = 10,
    Parse = 11,
    InvalidArgument = 12,
    Shape = 13,
    NumericInstability = 14,
    Diverged = 15,
    EmptyMask = 16,
    Metric = 17,
    UnknownNode = 18,
    Checkpoint = 19,
    Json = 20,
    Panic = 99,
}

impl From<&Error> for PgnnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => PgnnStatus::Io,
            Error::Parse { .. } => PgnnStatus::Parse,
            Error::InvalidArgument { .. } => PgnnStatus::InvalidArgument,
            Error::Shape { .. } => PgnnStatus::Shape,
            Error::NumericInstability { .. } => PgnnStatus::NumericInstability,
            Error::Diverged { .. } => PgnnStatus::Diverged,
            Error::EmptyMask(_) => PgnnStatus::EmptyMask,
            Error::Metric(_) => PgnnStatus::Metric,
            Error::UnknownNode { .. } => PgnnStatus::UnknownNode,
            Error::Checkpoint(_) => PgnnStatus::Checkpoint,
            Error::Json(_) => PgnnStatus::Json,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PgnnSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl From<PgnnSplit> for Split {
    fn from(s: PgnnSplit) -> Split {
        match s {
            PgnnSplit::Train => Split::Train,
            PgnnSplit::Val => Split::Val,
            PgnnSplit::Test => Split::Test,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PgnnMetrics {
    pub f1: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub auroc: f64,
    pub auprc: f64,
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl From<&MetricReport> for PgnnMetrics {
    fn from(r: &MetricReport) -> Self {
        PgnnMetrics {
            f1: r.f1,
            accuracy: r.accuracy,
            balanced_accuracy: r.balanced_accuracy,
            precision: r.precision,
            recall: r.recall,
            auroc: r.auroc,
            auprc: r.auprc,
            threshold: r.threshold,
            tp: r.confusion.tp,
            fp: r.confusion.fp,
            tn: r.confusion.tn,
            fn_: r.confusion.fn_,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PgnnAttentionEntry {
    pub source: usize,
    pub target: usize,
    pub head: usize,
    pub weight: f64,
}

/// Similarity graph with masks.
pub struct PgnnGraph(SimilarityGraph);

/// Trained GNN.
pub struct PgnnModel(GnnModel);

/// Probabilities for every node plus the last attention layer, if any.
pub struct PgnnPrediction {
    probabilities: Vec<f64>,
    attention: Vec<PgnnAttentionEntry>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Status(PgnnStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PgnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgnnStatus::Ok,
        Ok(Err(Failure::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            PgnnStatus::from(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            PgnnStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure::Status(PgnnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(PgnnStatus::InvalidUtf8, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn pgnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pgnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a graph file written by the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pgnn_graph_load(path: *const c_char, out: *mut *mut PgnnGraph) -> PgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let g = read_graph(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PgnnGraph(g)));
        Ok(())
    })
}

/// # Safety
/// `graph` must come from [`pgnn_graph_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pgnn_graph_free(graph: *mut PgnnGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node count, or 0 for a null handle.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_graph_num_nodes(graph: *const PgnnGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.n())
}

/// Undirected edge count, or 0 for a null handle.
///
/// # Safety
/// `graph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_graph_num_edges(graph: *const PgnnGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.0.num_edges())
}

/// Copies the 0/1 labels into `out`, which must hold at least `len` bytes.
///
/// # Safety
/// `graph` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn pgnn_graph_labels(graph: *const PgnnGraph, out: *mut u8, len: usize) -> PgnnStatus {
    guard(|| {
        let g = &deref(graph, "graph")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        if len < g.n() {
            return Err(Failure::Status(PgnnStatus::BufferTooSmall, format!("need {} labels, buffer holds {len}", g.n())));
        }
        ptr::copy_nonoverlapping(g.labels().as_ptr(), out, g.n());
        Ok(())
    })
}

/// Loads a checkpoint written by `train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pgnn_model_load(path: *const c_char, out: *mut *mut PgnnModel) -> PgnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(PgnnModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`pgnn_model_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pgnn_model_free(model: *mut PgnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decision threshold stored in the checkpoint, or NaN for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_model_threshold(model: *const PgnnModel) -> f64 {
    use patient_gnn::gnn::NodeModel;
    model.as_ref().map_or(f64::NAN, |m| m.0.threshold())
}

fn attention_entries(dump: &AttentionDump) -> Vec<PgnnAttentionEntry> {
    dump.entries()
        .map(|e| PgnnAttentionEntry {
            source: e.source,
            target: e.target,
            head: e.head,
            weight: e.weight,
        })
        .collect()
}

/// Runs the model over the whole graph in evaluation mode.
///
/// # Safety
/// `model` and `graph` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pgnn_predict(
    model: *const PgnnModel,
    graph: *const PgnnGraph,
    out: *mut *mut PgnnPrediction,
) -> PgnnStatus {
    guard(|| {
        let (m, g) = (&deref(model, "model")?.0, &deref(graph, "graph")?.0);
        if out.is_null() {
            return Err(null("out"));
        }
        let p = m.predict(g)?;
        let pred = PgnnPrediction {
            attention: p.attention.as_ref().map(attention_entries).unwrap_or_default(),
            probabilities: p.probabilities,
        };
        *out = Box::into_raw(Box::new(pred));
        Ok(())
    })
}

/// # Safety
/// `pred` must come from [`pgnn_predict`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pgnn_prediction_free(pred: *mut PgnnPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Number of probabilities (one per node).
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_prediction_len(pred: *const PgnnPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.probabilities.len())
}

/// Borrowed pointer to the probabilities; valid while `pred` lives.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_prediction_probabilities(pred: *const PgnnPrediction) -> *const f64 {
    pred.as_ref().map_or(ptr::null(), |p| p.probabilities.as_ptr())
}

/// Number of attention entries; 0 for SAGE models.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_prediction_attention_len(pred: *const PgnnPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.attention.len())
}

/// Borrowed pointer to the attention entries; valid while `pred` lives.
///
/// # Safety
/// `pred` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgnn_prediction_attention(pred: *const PgnnPrediction) -> *const PgnnAttentionEntry {
    pred.as_ref().map_or(ptr::null(), |p| p.attention.as_ptr())
}

/// Scores a prediction on one mask of `graph` at `threshold`.
///
/// # Safety
/// `pred` and `graph` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pgnn_evaluate(
    pred: *const PgnnPrediction,
    graph: *const PgnnGraph,
    split: PgnnSplit,
    threshold: f64,
    out: *mut PgnnMetrics,
) -> PgnnStatus {
    guard(|| {
        let (p, g) = (deref(pred, "prediction")?, &deref(graph, "graph")?.0);
        if out.is_null() {
            return Err(null("out"));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::invalid("threshold", "must lie in [0, 1]").into());
        }
        let mask = g.mask(split.into())?;
        let report = evaluate(&p.probabilities, g.labels(), &mask, threshold)?;
        *out = PgnnMetrics::from(&report);
        Ok(())
    })
}
