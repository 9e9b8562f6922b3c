//! C ABI over the `agmt` toolkit.
//!
//! Every fallible function returns an [`AgmtStatus`]. On failure the
//! calling thread's last error message describes the problem; read it with
//! [`agmt_last_error_message`]. Models are opaque handles created by
//! [`agmt_model_load`] and released with [`agmt_model_free`].
//!
//! Arrays are row-major `double` buffers. Images are `H×W×C`; a batch of
//! `n` images is `n×H×W×C`. Labels are `uint64_t`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use agmt::eval::{chance_recall_at_1, map_at_r, nmi_of, recall_at_k, EmbeddingSet};
use agmt::grouping::GroupingKind;
use agmt::model::Model;
use agmt::pipeline::load_model;
use agmt::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgmtStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Shapes, sizes or values that the call cannot accept.
    InvalidArgument = 2,
    /// The run configuration next to a checkpoint is invalid.
    Config = 3,
    /// A computation produced a non-finite or degenerate value.
    Numeric = 4,
    /// A file could not be read.
    Io = 5,
    /// A checkpoint is malformed or does not match its configuration.
    Checkpoint = 6,
    /// The output buffer is shorter than the result.
    BufferTooSmall = 7,
    /// An internal invariant failed.
    Panic = 8,
}

/// A trained model loaded from a checkpoint.
pub struct AgmtModel {
    model: Model,
}

/// Shape information of a loaded model.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AgmtModelInfo {
    /// Input images are `image_size × image_size × channels`.
    pub image_size: usize,
    pub channels: usize,
    /// Embedding of one image: `groups × group_dim` doubles.
    pub groups: usize,
    pub group_dim: usize,
    /// Whether [`agmt_model_attention`] is available (A-grouping).
    pub has_attention: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure {
    status: AgmtStatus,
    message: String,
}

impl Failure {
    fn new(status: AgmtStatus, message: impl Into<String>) -> Self {
        Failure {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Usage(_) | Error::Dimension { .. } => AgmtStatus::InvalidArgument,
            Error::Config(_) | Error::Parse { .. } => AgmtStatus::Config,
            Error::Numeric(_) | Error::Domain { .. } => AgmtStatus::Numeric,
            Error::Checkpoint(_) => AgmtStatus::Checkpoint,
            Error::Io { .. } => AgmtStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AgmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            AgmtStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(_) => {
            set_last_error("internal error (panic)");
            AgmtStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(AgmtStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees `ptr` points at `len` readable values.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

unsafe fn output<'a, T>(ptr: *mut T, len: usize, need: usize, name: &str) -> Result<&'a mut [T], Failure> {
    if ptr.is_null() {
        return Err(Failure::new(AgmtStatus::NullArgument, format!("{name} is null")));
    }
    if len < need {
        return Err(Failure::new(
            AgmtStatus::BufferTooSmall,
            format!("{name} holds {len} values, {need} needed"),
        ));
    }
    // SAFETY: the caller guarantees `ptr` points at `len` writable values.
    Ok(unsafe { std::slice::from_raw_parts_mut(ptr, need) })
}

unsafe fn write<T>(ptr: *mut T, value: T, name: &str) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(Failure::new(AgmtStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: non-null and, per the caller, valid for writes.
    unsafe { ptr.write(value) };
    Ok(())
}

unsafe fn model_ref<'a>(model: *const AgmtModel) -> Result<&'a AgmtModel, Failure> {
    // SAFETY: handles only come from `agmt_model_load`.
    unsafe { model.as_ref() }.ok_or_else(|| Failure::new(AgmtStatus::NullArgument, "model is null"))
}

fn labels_to_usize(labels: &[u64]) -> Result<Vec<usize>, Failure> {
    labels
        .iter()
        .map(|&l| usize::try_from(l).map_err(|_| Failure::new(AgmtStatus::InvalidArgument, "label out of range")))
        .collect()
}

fn embedding_set(embeddings: &[f64], labels: &[u64], n: usize, dim: usize) -> Result<EmbeddingSet, Failure> {
    let tensor = Tensor::new(&[n, dim], embeddings.to_vec())?;
    Ok(EmbeddingSet::new(tensor, labels_to_usize(labels)?)?)
}

/// Message of the calling thread's most recent failure, or an empty string
/// after a successful call. Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn agmt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn agmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the checkpoint at `checkpoint_path` together with the run
/// configuration stored next to it. On success `*out` owns a new handle.
///
/// # Safety
/// `checkpoint_path` must be a NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn agmt_model_load(checkpoint_path: *const c_char, out: *mut *mut AgmtModel) -> AgmtStatus {
    guard(|| {
        if checkpoint_path.is_null() {
            return Err(Failure::new(AgmtStatus::NullArgument, "checkpoint_path is null"));
        }
        if out.is_null() {
            return Err(Failure::new(AgmtStatus::NullArgument, "out is null"));
        }
        // SAFETY: non-null; NUL termination is the caller's contract.
        let path = unsafe { CStr::from_ptr(checkpoint_path) }
            .to_str()
            .map_err(|_| Failure::new(AgmtStatus::InvalidArgument, "checkpoint_path is not UTF-8"))?;
        let (_, model) = load_model(&PathBuf::from(path))?;
        let handle = Box::into_raw(Box::new(AgmtModel { model }));
        // SAFETY: checked non-null above.
        unsafe { out.write(handle) };
        Ok(())
    })
}

/// Releases a handle from [`agmt_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn agmt_model_free(model: *mut AgmtModel) {
    if !model.is_null() {
        // SAFETY: the handle was created by `Box::into_raw` in `agmt_model_load`.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Fills `*out` with the model's input and embedding shapes.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn agmt_model_info(model: *const AgmtModel, out: *mut AgmtModelInfo) -> AgmtStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.model;
        let info = AgmtModelInfo {
            image_size: m.config.backbone.image_size,
            channels: m.config.backbone.image_channels,
            groups: m.groups(),
            group_dim: m.config.grouping.value_dim,
            has_attention: m.kind() == GroupingKind::Attentive,
        };
        unsafe { write(out, info, "out") }
    })
}

fn image_tensors(m: &Model, images: &[f64], n: usize) -> Result<Vec<Tensor>, Failure> {
    let b = &m.config.backbone;
    let per = b.image_size * b.image_size * b.image_channels;
    if images.len() != n * per {
        return Err(Failure::new(AgmtStatus::InvalidArgument, "image buffer length mismatch"));
    }
    images
        .chunks(per)
        .map(|c| Ok(Tensor::new(&[b.image_size, b.image_size, b.image_channels], c.to_vec())?))
        .collect()
}

/// Embeds `n_images` images. Writes `n_images × groups × group_dim`
/// doubles to `out`, image by image and group by group.
///
/// # Safety
/// `images` must hold `n_images·H·W·C` doubles and `out` `out_len`
/// writable doubles.
#[no_mangle]
pub unsafe extern "C" fn agmt_model_embed(
    model: *const AgmtModel,
    images: *const f64,
    n_images: usize,
    out: *mut f64,
    out_len: usize,
) -> AgmtStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.model;
        if n_images == 0 {
            return Err(Failure::new(AgmtStatus::InvalidArgument, "n_images is 0"));
        }
        let b = &m.config.backbone;
        let per = b.image_size * b.image_size * b.image_channels;
        let input = unsafe { slice(images, n_images * per, "images") }?;
        let need = n_images * m.groups() * m.config.grouping.value_dim;
        let dst = unsafe { output(out, out_len, need, "out") }?;
        let tensors = image_tensors(m, input, n_images)?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        let results = m.embed_images(&refs, 1)?;
        for (chunk, (g, _)) in dst.chunks_mut(need / n_images).zip(&results) {
            chunk.copy_from_slice(g.concatenated());
        }
        Ok(())
    })
}

/// Attention maps of one image: `groups × H × W` doubles, each group's map
/// summing to 1. Fails with `AGMT_STATUS_INVALID_ARGUMENT` for models
/// without attention.
///
/// # Safety
/// `image` must hold `H·W·C` doubles and `out` `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn agmt_model_attention(
    model: *const AgmtModel,
    image: *const f64,
    out: *mut f64,
    out_len: usize,
) -> AgmtStatus {
    guard(|| {
        let m = &unsafe { model_ref(model) }?.model;
        if m.kind() != GroupingKind::Attentive {
            return Err(Failure::new(
                AgmtStatus::InvalidArgument,
                format!("no attention maps for {}-grouping", m.kind().letter()),
            ));
        }
        let b = &m.config.backbone;
        let per = b.image_size * b.image_size * b.image_channels;
        let input = unsafe { slice(image, per, "image") }?;
        let need = m.groups() * b.image_size * b.image_size;
        let dst = unsafe { output(out, out_len, need, "out") }?;
        let tensors = image_tensors(m, input, 1)?;
        let results = m.embed_images(&[&tensors[0]], 1)?;
        let maps = results[0]
            .1
            .as_ref()
            .ok_or_else(|| Failure::new(AgmtStatus::Panic, "attention maps missing"))?;
        dst.copy_from_slice(maps.scores.data());
        Ok(())
    })
}

/// Recall@k of `n` embeddings of dimension `dim` (row-major) with labels.
///
/// # Safety
/// `embeddings` must hold `n·dim` doubles, `labels` `n` values and `out`
/// must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn agmt_recall_at_k(
    embeddings: *const f64,
    labels: *const u64,
    n: usize,
    dim: usize,
    k: usize,
    out: *mut f64,
) -> AgmtStatus {
    guard(|| {
        let e = unsafe { slice(embeddings, n * dim, "embeddings") }?;
        let l = unsafe { slice(labels, n, "labels") }?;
        let value = recall_at_k(&embedding_set(e, l, n, dim)?, k)?;
        unsafe { write(out, value, "out") }
    })
}

/// Class-wise mean average precision at R.
///
/// # Safety
/// As for [`agmt_recall_at_k`].
#[no_mangle]
pub unsafe extern "C" fn agmt_map_at_r(
    embeddings: *const f64,
    labels: *const u64,
    n: usize,
    dim: usize,
    out: *mut f64,
) -> AgmtStatus {
    guard(|| {
        let e = unsafe { slice(embeddings, n * dim, "embeddings") }?;
        let l = unsafe { slice(labels, n, "labels") }?;
        let value = map_at_r(&embedding_set(e, l, n, dim)?)?.value;
        unsafe { write(out, value, "out") }
    })
}

/// Normalized mutual information between a cluster assignment and labels.
///
/// # Safety
/// `assignment` and `labels` must hold `n` values; `out` must be valid for
/// one write.
#[no_mangle]
pub unsafe extern "C" fn agmt_nmi(assignment: *const u64, labels: *const u64, n: usize, out: *mut f64) -> AgmtStatus {
    guard(|| {
        if n == 0 {
            return Err(Failure::new(AgmtStatus::InvalidArgument, "n is 0"));
        }
        let a = labels_to_usize(unsafe { slice(assignment, n, "assignment") }?)?;
        let l = labels_to_usize(unsafe { slice(labels, n, "labels") }?)?;
        unsafe { write(out, nmi_of(&a, &l), "out") }
    })
}

/// Expected Recall@1 of a random ranking over the given labels.
///
/// # Safety
/// `labels` must hold `n` values; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn agmt_chance_recall_at_1(labels: *const u64, n: usize, out: *mut f64) -> AgmtStatus {
    guard(|| {
        if n < 2 {
            return Err(Failure::new(AgmtStatus::InvalidArgument, "need at least 2 labels"));
        }
        let l = labels_to_usize(unsafe { slice(labels, n, "labels") }?)?;
        unsafe { write(out, chance_recall_at_1(&l), "out") }
    })
}
