//! C ABI for loading stylematch checkpoints, encoding titles, scoring pairs
//! and serving top-K recommendations from a style index.
//!
//! Every fallible entry point returns an [`SmStatus`]. On failure a
//! human-readable message is kept per thread and can be read with
//! [`sm_last_error`]. Models and indices are opaque heap handles that must be
//! released with their matching `*_free` function.
//!
//! Titles cross the boundary as NUL-terminated UTF-8 strings of
//! whitespace-separated tokens; tokens missing from the checkpoint vocabulary
//! encode as the unknown token.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stylematch::checkpoint::{load_checkpoint, Checkpoint};
use stylematch::compat::match_probability;
use stylematch::corpus::{load_items, VocabMode};
use stylematch::recommend::{export_index, topk_pruned, transform_query, StyleIndex};
use stylematch::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A loaded checkpoint: vocabulary plus trained model.
pub struct SmModel {
    checkpoint: Checkpoint,
}

/// Exported candidate vectors ready for top-K search.
pub struct SmIndex {
    index: StyleIndex,
}

struct Failure {
    status: SmStatus,
    message: String,
}

impl Failure {
    fn new(status: SmStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Io { .. } => SmStatus::Io,
            Error::Format { .. } | Error::Parse { .. } => SmStatus::Format,
            Error::Config(_) => SmStatus::InvalidArgument,
            _ => SmStatus::Data,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SmStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SmStatus::Ok,
        Ok(Err(fail)) => {
            set_last_error(&fail.message);
            fail.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            SmStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::new(SmStatus::NullArgument, format!("{name} is NULL"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::new(SmStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(name))
}

fn encode_title(model: &SmModel, title: &str) -> Result<Vec<f32>, Failure> {
    let ids = model.checkpoint.vocab.encode(title.split_whitespace());
    if ids.is_empty() {
        return Err(Failure::new(
            SmStatus::InvalidArgument,
            "title has no tokens",
        ));
    }
    Ok(model.checkpoint.model.encode(&ids)?)
}

/// Message for the most recent failure on this thread, or NULL after a
/// successful call. The pointer stays valid until the next `sm_*` call on the
/// same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a DSM1 checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_load(path: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = load_checkpoint(&path)?;
        *out = Box::into_raw(Box::new(SmModel { checkpoint }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`sm_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_model_free(model: *mut SmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Representation dimension `n`, or 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn sm_model_repr_dim(model: *const SmModel) -> usize {
    model.as_ref().map_or(0, |m| m.checkpoint.model.repr_dim())
}

/// Writes the `n`-dimensional representation of `title` into `out`.
///
/// # Safety
/// `model` must be a live handle, `title` a NUL-terminated string and `out`
/// must point to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn sm_model_encode(
    model: *const SmModel,
    title: *const c_char,
    out: *mut f32,
    out_len: usize,
) -> SmStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let title = str_arg(title, "title")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = encode_title(model, title)?;
        if out_len < x.len() {
            return Err(Failure::new(
                SmStatus::BufferTooSmall,
                format!("output holds {out_len} floats, need {}", x.len()),
            ));
        }
        ptr::copy_nonoverlapping(x.as_ptr(), out, x.len());
        Ok(())
    })
}

/// Compatibility probability `P(y=1 | query, candidate)`.
///
/// # Safety
/// `model` must be a live handle, both titles NUL-terminated strings and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_match_probability(
    model: *const SmModel,
    query_title: *const c_char,
    cand_title: *const c_char,
    out: *mut f64,
) -> SmStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let q = str_arg(query_title, "query_title")?;
        let c = str_arg(cand_title, "cand_title")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x_q = encode_title(model, q)?;
        let x_c = encode_title(model, c)?;
        let p = match_probability(&x_q, &x_c, &model.checkpoint.model.compat)?;
        *out = p as f64;
        Ok(())
    })
}

/// Encodes every item of an `item_id<TAB>title` file into a new index.
///
/// # Safety
/// `model` must be a live handle, `items_path` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_index_build(
    model: *const SmModel,
    items_path: *const c_char,
    out: *mut *mut SmIndex,
) -> SmStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let path = PathBuf::from(str_arg(items_path, "items_path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let (catalog, _) = load_items(
            &path,
            VocabMode::Frozen,
            Some(model.checkpoint.vocab.clone()),
        )?;
        let index = export_index(&model.checkpoint.model, &catalog)?;
        *out = Box::into_raw(Box::new(SmIndex { index }));
        Ok(())
    })
}

/// Loads a DSI1 index file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_index_load(path: *const c_char, out: *mut *mut SmIndex) -> SmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = PathBuf::from(str_arg(path, "path")?);
        let index = StyleIndex::load(&path)?;
        *out = Box::into_raw(Box::new(SmIndex { index }));
        Ok(())
    })
}

/// Writes the index in DSI1 format.
///
/// # Safety
/// `index` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sm_index_save(index: *const SmIndex, path: *const c_char) -> SmStatus {
    guard(|| {
        let index = ref_arg(index, "index")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        index.index.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `index` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_index_free(index: *mut SmIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of candidates, or 0 for a NULL handle.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sm_index_len(index: *const SmIndex) -> usize {
    index.as_ref().map_or(0, |i| i.index.len())
}

/// Copies the id of candidate `position` into `buf` as a NUL-terminated
/// string. `needed`, when not NULL, receives the required size including the
/// terminator, also on [`SmStatus::BufferTooSmall`].
///
/// # Safety
/// `index` must be a live handle; `buf` must point to `buf_len` writable bytes
/// (it may be NULL when `buf_len` is 0); `needed` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn sm_index_item_id(
    index: *const SmIndex,
    position: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| {
        let index = ref_arg(index, "index")?;
        let ids = index.index.ids();
        let id = ids.get(position).ok_or_else(|| {
            Failure::new(
                SmStatus::InvalidArgument,
                format!("position {position} out of range for {} items", ids.len()),
            )
        })?;
        let size = id.len() + 1;
        if !needed.is_null() {
            *needed = size;
        }
        if buf_len < size || buf.is_null() {
            return Err(Failure::new(
                SmStatus::BufferTooSmall,
                format!("buffer holds {buf_len} bytes, need {size}"),
            ));
        }
        ptr::copy_nonoverlapping(id.as_ptr().cast::<c_char>(), buf, id.len());
        *buf.add(id.len()) = 0;
        Ok(())
    })
}

/// Top-`k` candidates for a query title, best first, ties by ascending id.
///
/// Writes up to `k` index positions into `out_positions` and, when
/// `out_probabilities` is not NULL, the matching compatibility probabilities.
/// `exclude_id` (nullable) names a candidate to skip, typically the query
/// item itself. `out_count` receives the number of hits written.
///
/// # Safety
/// `model` and `index` must be live handles; `query_title` and `exclude_id`
/// NUL-terminated strings (the latter may be NULL); `out_positions` and
/// `out_probabilities` must each hold `k` elements when not NULL; `out_count`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_recommend(
    model: *const SmModel,
    index: *const SmIndex,
    query_title: *const c_char,
    exclude_id: *const c_char,
    k: usize,
    out_positions: *mut usize,
    out_probabilities: *mut f64,
    out_count: *mut usize,
) -> SmStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let index = &ref_arg(index, "index")?.index;
        let title = str_arg(query_title, "query_title")?;
        let exclude = if exclude_id.is_null() {
            None
        } else {
            Some(str_arg(exclude_id, "exclude_id")?)
        };
        if out_positions.is_null() {
            return Err(null("out_positions"));
        }
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        if k == 0 {
            return Err(Failure::new(SmStatus::InvalidArgument, "k must be >= 1"));
        }
        let dim = model.checkpoint.model.repr_dim();
        if index.dim() != dim {
            return Err(Failure::new(
                SmStatus::Data,
                format!(
                    "index dimension {} does not match model dimension {dim}",
                    index.dim()
                ),
            ));
        }
        let x_q = encode_title(model, title)?;
        let tq = transform_query(&model.checkpoint.model.compat, &x_q)?;
        let skip = exclude.and_then(|id| index.position(id));
        let mut hits = topk_pruned(index, &tq, k + usize::from(skip.is_some()))?;
        if let Some(id) = exclude {
            hits.retain(|h| h.item_id != id);
        }
        hits.truncate(k);
        let bias = model.checkpoint.model.compat.bias as f64;
        for (i, h) in hits.iter().enumerate() {
            *out_positions.add(i) = index.position(&h.item_id).unwrap_or(usize::MAX);
            if !out_probabilities.is_null() {
                *out_probabilities.add(i) = h.probability(bias);
            }
        }
        *out_count = hits.len();
        Ok(())
    })
}
