//! C ABI over `reid-core`.
//!
//! Every fallible function returns a [`ReidStatus`]; on failure the message
//! is available from [`reid_last_error`] on the same thread. Models are
//! opaque handles created by [`reid_model_load`] and released with
//! [`reid_model_free`]. Images are planar `f64` buffers laid out as
//! `[n][3][height][width]` with values in `[0, 1)`.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use reid_core::checkpoint::Checkpoint;
use reid_core::error::Error;
use reid_core::eval::{self, EvalOptions, Tags};
use reid_core::model::Model;
use reid_core::params::Mode;
use reid_core::tensor::Tensor;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReidStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Argument values are invalid (bad UTF-8, zero sizes, ...).
    InvalidArgument = 2,
    /// A buffer length does not match what the model needs.
    Dimension = 3,
    Io = 4,
    /// The checkpoint is truncated or corrupt.
    Integrity = 5,
    /// The checkpoint was written by an unsupported format version.
    Version = 6,
    /// The checkpoint does not fit the data it is applied to.
    Incompatible = 7,
    /// A query identity has no match in the gallery.
    Protocol = 8,
    /// Any other library error.
    Failure = 9,
    /// A panic was caught at the boundary.
    Panic = 10,
}

/// Opaque model handle.
pub struct ReidModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ReidStatus {
    match e {
        Error::Io { .. } | Error::EmptyDataset(_) => ReidStatus::Io,
        Error::Integrity(_) | Error::Parse { .. } => ReidStatus::Integrity,
        Error::Version { .. } => ReidStatus::Version,
        Error::Incompatible(_) => ReidStatus::Incompatible,
        Error::Protocol(_) => ReidStatus::Protocol,
        Error::Dimension { .. } | Error::Shape { .. } => ReidStatus::Dimension,
        Error::Usage(_) | Error::Range { .. } | Error::Label { .. } => ReidStatus::InvalidArgument,
        _ => ReidStatus::Failure,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (ReidStatus, String)>) -> ReidStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ReidStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            ReidStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (ReidStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ReidStatus, String) {
    (ReidStatus::NullArgument, format!("{what} is null"))
}

fn dim(what: &str, expected: usize, got: usize) -> (ReidStatus, String) {
    (ReidStatus::Dimension, format!("{what}: expected {expected} values, got {got}"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (ReidStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (ReidStatus, String)> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `model` must be null or a live handle from [`reid_model_load`].
unsafe fn handle<'a>(model: *mut ReidModel) -> Result<&'a mut ReidModel, (ReidStatus, String)> {
    model.as_mut().ok_or_else(|| null("model"))
}

/// Message of the last failed call on this thread, or null after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn reid_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn reid_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint file. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reid_model_load(path: *const c_char, out: *mut *mut ReidModel) -> ReidStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (ReidStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let mut model = Checkpoint::load(Path::new(path)).map_err(lib_err)?.model;
        model.set_mode(Mode::Eval);
        *out = Box::into_raw(Box::new(ReidModel { model }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn reid_model_free(model: *mut ReidModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Length of one descriptor.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reid_model_descriptor_len(model: *mut ReidModel, out: *mut usize) -> ReidStatus {
    guard(|| {
        let m = handle(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.descriptor_len();
        Ok(())
    })
}

/// Input image height and width the model expects.
///
/// # Safety
/// `model` must be a live handle; `height` and `width` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn reid_model_image_size(model: *mut ReidModel, height: *mut usize, width: *mut usize) -> ReidStatus {
    guard(|| {
        let m = handle(model)?;
        *height.as_mut().ok_or_else(|| null("height"))? = m.model.cfg.image_height;
        *width.as_mut().ok_or_else(|| null("width"))? = m.model.cfg.image_width;
        Ok(())
    })
}

/// Number of attributes, which is also the number of attention maps.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reid_model_num_attributes(model: *mut ReidModel, out: *mut usize) -> ReidStatus {
    guard(|| {
        let m = handle(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.model.schema.len();
        Ok(())
    })
}

fn image_batch(m: &ReidModel, images: &[f64], count: usize) -> Result<Tensor, (ReidStatus, String)> {
    let (h, w) = (m.model.cfg.image_height, m.model.cfg.image_width);
    if count == 0 {
        return Err((ReidStatus::InvalidArgument, "count is 0".into()));
    }
    if images.len() != count * 3 * h * w {
        return Err(dim("images", count * 3 * h * w, images.len()));
    }
    Tensor::new(&[count, 3, h, w], images.to_vec()).map_err(lib_err)
}

/// Extracts descriptors for `count` images into `out`, row-major
/// `[count][descriptor_len]`. `images_len` and `out_len` are element counts.
///
/// # Safety
/// `images` must be valid for `images_len` reads and `out` for `out_len`
/// writes.
#[no_mangle]
pub unsafe extern "C" fn reid_model_extract(
    model: *mut ReidModel,
    images: *const f64,
    images_len: usize,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> ReidStatus {
    guard(|| {
        let m = handle(model)?;
        let batch = image_batch(m, slice(images, images_len, "images")?, count)?;
        let need = count * m.model.descriptor_len();
        let out = slice_mut(out, out_len, "out")?;
        if out.len() != need {
            return Err(dim("out", need, out.len()));
        }
        let d = m.model.extract_descriptors(&batch).map_err(lib_err)?;
        out.copy_from_slice(d.data());
        Ok(())
    })
}

/// Attention maps of one image, `[num_attributes][feature_height * feature_width]`
/// in label order. `map_height` and `map_width` receive the grid size.
///
/// # Safety
/// `image` must be valid for `image_len` reads, `out` for `out_len`
/// writes, and the size pointers valid.
#[no_mangle]
pub unsafe extern "C" fn reid_model_attention(
    model: *mut ReidModel,
    image: *const f64,
    image_len: usize,
    out: *mut f64,
    out_len: usize,
    map_height: *mut usize,
    map_width: *mut usize,
) -> ReidStatus {
    guard(|| {
        let m = handle(model)?;
        let batch = image_batch(m, slice(image, image_len, "image")?, 1)?;
        let (hf, wf) = (m.model.cfg.feature_height(), m.model.cfg.feature_width());
        let need = m.model.schema.len() * hf * wf;
        let out = slice_mut(out, out_len, "out")?;
        if out.len() != need {
            return Err(dim("out", need, out.len()));
        }
        let maps = m.model.attention_maps(&batch).map_err(lib_err)?;
        for (chunk, map) in out.chunks_mut(hf * wf).zip(&maps) {
            chunk.copy_from_slice(map.data());
        }
        *map_height.as_mut().ok_or_else(|| null("map_height"))? = hf;
        *map_width.as_mut().ok_or_else(|| null("map_width"))? = wf;
        Ok(())
    })
}

/// Squared Euclidean distance between two descriptors; smaller is a
/// better match.
///
/// # Safety
/// `a` and `b` must be valid for `len` reads and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn reid_matching_score(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> ReidStatus {
    guard(|| {
        let (a, b) = (slice(a, len, "a")?, slice(b, len, "b")?);
        *out.as_mut().ok_or_else(|| null("out"))? = eval::matching_score(a, b).map_err(lib_err)?;
        Ok(())
    })
}

/// Ranks a gallery for each query from a row-major `[num_queries][num_gallery]`
/// distance matrix. Writes one CMC value per entry of `ranks` into
/// `cmc_out` and the mean average precision into `map_out`.
///
/// # Safety
/// Every pointer must be valid for the element count implied by
/// `num_queries`, `num_gallery` and `num_ranks`.
#[no_mangle]
pub unsafe extern "C" fn reid_evaluate(
    scores: *const f64,
    num_queries: usize,
    num_gallery: usize,
    query_ids: *const usize,
    query_cameras: *const usize,
    gallery_ids: *const usize,
    gallery_cameras: *const usize,
    ranks: *const usize,
    num_ranks: usize,
    exclude_same_camera: c_int,
    cmc_out: *mut f64,
    map_out: *mut f64,
) -> ReidStatus {
    guard(|| {
        let scores = slice(scores, num_queries * num_gallery, "scores")?;
        let query = Tags {
            identities: slice(query_ids, num_queries, "query_ids")?,
            cameras: slice(query_cameras, num_queries, "query_cameras")?,
        };
        let gallery = Tags {
            identities: slice(gallery_ids, num_gallery, "gallery_ids")?,
            cameras: slice(gallery_cameras, num_gallery, "gallery_cameras")?,
        };
        let opts = EvalOptions {
            ranks: slice(ranks, num_ranks, "ranks")?.to_vec(),
            exclude_same_camera: exclude_same_camera != 0,
            normalize: false,
        };
        let cmc_out = slice_mut(cmc_out, num_ranks, "cmc_out")?;
        let map_out = map_out.as_mut().ok_or_else(|| null("map_out"))?;
        let report = eval::evaluate_scores(scores, query, gallery, &opts).map_err(lib_err)?;
        cmc_out.copy_from_slice(&report.cmc);
        *map_out = report.map;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_stable_codes() {
        let cases = [
            (Error::Protocol(vec![4]), ReidStatus::Protocol),
            (Error::Incompatible(vec!["x".into()]), ReidStatus::Incompatible),
            (Error::Label { label: 3, classes: 2 }, ReidStatus::InvalidArgument),
            (Error::Config("c".into()), ReidStatus::Failure),
        ];
        for (e, s) in cases {
            assert_eq!(status_of(&e), s);
        }
        assert_eq!(ReidStatus::Panic as i32, 10);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, ReidStatus::Panic);
        let msg = unsafe { CStr::from_ptr(reid_last_error()) }.to_str().unwrap().to_owned();
        assert_eq!(msg, "panic: boom");
    }
}
