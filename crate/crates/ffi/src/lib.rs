//! C ABI over the heurvid library.
//!
//! Objects cross the boundary as opaque handles created by `*_load` and released
//! by `*_free`. Every fallible call returns an [`HvStatus`]; the message of the
//! most recent failure on the calling thread is available from
//! [`hv_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use heurvid::prompter::{vtc_from_similarity, HeuristicStore, Prompter};
use heurvid::reasoner::{total_loss, LossConfig, LossMode, Reasoner};
use heurvid::substrate::{soft_cross_entropy, Tensor};
use heurvid::textproc::{convert_oe, PromptKind};
use heurvid::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Argument = 3,
    Shape = 4,
    Domain = 5,
    Numeric = 6,
    Config = 7,
    State = 8,
    Format = 9,
    Data = 10,
    Io = 11,
    NotFound = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvKind {
    Action = 0,
    Entity = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HvLossMode {
    FixedAlpha = 0,
    Gated = 1,
    NoHeuristics = 2,
}

/// A frozen or trainable prompter.
pub struct HvPrompter(Prompter);

/// A QA reasoner.
pub struct HvReasoner(Reasoner);

/// Heuristic records keyed by video id and kind.
pub struct HvHeuristicStore(HeuristicStore);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> HvStatus {
    match e {
        Error::Shape(_) => HvStatus::Shape,
        Error::Domain(_) => HvStatus::Domain,
        Error::Numeric(_) => HvStatus::Numeric,
        Error::Argument(_) => HvStatus::Argument,
        Error::Config(_) => HvStatus::Config,
        Error::State(_) => HvStatus::State,
        Error::Format { .. } => HvStatus::Format,
        Error::Data(_) | Error::Json(_) => HvStatus::Data,
        Error::Io(_) => HvStatus::Io,
    }
}

fn fail(status: HvStatus, msg: &str) -> HvStatus {
    set_error(msg);
    status
}

/// Runs `f`, recording its error message and turning panics into [`HvStatus::Panic`].
fn guard<F: FnOnce() -> Result<(), HvStatus>>(f: F) -> HvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(HvStatus::Panic, "panic inside heurvid"),
    }
}

fn lib<T>(r: heurvid::Result<T>) -> Result<T, HvStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, HvStatus> {
    if p.is_null() {
        return Err(fail(HvStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HvStatus::InvalidUtf8, "string argument is not UTF-8"))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, HvStatus> {
    p.as_mut().ok_or_else(|| fail(HvStatus::NullPointer, "null output pointer"))
}

unsafe fn ref_arg<'a, T>(p: *const T) -> Result<&'a T, HvStatus> {
    p.as_ref().ok_or_else(|| fail(HvStatus::NullPointer, "null handle"))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize) -> Result<&'a [f64], HvStatus> {
    if p.is_null() {
        return Err(fail(HvStatus::NullPointer, "null array argument"));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `s` NUL-terminated into `buf`; returns the byte length needed including the NUL.
unsafe fn copy_str(s: &str, buf: *mut c_char, cap: usize) -> usize {
    let need = s.len() + 1;
    if !buf.is_null() && cap > 0 {
        let n = s.len().min(cap - 1);
        std::ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
    }
    need
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncating to `cap`).
/// Returns the size needed including the NUL.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hv_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| copy_str(e.borrow().to_str().unwrap_or(""), buf, cap))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_prompter_load(path: *const c_char, out: *mut *mut HvPrompter) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        let p = lib(Prompter::load(Path::new(str_arg(path)?)))?;
        *out = Box::into_raw(Box::new(HvPrompter(p)));
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle from [`hv_prompter_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hv_prompter_free(p: *mut HvPrompter) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// # Safety
/// `p` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_prompter_is_frozen(p: *const HvPrompter, out: *mut bool) -> HvStatus {
    guard(|| {
        *out_arg(out)? = ref_arg(p)?.0.is_frozen();
        Ok(())
    })
}

/// # Safety
/// `p` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_prompter_tau(p: *const HvPrompter, out: *mut f64) -> HvStatus {
    guard(|| {
        *out_arg(out)? = ref_arg(p)?.0.tau();
        Ok(())
    })
}

/// Hex SHA-256 of the parameters. `needed` receives the size including the NUL;
/// returns [`HvStatus::BufferTooSmall`] when `cap` is short.
///
/// # Safety
/// `p` must be a live handle; `buf` must hold `cap` bytes; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn hv_prompter_checksum(
    p: *const HvPrompter,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> HvStatus {
    guard(|| {
        let sum = ref_arg(p)?.0.checksum();
        let need = copy_str(&sum, buf, cap);
        if let Some(n) = needed.as_mut() {
            *n = need;
        }
        if buf.is_null() || cap < need {
            return Err(fail(HvStatus::BufferTooSmall, "checksum buffer too small"));
        }
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_heuristics_load(path: *const c_char, out: *mut *mut HvHeuristicStore) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        let s = lib(HeuristicStore::load(Path::new(str_arg(path)?)))?;
        *out = Box::into_raw(Box::new(HvHeuristicStore(s)));
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a handle from [`hv_heuristics_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hv_heuristics_free(s: *mut HvHeuristicStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Training target of one video and kind. Returns [`HvStatus::NotFound`] when the
/// record is missing or was filtered; `len` always receives the score count (0 if none).
///
/// # Safety
/// `s` must be a live handle; `video_id` NUL-terminated; `buf` must hold `cap` doubles; `len` writable.
#[no_mangle]
pub unsafe extern "C" fn hv_heuristics_target(
    s: *const HvHeuristicStore,
    video_id: *const c_char,
    kind: HvKind,
    buf: *mut f64,
    cap: usize,
    len: *mut usize,
) -> HvStatus {
    guard(|| {
        let store = &ref_arg(s)?.0;
        let id = str_arg(video_id)?;
        let len = out_arg(len)?;
        let kind = match kind {
            HvKind::Action => PromptKind::Action,
            HvKind::Entity => PromptKind::Entity,
        };
        *len = 0;
        let Some(t) = store.target(id, kind) else {
            return Err(fail(HvStatus::NotFound, &format!("no kept {kind} heuristic for {id:?}")));
        };
        *len = t.len();
        if buf.is_null() || cap < t.len() {
            return Err(fail(HvStatus::BufferTooSmall, "target buffer too small"));
        }
        std::ptr::copy_nonoverlapping(t.as_ptr(), buf, t.len());
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_reasoner_load(path: *const c_char, out: *mut *mut HvReasoner) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        let r = lib(Reasoner::load(Path::new(str_arg(path)?)))?;
        *out = Box::into_raw(Box::new(HvReasoner(r)));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a handle from [`hv_reasoner_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hv_reasoner_free(r: *mut HvReasoner) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Evaluation-mode gate value for a question.
///
/// # Safety
/// `r` must be a live handle; `question` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hv_reasoner_gate(r: *const HvReasoner, question: *const c_char, out: *mut f64) -> HvStatus {
    guard(|| {
        let m = &ref_arg(r)?.0;
        let q = convert_oe(str_arg(question)?, &m.vocab);
        *out_arg(out)? = lib(m.gate_value(&q))?;
        Ok(())
    })
}

/// Symmetric contrastive loss of a row-major `batch × batch` similarity matrix.
///
/// # Safety
/// `sim` must point to `batch * batch` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hv_vtc_loss(sim: *const f64, batch: usize, tau: f64, out: *mut f64) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        let n = batch
            .checked_mul(batch)
            .ok_or_else(|| fail(HvStatus::Argument, "batch size overflows"))?;
        let s = lib(Tensor::matrix(batch, batch, slice_arg(sim, n)?.to_vec()))?;
        *out = lib(vtc_from_similarity(&s, tau))?.total;
        Ok(())
    })
}

/// `−Σ target·log(pred)` over `n` entries.
///
/// # Safety
/// `target` and `pred` must point to `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hv_soft_cross_entropy(target: *const f64, pred: *const f64, n: usize, out: *mut f64) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        *out = lib(soft_cross_entropy(slice_arg(target, n)?, slice_arg(pred, n)?))?;
        Ok(())
    })
}

/// Combined objective; `gate` is read only in gated mode.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hv_total_loss(
    pred: f64,
    tam: f64,
    sem: f64,
    mode: HvLossMode,
    alpha: f64,
    gate: f64,
    out: *mut f64,
) -> HvStatus {
    guard(|| {
        let out = out_arg(out)?;
        let cfg = LossConfig {
            mode: match mode {
                HvLossMode::FixedAlpha => LossMode::FixedAlpha,
                HvLossMode::Gated => LossMode::Gated,
                HvLossMode::NoHeuristics => LossMode::NoHeuristics,
            },
            alpha,
            ..Default::default()
        };
        *out = lib(total_loss(pred, tam, sem, &cfg, Some(gate)))?;
        Ok(())
    })
}

/// Runs a command-line subcommand in-process; returns its exit code.
///
/// # Safety
/// `argv` must point to `argc` NUL-terminated strings (subcommand first, no program name).
#[no_mangle]
pub unsafe extern "C" fn hv_run(argc: c_int, argv: *const *const c_char) -> c_int {
    let mut args = Vec::new();
    if argc > 0 {
        if argv.is_null() {
            set_error("null argv");
            return 1;
        }
        for i in 0..argc as usize {
            match str_arg(*argv.add(i)) {
                Ok(s) => args.push(s.to_string()),
                Err(_) => return 1,
            }
        }
    }
    let mut stderr = Vec::new();
    let code = catch_unwind(AssertUnwindSafe(|| {
        heurvid::cli::dispatch(&args, &mut std::io::stdout(), &mut stderr)
    }))
    .unwrap_or(2);
    let msg = String::from_utf8_lossy(&stderr);
    if code != 0 {
        set_error(msg.trim());
    }
    code
}
