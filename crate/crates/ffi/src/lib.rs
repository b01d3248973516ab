//! C interface to the engine.
//!
//! Conventions, in order of importance:
//!
//! - Every function returns a `TsStatus`; `TS_STATUS_OK` is zero. Failures
//!   leave a human-readable message in thread-local storage, readable via
//!   `ts_last_error` until the next failing call on the same thread.
//! - `TsEngine` is opaque. `ts_engine_open` hands out an owning pointer;
//!   exactly one of `ts_engine_shutdown` or `ts_engine_free` takes it back.
//!   After either call the pointer is dead, whatever the returned status.
//! - All other engine calls take a shared reference and are safe to issue
//!   from any number of threads at once. The outcome stream is the one
//!   exception worth knowing about: concurrent `ts_engine_next_outcome`
//!   callers steal from each other, so dedicate a thread to it.
//! - Buffers returned by the library (`ts_engine_dump`) are freed with
//!   `ts_buffer_free`, never with `free()`.
//! - No callback ever runs on a library thread, and no panic crosses the
//!   boundary; a bug that would have panicked returns `TS_STATUS_PANIC`.
//!
//! The written state model mirrors the Rust API: parameter vectors under
//! string keys, deltas folded in submission order, reads served from a
//! consistent snapshot. Updates are asynchronous (poll the outcome stream
//! or call `ts_engine_flush` as a barrier); reads return synchronously.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use tstream_core::engine::{Admission, Engine, EngineConfig};
use tstream_core::error::Error;
use tstream_core::store::ShardKey;
use tstream_core::txn::{RejectReason, StateOp, Transaction, TxnOutcome, TxnStatus};

/// Opaque handle to one engine instance.
pub struct TsEngine {
    engine: Engine,
    outcomes: Receiver<TxnOutcome>,
}

/// Status code for every call. Zero is success; everything else names the
/// first thing that went wrong.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Malformed input: bad UTF-8, empty or oversized key, zero executors,
    /// dimension mismatch, non-finite values.
    InvalidArgument = 2,
    IoError = 3,
    /// Persistent data failed validation (checksum, decode, epoch order).
    Corrupt = 4,
    /// The engine stopped after a commit-path failure and refuses new work.
    Halted = 5,
    /// The transaction was refused by validation before admission.
    RejectedValidation = 6,
    /// The engine is over its pending-update limit; retry after a flush.
    RejectedBackpressure = 7,
    /// The key exists in no committed state.
    NotFound = 8,
    /// Caller's buffer is too small; the needed size was written out.
    BufferTooSmall = 9,
    /// No outcome arrived within the deadline.
    Timeout = 10,
    /// A library bug; details in `ts_last_error`.
    Panic = 11,
}

/// One resolved transaction from the outcome stream.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TsOutcome {
    pub txn_id: u64,
    /// Admission stamp; total order across all submissions.
    pub ts: u64,
    /// Epoch the transaction committed in; 0 when rejected.
    pub epoch: u64,
    pub latency_ns: u64,
    /// 1 committed, 0 rejected.
    pub committed: u8,
    /// `TS_STATUS_OK` when committed, otherwise the rejection mapped to a
    /// status code.
    pub status: TsStatus,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: TsStatus, msg: impl Into<Vec<u8>>) -> TsStatus {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("error message had NUL").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
    status
}

fn fail_error(e: &Error) -> TsStatus {
    let status = match e {
        Error::InvalidArgument(_) | Error::DimMismatch { .. } => TsStatus::InvalidArgument,
        Error::Codec(_) | Error::Corrupt(_) => TsStatus::Corrupt,
        Error::Halted => TsStatus::Halted,
        Error::Io { .. } => TsStatus::IoError,
        _ => TsStatus::Panic,
    };
    fail(status, e.to_string())
}

fn reject_status(reason: &RejectReason) -> TsStatus {
    match reason {
        RejectReason::Validation(m) => fail(TsStatus::RejectedValidation, m.clone()),
        RejectReason::Backpressure => fail(TsStatus::RejectedBackpressure, "pending limit reached"),
        RejectReason::Halted => fail(TsStatus::Halted, "engine halted"),
    }
}

/// Every boundary goes through here so a panic can never unwind into C.
fn guarded(f: impl FnOnce() -> TsStatus) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".to_string());
            fail(TsStatus::Panic, msg)
        }
    }
}

unsafe fn key_from(key: *const c_char) -> Result<ShardKey, TsStatus> {
    if key.is_null() {
        return Err(fail(TsStatus::NullArgument, "key is null"));
    }
    let s = CStr::from_ptr(key)
        .to_str()
        .map_err(|_| fail(TsStatus::InvalidArgument, "key is not UTF-8"))?;
    ShardKey::params(s).map_err(|e| fail_error(&e))
}

unsafe fn engine_from<'a>(engine: *const TsEngine) -> Result<&'a TsEngine, TsStatus> {
    engine.as_ref().ok_or_else(|| fail(TsStatus::NullArgument, "engine is null"))
}

/// Open an engine.
///
/// `data_dir` may be null for a volatile engine (no log, no checkpoints,
/// nothing survives the process). With a directory, the engine recovers
/// whatever state the directory holds and appends to its log; the
/// directory is created if missing.
///
/// # Safety
/// `data_dir`, when non-null, must point to a NUL-terminated string, and
/// `out` must point to writable memory for one pointer.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_open(
    data_dir: *const c_char,
    executors: u32,
    out: *mut *mut TsEngine,
) -> TsStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        let dir = if data_dir.is_null() {
            None
        } else {
            match CStr::from_ptr(data_dir).to_str() {
                Ok(s) => Some(PathBuf::from(s)),
                Err(_) => return fail(TsStatus::InvalidArgument, "data_dir is not UTF-8"),
            }
        };
        let cfg = EngineConfig {
            executors,
            // Periodic checkpoints only make sense with somewhere to put them.
            checkpoint_every: if dir.is_some() { EngineConfig::default().checkpoint_every } else { 0 },
            data_dir: dir,
            ..EngineConfig::default()
        };
        match Engine::open(cfg) {
            Ok(engine) => {
                let outcomes = engine.outcomes();
                *out = Box::into_raw(Box::new(TsEngine { engine, outcomes }));
                TsStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Drain admitted work, sync the log, stop all threads, and destroy the
/// handle. The pointer is invalid after this call even on failure.
///
/// # Safety
/// `engine` must be a pointer from `ts_engine_open` not yet passed to
/// `ts_engine_shutdown` or `ts_engine_free`, with no concurrent calls on it.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_shutdown(engine: *mut TsEngine) -> TsStatus {
    guarded(|| {
        if engine.is_null() {
            return fail(TsStatus::NullArgument, "engine is null");
        }
        let boxed = Box::from_raw(engine);
        match boxed.engine.shutdown() {
            Ok(()) => TsStatus::Ok,
            Err(e) => fail_error(&e),
        }
    })
}

/// Destroy the handle without the final log sync. Still orderly, just
/// silent about failures.
///
/// # Safety
/// Same contract as `ts_engine_shutdown`.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_free(engine: *mut TsEngine) {
    if engine.is_null() {
        return;
    }
    let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(engine))));
}

unsafe fn submit_update(
    engine: *const TsEngine,
    txn: Transaction,
    out_txn_id: *mut u64,
) -> TsStatus {
    let handle = match engine_from(engine) {
        Ok(h) => h,
        Err(s) => return s,
    };
    match handle.engine.submit(txn) {
        Ok(Admission::Update { txn_id, .. }) => {
            if !out_txn_id.is_null() {
                *out_txn_id = txn_id;
            }
            TsStatus::Ok
        }
        Ok(Admission::Inference(_)) => fail(TsStatus::Panic, "update came back as a read"),
        Err(r) => reject_status(&r.reason),
    }
}

/// Submit a delta: element-wise add to the vector at `key`, creating it if
/// absent. Asynchronous; the commit (or rejection) arrives on the outcome
/// stream. `out_txn_id` may be null if the caller does not track outcomes.
///
/// # Safety
/// `key` must be NUL-terminated, `delta` must point to `dim` doubles, and
/// `out_txn_id`, when non-null, must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_apply(
    engine: *const TsEngine,
    key: *const c_char,
    delta: *const f64,
    dim: usize,
    out_txn_id: *mut u64,
) -> TsStatus {
    guarded(|| {
        let k = match key_from(key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        if delta.is_null() {
            return fail(TsStatus::NullArgument, "delta is null");
        }
        let delta = std::slice::from_raw_parts(delta, dim).to_vec();
        submit_update(engine, Transaction::update(vec![StateOp::Apply { key: k, delta }]), out_txn_id)
    })
}

/// Submit an overwrite of the vector at `key`. A key's dimension is fixed
/// by its first write; a mismatched overwrite is rejected at commit time.
///
/// # Safety
/// Same contract as `ts_engine_apply`.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_write(
    engine: *const TsEngine,
    key: *const c_char,
    values: *const f64,
    dim: usize,
    out_txn_id: *mut u64,
) -> TsStatus {
    guarded(|| {
        let k = match key_from(key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        if values.is_null() {
            return fail(TsStatus::NullArgument, "values is null");
        }
        let v = std::slice::from_raw_parts(values, dim).to_vec();
        let value = tstream_core::store::ShardValue::Params(v);
        submit_update(engine, Transaction::update(vec![StateOp::Write { key: k, value }]), out_txn_id)
    })
}

/// Read the vector at `key` from a consistent snapshot of the latest
/// committed state. On success `*out_dim` is the vector's length and that
/// many doubles are copied. `TS_STATUS_BUFFER_TOO_SMALL` still sets
/// `*out_dim` so the caller can size a retry; `TS_STATUS_NOT_FOUND` sets it
/// to zero.
///
/// # Safety
/// `key` must be NUL-terminated, `out_values` must point to `cap` writable
/// doubles (may be null when `cap` is 0), and `out_dim` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_read(
    engine: *const TsEngine,
    key: *const c_char,
    out_values: *mut f64,
    cap: usize,
    out_dim: *mut usize,
) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        let k = match key_from(key) {
            Ok(k) => k,
            Err(s) => return s,
        };
        if out_dim.is_null() {
            return fail(TsStatus::NullArgument, "out_dim is null");
        }
        *out_dim = 0;
        let outcome = match handle.engine.submit(Transaction::inference(vec![k])) {
            Ok(Admission::Inference(o)) => o,
            Ok(Admission::Update { .. }) => return fail(TsStatus::Panic, "read came back as an update"),
            Err(r) => return reject_status(&r.reason),
        };
        if let TxnStatus::Rejected { reason } = &outcome.status {
            return reject_status(reason);
        }
        let value = outcome.reads.first().and_then(|r| r.value.as_ref());
        let params = match value.and_then(|v| v.as_params()) {
            Some(p) => p,
            None => return fail(TsStatus::NotFound, "key has no committed value"),
        };
        *out_dim = params.len();
        if params.len() > cap {
            return fail(TsStatus::BufferTooSmall, format!("need {} doubles", params.len()));
        }
        if !params.is_empty() {
            if out_values.is_null() {
                return fail(TsStatus::NullArgument, "out_values is null");
            }
            std::ptr::copy_nonoverlapping(params.as_ptr(), out_values, params.len());
        }
        TsStatus::Ok
    })
}

/// Block until every update admitted so far has an outcome on the stream.
///
/// # Safety
/// `engine` must be a live handle from `ts_engine_open`.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_flush(engine: *const TsEngine) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        match handle.engine.flush() {
            Ok(()) => TsStatus::Ok,
            Err(e) => fail_error(&e),
        }
    })
}

/// Write a checkpoint of the current committed state. No-op returning OK
/// on a volatile engine.
///
/// # Safety
/// `engine` must be a live handle from `ts_engine_open`.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_checkpoint(engine: *const TsEngine) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        match handle.engine.checkpoint_now() {
            Ok(_) => TsStatus::Ok,
            Err(e) => fail_error(&e),
        }
    })
}

/// Highest committed epoch.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_watermark(engine: *const TsEngine, out: *mut u64) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        *out = handle.engine.watermark();
        TsStatus::Ok
    })
}

/// Wait up to `timeout_ms` for the next resolved transaction. Exactly one
/// outcome is eventually delivered per submitted transaction, rejections
/// included; reads are delivered too, already resolved.
///
/// # Safety
/// `engine` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_next_outcome(
    engine: *const TsEngine,
    timeout_ms: u64,
    out: *mut TsOutcome,
) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out.is_null() {
            return fail(TsStatus::NullArgument, "out is null");
        }
        let o = match handle.outcomes.recv_timeout(Duration::from_millis(timeout_ms)) {
            Ok(o) => o,
            Err(RecvTimeoutError::Timeout) => return TsStatus::Timeout,
            Err(RecvTimeoutError::Disconnected) => {
                return fail(TsStatus::Halted, "outcome stream closed")
            }
        };
        let (committed, epoch, status) = match &o.status {
            TxnStatus::Committed { epoch } => (1u8, *epoch, TsStatus::Ok),
            TxnStatus::Rejected { reason } => (0u8, 0, reject_status(reason)),
        };
        *out = TsOutcome {
            txn_id: o.txn_id,
            ts: o.ts,
            epoch,
            latency_ns: o.latency_ns,
            committed,
            status,
        };
        TsStatus::Ok
    })
}

/// Serialize the entire committed state, key-ordered. Equal states produce
/// equal bytes, which makes the dump a cheap equality witness across
/// processes. Free the buffer with `ts_buffer_free`.
///
/// # Safety
/// `engine` must be a live handle; `out_buf` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ts_engine_dump(
    engine: *const TsEngine,
    out_buf: *mut *mut u8,
    out_len: *mut usize,
) -> TsStatus {
    guarded(|| {
        let handle = match engine_from(engine) {
            Ok(h) => h,
            Err(s) => return s,
        };
        if out_buf.is_null() || out_len.is_null() {
            return fail(TsStatus::NullArgument, "out_buf or out_len is null");
        }
        let store = handle.engine.store();
        let snap = store.create_snapshot();
        let entries = store.dump(&snap);
        let _ = store.release_snapshot(&snap);
        match entries {
            Ok(entries) => {
                let bytes = tstream_core::codec::encode_dump(&entries).into_boxed_slice();
                *out_len = bytes.len();
                *out_buf = Box::into_raw(bytes) as *mut u8;
                TsStatus::Ok
            }
            Err(e) => fail_error(&e),
        }
    })
}

/// Free a buffer returned by this library. `len` must be the length the
/// library reported for it.
///
/// # Safety
/// `buf` must be a pointer this library returned, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ts_buffer_free(buf: *mut u8, len: usize) {
    if buf.is_null() {
        return;
    }
    drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(buf, len)));
}

/// Static name for a status code. Never null.
#[no_mangle]
pub extern "C" fn ts_status_name(status: TsStatus) -> *const c_char {
    let name: &'static [u8] = match status {
        TsStatus::Ok => b"ok\0",
        TsStatus::NullArgument => b"null argument\0",
        TsStatus::InvalidArgument => b"invalid argument\0",
        TsStatus::IoError => b"io error\0",
        TsStatus::Corrupt => b"corrupt data\0",
        TsStatus::Halted => b"engine halted\0",
        TsStatus::RejectedValidation => b"rejected by validation\0",
        TsStatus::RejectedBackpressure => b"rejected by backpressure\0",
        TsStatus::NotFound => b"not found\0",
        TsStatus::BufferTooSmall => b"buffer too small\0",
        TsStatus::Timeout => b"timeout\0",
        TsStatus::Panic => b"internal panic\0",
    };
    name.as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or null if the
/// thread has none. Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}
