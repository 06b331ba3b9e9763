//! C ABI over the membase engine.
//!
//! Handles are opaque. Every call returns an [`MbStatus`]; results come back
//! as JSON strings the caller releases with [`mb_string_free`]. After a
//! failure, [`mb_last_error`] holds a message for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use membase::engine::MemoryBase;
use membase::schema::parse_schema;
use membase::segmentation::Role;
use membase::service::{SearchParams, ServiceConfig};
use membase::Error;
use serde_json::Value;

/// Opaque engine handle.
pub struct MbHandle {
    engine: MemoryBase,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Bad JSON, failed validation or a bad configuration.
    Invalid = 3,
    NotFound = 4,
    /// A flush is already running for the session, or no schema is installed.
    Conflict = 5,
    Provider = 6,
    Io = 7,
    Internal = 8,
    Panic = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(MbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownSession(_) | Error::UnknownEntity { .. } | Error::UnknownEvent(_) => MbStatus::NotFound,
            Error::FlushInProgress(_) | Error::NoSchema => MbStatus::Conflict,
            Error::Schema(_)
            | Error::InvalidSchema(_)
            | Error::Conform(_)
            | Error::Config(_)
            | Error::IndexGap { .. }
            | Error::UnknownField { .. }
            | Error::NonNumeric { .. } => MbStatus::Invalid,
            Error::Provider(_) | Error::Segmentation(_) | Error::ExtractionFailed { .. } => MbStatus::Provider,
            Error::Io(_) => MbStatus::Io,
            Error::Patch(_) | Error::Store(_) => MbStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(MbStatus::Invalid, e.to_string())
    }
}

/// Runs `f`, mapping errors and panics to a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MbStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside membase");
            MbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(MbStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MbStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn handle<'a>(h: *const MbHandle) -> Result<&'a MemoryBase, Failure> {
    h.as_ref()
        .map(|h| &h.engine)
        .ok_or_else(|| Failure(MbStatus::NullArgument, "handle is null".into()))
}

unsafe fn write_json<T: serde::Serialize>(out: *mut *mut c_char, v: &T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MbStatus::NullArgument, "out is null".into()));
    }
    let s = serde_json::to_string(v)?;
    *out = CString::new(s).expect("JSON has no nul bytes").into_raw();
    Ok(())
}

unsafe fn check_out(out: *mut *mut c_char) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(MbStatus::NullArgument, "out is null".into()));
    }
    *out = ptr::null_mut();
    Ok(())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn mb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned through an `out` parameter.
///
/// # Safety
/// `s` must be null or a pointer produced by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Opens a data directory. `config_json` uses the service config format;
/// missing keys take their defaults.
///
/// # Safety
/// `config_json` must be a valid C string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn mb_open(config_json: *const c_char, out: *mut *mut MbHandle) -> MbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(MbStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let cfg: ServiceConfig = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        let engine = cfg.build()?;
        *out = Box::into_raw(Box::new(MbHandle { engine }));
        Ok(())
    })
}

/// Closes a handle. Null is ignored.
///
/// # Safety
/// `h` must come from [`mb_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mb_close(h: *mut MbHandle) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Installs a schema. On [`MbStatus::Invalid`] caused by validation, `out`
/// still receives the report.
///
/// # Safety
/// Pointers must be valid; `out` receives a string for [`mb_string_free`].
#[no_mangle]
pub unsafe extern "C" fn mb_install_schema(h: *const MbHandle, schema_json: *const c_char, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let mb = handle(h)?;
        let schema = parse_schema(str_arg(schema_json, "schema_json")?)
            .map_err(|e| Failure(MbStatus::Invalid, e.to_string()))?;
        let report = mb.install_schema(schema)?;
        write_json(out, &report)?;
        if !report.is_valid() {
            return Err(Failure(MbStatus::Invalid, format!("schema rejected with {} violation(s)", report.violations.len())));
        }
        Ok(())
    })
}

/// Buffers one message; the result says whether it triggered a flush.
///
/// # Safety
/// String pointers must be valid C strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_append_message(
    h: *const MbHandle,
    session: *const c_char,
    user: *const c_char,
    role: *const c_char,
    content: *const c_char,
    timestamp_ms: i64,
    out: *mut *mut c_char,
) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let mb = handle(h)?;
        let role: Role = serde_json::from_value(Value::String(str_arg(role, "role")?.to_string()))?;
        let r = mb.append_message(
            str_arg(session, "session")?,
            str_arg(user, "user")?,
            role,
            str_arg(content, "content")?,
            timestamp_ms,
            None,
        )?;
        write_json(out, &r)
    })
}

/// Runs the extraction pipeline over a session's buffered messages.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_flush(h: *const MbHandle, session: *const c_char, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let r = handle(h)?.flush(str_arg(session, "session")?)?;
        write_json(out, &r)
    })
}

/// Searches memories. `params_json` may be null or an object with the
/// search endpoint's query parameters (`k`, `w_time`, `kind`, ...).
///
/// # Safety
/// Pointers must be valid (`params_json` may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_search(
    h: *const MbHandle,
    query: *const c_char,
    params_json: *const c_char,
    out: *mut *mut c_char,
) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let mb = handle(h)?;
        let mut params = if params_json.is_null() {
            serde_json::Map::new()
        } else {
            serde_json::from_str(str_arg(params_json, "params_json")?)?
        };
        params.insert("q".into(), Value::String(str_arg(query, "query")?.to_string()));
        let p: SearchParams = serde_json::from_value(Value::Object(params))?;
        let hits = mb.search(&p.q, &p.recall_config(&mb.config().recall), &p.filter())?;
        write_json(out, &hits)
    })
}

/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_get_entity(
    h: *const MbHandle,
    entity_type: *const c_char,
    group_key: *const c_char,
    out: *mut *mut c_char,
) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let e = handle(h)?.get_entity(str_arg(entity_type, "entity_type")?, str_arg(group_key, "group_key")?)?;
        write_json(out, &e)
    })
}

/// Processes up to `limit` queued entity merges.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_run_consolidation(h: *const MbHandle, limit: u32, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let r = handle(h)?.run_consolidation(limit as usize)?;
        write_json(out, &r)
    })
}

/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_compress(h: *const MbHandle, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let r = handle(h)?.compress()?;
        write_json(out, &r)
    })
}

/// Writes the JSON array of pruned ids.
///
/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_expire(h: *const MbHandle, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        let r = handle(h)?.expire()?;
        write_json(out, &r)
    })
}

/// # Safety
/// Pointers must be valid; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mb_health(h: *const MbHandle, out: *mut *mut c_char) -> MbStatus {
    guard(|| {
        check_out(out)?;
        write_json(out, &handle(h)?.health())
    })
}
