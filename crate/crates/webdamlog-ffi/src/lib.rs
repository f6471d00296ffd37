//! C ABI over the simulated runtime: create a system, add peers, load
//! programs, push fact updates, run to quiescence, and read relations
//! back as rendered text.
//!
//! Conventions: every function that can fail returns a [`WdlStatus`];
//! on failure a message is left in thread-local storage and can be read
//! with `wdl_last_error` (valid until the next failing call on the same
//! thread). Strings returned through out-pointers are owned by the
//! caller and must be released with `wdl_string_free`. `WdlSystem` is
//! opaque; it is not thread-safe and must be freed with
//! `wdl_system_free` exactly once.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{self, AssertUnwindSafe};

use webdamlog::parser::{parse_fact, render_fact};
use webdamlog::schema::RelationKey;
use webdamlog::sim::{SimError, SimSystem};
use webdamlog::transport::SimNetConfig;

/// Result of an FFI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WdlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    UnknownPeer = 4,
    /// The round budget ran out before the system went quiescent.
    BudgetExceeded = 5,
    RuntimeError = 6,
    /// The callee panicked; the system may be in a broken state.
    Panic = 7,
}

/// A set of peers wired through the deterministic in-process network.
pub struct WdlSystem {
    inner: SimSystem,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn sim_status(err: &SimError) -> WdlStatus {
    match err {
        SimError::UnknownPeer(_) => WdlStatus::UnknownPeer,
        SimError::Budget { .. } => WdlStatus::BudgetExceeded,
        SimError::Stage { .. } => WdlStatus::RuntimeError,
    }
}

/// Unwinding across the C boundary is undefined; trap it and report.
fn guarded(f: impl FnOnce() -> WdlStatus) -> WdlStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_error(format!("internal panic: {msg}"));
            WdlStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn arg_str<'a>(p: *const c_char) -> Result<&'a str, WdlStatus> {
    if p.is_null() {
        set_error("null pointer argument".to_string());
        return Err(WdlStatus::NullPointer);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8".to_string());
        WdlStatus::InvalidUtf8
    })
}

unsafe fn system_mut<'a>(p: *mut WdlSystem) -> Result<&'a mut SimSystem, WdlStatus> {
    if p.is_null() {
        set_error("null system handle".to_string());
        return Err(WdlStatus::NullPointer);
    }
    Ok(&mut (*p).inner)
}

/// Message for the most recent failure on this thread, or null if the
/// last call succeeded. The pointer is invalidated by the next failure.
#[no_mangle]
pub extern "C" fn wdl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn wdl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates an empty system. Message delivery is FIFO per link and
/// deterministic for a given `seed`. Free with `wdl_system_free`.
#[no_mangle]
pub extern "C" fn wdl_system_new(seed: u64) -> *mut WdlSystem {
    let config = SimNetConfig { seed, ..SimNetConfig::default() };
    Box::into_raw(Box::new(WdlSystem { inner: SimSystem::new(config) }))
}

/// # Safety
/// `sys` must come from `wdl_system_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_free(sys: *mut WdlSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// Creates a peer; adding an existing name is a no-op.
///
/// # Safety
/// `sys` must be a live handle; `name` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_add_peer(sys: *mut WdlSystem, name: *const c_char) -> WdlStatus {
    guarded(|| {
        let system = match system_mut(sys) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let name = match arg_str(name) {
            Ok(s) => s,
            Err(st) => return st,
        };
        system.add_peer(name);
        WdlStatus::Ok
    })
}

/// Loads program text (declarations, facts, rules) at `peer`.
///
/// # Safety
/// `sys` must be a live handle; `peer` and `program` valid strings.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_load(
    sys: *mut WdlSystem,
    peer: *const c_char,
    program: *const c_char,
) -> WdlStatus {
    guarded(|| {
        let system = match system_mut(sys) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let peer = match arg_str(peer) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let program = match arg_str(program) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let host = match system.peer_mut(peer) {
            Ok(h) => h,
            Err(e) => {
                set_error(e.to_string());
                return sim_status(&e);
            }
        };
        match host.load_program(program) {
            Ok(_) => WdlStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                WdlStatus::ParseError
            }
        }
    })
}

unsafe fn apply_fact(
    sys: *mut WdlSystem,
    fact: *const c_char,
    insert: bool,
) -> WdlStatus {
    let system = match system_mut(sys) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let text = match arg_str(fact) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let fact = match parse_fact(text) {
        Ok(f) => f,
        Err(e) => {
            set_error(e.to_string());
            return WdlStatus::ParseError;
        }
    };
    let host = match system.peer_mut(&fact.peer) {
        Ok(h) => h,
        Err(e) => {
            set_error(e.to_string());
            return sim_status(&e);
        }
    };
    let applied =
        if insert { host.insert_fact(&fact) } else { host.delete_fact(&fact) };
    match applied {
        Ok(()) => WdlStatus::Ok,
        Err(e) => {
            set_error(e.to_string());
            WdlStatus::RuntimeError
        }
    }
}

/// Inserts a fact written as `rel@peer(v1, ...)` at its owner.
///
/// # Safety
/// `sys` must be a live handle; `fact` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_insert(sys: *mut WdlSystem, fact: *const c_char) -> WdlStatus {
    guarded(|| apply_fact(sys, fact, true))
}

/// Deletes a fact written as `rel@peer(v1, ...)` at its owner.
///
/// # Safety
/// `sys` must be a live handle; `fact` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_delete(sys: *mut WdlSystem, fact: *const c_char) -> WdlStatus {
    guarded(|| apply_fact(sys, fact, false))
}

/// Runs exactly `rounds` global rounds (stage every peer, deliver).
///
/// # Safety
/// `sys` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_run_rounds(sys: *mut WdlSystem, rounds: usize) -> WdlStatus {
    guarded(|| {
        let system = match system_mut(sys) {
            Ok(s) => s,
            Err(st) => return st,
        };
        for _ in 0..rounds {
            if let Err(e) = system.run_round() {
                set_error(e.to_string());
                return sim_status(&e);
            }
        }
        WdlStatus::Ok
    })
}

/// Runs rounds until no peer has work and nothing is in flight, failing
/// with `BudgetExceeded` after `budget` rounds. If `rounds_run` is
/// non-null it receives the number of rounds taken.
///
/// # Safety
/// `sys` must be a live handle; `rounds_run` null or writable.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_quiesce(
    sys: *mut WdlSystem,
    budget: usize,
    rounds_run: *mut usize,
) -> WdlStatus {
    guarded(|| {
        let system = match system_mut(sys) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match system.run_until_quiescent(budget) {
            Ok(rounds) => {
                if !rounds_run.is_null() {
                    *rounds_run = rounds;
                }
                WdlStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                sim_status(&e)
            }
        }
    })
}

/// Reads a relation written as `rel@peer` at its owner. `*out` receives
/// a newly allocated string, one rendered fact per line in sorted order
/// (empty string for an empty or undeclared relation); release it with
/// `wdl_string_free`.
///
/// # Safety
/// `sys` must be a live handle; `relation` a valid string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn wdl_system_read(
    sys: *mut WdlSystem,
    relation: *const c_char,
    out: *mut *mut c_char,
) -> WdlStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null out pointer".to_string());
            return WdlStatus::NullPointer;
        }
        let system = match system_mut(sys) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let text = match arg_str(relation) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let Some((rel, peer)) = text.split_once('@') else {
            set_error(format!("expected rel@peer, got {text}"));
            return WdlStatus::ParseError;
        };
        let host = match system.peer(peer) {
            Ok(h) => h,
            Err(e) => {
                set_error(e.to_string());
                return sim_status(&e);
            }
        };
        let key = RelationKey::new(rel, peer);
        let lines: Vec<String> = host
            .peek(&key)
            .into_iter()
            .map(|tuple| render_fact(&webdamlog::ast::Fact::new(rel, peer, tuple)))
            .collect();
        let joined = CString::new(lines.join("\n").replace('\0', " ")).expect("nul replaced");
        *out = joined.into_raw();
        WdlStatus::Ok
    })
}

/// Releases a string returned through an out-pointer.
///
/// # Safety
/// `s` must be null or a string produced by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn wdl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
