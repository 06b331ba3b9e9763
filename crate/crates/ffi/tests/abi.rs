use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use membase_ffi::*;
use serde_json::{json, Value};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn config(dir: &Path) -> CString {
    let cfg = json!({
        "data_dir": dir,
        "fsync": false,
        "provider": { "mode": "mock", "script": fixture("tools/mock_script.json") },
    });
    CString::new(cfg.to_string()).unwrap()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

/// Takes ownership of an out string and parses it.
unsafe fn take(out: *mut c_char) -> Value {
    assert!(!out.is_null());
    let v = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
    mb_string_free(out);
    v
}

unsafe fn last_error() -> String {
    let p = mb_last_error();
    assert!(!p.is_null());
    CStr::from_ptr(p).to_string_lossy().into_owned()
}

unsafe fn open(dir: &Path) -> *mut MbHandle {
    let mut h = ptr::null_mut();
    assert_eq!(mb_open(config(dir).as_ptr(), &mut h), MbStatus::Ok);
    assert!(!h.is_null());
    h
}

#[test]
fn full_cycle_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let h = open(dir.path());
        let schema = c(&std::fs::read_to_string(fixture("tools/schema.json")).unwrap());
        let mut out = ptr::null_mut();
        assert_eq!(mb_install_schema(h, schema.as_ptr(), &mut out), MbStatus::Ok);
        assert_eq!(take(out)["violations"], json!([]));

        let (sid, user, role) = (c("s1"), c("u1"), c("user"));
        let mut last = Value::Null;
        for i in 0..20 {
            let msg = c(&format!("message {i} about tools"));
            let mut out = ptr::null_mut();
            let st = mb_append_message(h, sid.as_ptr(), user.as_ptr(), role.as_ptr(), msg.as_ptr(), 1_700_000_000_000 + i, &mut out);
            assert_eq!(st, MbStatus::Ok);
            last = take(out);
        }
        assert_eq!(last["status"], "flushed");
        assert_eq!(last["flush"]["event_ids"].as_array().unwrap().len(), 2);

        let mut out = ptr::null_mut();
        let params = c(r#"{"k": 3, "kind": "event"}"#);
        assert_eq!(mb_search(h, c("web_search").as_ptr(), params.as_ptr(), &mut out), MbStatus::Ok);
        let hits = take(out);
        assert!(!hits.as_array().unwrap().is_empty());
        assert!(hits[0]["s_final"].is_number());

        let mut out = ptr::null_mut();
        assert_eq!(mb_get_entity(h, c("ToolProfile").as_ptr(), c("tool=pdf_reader").as_ptr(), &mut out), MbStatus::Ok);
        assert_eq!(take(out)["properties"]["failure_cases"], "fails on scanned PDFs");

        let mut out = ptr::null_mut();
        assert_eq!(mb_run_consolidation(h, 10, &mut out), MbStatus::Ok);
        assert_eq!(take(out)["completed"].as_array().unwrap().len(), 1);

        for f in [mb_compress, mb_expire, mb_health] {
            let mut out = ptr::null_mut();
            assert_eq!(f(h, &mut out), MbStatus::Ok);
            take(out);
        }
        mb_close(h);

        // Reopening sees the committed state.
        let h = open(dir.path());
        let mut out = ptr::null_mut();
        assert_eq!(mb_health(h, &mut out), MbStatus::Ok);
        let health = take(out);
        assert_eq!(health["events"], 2);
        assert_eq!(health["queue_depth"], 0);
        mb_close(h);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        assert_eq!(mb_open(ptr::null(), &mut h), MbStatus::NullArgument);
        assert!(last_error().contains("config_json"));
        assert_eq!(mb_open(c("{").as_ptr(), &mut h), MbStatus::Invalid);
        assert!(h.is_null());
        // Mock mode without a script is a config error.
        let no_script = c(&json!({ "data_dir": dir.path() }).to_string());
        assert_eq!(mb_open(no_script.as_ptr(), &mut h), MbStatus::Invalid);

        let h = open(dir.path());
        let mut out = ptr::null_mut();
        assert_eq!(mb_health(ptr::null(), &mut out), MbStatus::NullArgument);
        assert_eq!(mb_health(h, ptr::null_mut()), MbStatus::NullArgument);

        let bad = c(&std::fs::read_to_string(fixture("avg_over_string.json")).unwrap());
        assert_eq!(mb_install_schema(h, bad.as_ptr(), &mut out), MbStatus::Invalid);
        let report = take(out);
        assert_eq!(report["violations"][0]["message"], "AVG requires numeric source");

        let mut out = ptr::null_mut();
        assert_eq!(mb_flush(h, c("ghost").as_ptr(), &mut out), MbStatus::NotFound);
        assert!(out.is_null());

        let (sid, user, msg) = (c("s1"), c("u1"), c("hi"));
        assert_eq!(
            mb_append_message(h, sid.as_ptr(), user.as_ptr(), c("robot").as_ptr(), msg.as_ptr(), 1, &mut out),
            MbStatus::Invalid
        );
        assert_eq!(mb_append_message(h, sid.as_ptr(), user.as_ptr(), c("user").as_ptr(), msg.as_ptr(), 1, &mut out), MbStatus::Ok);
        take(out);
        let mut out = ptr::null_mut();
        assert_eq!(mb_flush(h, sid.as_ptr(), &mut out), MbStatus::Conflict);
        assert!(last_error().contains("schema"));

        let invalid_utf8 = [0xffu8, 0xfe, 0];
        assert_eq!(mb_search(h, invalid_utf8.as_ptr().cast(), ptr::null(), &mut out), MbStatus::InvalidUtf8);
        assert_eq!(mb_search(h, c("x").as_ptr(), c(r#"{"w_time": 3}"#).as_ptr(), &mut out), MbStatus::Invalid);

        // Success clears the thread's error.
        assert_eq!(mb_health(h, &mut out), MbStatus::Ok);
        take(out);
        assert!(mb_last_error().is_null());
        mb_close(h);
        mb_close(ptr::null_mut());
        mb_string_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mb_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    // <target>/<profile>/deps/abi-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_generated_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = manifest.join("include/membase.h");
    assert!(header.is_file(), "build.rs writes the header");
    let lib = target_dir().join("libmembase_ffi.a");
    assert!(lib.is_file(), "static library at {}", lib.display());

    let tmp = tempfile::tempdir().unwrap();
    let exe = tmp.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success());

    let schema = std::fs::read_to_string(fixture("tools/schema.json")).unwrap();
    let out = Command::new(&exe)
        .arg(config(&tmp.path().join("data")).to_str().unwrap())
        .arg(&schema)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let health: Value = serde_json::from_str(stdout.lines().next().unwrap()).unwrap();
    assert_eq!(health["schema_version"], 1);
    assert!(stdout.contains(&format!("version {}", env!("CARGO_PKG_VERSION"))));
}
