use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use moelab::api::{self, Operation};
use moelab_ffi::*;

fn call(op: &str, body: &[u8]) -> (MoelabStatus, *mut MoelabResponse) {
    let op = CString::new(op).unwrap();
    let mut out = ptr::null_mut();
    let st = unsafe { moelab_call(op.as_ptr(), body.as_ptr(), body.len(), &mut out) };
    (st, out)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(moelab_last_error()) }
        .to_str()
        .unwrap()
        .to_owned()
}

#[test]
fn envelopes_match_the_library() {
    let job = api::fixture("deepseek-v3").unwrap().json.as_bytes();
    for (op, body) in [
        ("estimate", job),
        ("cost", job),
        ("fixtures", b"{}".as_slice()),
        ("estimate", b"{".as_slice()),
    ] {
        let (st, r) = call(op, body);
        assert_eq!(st, MoelabStatus::Ok);
        let want = api::handle(Operation::from_name(op).unwrap(), body);
        unsafe {
            let json = CStr::from_ptr(moelab_response_json(r)).to_str().unwrap();
            assert_eq!(json, want.to_json());
            assert_eq!(moelab_response_json_len(r), json.len());
            assert_eq!(moelab_response_http_status(r), want.status.http_code());
            assert_eq!(moelab_response_exit_code(r), want.status.exit_code());
            moelab_response_free(r);
        }
    }
}

#[test]
fn bad_arguments_report_codes() {
    let (st, r) = call("nope", b"{}");
    assert_eq!(st, MoelabStatus::UnknownOperation);
    assert!(r.is_null());
    assert!(last_error().contains("nope"));

    let st = unsafe { moelab_call(ptr::null(), ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(st, MoelabStatus::NullPointer);

    let bad = [0xffu8, 0];
    let mut out = ptr::null_mut();
    let st = unsafe { moelab_call(bad.as_ptr().cast(), ptr::null(), 0, &mut out) };
    assert_eq!(st, MoelabStatus::InvalidUtf8);

    let mut s = ptr::null_mut();
    let st = unsafe { moelab_stash_new(4, 0, 1, 0, &mut s) };
    assert_eq!(st, MoelabStatus::InvalidArgument);
    assert!(last_error().starts_with("invalid_argument"));
}

#[test]
fn stash_round_trips_and_keeps_records_on_short_buffers() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(moelab_stash_new(6, 3, 4, 16, &mut s), MoelabStatus::Ok);
        let a: Vec<u8> = (0..28).collect();
        let b: Vec<u8> = (100..112).collect();
        let mut pages = 0;
        assert_eq!(
            moelab_stash_put(s, 0, 7, a.as_ptr(), a.len(), &mut pages),
            MoelabStatus::Ok
        );
        assert_eq!(pages, 3);
        assert_eq!(
            moelab_stash_put(s, 1, 3, b.as_ptr(), b.len(), &mut pages),
            MoelabStatus::Ok
        );
        assert_eq!(pages, 1);
        assert_eq!(moelab_stash_free_pages(s), 2);

        let bad = moelab_stash_put(s, 2, 7, a.as_ptr(), a.len(), ptr::null_mut());
        assert_eq!(bad, MoelabStatus::OutOfPages);
        let short = moelab_stash_put(s, 2, 2, a.as_ptr(), 3, ptr::null_mut());
        assert_eq!(short, MoelabStatus::InvalidArgument);

        let mut buf = vec![0u8; 28];
        let mut len = 0;
        assert_eq!(
            moelab_stash_take(s, 0, buf.as_mut_ptr(), 10, &mut len),
            MoelabStatus::BufferTooSmall
        );
        assert_eq!(moelab_stash_free_pages(s), 2);
        assert_eq!(
            moelab_stash_take(s, 0, buf.as_mut_ptr(), buf.len(), &mut len),
            MoelabStatus::Ok
        );
        assert_eq!(&buf[..len], &a[..]);
        assert_eq!(
            moelab_stash_take(s, 0, buf.as_mut_ptr(), buf.len(), &mut len),
            MoelabStatus::InvalidArgument
        );
        assert_eq!(
            moelab_stash_take(s, 1, buf.as_mut_ptr(), buf.len(), &mut len),
            MoelabStatus::Ok
        );
        assert_eq!(&buf[..len], &b[..]);
        assert_eq!(moelab_stash_free_pages(s), 6);
        assert_eq!(moelab_stash_peak_pages(s), 4);
        moelab_stash_free(s);
        moelab_stash_free(ptr::null_mut());
    }
}

#[test]
fn version_matches_the_package() {
    let v = unsafe { CStr::from_ptr(moelab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

/// Builds tests/c/smoke.c against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test binary>
    let profile_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    let lib = profile_dir.join("libmoelab_ffi.a");
    if !lib.exists() {
        panic!("static library not found at {}", lib.display());
    }
    let exe = profile_dir.join("moelab_ffi_smoke");
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let status = Command::new(cc)
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .expect("C compiler available");
    assert!(status.success(), "compiling smoke.c failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.ends_with("ok\n"));
}
