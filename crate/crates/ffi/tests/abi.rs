use std::ffi::{c_char, CStr, CString};
use std::ptr;

use heurvid::prompter::{write_heuristic_store, HeuristicRecord, Prompter, PrompterConfig};
use heurvid::textproc::{PromptKind, Vocabulary};
use heurvid_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let need = unsafe { hv_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(need >= 1);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn cstr(s: &std::path::Path) -> CString {
    CString::new(s.display().to_string()).unwrap()
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(hv_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn vtc_matches_reference_values() {
    let mut out = 0.0;
    let s = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(unsafe { hv_vtc_loss(s.as_ptr(), 2, 1.0, &mut out) }, HvStatus::Ok);
    assert!((out - 0.626523).abs() < 1e-6);
    let z = [0.0; 4];
    assert_eq!(unsafe { hv_vtc_loss(z.as_ptr(), 2, 1.0, &mut out) }, HvStatus::Ok);
    assert!((out - 4f64.ln()).abs() < 1e-6);
    assert_eq!(unsafe { hv_vtc_loss(s.as_ptr(), 2, 0.0, &mut out) }, HvStatus::Domain);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { hv_vtc_loss(ptr::null(), 2, 1.0, &mut out) }, HvStatus::NullPointer);
}

#[test]
fn losses_follow_the_library() {
    let mut out = 0.0;
    let t = [0.5, 0.5];
    let p = [0.25, 0.75];
    assert_eq!(unsafe { hv_soft_cross_entropy(t.as_ptr(), p.as_ptr(), 2, &mut out) }, HvStatus::Ok);
    assert!((out - heurvid::substrate::soft_cross_entropy(&t, &p).unwrap()).abs() < 1e-15);
    let bad = [0.9, 0.9];
    assert_ne!(unsafe { hv_soft_cross_entropy(bad.as_ptr(), p.as_ptr(), 2, &mut out) }, HvStatus::Ok);

    assert_eq!(unsafe { hv_total_loss(1.0, 2.0, 3.0, HvLossMode::FixedAlpha, 0.25, 0.0, &mut out) }, HvStatus::Ok);
    assert!((out - (1.0 + 0.5 + 2.25)).abs() < 1e-12);
    assert_eq!(unsafe { hv_total_loss(1.0, 2.0, 3.0, HvLossMode::Gated, 0.5, 0.8, &mut out) }, HvStatus::Ok);
    assert!((out - (1.0 + 1.6 + 0.6000000000000001)).abs() < 1e-12);
    assert_eq!(unsafe { hv_total_loss(1.0, 2.0, 3.0, HvLossMode::NoHeuristics, 0.5, 0.0, &mut out) }, HvStatus::Ok);
    assert_eq!(out, 1.0);
    assert_eq!(unsafe { hv_total_loss(1.0, 2.0, 3.0, HvLossMode::FixedAlpha, 1.5, 0.0, &mut out) }, HvStatus::Config);
}

#[test]
fn prompter_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.ckpt");
    let cfg: PrompterConfig = serde_json::from_value(serde_json::json!({
        "video": {"dim": 16, "heads": 2, "layers": 1, "max_frames": 2, "max_patches": 4},
        "text": {"dim": 16, "heads": 2, "layers": 1},
        "crops": {"crop_size": 8}
    }))
    .unwrap();
    let mut p = Prompter::new(&cfg, Vocabulary::from_texts(["a video of box"]), 0).unwrap();
    p.freeze();
    p.save(&path).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hv_prompter_load(cstr(&path).as_ptr(), &mut h) }, HvStatus::Ok);
    let mut frozen = false;
    assert_eq!(unsafe { hv_prompter_is_frozen(h, &mut frozen) }, HvStatus::Ok);
    assert!(frozen);
    let mut tau = 0.0;
    assert_eq!(unsafe { hv_prompter_tau(h, &mut tau) }, HvStatus::Ok);
    assert_eq!(tau, p.tau());

    let mut need = 0usize;
    let mut small = [0 as c_char; 4];
    let st = unsafe { hv_prompter_checksum(h, small.as_mut_ptr(), small.len(), &mut need) };
    assert_eq!(st, HvStatus::BufferTooSmall);
    let mut buf = vec![0 as c_char; need];
    assert_eq!(unsafe { hv_prompter_checksum(h, buf.as_mut_ptr(), buf.len(), ptr::null_mut()) }, HvStatus::Ok);
    assert_eq!(unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap(), p.checksum());
    unsafe { hv_prompter_free(h) };
    unsafe { hv_prompter_free(ptr::null_mut()) };

    let missing = cstr(&dir.path().join("nope.ckpt"));
    let mut h2 = ptr::null_mut();
    assert_eq!(unsafe { hv_prompter_load(missing.as_ptr(), &mut h2) }, HvStatus::Io);
    assert!(h2.is_null());
    assert!(last_error().contains("i/o"));
    assert_eq!(unsafe { hv_prompter_is_frozen(ptr::null(), &mut frozen) }, HvStatus::NullPointer);
}

#[test]
fn heuristic_targets_are_exposed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.jsonl");
    let rec = HeuristicRecord {
        video_id: "v1".into(),
        kind: PromptKind::Action,
        scores: vec![0.25, 0.75],
        top: Vec::new(),
        kept: true,
    };
    write_heuristic_store(std::fs::File::create(&path).unwrap(), &[rec]).unwrap();

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { hv_heuristics_load(cstr(&path).as_ptr(), &mut h) }, HvStatus::Ok);
    let id = CString::new("v1").unwrap();
    let mut buf = [0.0; 2];
    let mut len = 0;
    let st = unsafe { hv_heuristics_target(h, id.as_ptr(), HvKind::Action, buf.as_mut_ptr(), 2, &mut len) };
    assert_eq!(st, HvStatus::Ok);
    assert_eq!((len, buf), (2, [0.25, 0.75]));
    let st = unsafe { hv_heuristics_target(h, id.as_ptr(), HvKind::Entity, buf.as_mut_ptr(), 2, &mut len) };
    assert_eq!((st, len), (HvStatus::NotFound, 0));
    let st = unsafe { hv_heuristics_target(h, id.as_ptr(), HvKind::Action, buf.as_mut_ptr(), 1, &mut len) };
    assert_eq!((st, len), (HvStatus::BufferTooSmall, 2));
    unsafe { hv_heuristics_free(h) };
}

#[test]
fn run_reports_exit_codes() {
    let bogus = CString::new("bogus").unwrap();
    let argv = [bogus.as_ptr()];
    assert_eq!(unsafe { hv_run(1, argv.as_ptr()) }, 1);
    assert!(!last_error().is_empty());
    assert_eq!(unsafe { hv_run(1, ptr::null()) }, 1);
}
