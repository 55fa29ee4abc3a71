use std::path::Path;
use std::process::Command;

const EXPORTS: [&str; 17] = [
    "hv_version",
    "hv_last_error_message",
    "hv_prompter_load",
    "hv_prompter_free",
    "hv_prompter_is_frozen",
    "hv_prompter_tau",
    "hv_prompter_checksum",
    "hv_heuristics_load",
    "hv_heuristics_free",
    "hv_heuristics_target",
    "hv_reasoner_load",
    "hv_reasoner_free",
    "hv_reasoner_gate",
    "hv_vtc_loss",
    "hv_soft_cross_entropy",
    "hv_total_loss",
    "hv_run",
];

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/heurvid.h")).unwrap();
    for name in EXPORTS {
        assert!(header.contains(&format!("{name}(")), "{name}");
    }
    assert!(header.contains("typedef struct HvPrompter HvPrompter;"));
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/heurvid.h");
    let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", "-std=c99", "-Wall", "-Werror"]).arg(&header).output() else {
        eprintln!("no C compiler; skipped");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
