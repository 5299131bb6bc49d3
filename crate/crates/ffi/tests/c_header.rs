//! Compiles a C client against the generated header and, when the static
//! library is present next to the test binary, links and runs it.

use std::path::{Path, PathBuf};
use std::process::Command;

const CLIENT: &str = r#"
#include <stdio.h>
#include <string.h>
#include "arlab.h"

int main(void) {
    ArlabMdp *mdp = NULL;
    if (arlab_mdp_random(3, 2, 2, 5, &mdp) != ARLAB_STATUS_OK) return 1;
    double v = -1.0;
    if (arlab_mdp_optimal_value(mdp, &v) != ARLAB_STATUS_OK || v < 0.0) return 2;
    char *json = NULL;
    if (arlab_mdp_to_json(mdp, &json) != ARLAB_STATUS_OK || strstr(json, "kernel") == NULL) return 3;
    arlab_string_free(json);
    arlab_mdp_free(mdp);
    if (arlab_mdp_random(0, 2, 2, 5, &mdp) != ARLAB_STATUS_INVALID_ARGUMENT) return 4;
    if (arlab_last_error() == NULL) return 5;
    printf("ok %.6f\n", v);
    return 0;
}
"#;

fn compiler() -> Option<String> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .map(String::from)
}

fn static_lib() -> Option<PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libarlab_ffi.a");
    lib.exists().then_some(lib)
}

fn include_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(include_dir().join("arlab.h")).unwrap();
    for name in [
        "arlab_last_error",
        "arlab_string_free",
        "arlab_mdp_random",
        "arlab_mdp_from_json",
        "arlab_mdp_to_json",
        "arlab_mdp_optimal_value",
        "arlab_mdp_free",
        "arlab_experiment_run",
        "arlab_summary_digest",
        "arlab_summary_free",
        "ARLAB_STATUS_GENERATION_FAILURE",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn c_client_compiles_and_runs() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(&src, CLIENT).unwrap();
    let include = include_dir();
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");

    let Some(lib) = static_lib() else {
        eprintln!("static library not found; link step skipped");
        return;
    };
    let bin = dir.path().join("client");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "link against {} failed", lib.display());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
