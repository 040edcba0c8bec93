//! Compiles a C program against the generated header and the shared library.

use std::path::PathBuf;
use std::process::Command;

const PROGRAM: &str = r#"
#include <stdio.h>
#include "hybridpar.h"

int main(void) {
    HpModel *m = NULL;
    if (hp_model_demo(&m) != HP_STATUS_OK) return 10;
    double buckets[2] = {10e6, 90e6};
    HpPlanBook *b = NULL;
    if (hp_planbook_build(m, 1e9, 10.0, buckets, 2, 0, &b) != HP_STATUS_OK) return 11;
    size_t k = 7;
    if (hp_planbook_select(b, 50e6, &k) != HP_STATUS_OK || k != 0) return 12;
    HpSimSummary s;
    if (hp_simulate(m, b, HP_TRACE_KIND_CONSTANT, 90e6, 3.0, 0, &s) != HP_STATUS_OK) return 13;
    if (hp_model_load(NULL, &m) != HP_STATUS_INVALID_ARGUMENT) return 14;
    printf("%zu %s\n", s.inferences, hp_last_error_message());
    hp_planbook_free(b);
    hp_model_free(m);
    return 0;
}
"#;

#[test]
fn c_program_links_and_runs() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    // target/<profile>/deps/<test> -> target/<profile>
    let lib_dir = std::env::current_exe()
        .unwrap()
        .parent()
        .unwrap()
        .parent()
        .unwrap()
        .to_path_buf();
    assert!(
        lib_dir.join("libhybridpar_ffi.so").exists()
            || lib_dir.join("libhybridpar_ffi.dylib").exists()
    );
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("main.c");
    let exe = d.path().join("main");
    std::fs::write(&src, PROGRAM).unwrap();
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let o = Command::new(cc)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg("-L")
        .arg(&lib_dir)
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .arg("-lhybridpar_ffi")
        .output()
        .expect("a C compiler");
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = Command::new(&exe).output().unwrap();
    assert!(o.status.success(), "exit {:?}", o.status.code());
    let out = String::from_utf8(o.stdout).unwrap();
    let (n, msg) = out.trim().split_once(' ').unwrap();
    assert!(n.parse::<usize>().unwrap() > 0);
    assert_eq!(msg, "null path");
}
