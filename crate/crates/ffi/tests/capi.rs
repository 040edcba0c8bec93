use std::ffi::{CStr, CString};
use std::ptr;

use hybridpar::model::demo_model;
use hybridpar::runtime::sim::demo_input;
use hybridpar_ffi::*;

const SMALL: &str = "hpmodel 1
name small
input 2 12 12
group 2
weights seed 3
layer c1 conv2d in=input out=4 kernel=3 padding=1
layer r1 relu in=c1
layer p1 maxpool2d in=r1 kernel=2
layer f flatten in=p1
layer fc matmul in=f out=5
";

fn last_error() -> String {
    let p = hp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn small(dir: &std::path::Path) -> *mut HpModel {
    let path = dir.join("small.hpm");
    std::fs::write(&path, SMALL).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { hp_model_load(cstr(&path).as_ptr(), &mut m) },
        HpStatus::Ok
    );
    m
}

#[test]
fn infer_matches_the_library() {
    let d = tempfile::tempdir().unwrap();
    let m = small(d.path());
    unsafe {
        assert_eq!(hp_model_layers(m), 5);
        assert_eq!(hp_model_input_len(m), 2 * 12 * 12);
        assert_eq!(hp_model_output_len(m), 5);
        let g = hybridpar::model::ModelGraph::load(&d.path().join("small.hpm")).unwrap();
        let x = demo_input(&g, 1);
        let want = g.infer_local(&x).unwrap();
        let mut out = vec![0f32; 5];
        let s = hp_model_infer(
            m,
            x.data().as_ptr(),
            x.data().len(),
            out.as_mut_ptr(),
            out.len(),
        );
        assert_eq!(s, HpStatus::Ok);
        assert_eq!(
            out.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        let s = hp_model_infer(m, x.data().as_ptr(), 3, out.as_mut_ptr(), out.len());
        assert_eq!(s, HpStatus::InvalidArgument);
        assert!(last_error().contains("input has 3 elements"));
        hp_model_free(m);
    }
}

#[test]
fn planbook_round_trip_and_selection() {
    let d = tempfile::tempdir().unwrap();
    let m = small(d.path());
    let buckets = [10e6, 50e6, 90e6];
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(
            hp_planbook_build(m, 1e8, 8.0, buckets.as_ptr(), 3, 5, &mut b),
            HpStatus::Ok
        );
        assert_eq!(hp_planbook_len(b), 3);
        let path = cstr(&d.path().join("book.json"));
        assert_eq!(hp_planbook_save(b, path.as_ptr()), HpStatus::Ok);
        let mut c = ptr::null_mut();
        assert_eq!(hp_planbook_load(path.as_ptr(), &mut c), HpStatus::Ok);
        for (k, &want_bw) in buckets.iter().enumerate() {
            let (mut bw, mut obj) = (0.0, 0.0);
            let (mut bw2, mut obj2) = (0.0, 0.0);
            assert_eq!(hp_planbook_bucket(b, k, &mut bw, &mut obj), HpStatus::Ok);
            assert_eq!(hp_planbook_bucket(c, k, &mut bw2, &mut obj2), HpStatus::Ok);
            assert_eq!((bw, obj), (bw2, obj2));
            assert_eq!(bw, want_bw);
        }
        let mut k = 99;
        for (pred, want) in [(1e6, 0), (10e6, 0), (49e6, 0), (50e6, 1), (1e9, 2)] {
            assert_eq!(hp_planbook_select(c, pred, &mut k), HpStatus::Ok);
            assert_eq!(k, want, "prediction {pred}");
        }
        let (mut bw, mut obj) = (0.0, 0.0);
        assert_eq!(
            hp_planbook_bucket(c, 3, &mut bw, &mut obj),
            HpStatus::InvalidArgument
        );

        let mut s = HpSimSummary::default();
        assert_eq!(
            hp_simulate(m, c, HpTraceKind::Outdoor, 0.0, 30.0, 2, &mut s),
            HpStatus::Ok
        );
        assert!(s.inferences > 0);
        assert!(s.wall_mean > 0.0 && s.wall_mean <= s.local_wall_mean + 1e-12);
        assert!(s.bandwidth_rsd > 0.0);
        hp_planbook_free(b);
        hp_planbook_free(c);
        hp_model_free(m);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let d = tempfile::tempdir().unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        let missing = cstr(&d.path().join("absent.hpm"));
        assert_eq!(hp_model_load(missing.as_ptr(), &mut m), HpStatus::Io);
        assert!(m.is_null());
        assert_eq!(
            hp_model_load(ptr::null(), &mut m),
            HpStatus::InvalidArgument
        );
        assert_eq!(last_error(), "null path");

        let bad = d.path().join("bad.hpm");
        std::fs::write(
            &bad,
            "hpmodel 1\nname x\ninput 1 4 4\nlayer a frobnicate in=input\n",
        )
        .unwrap();
        assert_eq!(hp_model_load(cstr(&bad).as_ptr(), &mut m), HpStatus::Parse);

        let small = small(d.path());
        let mut demo = ptr::null_mut();
        assert_eq!(hp_model_demo(&mut demo), HpStatus::Ok);
        assert_eq!(hp_model_layers(demo), demo_model().len());
        let mut b = ptr::null_mut();
        let bw = [20e6];
        assert_eq!(
            hp_planbook_build(small, 1e8, 8.0, bw.as_ptr(), 1, 0, &mut b),
            HpStatus::Ok
        );
        let mut s = HpSimSummary::default();
        assert_eq!(
            hp_simulate(demo, b, HpTraceKind::Constant, 20e6, 5.0, 0, &mut s),
            HpStatus::Checksum
        );
        assert_eq!(
            hp_planbook_build(small, 0.0, 8.0, bw.as_ptr(), 1, 0, &mut b),
            HpStatus::InvalidArgument
        );
        let zero = [0.0];
        let mut z = ptr::null_mut();
        assert_eq!(
            hp_planbook_build(small, 1e8, 8.0, zero.as_ptr(), 1, 0, &mut z),
            HpStatus::InvalidArgument
        );
        assert!(z.is_null());

        assert_eq!(hp_model_layers(ptr::null()), 0);
        hp_model_free(ptr::null_mut());
        hp_planbook_free(ptr::null_mut());
        hp_planbook_free(b);
        hp_model_free(small);
        hp_model_free(demo);
    }
}
