//! Emitter output against checked-in golden trees. Set `UPDATE_GOLDEN=1` to
//! regenerate after an intentional template change.

mod common;

use flatstream::model::{zoo, NetworkSpec};
use flatstream::planner::{match_throughput, Ipp};
use flatstream::rtl::{self, Manifest, RtlError};

fn check_golden(name: &str, net: &NetworkSpec, ipp: Ipp) {
    let diffs = common::golden_mismatches(name, net, ipp, std::env::var_os("UPDATE_GOLDEN").is_some());
    assert!(diffs.is_empty(), "{diffs:?}");
}

#[test]
fn tiny_separable_matches_golden() {
    check_golden("tiny_separable", &zoo::tiny_separable(), Ipp::FULL);
}

#[test]
fn strided_pair_matches_golden() {
    check_golden("strided_pair", &zoo::strided_pair(8, 2, 4, 6), Ipp::new(2).unwrap());
}

#[test]
fn no_unbound_placeholders_in_mobilenet() {
    let net = zoo::mobilenet_v1(224);
    let art = rtl::generate(&common::emitter_model(&net), &match_throughput(&net, Ipp::FULL)).unwrap();
    assert_eq!(art.files.iter().filter(|f| f.0.ends_with(".sv")).count(), 22);
    assert_eq!(art.files.iter().filter(|f| f.0.ends_with(".hex")).count(), 20);
    for (f, text) in &art.files {
        assert!(!text.contains("{{"), "{f} has a leftover placeholder");
    }
}

#[test]
fn port_widths_follow_unroll() {
    for d in [1, 3] {
        let net = zoo::mobilenet_v1(224);
        let m = common::emitter_model(&net);
        let plan = match_throughput(&net, Ipp::new(d).unwrap());
        let art = rtl::generate(&m, &plan).unwrap();
        let bad = common::port_width_mismatches(&m, &plan, &art);
        assert!(bad.is_empty(), "ipp 1/{d}: {bad:?}");
    }
}

#[test]
fn hex_files_match_checkpoint_order() {
    for net in [zoo::tiny_separable(), zoo::mobilenet_v1(32)] {
        let m = common::emitter_model(&net);
        let art = rtl::generate(&m, &match_throughput(&net, Ipp::FULL)).unwrap();
        let bad = common::hex_mismatches(&m, &art);
        assert!(bad.is_empty(), "{bad:?}");
    }
}

#[test]
fn emit_writes_tree_and_refuses_overwrite() {
    let net = zoo::tiny_separable();
    let m = common::emitter_model(&net);
    let plan = match_throughput(&net, Ipp::FULL);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("rtl");
    let art = rtl::emit(&m, &plan, &out, false).unwrap();
    let manifest = Manifest::parse(&std::fs::read_to_string(out.join(rtl::MANIFEST_NAME)).unwrap()).unwrap();
    assert_eq!(manifest, art.manifest);
    assert!(matches!(rtl::emit(&m, &plan, &out, false), Err(RtlError::OutputExists(_))));
    rtl::emit(&m, &plan, &out, true).unwrap();
}

#[test]
fn mismatched_plan_is_rejected() {
    let net = zoo::tiny_separable();
    let other = zoo::strided_pair(8, 2, 4, 6);
    let r = rtl::generate(&common::emitter_model(&net), &match_throughput(&other, Ipp::FULL));
    assert!(matches!(r, Err(RtlError::InconsistentInputs(_))));
}

#[test]
fn single_layer_identity_is_three_files_and_a_manifest() {
    let net = zoo::identity(4, 4, 1);
    let m = common::emitter_model(&net);
    let art = rtl::generate(&m, &match_throughput(&net, Ipp::FULL)).unwrap();
    let mut names: Vec<&str> = art.files.iter().map(|f| f.0.as_str()).collect();
    names.sort();
    assert_eq!(names, ["layer_0_conv.sv", "top.sv", "weights_0.hex"]);
    let l = &art.manifest.layers[0];
    assert_eq!((l.act_in_width, l.out_width), (8, 8));
}
