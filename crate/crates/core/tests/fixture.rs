use std::path::Path;

use atrl_core::calib::{calibrate, connectivity, BiasAxis, BiasParams};
use atrl_core::report::AnchorStats;
use atrl_core::synth::{anchor_fixture, FIXTURE_ANCHORS, FIXTURE_SEED, FIXTURE_TOKENS};
use atrl_core::tensor_io::{load_attention, load_token_meta_for};

#[test]
fn shipped_fixture_matches_generator() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let tensor = load_attention(dir.join("anchors_540.atn")).unwrap();
    let meta = load_token_meta_for(dir.join("anchors_540.meta.json"), &tensor).unwrap();
    let (want_tensor, want_meta) = anchor_fixture(FIXTURE_SEED);
    assert_eq!(tensor.to_bytes(), want_tensor.to_bytes());
    assert_eq!(meta, want_meta);

    let cal = calibrate(&tensor, 1, &BiasParams::default(), BiasAxis::Gen).unwrap();
    let c = connectivity(&cal, &meta.visual_index_set()).unwrap();
    let stats = AnchorStats::compute(c.as_slice(), 0.15);
    assert_eq!((stats.above, stats.total), (FIXTURE_ANCHORS, FIXTURE_TOKENS));
}
