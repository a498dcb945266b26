//! Regenerates the shipped connectivity fixture.
//!
//! `cargo run -p atrl-core --example write_fixture -- fixtures`

use std::path::PathBuf;

use atrl_core::synth::{anchor_fixture, FIXTURE_SEED};
use atrl_core::tensor_io::{save_attention, save_token_meta};

fn main() {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    std::fs::create_dir_all(&dir).expect("create fixture dir");
    let (tensor, meta) = anchor_fixture(FIXTURE_SEED);
    save_attention(&tensor, dir.join("anchors_540.atn")).expect("write tensor");
    save_token_meta(&meta, dir.join("anchors_540.meta.json")).expect("write meta");
}
