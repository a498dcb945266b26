use std::time::Instant;

use atrl_core::pipeline::{run_sequence, PipelineConfig};
use atrl_core::synth::{prefix_meta, random_attention};

fn main() {
    let tensor = random_attention(4, 8, 512, 1024, 1.0, 7);
    let meta = prefix_meta(1024, 576);
    let cfg = PipelineConfig::default();
    for _ in 0..3 {
        let start = Instant::now();
        let out = run_sequence(&tensor, &meta.visual_index_set(), &cfg, 0).unwrap();
        println!("total {:?} edges {} {:?}", start.elapsed(), out.graph.edges().len(), out.timings);
    }
}
