pub mod calib;
pub mod credit;
pub mod numfmt;
pub mod partitioner;
pub mod pipeline;
pub mod refine;
pub mod report;
pub mod synth;
pub mod tensor_io;
pub mod token_graph;
