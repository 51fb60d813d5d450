pub mod alignment;
pub mod dataset;
pub mod eval;
pub mod matchfilter;
pub mod parser;
pub mod pipeline;
pub mod projection;
pub mod seqlogical;
pub mod synth;
