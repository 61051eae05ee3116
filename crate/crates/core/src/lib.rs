//! Automatic evaluation of question-answering systems: dataset
//! construction from annotated corpora, point-wise answer-correctness
//! judges (a lexical linear model and encoder-based models), metrics, and
//! system-wise evaluation against gold judgements.

pub mod corpus;
pub mod encoder;
pub mod evaluators;
pub mod harness;
pub mod lexical;
pub mod metrics;
pub mod params;
pub mod records;
pub mod synthetic;
pub mod tape;
pub mod tensor;

pub use corpus::{As2Label, As2Record, CandidateSet, DatasetStats, EvalTuple, MrDocument};
pub use encoder::{Encoder, EncoderConfig, Vocab};
pub use evaluators::{EvaluatorConfig, EvaluatorModel, Family, PairSpec, TrainConfig};
pub use harness::{Judge, JudgeInput, OracleJudge, ReferenceSet, SystemRun};
pub use lexical::LinearModel;
pub use metrics::{MetricName, MetricReport};
