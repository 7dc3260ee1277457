//! Protein structure search with learned binary hash codes.
//!
//! Pipeline: parse backbones ([`protein_io`]), build residue graphs
//! ([`featurize`]), embed them with a message-passing encoder ([`encoder`])
//! trained contrastively ([`train`]), binarize, and search a Hamming index
//! ([`hash_index`]).

pub mod config;
pub mod encoder;
pub mod evalmetrics;
pub mod featurize;
pub mod geometry;
pub mod hash_index;
pub mod neural;
pub mod objective;
pub mod protein_io;
pub mod sampling;
pub mod simmatrix;
pub mod synth;
pub mod tmscore;
pub mod train;

pub use config::{ConfigError, KnnSpace, LengthScaling, RunConfig};
pub use encoder::{binarize, encode, encode_all, init_params, EncoderConfig, EncoderError, EncoderParams, StructureEmbedding};
pub use evalmetrics::{auprc, auroc, evaluate, label_similar, topk_hit_ratio, EvalError, EvalReport, EvalSummary};
pub use featurize::{build_graph, FeaturizeConfig, FeaturizeError, KnnMetric, ProteinGraph, RbfBank};
pub use geometry::{Coord3, RigidMotion};
pub use hash_index::{hamming, CodeDatabase, HashCode, IndexError, SearchHit};
pub use neural::{Activation, Checkpoint, Mode, Tensor};
pub use objective::{LossConfig, ObjectiveError};
pub use protein_io::{ensure_cbeta, parse_pdb, ProteinChain, ProteinIoError, Residue};
pub use sampling::{PositiveSets, SamplingError, SubstructurePlan, TrainingBatch};
pub use simmatrix::{SimMatrixError, SimilarityMatrix};
pub use synth::{generate, FamilySpec, SynthData, SynthError};
pub use tmscore::{kabsch, tm_fragment, tm_score_identity, TmError, TmResult};
pub use train::{train, StepMetrics, TrainError, TrainOutcome, TrainingSet};
