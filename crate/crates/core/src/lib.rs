//! Simulation, detection and correction of k-space mistriggering artefacts in
//! cine MR sequences, with segmentation and image-quality metrics.

pub mod artefact;
pub mod container;
pub mod correction;
pub mod detection;
pub mod error;
pub mod fft;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod rng;
pub mod segmentation;
pub mod tensor;

pub use artefact::{corrupt_kspace, synthesize_phase, CorruptionRecord, CorruptionSpec, PhaseGenSpec};
pub use correction::{correct, CorrectionConfig, CorrectionResult};
pub use detection::{DetectionModel, LineFeatures};
pub use error::{Error, Result};
pub use fft::{fft2, ifft2};
pub use metrics::MetricsReport;
pub use optim::TrainConfig;
pub use phantom::{generate_corpus, generate_phantom, Dataset, PhantomSpec};
pub use pipeline::{run_pipeline, sweep, total_loss, LossWeights, RunConfig, RunSummary, SweepAxis};
pub use segmentation::{ClassProbabilities, SegModel, SegmentationMap};
pub use tensor::{ComplexSequence, Geometry, ImageSequence, KSpace, LineMask};
