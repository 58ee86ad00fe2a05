//! Toy-scale distillation of a softmax-attention denoiser into a
//! linear-complexity student.
//!
//! - [`schedule`]: noise schedule, forward noising, timestep embedding.
//! - [`data`]: procedural images and their token lifting.
//! - [`net`]: the denoiser backbone and its interchangeable mixers.
//! - [`loss`]: denoising, output-distillation and feature-matching terms.
//! - [`train`]: teacher pre-training and the distillation loop.
//! - [`gradcheck`]: central-difference gradient verification.
//! - [`drift`]: output magnitude under a change of token count.

pub mod data;
pub mod drift;
pub mod gradcheck;
pub mod loss;
pub mod net;
pub mod optim;
pub mod schedule;
pub mod train;

pub use data::{make_toy_dataset, ToyDataset};
pub use drift::{cross_resolution_drift, DriftProbe, DriftReport};
pub use gradcheck::{finite_difference_check, student_gradcheck, GradCheckReport};
pub use loss::{composite_loss, LossParts, LossWeights, Sample};
pub use net::{DenoiserNet, Mixer, NetShape, NullCondition, StudentKind};
pub use schedule::{diffuse, NoiseSchedule};
pub use train::{run_distillation, train_distill, train_distill_with, train_teacher, DistillConfig, DistillOutcome, Fixture, Variant};
