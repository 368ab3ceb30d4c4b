//! Synthetic data, level manifests, accuracy reports, robustness
//! perturbations and ELO rating.

pub mod elo;
pub mod evaluate;
pub mod perturb;
pub mod synth;

pub use elo::{EloTable, Game, Outcome};
pub use evaluate::{predict_features, predict_samples, robustness_row, EvalReport, LevelReport, Metrics, Prediction, RobustnessReport, RobustnessRow};
pub use perturb::{gaussian_blur, jpeg, Perturbation};
pub use synth::{gen_dataset, load_dataset, save_dataset, Artifact, ArtifactKind, Dataset, ManifestEntry, Split, SynthSample};
