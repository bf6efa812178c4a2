//! Task heads, fine-tuning and evaluation metrics.

pub mod finetune;
pub mod heads;
pub mod metrics;

pub use finetune::{fine_tune_classifier, fine_tune_regressor, group_split, random_split, FineTuneConfig, Features, Split, SplitSpec};
pub use heads::{Activation, ClassifierHead, Head, RegressionHead};
pub use metrics::{accuracy, mae, macro_f1, pearson, r2, rmse, weighted_f1, ClassificationReport, EvalReport, RegressionReport};
