//! Heterogeneous multi-task learning for facial affect: valence/arousal,
//! basic expressions and action units trained jointly from partially
//! annotated data, coupled through a task-relatedness table.

pub mod dataset;
pub mod error;
pub mod experiment;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod relatedness;
pub mod scheduler;
pub mod synthdata;
pub mod tensor;
pub mod train;
pub mod zeroshot;

pub use error::{Error, Result};
