pub mod bandwidth;
pub mod binning;
pub mod dataset;
pub mod eigen;
pub mod error;
pub mod fft;
pub mod grid;
pub mod io;
pub mod kernel;
pub mod locfit;
pub mod pipeline;
pub mod scores;
pub mod simulate;
pub mod smoother;
pub mod surface;

pub use bandwidth::{cv_score, optimize_bandwidth, CvObjective, CvScheme, CvTarget};
pub use dataset::{AffineMap, FunctionalDataset, Sample};
pub use eigen::{dense_eig, matrixize, randomized_eig, select_components_fve, EigenSystem};
pub use error::{FpcaError, Result};
pub use grid::EvaluationGrid;
pub use kernel::Bandwidth;
pub use pipeline::{fit, FitConfig};
pub use scores::{FpcaModel, ScoreMethod};
pub use surface::{SurfaceEstimate, SurfaceKind};
