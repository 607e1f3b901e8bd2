//! Numerical checks of the decorrelation and rank-expansion behaviour of
//! frequency modulation, plus gradient-conflict statistics.

mod correlation;
mod gradsim;
mod rank;

pub use correlation::{gaussian_corr_oracle, monte_carlo_corr, vec_correlation, CorrelationEstimate};
pub use gradsim::{epoch_grad_sim, grad_cosine, pairwise_grad_cosine, GradSimMatrix};
pub use rank::{rank_report, RankReport, DEFAULT_RANK_EPSILON};
