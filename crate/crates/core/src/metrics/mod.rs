//! Image-quality metrics, instance IoU, the rank-sum test and the
//! `(t_start, sigma)` sweep harness.

pub mod iou;
pub mod quality;
pub mod rank_sum;
pub mod sweep;

pub use iou::{instance_iou, IouReport};
pub use quality::{histogram_similarity, psnr, zncc, Psnr, HIST_BINS, HIST_RANGE};
pub use rank_sum::{midranks, rank_sum_test, RankSumMethod, RankSumResult, EXACT_LIMIT};
pub use sweep::{sweep, SweepCell, SweepConfig, SweepReport, RECOMMENDED};
