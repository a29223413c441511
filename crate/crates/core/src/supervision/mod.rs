//! Targets, losses and WER scoring.

mod losses;
mod targets;
mod wer;

pub use losses::{
    loss_combined, loss_pq, loss_pq_batch, loss_pq_grad, loss_ri, loss_ri_grad, norm_mos, pq_target, MosScore,
};
pub use targets::{build_pq_targets, build_wer_vector, build_wer_vectors, grid_error_counts, PqTargets, WerVector};
pub use wer::{edit_distance, normalize_text, wer, ErrorCount, Transcript};
