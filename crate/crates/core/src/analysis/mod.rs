//! Post-processing of transfer matrices: rescaled transferability scores,
//! transfer graphs, UPGMA dendrograms and the significance battery.

mod cluster;
mod graph;
mod scores;
pub mod stats;

pub use cluster::{exhaustive_average_linkage, upgma_cluster, upgma_from_distances, Dendrogram, Merge};
pub use graph::{emit_transfer_graph, DEFAULT_THRESHOLD, PENWIDTH_SCALE};
pub use scores::{rescale, rescale_scores, TransferabilityScores};
pub use stats::{
    bonferroni_adjust, normal_cdf, normal_quantile, permutation_signed_rank, standardized_mean_difference, stouffer_combine, SignedRank,
    StatTestResult, Stouffer,
};
