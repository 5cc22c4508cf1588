//! Semantic sub-source stratification for contrastive pretraining data.
//!
//! The pipeline takes precomputed embeddings of one side of each query-item
//! pair, clusters them with spherical k-means, splits the pair dataset into
//! one stratum per cluster, and plans minibatches that never mix strata. The
//! resulting [`batch_planner::BatchManifest`] lists pair indices only, so any
//! trainer can consume it.
//!
//! Analysis modules score batches under InfoNCE with in-batch negatives
//! ([`contrastive_loss`]), bound how hard in-cluster negatives must be
//! ([`geometry_bounds`]), and compare stratified against shuffled batching on
//! synthetic data ([`experiment_harness`]).

pub mod batch_planner;
pub mod contrastive_loss;
pub mod corpus_io;
pub mod error;
pub mod experiment_harness;
pub mod geometry_bounds;
pub mod seeding;
pub mod sphere_kmeans;
pub mod stratifier;

pub use error::{Error, Result};

pub use batch_planner::{BatchManifest, BatchPlanConfig, RemainderPolicy};
pub use contrastive_loss::{BatchLossReport, LossConfig, ScoreMatrix};
pub use corpus_io::{EmbeddingSet, PairDataset, PairRecord};
pub use sphere_kmeans::{ClusterModel, KMeansConfig};
pub use stratifier::{ClusterStatsReport, Side, StratificationPlan};
