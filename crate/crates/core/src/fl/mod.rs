//! Federated learning of an RSS map: data, model, gradient payloads and training.

pub mod data;
pub mod mlp;
pub mod payload;
pub mod train;

pub use data::{gen_rss_map, Normalizer, RssDataset, RssMap, RssMapConfig, RssRecord};
pub use mlp::{global_update, gradient_check, local_gradient, GradientCheck, MlpModel, TABLE_I_LAYERS};
pub use payload::{abs_percentile, agree_scale, chunk_payload, dechunk_payload, GradientPayload};
pub use train::{
    batch_indices, heatmap, median, train, Aggregated, Aggregator, ExactAggregator, HeatCell, LossReduction,
    OtaAggregator, TrainConfig, TrainReport, TrainRound,
};
