//! Literature map engine: corpus storage, tf-idf and LSA document vectors,
//! related-paper graph, t-SNE map, inverted-index search and per-user
//! recommendations.

pub mod lsa;
pub mod pipeline;
pub mod recommend;
pub mod search;
pub mod similarity;
pub mod store;
pub mod textpipe;
pub mod tsne;
