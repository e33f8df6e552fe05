pub mod binio;
pub mod error;
pub mod frontend;
pub mod gmm;
pub mod tvspace;
pub mod baseline;
pub mod sae;
pub mod classify;
pub mod eval;
pub mod corpus;
pub mod labels;
pub mod pipeline;
