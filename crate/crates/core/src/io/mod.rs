//! File formats and the text featurizers.

pub mod embeddings;
pub mod featurizer;
pub mod manifest;
pub mod model_file;

pub use embeddings::{decode_embeddings, encode_embeddings, read_embeddings, write_embeddings};
pub use featurizer::{tokenize, LookupFeaturizer, SurrogateFeaturizer, TextFeaturizer};
pub use manifest::{parse_manifest, read_manifest, write_manifest, TripletRecord};
pub use model_file::{load_model, model_from_json, model_to_json, save_model, ModelFile, Precision};
