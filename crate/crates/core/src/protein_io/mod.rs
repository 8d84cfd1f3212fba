//! Structure and dataset file formats, contact graphs, featurization and
//! synthetic dataset generation.

mod amino;
mod dataset;
mod features;
mod graph;
mod structure;
mod synth;

pub use amino::{parse_sequence, AminoAcid, ALPHABET};
pub use dataset::{load_mutation_dataset, parse_records, records_to_dgm, Dataset, MutationRecord, DGM_HEADER};
pub use features::{
    centered_coords, edge_features, edge_features_on, extra_matrix, node_features, node_features_on,
    pair_raw_features, pair_raw_vector, FeatureConfig, COORD_SCALE, EXTRA_DIM,
};
pub use graph::{build_contact_graph, distance_matrix, GraphConfig, StructureGraph};
pub use structure::{parse_structure, ExtraFeatures, Residue, Structure, DGS_HEADER};
pub use synth::{
    contact_counts, random_chain, sample_id, synthesize_dataset, synthesize_with_parts, target_parts,
    SyntheticSpec, TargetParts, MAX_LEN, MIN_LEN,
};
