//! Feature ingestion, synthetic corpora and spectral augmentation.

mod augment;
mod corpus;

pub use augment::{
    augment, spec_augment, spec_augment_traced, spec_sub, spec_sub_traced, MaskAxis, MaskBand,
    SpecAugConfig, SpecSubConfig, Substitution,
};
pub use corpus::{
    generate_synthetic_corpus, load_manifest, read_feature_file, token_template, write_corpus,
    write_feature_file, write_manifest, SynthConfig, Utterance, MANIFEST_NAME,
};
