//! Features, frame labels, synthetic corpora, augmentation, and batching.

mod augment;
mod batch;
mod corpus;
mod fbank;
pub mod synth;

pub use augment::{apply_masks, augment_calls, sample_masks, spec_augment, AugmentConfig, Mask};
pub use batch::{batch_pad, pad_batch, Batch};
pub use corpus::{
    load_corpus, read_class_map, read_features, read_labels, subsample_labels, write_class_map,
    write_corpus, write_features, write_labels, FrameCorpus, Utterance, DEFAULT_CLASSES,
    FEATURE_MAGIC, LABEL_MAGIC,
};
pub use fbank::{
    compute_fbank, filter_centers, hz_to_mel, mel_filterbank, mel_to_hz, read_wav, FbankConfig,
};
pub use synth::{synth_corpus, SynthSpec};
