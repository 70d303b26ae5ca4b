//! Synthetic compositional data: vocabularies, seen/unseen splits, rendering,
//! prompt tokenization and dataset files.

pub mod dataset;
pub mod render;
pub mod tokenizer;
pub mod vocab;

pub use dataset::{
    generate_dataset, load_dataset, synthesize, Dataset, Sample, Split, SplitCounts, Stage,
};
pub use render::{classify_attribute, classify_object, render_image, RenderSpec};
pub use tokenizer::{PromptTemplate, SlotKind, TokenVocab, TokenizedPrompt};
pub use vocab::{split_compositions, LabelSpace, Pair, VocabSpec, World};
