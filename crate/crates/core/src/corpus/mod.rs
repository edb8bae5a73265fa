//! Text processing, vocabularies, datasets and synthetic data.

pub mod dataset;
pub mod synthetic;
pub mod text;
pub mod vocab;

pub use dataset::{
    load_qa_dataset, nli_token_lists, qa_token_lists, read_nli_records, read_qa_records, write_nli_records, write_qa_records, NliExample, NliLabel,
    NliRecord, QaExample, QaRecord, TaskType,
};
pub use synthetic::{gen_synthetic_nli, gen_synthetic_qa, SyntheticNliConfig, SyntheticQaConfig, SyntheticWorld};
pub use text::{make_hypothesis, mark_answer_span, marked_hypothesis, tokenize, ANSWER_BEGIN, ANSWER_END};
pub use vocab::{TokenSeq, Vocab, OOV_ID, PAD_ID};
