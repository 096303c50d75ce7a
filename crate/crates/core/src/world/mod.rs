//! Synthetic VQA world: structured images, templated questions, an exact
//! oracle and a closed vocabulary.

pub mod image;
pub mod question;
pub mod triplet;
pub mod vocab;

pub use image::{render_image, sample_image, Finding, Intensity, Modality, ModalityMixture, Shape, Size, SynthImage, GRID};
pub use question::{
    diagnosis_rule, extract, format_answer, global_template, has_rationale, oracle_answer, oracle_value,
    render_question, render_rationale, template_from_global, AnswerValue, Quadrant, Question, RationalePolicy,
    Target, Task, NUM_TEMPLATES, TEMPLATES_PER_TASK,
};
pub use triplet::{
    make_split, read_records, read_triplets, write_records, write_triplets, PairKey, Provenance, Record, SeedDraw,
    Split, SplitConfig, VqaTriplet,
};
pub use vocab::{tok, vocab, Token, Vocab};
