//! Datasets, parallel corpora and model inputs.

mod input;
mod parallel;
mod squad;
mod tokenize;
mod translate;
mod vocab;

pub use input::{canonical_answer, encode_input, AnswerStatus, TokenSequence, TokenizedExample};
pub use parallel::{
    build_parallel_corpus, corpus_languages, read_corpus_jsonl, read_translations_jsonl,
    write_corpus_jsonl, ParallelCorpus, ParallelExample, SourceText, Translation,
};
pub use squad::{
    gold_answers, parse_squad, parse_squad_str, to_squad_json, write_squad, Answer, RawExample,
};
pub use tokenize::{is_cjk, is_cjk_like, is_punctuation, join_tokens, tokenize, tokenize_with_offsets, Token};
pub use translate::{pseudo_translate, pseudo_translate_all, translate_text, Lexicon};
pub use vocab::{Vocabulary, CLS, CLS_ID, PAD, PAD_ID, SEP, SEP_ID, UNK, UNK_ID};

use std::path::Path;

use crate::error::Result;

/// Every token of every language in `examples`, for vocabulary building.
pub fn corpus_tokens(examples: &[ParallelExample]) -> impl Iterator<Item = String> + '_ {
    examples.iter().flat_map(|ex| {
        let texts = std::iter::once((&ex.target.passage, &ex.target.question))
            .chain(ex.sources.values().map(|s| (&s.passage, &s.question)));
        texts
            .flat_map(|(p, q)| tokenize(q).into_iter().chain(tokenize(p)))
            .collect::<Vec<_>>()
    })
}

/// Loads a dataset by extension: `.jsonl` is a parallel corpus, anything else
/// is SQuAD JSON in `language` with no sources.
pub fn load_dataset(path: impl AsRef<Path>, language: &str) -> Result<Vec<ParallelExample>> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        read_corpus_jsonl(path)
    } else {
        Ok(parse_squad(path, language)?
            .into_iter()
            .map(ParallelExample::monolingual)
            .collect())
    }
}
