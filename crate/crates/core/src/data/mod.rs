//! Corpora, vocabularies, batching and synthetic tasks.

mod corpus;
mod synthetic;
mod vocab;

pub use corpus::{
    encode_pairs, make_batches, read_parallel, read_tokenized, remaining_bag, tokenize,
    write_lines, Batch, SentencePair, TokenPair, DEFAULT_BATCH_SIZE, DEFAULT_MAX_LEN,
};
pub use synthetic::{gen_synthetic, SyntheticTask};
pub use vocab::{
    Vocabulary, BOS, DEFAULT_MAX_SIZE, EOS, NUM_RESERVED, PAD, RESERVED_TOKENS, UNK,
};
