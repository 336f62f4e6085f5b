//! Caption vocabulary, phrase chunking, and the bi-LSTM text encoder.

pub mod chunk;
pub mod encoder;
pub mod vocab;

pub use chunk::{chunk, word_spans, Span};
pub use encoder::{
    embed, encode_captions, encode_phrases, encode_sequence, EncodedCaption, LstmParams, PhraseEncoding,
    SequenceEncoding, TextBatch, TextParams,
};
pub use vocab::{tokenize, Vocabulary, PAD, UNK};
