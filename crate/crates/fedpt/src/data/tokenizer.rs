use crate::error::{Error, Result};
use crate::model::{Token, Vocab};

/// Reversible byte-level tokenizer. Ids `0..=255` are raw bytes; the ids at
/// and above 256 are the special tokens declared by the vocabulary.
#[derive(Debug, Clone)]
pub struct ByteTokenizer {
    vocab: Vocab,
}

impl ByteTokenizer {
    pub fn new(vocab: Vocab) -> Result<Self> {
        vocab.validate()?;
        if vocab.size < 256 {
            return Err(Error::input(format!(
                "byte tokenizer needs at least 256 ids, vocab has {}",
                vocab.size
            )));
        }
        for (name, id) in [
            ("pad", vocab.pad),
            ("begin", vocab.begin),
            ("end", vocab.end),
        ] {
            if id < 256 {
                return Err(Error::input(format!(
                    "special token {name} (id {id}) collides with byte ids"
                )));
            }
        }
        Ok(Self { vocab })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Encodes text as its UTF-8 bytes. Never produces special tokens.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        text.as_bytes().iter().map(|&b| b as Token).collect()
    }

    /// Inverse of `tokenize`. Special tokens are skipped; ids outside the
    /// vocabulary are an input error. Invalid UTF-8 byte runs are replaced
    /// rather than rejected so that sampled generations always render.
    pub fn detokenize(&self, ids: &[Token]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if (id as usize) >= self.vocab.size {
                return Err(Error::input(format!(
                    "token id {id} outside vocabulary of size {}",
                    self.vocab.size
                )));
            }
            if id < 256 {
                bytes.push(id as u8);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}
