mod corpus;
mod partition;
mod tokenizer;

pub use corpus::{
    encode_pair, expected_response, generate_corpus, generate_pretrain_docs, load_corpus,
    save_corpus, wrap_prompt, Corpus, CorpusEntry, CorpusSpec, Example, Split, CATEGORY_LABELS,
};
pub use partition::{partition_dirichlet, partition_pathological, DevicePartition};
pub use tokenizer::ByteTokenizer;
