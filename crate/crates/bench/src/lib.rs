//! Shared fixtures for the benchmarks.

use vinter::corpus::{build_vocab, generate_corpus, CorpusConfig, Vocab};
use vinter::emotion::Lexicon;
use vinter::model::{Example, ModelConfig, Variant};

/// A small generated corpus encoded for the desk-scale full model.
pub struct Fixture {
    pub vocab: Vocab,
    pub config: ModelConfig,
    pub examples: Vec<Example>,
}

impl Fixture {
    pub fn new(scenes: usize) -> Self {
        let corpus = generate_corpus(
            &CorpusConfig {
                scenes,
                ..CorpusConfig::default()
            },
            &Lexicon::default(),
        )
        .expect("corpus generates");
        let vocab = build_vocab(corpus.narratives.iter().map(|n| n.text())).expect("vocab builds");
        let config = ModelConfig::desk(vocab.len(), Variant::Full);
        let examples = corpus
            .examples()
            .map(|(s, n)| Example::new(s, n, &vocab, &config).expect("example encodes"))
            .collect();
        Self {
            vocab,
            config,
            examples,
        }
    }
}
