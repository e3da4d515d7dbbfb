//! Untrained desk-size models over a synthetic corpus, shared by the
//! benchmarks.

use itersrl::bundle::{examples, BaselineBundle, CachedSentence, Example, RefinerBundle};
use itersrl::encoder::Dims;
use itersrl::refiner::RefineMode;
use itersrl::synth::{generate, GrammarConfig};
use itersrl::vocab::Vocabulary;

pub struct Fixture {
    pub baseline: BaselineBundle,
    pub refiner: RefinerBundle,
    pub examples: Vec<Example>,
    pub cached: Vec<CachedSentence>,
}

/// `sentences` generated sentences with models of the given sizes.
pub fn fixture(sentences: usize, dims: &Dims, mode: RefineMode) -> itersrl::Result<Fixture> {
    let cfg = GrammarConfig {
        sentences,
        ..GrammarConfig::default()
    };
    let corpus = generate(&cfg)?;
    let vocab = Vocabulary::build(&corpus, 1, false);
    let baseline = BaselineBundle::new(vocab, dims, 1)?;
    let refiner = RefinerBundle::new(&baseline, mode, true, 1)?;
    let examples = examples(&corpus, &baseline.vocab);
    let cached = baseline.run_all(&examples)?;
    Ok(Fixture {
        baseline,
        refiner,
        examples,
        cached,
    })
}
