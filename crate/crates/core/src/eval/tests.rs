use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{generate_corpus, CorpusConfig};
use crate::emotion::Emotion::*;

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Straightforward per-order dictionary counts, pooled by plain sums.
fn naive_bleu(candidates: &[Vec<u8>], references: &[Vec<u8>]) -> f64 {
    let mut product = 1.0;
    for n in 1..=4 {
        let (mut hits, mut count) = (0usize, 0usize);
        for (c, r) in candidates.iter().zip(references) {
            let mut cand: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
            let mut refs: BTreeMap<Vec<u8>, usize> = BTreeMap::new();
            let mut i = 0;
            while i + n <= c.len() {
                *cand.entry(c[i..i + n].to_vec()).or_default() += 1;
                i += 1;
            }
            let mut j = 0;
            while j + n <= r.len() {
                *refs.entry(r[j..j + n].to_vec()).or_default() += 1;
                j += 1;
            }
            for (gram, k) in &cand {
                let limit = *refs.get(gram).unwrap_or(&0);
                hits += if *k < limit { *k } else { limit };
                count += k;
            }
        }
        if hits == 0 {
            return 0.0;
        }
        product *= hits as f64 / count as f64;
    }
    let c: usize = candidates.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * product.powf(0.25)
}

#[test]
fn bleu_perfect_match_is_100() {
    let refs = vec![toks("the cat is on the mat ."), toks("a dog runs in the park today")];
    assert!((bleu4(&refs, &refs).unwrap() - 100.0).abs() < 1e-12);
}

#[test]
fn bleu_clipped_unigram_precision() {
    let stats = ngram_stats(&[toks("the the the the the the the")], &[toks("the cat is on the mat")]).unwrap();
    assert_eq!((stats.matched[0], stats.total[0]), (2, 7));
    assert_eq!(stats.precision(1), 2.0 / 7.0);
    assert_eq!(
        bleu4(&[toks("the the the the the the the")], &[toks("the cat is on the mat")]).unwrap(),
        0.0
    );
}

#[test]
fn bleu_brevity_penalty() {
    // Candidate is a 4-token prefix of an 8-token reference: all precisions 1.
    let score = bleu4(&[toks("a b c d")], &[toks("a b c d e f g h")]).unwrap();
    assert!((score - 100.0 * (1.0f64 - 2.0).exp()).abs() < 1e-12);
    let longer = bleu4(&[toks("a b c d e f g h")], &[toks("a b c d")]).unwrap();
    assert!((longer - 100.0 * (0.5f64 * 3.0 / 7.0 * 2.0 / 6.0 * 1.0 / 5.0).powf(0.25)).abs() < 1e-9);
}

#[test]
fn bleu_contract_errors() {
    let empty: Vec<Vec<&str>> = Vec::new();
    assert!(matches!(bleu4(&empty, &empty), Err(Error::Contract(_))));
    assert!(matches!(bleu4(&[toks("a")], &empty), Err(Error::Contract(_))));
}

#[test]
fn bleu_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut nonzero = 0;
    for _ in 0..200 {
        let size = rng.random_range(1..6);
        let alphabet = rng.random_range(2..6u8);
        let sentence = |rng: &mut ChaCha8Rng| -> Vec<u8> {
            let len = rng.random_range(0..14);
            (0..len).map(|_| rng.random_range(0..alphabet)).collect()
        };
        let cands: Vec<Vec<u8>> = (0..size).map(|_| sentence(&mut rng)).collect();
        let refs: Vec<Vec<u8>> = (0..size).map(|_| sentence(&mut rng)).collect();
        let got = bleu4(&cands, &refs).unwrap();
        let want = naive_bleu(&cands, &refs);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        nonzero += usize::from(got > 0.0);
    }
    assert!(nonzero > 50, "{nonzero}");
}

proptest! {
    #[test]
    fn bleu_is_order_invariant(
        pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..4, 0..10), proptest::collection::vec(0u8..4, 0..10)),
            1..8,
        ),
        rotate in 0usize..8,
    ) {
        let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
        let mut rotated = pairs.clone();
        let k = rotate % rotated.len();
        rotated.rotate_left(k);
        let (c2, r2): (Vec<_>, Vec<_>) = rotated.into_iter().unzip();
        prop_assert_eq!(bleu4(&c, &r).unwrap(), bleu4(&c2, &r2).unwrap());
    }
}

fn arc(b: Emotion, m: Emotion, e: Emotion) -> EmotionArc {
    EmotionArc::new(b, m, e)
}

#[test]
fn accuracy_examples() {
    let same = vec![arc(Joy, Joy, Joy), arc(Fear, Neutral, Sadness)];
    let s = segment_accuracies(&same, &same).unwrap();
    assert_eq!((s.begin, s.body, s.end), (1.0, 1.0, 1.0));
    assert_eq!(seg_acc(&same, &same).unwrap(), 1.0);

    let predicted = vec![arc(Joy, Joy, Joy), arc(Anger, Neutral, Sadness)];
    assert_eq!(segment_accuracies(&predicted, &same).unwrap().begin, 0.5);
    assert_eq!(arc_acc(&predicted, &same).unwrap(), 0.5);

    let p = [arc(Joy, Joy, Joy)];
    let t = [arc(Joy, Sadness, Joy)];
    assert!((seg_acc(&p, &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);

    assert!(matches!(seg_acc(&p, &[]), Err(Error::Contract(_))));
    assert!(matches!(arc_acc(&[], &[]), Err(Error::Contract(_))));
    assert!(matches!(segment_accuracies(&p, &same), Err(Error::Contract(_))));
}

fn any_arc() -> impl Strategy<Value = EmotionArc> {
    (0usize..7, 0usize..7, 0usize..7).prop_map(|(a, b, c)| arc(Emotion::ALL[a], Emotion::ALL[b], Emotion::ALL[c]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn accuracy_aggregation_identities(
        pairs in proptest::collection::vec((any_arc(), any_arc()), 1..30),
    ) {
        let (p, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let s = segment_accuracies(&p, &t).unwrap();
        let seg = seg_acc(&p, &t).unwrap();
        let whole = arc_acc(&p, &t).unwrap();
        prop_assert!((seg - (s.begin + s.body + s.end) / 3.0).abs() < 1e-12);
        prop_assert!(whole <= seg + 1e-12);
        prop_assert!(seg <= s.begin.max(s.body).max(s.end) + 1e-12);
        prop_assert!(whole <= s.begin.min(s.body).min(s.end) + 1e-12);
    }
}

#[test]
fn generated_arc_pads_and_truncates() {
    let lexicon = Lexicon::default();
    assert_eq!(generated_arc::<&str>(&[], &lexicon), EmotionArc::uniform(Neutral));
    assert_eq!(generated_arc(&["i am happy."], &lexicon), arc(Joy, Neutral, Neutral));
    let seven = ["a.", "b.", "c.", "d.", "e.", "sad.", "sad."];
    assert_eq!(generated_arc(&seven, &lexicon), EmotionArc::uniform(Neutral));
}

fn small_corpus() -> Corpus {
    generate_corpus(
        &CorpusConfig {
            scenes: 60,
            ..CorpusConfig::default()
        },
        &Lexicon::default(),
    )
    .unwrap()
}

#[test]
fn echo_narrator_scores_perfectly() {
    let report = evaluate_model(&EchoNarrator, &small_corpus(), &Lexicon::default()).unwrap();
    assert!((report.bleu4 - 100.0).abs() < 1e-9);
    for v in [
        report.begin_acc,
        report.body_acc,
        report.end_acc,
        report.seg_acc,
        report.arc_acc,
    ] {
        assert_eq!(v, 1.0);
    }
    assert_eq!(report.examples.len(), 60);
    let json = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), report);
    let table = report.to_string();
    assert!(table.contains("Arc-acc") && table.contains("100.00"));
}

struct Silent;

impl Narrator for Silent {
    fn narrate(&self, _: &Scene, _: &Narrative) -> Result<Vec<String>> {
        Ok(Vec::new())
    }
}

#[test]
fn empty_narratives_score_only_neutral_arcs() {
    let corpus = small_corpus();
    let report = evaluate_model(&Silent, &corpus, &Lexicon::default()).unwrap();
    let neutral = corpus
        .narratives
        .iter()
        .filter(|n| n.gold_arc == EmotionArc::uniform(Neutral))
        .count() as f64
        / corpus.len() as f64;
    assert_eq!(report.arc_acc, neutral);
    assert_eq!(report.bleu4, 0.0);
    assert!((report.seg_acc - (report.begin_acc + report.body_acc + report.end_acc) / 3.0).abs() < 1e-12);
}

#[test]
fn evaluation_rejects_missing_inputs() {
    let corpus = small_corpus();
    assert!(matches!(
        evaluate_model(&EchoNarrator, &corpus, &Lexicon::empty()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        evaluate_model(&EchoNarrator, &corpus.take(0), &Lexicon::default()),
        Err(Error::Contract(_))
    ));
    let model = Model::<f32>::new(crate::model::ModelConfig::tiny(), 0).unwrap();
    let vocab = Vocab::from_tokens(["x".to_string()]).unwrap();
    assert!(matches!(
        ModelNarrator::new(&model, &vocab, DecodeConfig::default()),
        Err(Error::Config(_))
    ));
}
