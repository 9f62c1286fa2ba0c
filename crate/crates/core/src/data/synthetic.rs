//! Deterministic pseudo-text for desk-scale runs.
//!
//! Words are built from syllables and drawn from a Zipfian lexicon; each word
//! prefers a handful of successors, so the text has both short-range
//! (spelling) and longer-range (word order) structure for models to learn.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Generation stops once the tokenized corpus reaches this size.
    pub min_tokens: u64,
    pub lexicon_size: usize,
    pub successors: usize,
    /// Probability of following the previous word's successor list.
    pub follow_prob: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 0,
            min_tokens: 1 << 20,
            lexicon_size: 2000,
            successors: 6,
            follow_prob: 0.75,
        }
    }
}

const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
    "ch", "cl", "dr", "fl", "gr", "pl", "sh", "st", "th", "tr", "",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou", "y"];
const CODAS: &[&str] = &["", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ck"];

fn make_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = 1 + rng.gen_range(0..2) + usize::from(rng.gen_bool(0.2));
    (0..syllables)
        .map(|_| {
            [ONSETS, VOWELS, CODAS]
                .iter()
                .map(|part| part[rng.gen_range(0..part.len())])
                .collect::<String>()
        })
        .collect()
}

fn zipf(n: usize, s: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / ((r + 1) as f64).powf(s))).expect("nonempty")
}

/// Documents of paragraphs of sentences, reproducible from `spec.seed`.
pub fn synthetic_documents(spec: &SyntheticSpec) -> Vec<Vec<u8>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.lexicon_size.max(2);
    let mut lexicon: Vec<String> = Vec::with_capacity(n);
    while lexicon.len() < n {
        let w = make_word(&mut rng);
        if !lexicon.contains(&w) {
            lexicon.push(w);
        }
    }
    let global = zipf(n, 1.05);
    let k = spec.successors.max(1);
    let spread = zipf(n, 0.6);
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|_| (0..k).map(|_| spread.sample(&mut rng)).collect())
        .collect();
    let succ_pick = zipf(k, 1.0);

    let mut docs = Vec::new();
    let mut total = 0u64;
    while total < spec.min_tokens {
        let mut doc = String::new();
        for p in 0..rng.gen_range(1..4) {
            if p > 0 {
                doc.push('\n');
            }
            for s in 0..rng.gen_range(2..7) {
                if s > 0 {
                    doc.push(' ');
                }
                let len = rng.gen_range(4..14);
                let mut w = global.sample(&mut rng);
                for i in 0..len {
                    let word = &lexicon[w];
                    if i == 0 {
                        let mut cs = word.chars();
                        let first = cs.next().unwrap();
                        doc.extend(first.to_uppercase());
                        doc.push_str(cs.as_str());
                    } else {
                        doc.push(' ');
                        if rng.gen_bool(0.02) {
                            doc.push_str(&rng.gen_range(2..2100).to_string());
                            doc.push(' ');
                        }
                        doc.push_str(word);
                    }
                    if i + 1 < len && i > 1 && rng.gen_bool(0.06) {
                        doc.push(',');
                    }
                    w = if rng.gen_bool(spec.follow_prob) {
                        succ[w][succ_pick.sample(&mut rng)]
                    } else {
                        global.sample(&mut rng)
                    };
                }
                doc.push(match rng.gen_range(0..10) {
                    0 => '?',
                    1 => '!',
                    _ => '.',
                });
            }
        }
        total += doc.len() as u64 + 1;
        docs.push(doc.into_bytes());
    }
    docs
}
