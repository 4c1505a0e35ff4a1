//! Synthetic corpora, byte-level tokens and calibration sampling.
//!
//! Two generators stand in for "general" and "task" text: an order-2 byte
//! Markov chain fitted to a bundled paragraph, and templated Q/A lines.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TokenId;

const SEED_TEXT: &str = "The river town wakes before the sun. Boats knock against the wooden pier while \
the baker carries warm bread to the market square, and the fishermen count their nets in the grey light. \
A small girl chases a dog along the bank, laughing each time it stops to sniff the reeds. Her grandmother \
watches from the doorway, a cup of tea in her hands, and remembers the winter when the water froze so \
hard that the children skated all the way to the mill. Nobody in town had seen such a thing before, and \
nobody has seen it since. The mill still stands, though its wheel turns only on holidays now, when the \
mayor opens the gates and lets the visitors walk through the old rooms. They point at the grinding \
stones and the heavy beams and ask how long it took to build. The guide always gives the same answer: \
longer than anyone expected, and shorter than it should have. In the afternoon the wind comes up from \
the south and the market empties. Merchants fold their tables, stack their crates and argue about the \
price of apples for next week. The school bell rings, and a flood of children pours into the streets, \
shouting about games and homework and the new teacher who keeps a parrot in her classroom. By evening \
the lamps are lit along the water, the boats are tied for the night, and the town settles into the \
quiet sound of the river moving past, as it has every night for three hundred years.";

const DOC_MIN: usize = 48;
const DOC_MAX: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Markov,
    Template,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov" => Ok(Self::Markov),
            "template" => Ok(Self::Template),
            _ => Err(Error::arg(format!("unknown corpus kind {s:?} (expected markov or template)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    General,
    TaskA,
    TaskB,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Vec<u8>>,
    pub source_tag: SourceTag,
}

/// Deterministic synthetic corpus of `size` documents.
pub fn generate_corpus(kind: CorpusKind, seed: u64, size: usize) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::arg("corpus size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (documents, source_tag) = match kind {
        CorpusKind::Markov => {
            let chain = MarkovChain::fit(SEED_TEXT.as_bytes());
            ((0..size).map(|_| chain.sample(&mut rng)).collect(), SourceTag::General)
        }
        CorpusKind::Template => ((0..size).map(|_| template_doc(&mut rng)).collect(), SourceTag::TaskA),
    };
    Ok(Corpus { documents, source_tag })
}

struct MarkovChain {
    text: Vec<u8>,
    next: BTreeMap<(u8, u8), Vec<u8>>,
}

impl MarkovChain {
    /// Successor lists of every byte pair, treating the text as cyclic.
    fn fit(text: &[u8]) -> Self {
        let n = text.len();
        let mut next: BTreeMap<(u8, u8), Vec<u8>> = BTreeMap::new();
        for i in 0..n {
            next.entry((text[i], text[(i + 1) % n])).or_default().push(text[(i + 2) % n]);
        }
        Self { text: text.to_vec(), next }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<u8> {
        let len = rng.random_range(DOC_MIN..=DOC_MAX);
        let start = rng.random_range(0..self.text.len() - 1);
        let mut doc = vec![self.text[start], self.text[start + 1]];
        while doc.len() < len {
            let key = (doc[doc.len() - 2], doc[doc.len() - 1]);
            doc.push(*self.next[&key].choose(rng).expect("cyclic chain has successors"));
        }
        doc
    }
}

const OBJECTS: [(&str, &str); 8] = [
    ("sky", "blue"),
    ("grass", "green"),
    ("snow", "white"),
    ("coal", "black"),
    ("lemon", "yellow"),
    ("cherry", "red"),
    ("orange", "orange"),
    ("plum", "purple"),
];

const NUMBERS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn template_doc(rng: &mut ChaCha8Rng) -> Vec<u8> {
    let lines = rng.random_range(2..=4);
    let mut parts = Vec::with_capacity(lines);
    for _ in 0..lines {
        let line = match rng.random_range(0..3) {
            0 => {
                let (obj, color) = OBJECTS[rng.random_range(0..OBJECTS.len())];
                format!("Q: what color is the {obj}? A: {color}.")
            }
            1 => {
                let a = rng.random_range(0..10);
                let b = rng.random_range(0..10);
                format!("Q: what is {a} plus {b}? A: {}.", a + b)
            }
            _ => {
                let a = rng.random_range(0..10);
                format!("Q: how do you spell {a}? A: {}.", NUMBERS[a])
            }
        };
        parts.push(line);
    }
    parts.join(" ").into_bytes()
}

/// Byte-level tokens: one id per byte.
pub fn tokenize(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| b as TokenId).collect()
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Every document tokenized and truncated to `max_len`.
    pub fn sequences(&self, max_len: usize) -> Vec<Vec<TokenId>> {
        self.documents.iter().map(|d| tokenize(&d[..d.len().min(max_len)])).collect()
    }

    /// SHA-256 over the documents (length-prefixed) and the source tag.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.source_tag).as_bytes());
        for d in &self.documents {
            h.update((d.len() as u64).to_le_bytes());
            h.update(d);
        }
        hex::encode(h.finalize())
    }

    /// Byte-frequency histogram over every document.
    pub fn byte_histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for d in &self.documents {
            for &b in d {
                h[b as usize] += 1;
            }
        }
        h
    }

    /// One document per line; `\`, newline and carriage return are escaped.
    pub fn to_text(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for d in &self.documents {
            for &b in d {
                match b {
                    b'\\' => out.extend_from_slice(b"\\\\"),
                    b'\n' => out.extend_from_slice(b"\\n"),
                    b'\r' => out.extend_from_slice(b"\\r"),
                    _ => out.push(b),
                }
            }
            out.push(b'\n');
        }
        out
    }

    pub fn from_text(text: &[u8], source_tag: SourceTag) -> Result<Self> {
        let mut documents = Vec::new();
        for (lineno, line) in text.split(|&b| b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut doc = Vec::with_capacity(line.len());
            let mut it = line.iter();
            while let Some(&b) = it.next() {
                if b != b'\\' {
                    doc.push(b);
                    continue;
                }
                match it.next() {
                    Some(b'\\') => doc.push(b'\\'),
                    Some(b'n') => doc.push(b'\n'),
                    Some(b'r') => doc.push(b'\r'),
                    other => {
                        return Err(Error::Input(format!(
                            "line {}: bad escape {:?}",
                            lineno + 1,
                            other.map(|&c| c as char)
                        )))
                    }
                }
            }
            documents.push(doc);
        }
        Ok(Self { documents, source_tag })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path, source_tag: SourceTag) -> Result<Self> {
        let bytes = crate::error::read_file(path)?;
        Self::from_text(&bytes, source_tag)
    }
}

/// Pearson chi-squared statistic of two histograms against their pooled
/// profile, over bins where either is nonzero. Returns `(statistic, df)`.
pub fn chi_squared_homogeneity(a: &[u64], b: &[u64]) -> (f64, usize) {
    let na: f64 = a.iter().sum::<u64>() as f64;
    let nb: f64 = b.iter().sum::<u64>() as f64;
    let mut stat = 0.0;
    let mut bins = 0;
    for (&x, &y) in a.iter().zip(b) {
        if x + y == 0 {
            continue;
        }
        bins += 1;
        let pooled = (x + y) as f64 / (na + nb);
        let (ea, eb) = (na * pooled, nb * pooled);
        stat += (x as f64 - ea).powi(2) / ea + (y as f64 - eb).powi(2) / eb;
    }
    (stat, bins.max(1) - 1)
}

/// Persisted form of a calibration set: enough to re-materialize it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub seed: u64,
    pub count: usize,
    pub max_seq_len: usize,
    pub document_indices: Vec<usize>,
    pub with_replacement: bool,
    pub source_fingerprint: String,
    pub fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<TokenId>>,
    pub record: CalibrationRecord,
}

/// Sample `count` documents uniformly, truncated to `max_seq_len` tokens.
/// Sampling is without replacement unless `count` exceeds the corpus size.
pub fn sample_calibration(corpus: &Corpus, count: usize, max_seq_len: usize, seed: u64) -> Result<CalibrationSet> {
    if count == 0 {
        return Err(Error::arg("calibration count must be positive"));
    }
    if max_seq_len == 0 {
        return Err(Error::arg("max_seq_len must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::arg("cannot calibrate on an empty corpus"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let with_replacement = count > corpus.len();
    let document_indices = if with_replacement {
        (0..count).map(|_| rng.random_range(0..corpus.len())).collect()
    } else {
        rand::seq::index::sample(&mut rng, corpus.len(), count).into_vec()
    };
    let source_fingerprint = corpus.fingerprint();
    let fingerprint =
        calibration_fingerprint(seed, max_seq_len, &document_indices, with_replacement, &source_fingerprint);
    let record = CalibrationRecord {
        seed,
        count,
        max_seq_len,
        document_indices,
        with_replacement,
        source_fingerprint,
        fingerprint,
    };
    Ok(CalibrationSet { sequences: materialize(corpus, &record), record })
}

fn calibration_fingerprint(
    seed: u64,
    max_seq_len: usize,
    indices: &[usize],
    with_replacement: bool,
    source: &str,
) -> String {
    let mut h = Sha256::new();
    h.update(source.as_bytes());
    h.update(seed.to_le_bytes());
    h.update((max_seq_len as u64).to_le_bytes());
    h.update([with_replacement as u8]);
    for &i in indices {
        h.update((i as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn materialize(corpus: &Corpus, record: &CalibrationRecord) -> Vec<Vec<TokenId>> {
    record
        .document_indices
        .iter()
        .map(|&i| {
            let d = &corpus.documents[i];
            tokenize(&d[..d.len().min(record.max_seq_len)])
        })
        .collect()
}

impl CalibrationSet {
    /// Rebuild a persisted set; the corpus must be the one it was drawn from.
    pub fn from_record(corpus: &Corpus, record: CalibrationRecord) -> Result<Self> {
        if corpus.fingerprint() != record.source_fingerprint {
            return Err(Error::Input("calibration record was drawn from a different corpus".into()));
        }
        if record.document_indices.iter().any(|&i| i >= corpus.len()) {
            return Err(Error::Corruption("calibration record indexes past the corpus".into()));
        }
        Ok(Self { sequences: materialize(corpus, &record), record })
    }

    pub fn fingerprint(&self) -> &str {
        &self.record.fingerprint
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        for kind in [CorpusKind::Markov, CorpusKind::Template] {
            let a = generate_corpus(kind, 3, 20).unwrap();
            assert_eq!(a, generate_corpus(kind, 3, 20).unwrap());
            assert_ne!(a, generate_corpus(kind, 4, 20).unwrap());
            assert_eq!(generate_corpus(kind, 3, 1).unwrap().len(), 1);
            assert!(a.documents.iter().all(|d| !d.is_empty()));
        }
        assert!(generate_corpus(CorpusKind::Markov, 0, 0).is_err());
    }

    #[test]
    fn markov_documents_follow_seed_bigrams() {
        let c = generate_corpus(CorpusKind::Markov, 1, 10).unwrap();
        let text = SEED_TEXT.as_bytes();
        let n = text.len();
        for d in &c.documents {
            assert!((DOC_MIN..=DOC_MAX).contains(&d.len()));
            for w in d.windows(3) {
                assert!((0..n).any(|i| text[i] == w[0] && text[(i + 1) % n] == w[1] && text[(i + 2) % n] == w[2]));
            }
        }
    }

    #[test]
    fn text_round_trip_with_escapes() {
        let c = Corpus { documents: vec![b"a\\b\nc\rd".to_vec(), b"plain".to_vec()], source_tag: SourceTag::TaskB };
        let text = c.to_text();
        assert_eq!(text.iter().filter(|&&b| b == b'\n').count(), 2);
        assert_eq!(Corpus::from_text(&text, SourceTag::TaskB).unwrap(), c);
        assert!(Corpus::from_text(b"bad\\x\n", SourceTag::General).is_err());
    }

    #[test]
    fn calibration_sampling() {
        let c = generate_corpus(CorpusKind::Template, 2, 10).unwrap();
        let a = sample_calibration(&c, 4, 16, 7).unwrap();
        assert_eq!(a, sample_calibration(&c, 4, 16, 7).unwrap());
        assert!(!a.record.with_replacement);
        let mut idx = a.record.document_indices.clone();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 4);
        assert!(a.sequences.iter().all(|s| s.len() <= 16));
        let big = sample_calibration(&c, 25, 16, 7).unwrap();
        assert!(big.record.with_replacement);
        assert_eq!(big.sequences.len(), 25);
        assert_ne!(big.fingerprint(), a.fingerprint());
        let short = sample_calibration(&c, 3, 1, 7).unwrap();
        assert!(short.sequences.iter().all(|s| s.len() == 1));
        assert!(sample_calibration(&c, 0, 16, 7).is_err());
        let again = CalibrationSet::from_record(&c, a.record.clone()).unwrap();
        assert_eq!(again, a);
    }
}
