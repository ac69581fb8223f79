//! Corpus and dataset ingestion.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rnn::train::Example;
use crate::tensor::Tensor;

/// Character vocabulary sorted by codepoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Vocabulary {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self::from_chars(set.into_iter().collect())
    }

    fn from_chars(chars: Vec<char>) -> Self {
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self { chars, index }
    }

    /// Rebuilds a vocabulary from checkpoint token strings, one char each.
    pub fn from_tokens(tokens: &[String]) -> Result<Self> {
        let mut chars = Vec::with_capacity(tokens.len());
        for t in tokens {
            let mut it = t.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => chars.push(c),
                _ => return Err(Error::Checkpoint(format!("token {t:?} is not a single character"))),
            }
        }
        if chars.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Checkpoint("vocabulary is not sorted by codepoint".into()));
        }
        Ok(Self::from_chars(chars))
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn tokens(&self) -> Vec<String> {
        self.chars.iter().map(char::to_string).collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.id(c)
                    .ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().filter_map(|&i| self.char(i)).collect()
    }
}

/// A tokenized corpus split 8:1:1 on line boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub vocabulary: Vocabulary,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Line counts of the three splits.
    pub split_lines: [usize; 3],
}

impl TextCorpus {
    pub fn test_text(&self) -> String {
        self.vocabulary.decode(&self.test)
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| {
        Error::ingestion(path, format!("not valid UTF-8 at byte {}", e.utf8_error().valid_up_to()))
    })
}

pub fn split_text(text: &str) -> Result<TextCorpus> {
    if text.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let vocabulary = Vocabulary::from_text(text);
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let n = lines.len();
    let n_train = n * 8 / 10;
    let n_valid = n / 10;
    let encode = |part: &[&str]| -> Result<Vec<usize>> { vocabulary.encode(&part.concat()) };
    Ok(TextCorpus {
        train: encode(&lines[..n_train])?,
        valid: encode(&lines[n_train..n_train + n_valid])?,
        test: encode(&lines[n_train + n_valid..])?,
        split_lines: [n_train, n_valid, n - n_train - n_valid],
        vocabulary,
    })
}

/// Reads a UTF-8 text file into a character corpus.
pub fn ingest_text_corpus(path: &Path) -> Result<TextCorpus> {
    let text = read_utf8(path)?;
    if text.is_empty() {
        return Err(Error::ingestion(path, "file is empty"));
    }
    split_text(&text).map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Reads a text file and encodes all of it with an existing vocabulary.
pub fn ingest_text_with(path: &Path, vocabulary: &Vocabulary) -> Result<Vec<usize>> {
    let text = read_utf8(path)?;
    vocabulary
        .encode(&text)
        .map_err(|e| Error::ingestion(path, e.to_string()))
}

/// Reads `label, v_1, ..., v_{steps·input_dim}` rows into `(steps, input_dim)`
/// sequences.
pub fn ingest_sequence_dataset(
    path: &Path,
    steps: usize,
    input_dim: usize,
    num_classes: usize,
) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_sequences(file, steps, input_dim, num_classes).map_err(|e| match e {
        Error::Input(reason) => Error::ingestion(path, reason),
        other => other,
    })
}

pub fn read_sequences<R: std::io::Read>(
    reader: R,
    steps: usize,
    input_dim: usize,
    num_classes: usize,
) -> Result<Vec<Example>> {
    let width = steps * input_dim;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let row = n + 1;
        let rec = rec.map_err(|e| Error::Input(format!("row {row}: {e}")))?;
        if rec.len() != width + 1 {
            return Err(Error::Input(format!(
                "row {row} has {} fields, expected {}",
                rec.len(),
                width + 1
            )));
        }
        let label: usize = rec[0]
            .parse()
            .map_err(|_| Error::Input(format!("row {row}: label {:?} is not a class index", &rec[0])))?;
        if label >= num_classes {
            return Err(Error::Input(format!("row {row}: label {label} outside 0..{num_classes}")));
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|f| match f.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Input(format!("row {row}: {f:?} is not a finite number"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(Example::Labeled {
            sequence: Tensor::new(vec![steps, input_dim], values)?,
            label,
        });
    }
    Ok(out)
}

/// Writes labeled sequences in the format [`ingest_sequence_dataset`] reads.
/// Values use the shortest representation that parses back bit-exactly.
pub fn write_sequence_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        let Example::Labeled { sequence, label } = ex else {
            return Err(Error::Input("only labeled sequences can be written".into()));
        };
        write!(buf, "{label}").expect("write to memory");
        for v in sequence.data() {
            write!(buf, ",{v}").expect("write to memory");
        }
        buf.push(b'\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
