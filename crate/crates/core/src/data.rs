//! Character corpora: loading, vocabulary, contiguous splits and shuffled
//! fixed-length windows.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Rng;

/// How corpus bytes become characters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextMode {
    /// UTF-8, rejecting malformed input. A leading byte-order mark is dropped.
    #[default]
    Utf8,
    /// Every byte is one character (Latin-1 reading); never fails to decode.
    Bytes,
}

/// Reads a corpus file into a string of characters.
pub fn load_corpus(path: &Path, mode: TextMode) -> Result<String> {
    let ingest = |offset, message: String| Error::Ingestion {
        path: path.to_path_buf(),
        offset,
        message,
    };
    let bytes = std::fs::read(path).map_err(|e| ingest(0, format!("cannot read corpus: {e}")))?;
    let text = match mode {
        TextMode::Utf8 => {
            let body = bytes.strip_prefix(b"\xEF\xBB\xBF").unwrap_or(&bytes);
            let bom = bytes.len() - body.len();
            std::str::from_utf8(body)
                .map_err(|e| ingest(bom + e.valid_up_to(), "invalid UTF-8".into()))?
                .to_string()
        }
        TextMode::Bytes => bytes.iter().map(|&b| b as char).collect(),
    };
    if text.is_empty() {
        return Err(ingest(0, "corpus is empty".into()));
    }
    Ok(text)
}

/// Sorted character inventory of a training split plus a reserved unknown
/// symbol at index `symbols.len()`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    symbols: Vec<char>,
    index: BTreeMap<char, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    symbols: Vec<String>,
}

const VOCAB_VERSION: u32 = 1;

/// Encoded text and the number of characters that fell back to UNK.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub unknown: usize,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        let mut symbols: Vec<char> = text.chars().collect();
        symbols.sort_unstable();
        symbols.dedup();
        Self::from_symbols(symbols)
    }

    fn from_symbols(symbols: Vec<char>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        CharVocab { symbols, index }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn unk(&self) -> usize {
        self.symbols.len()
    }

    /// Model vocabulary size, UNK included.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn encode(&self, text: &str) -> Encoded {
        let mut unknown = 0;
        let ids = text
            .chars()
            .map(|c| {
                self.id(c).unwrap_or_else(|| {
                    unknown += 1;
                    self.unk()
                })
            })
            .collect();
        Encoded { ids, unknown }
    }

    /// Inverse of [`CharVocab::encode`]; UNK decodes to U+FFFD.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.symbols.get(i).copied().unwrap_or('\u{FFFD}'))
            .collect()
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            version: VOCAB_VERSION,
            symbols: self.symbols.iter().map(|c| c.to_string()).collect(),
        };
        serde_json::to_string(&file).expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(json).map_err(|e| Error::config(format!("vocab file: {e}")))?;
        if file.version != VOCAB_VERSION {
            return Err(Error::config(format!("unsupported vocab version {}", file.version)));
        }
        let mut symbols = Vec::with_capacity(file.symbols.len());
        for s in &file.symbols {
            let mut it = s.chars();
            match (it.next(), it.next()) {
                (Some(c), None) => symbols.push(c),
                _ => return Err(Error::config(format!("vocab entry {s:?} is not one character"))),
            }
        }
        if symbols.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("vocab symbols must be sorted and unique"));
        }
        Ok(Self::from_symbols(symbols))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.9,
            valid: 0.05,
            test: 0.05,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) || self.train <= 0.0 {
            return Err(Error::config(format!(
                "split fractions must be non-negative with a positive train share, got {all:?}"
            )));
        }
        if all.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config(format!("split fractions sum above 1: {all:?}")));
        }
        Ok(())
    }
}

/// Three contiguous pieces of a corpus, in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: String,
    pub valid: String,
    pub test: String,
}

impl Splits {
    pub fn get(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Splits that ended up with no characters.
    pub fn empty(&self) -> Vec<Split> {
        [Split::Train, Split::Valid, Split::Test]
            .into_iter()
            .filter(|s| self.get(*s).is_empty())
            .collect()
    }
}

/// Cuts `text` into train, valid and test segments by character count.
///
/// Train and valid get `⌊n·f⌋` characters. When the fractions sum to one the
/// test segment takes everything left, so rounding remainders land there.
pub fn split_corpus(text: &str, fractions: SplitFractions) -> Result<Splits> {
    fractions.validate()?;
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let take = |f: f64| ((n as f64 * f + 1e-9).floor() as usize).min(n);
    let n_train = take(fractions.train);
    let n_valid = take(fractions.valid).min(n - n_train);
    let rest = n - n_train - n_valid;
    let total = fractions.train + fractions.valid + fractions.test;
    let n_test = if (total - 1.0).abs() <= 1e-9 {
        rest
    } else {
        take(fractions.test).min(rest)
    };
    let piece = |a: usize, b: usize| chars[a..b].iter().collect::<String>();
    Ok(Splits {
        train: piece(0, n_train),
        valid: piece(n_train, n_train + n_valid),
        test: piece(n_train + n_valid, n_train + n_valid + n_test),
    })
}

/// Inputs and next-character targets for a group of windows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceBatch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub split: Split,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Number of non-overlapping windows of `t + 1` tokens advancing by `t`.
pub fn window_count(len: usize, t: usize) -> usize {
    if t == 0 || len == 0 {
        0
    } else {
        (len - 1) / t
    }
}

/// Window `k` as `(inputs, targets)`.
pub fn window(tokens: &[usize], t: usize, k: usize) -> (&[usize], &[usize]) {
    let s = k * t;
    (&tokens[s..s + t], &tokens[s + 1..s + t + 1])
}

/// Pull-based iterator over shuffled windows, `batch` at a time. The last
/// batch may be short.
#[derive(Debug, Clone)]
pub struct BatchStream<'a> {
    tokens: &'a [usize],
    t: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    split: Split,
}

/// One epoch of windows from `tokens`, shuffled with `rng`. Pass `None` to
/// keep corpus order.
pub fn batch_sequences<'a>(
    tokens: &'a [usize],
    t: usize,
    batch: usize,
    rng: Option<&mut Rng>,
    split: Split,
) -> Result<BatchStream<'a>> {
    if t == 0 || batch == 0 {
        return Err(Error::config("sequence length and batch size must be at least 1"));
    }
    if tokens.len() <= t {
        return Err(Error::rejected(format!(
            "{split} segment has {} characters, needs more than {t}",
            tokens.len()
        )));
    }
    let mut order: Vec<usize> = (0..window_count(tokens.len(), t)).collect();
    if let Some(rng) = rng {
        rng.shuffle(&mut order);
    }
    Ok(BatchStream {
        tokens,
        t,
        batch,
        order,
        pos: 0,
        split,
    })
}

impl BatchStream<'_> {
    pub fn windows(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchStream<'_> {
    type Item = SequenceBatch;

    fn next(&mut self) -> Option<SequenceBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let mut inputs = Vec::with_capacity(end - self.pos);
        let mut targets = Vec::with_capacity(end - self.pos);
        for &k in &self.order[self.pos..end] {
            let (x, y) = window(self.tokens, self.t, k);
            inputs.push(x.to_vec());
            targets.push(y.to_vec());
        }
        self.pos = end;
        Some(SequenceBatch {
            inputs,
            targets,
            split: self.split,
        })
    }
}
