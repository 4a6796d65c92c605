//! Text classification data: tokenizer, vocabulary, TSV files and a
//! synthetic sentiment corpus.
//!
//! TSV files are UTF-8 with one `sentence<TAB>label` pair per line (LF or
//! CRLF), an optional `sentence\tlabel` header and labels `0` or `1`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::ValidityMask;
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

const TSV_HEADER: &str = "sentence\tlabel";

/// Lowercases, splits on whitespace and emits every non-alphanumeric
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for c in chunk.chars() {
            if c.is_alphanumeric() {
                word.extend(c.to_lowercase());
            } else {
                if !word.is_empty() {
                    tokens.push(std::mem::take(&mut word));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !word.is_empty() {
            tokens.push(word);
        }
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary of at most `max_size` ids (including pad and unk)
    /// from the most frequent tokens; ties are broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            ranked
                .into_iter()
                .map(|(t, _)| t)
                .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN)
                .take(max_size.saturating_sub(2)),
        );
        Self::from_tokens(tokens).expect("reserved tokens are in place")
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN} and {UNK_TOKEN}"
            )));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Token ids truncated to `max_len`. Empty text encodes as a lone unk so
    /// that every sequence has a valid position.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text).iter().take(max_len).map(|t| self.id(t)).collect();
        if ids.is_empty() {
            ids.push(UNK_ID);
        }
        ids
    }
}

/// A raw labelled sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabeledText {
    pub text: String,
    pub label: u8,
}

/// An encoded example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub token_ids: Vec<u32>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<LabeledText>,
    pub validation: Vec<LabeledText>,
    pub source: String,
}

impl Corpus {
    fn checked(self) -> Result<Self> {
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::Data(format!(
                "{}: need non-empty train and validation splits (got {} / {})",
                self.source,
                self.train.len(),
                self.validation.len()
            )));
        }
        Ok(self)
    }

    /// Loads a corpus from a directory holding `train.tsv` and
    /// `validation.tsv` (or `dev.tsv`), or from a single TSV file that is
    /// split 90/10 after a seeded shuffle.
    pub fn load(path: &Path, seed: u64) -> Result<Self> {
        if path.is_dir() {
            let train = load_tsv(&path.join("train.tsv"))?;
            let val_path = ["validation.tsv", "dev.tsv"]
                .iter()
                .map(|f| path.join(f))
                .find(|p| p.exists())
                .unwrap_or_else(|| path.join("validation.tsv"));
            let validation = load_tsv(&val_path)?;
            return Corpus {
                train,
                validation,
                source: path.display().to_string(),
            }
            .checked();
        }
        let mut all = load_tsv(path)?;
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = train_len(all.len());
        let validation = all.split_off(cut);
        Corpus {
            train: all,
            validation,
            source: path.display().to_string(),
        }
        .checked()
    }

    /// Vocabulary built from the training split only.
    pub fn build_vocab(&self, max_size: usize) -> Vocab {
        Vocab::build(self.train.iter().map(|e| e.text.as_str()), max_size)
    }

    pub fn encode(&self, vocab: &Vocab, max_len: usize) -> (Vec<Example>, Vec<Example>) {
        let enc = |split: &[LabeledText]| {
            split
                .iter()
                .map(|e| Example {
                    token_ids: vocab.encode(&e.text, max_len),
                    label: e.label,
                })
                .collect()
        };
        (enc(&self.train), enc(&self.validation))
    }
}

fn train_len(total: usize) -> usize {
    total * 9 / 10
}

/// Reads one TSV split.
pub fn load_tsv(path: &Path) -> Result<Vec<LabeledText>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let content = String::from_utf8(raw).map_err(|e| Error::DataLine {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("not valid UTF-8: {e}"),
    })?;
    let content = content.strip_prefix('\u{feff}').unwrap_or(&content);
    let line_err = |line: usize, msg: String| Error::DataLine {
        path: PathBuf::from(path),
        line,
        msg,
    };

    let mut out = Vec::new();
    for (idx, line) in content.split('\n').enumerate() {
        let lineno = idx + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() || (idx == 0 && line == TSV_HEADER) {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [text, label] = fields[..] else {
            return Err(line_err(
                lineno,
                format!("expected 2 tab-separated fields, found {}", fields.len()),
            ));
        };
        let label = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(line_err(lineno, format!("label must be 0 or 1, got {other:?}"))),
        };
        out.push(LabeledText {
            text: text.to_string(),
            label,
        });
    }
    Ok(out)
}

/// Writes one TSV split with a header row.
pub fn write_tsv(path: &Path, examples: &[LabeledText]) -> Result<()> {
    let mut s = String::from(TSV_HEADER);
    s.push('\n');
    for e in examples {
        if e.text.contains(['\t', '\n', '\r']) {
            return Err(Error::Data(format!("sentence contains a tab or newline: {:?}", e.text)));
        }
        writeln!(s, "{}\t{}", e.text, e.label).expect("writing to a String");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Cue tokens per polarity in the synthetic corpus.
pub const CUES_PER_POLARITY: usize = 20;
/// Shortest synthetic sentence.
pub const MIN_SYNTHETIC_LEN: usize = 5;

/// Deterministic cue-token sentiment corpus.
///
/// Each sentence is `5..=max_len` tokens of neutral filler with 1 to 3
/// positions overwritten by cue tokens of the sentence's polarity. Labels are
/// balanced to within one example and the split is 90/10.
pub fn gen_synthetic(seed: u64, size: usize, vocab_size: usize, max_len: usize) -> Result<Corpus> {
    if size < 10 {
        return Err(Error::Data(format!(
            "synthetic corpus needs at least 10 examples, got {size}"
        )));
    }
    if max_len < MIN_SYNTHETIC_LEN {
        return Err(Error::Data(format!(
            "synthetic sentences need max_len >= {MIN_SYNTHETIC_LEN}, got {max_len}"
        )));
    }
    let fillers = vocab_size.saturating_sub(2 + 2 * CUES_PER_POLARITY).max(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<u8> = (0..size).map(|i| (i % 2) as u8).collect();
    labels.shuffle(&mut rng);

    let examples: Vec<LabeledText> = labels
        .into_iter()
        .map(|label| {
            let len = rng.gen_range(MIN_SYNTHETIC_LEN..=max_len);
            let mut words: Vec<String> = (0..len).map(|_| format!("w{}", rng.gen_range(0..fillers))).collect();
            let cues = rng.gen_range(1..=3);
            let prefix = if label == 1 { "pos" } else { "neg" };
            let mut slots: Vec<usize> = (0..len).collect();
            slots.shuffle(&mut rng);
            for &slot in &slots[..cues] {
                words[slot] = format!("{prefix}{}", rng.gen_range(0..CUES_PER_POLARITY));
            }
            LabeledText {
                text: words.join(" "),
                label,
            }
        })
        .collect();

    let mut train = examples;
    let validation = train.split_off(train_len(size));
    Corpus {
        train,
        validation,
        source: format!("synthetic(seed={seed}, size={size}, vocab_size={vocab_size}, max_len={max_len})"),
    }
    .checked()
}

/// A padded mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `(batch, n)` token ids, [`PAD_ID`] at padding.
    pub tokens: Array2<u32>,
    pub valid: ValidityMask,
    pub labels: Vec<usize>,
}

impl Batch {
    /// Pads to the longest example, or to `pad_to` when that is longer.
    pub fn new(examples: &[&Example], pad_to: Option<usize>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let longest = examples.iter().map(|e| e.token_ids.len()).max().unwrap_or(0);
        let n = pad_to.unwrap_or(0).max(longest);
        let lengths: Vec<usize> = examples.iter().map(|e| e.token_ids.len()).collect();
        let valid = ValidityMask::from_lengths(&lengths, n)?;
        let tokens = Array2::from_shape_fn((examples.len(), n), |(b, i)| {
            examples[b].token_ids.get(i).copied().unwrap_or(PAD_ID)
        });
        let labels = examples.iter().map(|e| e.label as usize).collect();
        Ok(Self { tokens, valid, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Good movie!"), vec!["good", "movie", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("It's fine."), vec!["it", "'", "s", "fine", "."]);
        assert_eq!(tokenize("  A\tB  "), vec!["a", "b"]);
    }

    #[test]
    fn vocab_frequency_order() {
        let v = Vocab::build(["a a b"], 100);
        assert_eq!(v.tokens(), &["[PAD]", "[UNK]", "a", "b"]);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("zzz"), UNK_ID);

        let v2 = Vocab::build(["c b b a a"], 100);
        assert_eq!(v2.tokens()[2..], ["a", "b", "c"]);
        assert_eq!(Vocab::build(["c b b a a"], 100), v2);
    }

    #[test]
    fn vocab_cap_maps_rare_to_unk() {
        let v = Vocab::build(["a a a b b c"], 4);
        assert_eq!(v.len(), 4);
        assert_eq!(v.encode("a b c", 10), vec![2, 3, UNK_ID]);
    }

    #[test]
    fn encode_truncates_and_handles_empty() {
        let v = Vocab::build(["x y z"], 10);
        assert_eq!(v.encode("x y z x", 2).len(), 2);
        assert_eq!(v.encode("", 5), vec![UNK_ID]);
    }

    #[test]
    fn vocab_round_trip() {
        let v = Vocab::build(["the cat sat", "the dog"], 50);
        for t in ["the", "cat", "dog"] {
            assert_eq!(v.token(v.id(t)), Some(t));
        }
        assert_eq!(Vocab::from_tokens(v.tokens().to_vec()).unwrap(), v);
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = gen_synthetic(7, 2000, 1000, 64).unwrap();
        let b = gen_synthetic(7, 2000, 1000, 64).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 1800);
        assert_eq!(a.validation.len(), 200);
        let pos = a.train.iter().chain(&a.validation).filter(|e| e.label == 1).count();
        assert!((pos as i64 - 1000).abs() <= 1);
        for e in a.train.iter().chain(&a.validation) {
            let toks = tokenize(&e.text);
            assert!((MIN_SYNTHETIC_LEN..=64).contains(&toks.len()));
            let own = if e.label == 1 { "pos" } else { "neg" };
            let other = if e.label == 1 { "neg" } else { "pos" };
            assert!(toks.iter().any(|t| t.starts_with(own)));
            assert!(!toks.iter().any(|t| t.starts_with(other)));
        }
        assert_ne!(gen_synthetic(8, 2000, 1000, 64).unwrap(), a);
        assert!(gen_synthetic(7, 9, 1000, 64).is_err());
    }

    #[test]
    fn batch_padding() {
        let ex = [
            Example {
                token_ids: vec![5, 6, 7],
                label: 1,
            },
            Example {
                token_ids: vec![8],
                label: 0,
            },
        ];
        let refs: Vec<&Example> = ex.iter().collect();
        let b = Batch::new(&refs, None).unwrap();
        assert_eq!(b.tokens.dim(), (2, 3));
        assert_eq!(b.tokens[[1, 2]], PAD_ID);
        assert!(!b.valid.is_valid(1, 1));
        assert_eq!(Batch::new(&refs, Some(6)).unwrap().tokens.dim(), (2, 6));
        assert_eq!(b.labels, vec![1, 0]);
    }
}
