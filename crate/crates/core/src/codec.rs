//! Sub-word vocabulary over label names.
//!
//! Words are split on whitespace and each word is broken into characters, the
//! last one carrying the [`END_OF_WORD`] suffix. Merges are learned greedily by
//! pair frequency and never cross word boundaries. The vocabulary can later be
//! extended with whole-word document tokens so that encoder input and decoder
//! output share one id space.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_SPECIALS: usize = 4;

pub const END_OF_WORD: &str = "</w>";
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<bos>", "<eos>", "<sep>", "<unk>"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("no label names to train on")]
    EmptyCorpus,
    #[error("target vocabulary size {target} must exceed {min} (distinct characters + specials)")]
    VocabTooSmall { target: usize, min: usize },
    #[error("token id {id} outside vocabulary of size {size}")]
    UnknownId { id: TokenId, size: usize },
    #[error("vocabulary file line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVocabulary {
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

fn merge_pair(symbols: &mut Vec<String>, left: &str, right: &str) -> bool {
    let mut changed = false;
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{left}{right}");
            symbols[i] = merged;
            symbols.remove(i + 1);
            changed = true;
        }
        i += 1;
    }
    changed
}

/// Learns merges over `names`, growing the vocabulary to at most
/// `target_vocab_size` tokens (specials included).
pub fn train_bpe<S: AsRef<str>>(names: &[S], target_vocab_size: usize) -> Result<LabelVocabulary, CodecError> {
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for name in names {
        for w in name.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(CodecError::EmptyCorpus);
    }
    let mut distinct_chars: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    distinct_chars.sort_unstable();
    distinct_chars.dedup();
    let min = distinct_chars.len() + NUM_SPECIALS;
    if target_vocab_size <= min {
        return Err(CodecError::VocabTooSmall {
            target: target_vocab_size,
            min,
        });
    }

    let mut words: Vec<(Vec<String>, usize)> = word_freq.iter().map(|(w, &f)| (word_symbols(w), f)).collect();
    let mut base: Vec<String> = words.iter().flat_map(|(s, _)| s.iter().cloned()).collect();
    base.sort();
    base.dedup();

    let mut vocab = LabelVocabulary::with_specials();
    for sym in base {
        vocab.push_token(sym);
    }

    while vocab.size() < target_vocab_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (symbols, freq) in &words {
            for pair in symbols.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += freq;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((l, r), c)| c >= 2 && !SPECIAL_SURFACES.contains(&format!("{l}{r}").as_str()))
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else { break };
        for (symbols, _) in &mut words {
            merge_pair(symbols, &left, &right);
        }
        vocab.push_token(format!("{left}{right}"));
        vocab.merge_rank.insert((left.clone(), right.clone()), vocab.merges.len());
        vocab.merges.push((left, right));
    }
    Ok(vocab)
}

impl LabelVocabulary {
    fn with_specials() -> Self {
        let mut v = Self {
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            tokens: Vec::new(),
            token_to_id: HashMap::new(),
        };
        for s in SPECIAL_SURFACES {
            v.push_token(s.to_string());
        }
        v
    }

    fn push_token(&mut self, surface: String) -> TokenId {
        if let Some(&id) = self.token_to_id.get(&surface) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.token_to_id.insert(surface.clone(), id);
        self.tokens.push(surface);
        id
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.token_to_id.get(surface).copied()
    }

    /// Adds whole-word tokens (`word</w>`) for document words not yet present.
    pub fn extend_with_words<'a>(&mut self, words: impl IntoIterator<Item = &'a str>) {
        for w in words {
            if !w.is_empty() {
                self.push_token(format!("{w}{END_OF_WORD}"));
            }
        }
    }

    fn bpe_word(&self, word: &str) -> Vec<String> {
        let mut symbols = word_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|p| self.merge_rank.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p[0].clone(), p[1].clone())))
                .min_by_key(|(r, _, _)| *r);
            match best {
                Some((_, l, r)) => {
                    merge_pair(&mut symbols, &l, &r);
                }
                None => return symbols,
            }
        }
    }

    /// Encodes a label name with the learned merges. Unknown symbols map to UNK.
    pub fn encode_label(&self, name: &str) -> Vec<TokenId> {
        name.split_whitespace()
            .flat_map(|w| self.bpe_word(w))
            .map(|s| self.id(&s).unwrap_or(UNK))
            .collect()
    }

    /// Whole-word lookup for document text. Words without a token map to UNK.
    pub fn encode_words(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.id(&format!("{w}{END_OF_WORD}")).unwrap_or(UNK))
            .collect()
    }

    pub fn decode_tokens(&self, ids: &[TokenId]) -> Result<String, CodecError> {
        let mut out = String::new();
        for &id in ids {
            let surface = self.token(id).ok_or(CodecError::UnknownId { id, size: self.size() })?;
            match surface.strip_suffix(END_OF_WORD) {
                Some(stem) => {
                    out.push_str(stem);
                    out.push(' ');
                }
                None => out.push_str(surface),
            }
        }
        if out.ends_with(' ') {
            out.pop();
        }
        Ok(out)
    }

    /// Serialized form: `#merges` section then `#tokens` section.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from("#merges\n");
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out.push_str("#tokens\n");
        for (id, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{id}");
        }
        out
    }

    pub fn parse(source: &str) -> Result<Self, CodecError> {
        enum Section {
            None,
            Merges,
            Tokens,
        }
        let err = |line: usize, reason: &str| CodecError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut section = Section::None;
        let mut merges = Vec::new();
        let mut tokens: Vec<String> = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let n = i + 1;
            match line {
                "#merges" => section = Section::Merges,
                "#tokens" => section = Section::Tokens,
                "" => {}
                _ => match section {
                    Section::None => return Err(err(n, "content before #merges")),
                    Section::Merges => {
                        let (l, r) = line.split_once(' ').ok_or_else(|| err(n, "expected `left right`"))?;
                        merges.push((l.to_string(), r.to_string()));
                    }
                    Section::Tokens => {
                        let (t, id) = line.rsplit_once('\t').ok_or_else(|| err(n, "expected `token\\tid`"))?;
                        let id: usize = id.parse().map_err(|_| err(n, "bad token id"))?;
                        if id != tokens.len() {
                            return Err(err(n, "token ids must be dense and ordered"));
                        }
                        tokens.push(t.to_string());
                    }
                },
            }
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS].iter().zip(SPECIAL_SURFACES).any(|(a, b)| a != b) {
            return Err(err(0, "special tokens must occupy ids 0..3"));
        }
        let token_to_id: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        if token_to_id.len() != tokens.len() {
            return Err(err(0, "duplicate token surface"));
        }
        for (l, r) in &merges {
            if !token_to_id.contains_key(&format!("{l}{r}")) {
                return Err(err(0, "merge result missing from token table"));
            }
        }
        let merge_rank = merges.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Ok(Self {
            merges,
            merge_rank,
            tokens,
            token_to_id,
        })
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_file_string().as_bytes()))
    }
}
