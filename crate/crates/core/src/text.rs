//! Prompt rendering, behaviour-name remapping and tokenisation.
//!
//! Two tokenizer modes are supported. The desk mode is word-level with a
//! single-character fallback for unknown words. The byte-pair mode applies
//! a user-supplied merge table (word-final symbols carry a `</w>` suffix)
//! and maps the resulting pieces through a vocabulary file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::MAX_TOKENS;

pub const CATEGORY_SLOT: &str = "{category}";
pub const DEFAULT_TEMPLATE: &str = "a photo of a {category} .";
pub const COW_TEMPLATE: &str = "a photo of a cow {category} .";

pub const START_TOKEN: &str = "<|startoftext|>";
pub const END_TOKEN: &str = "<|endoftext|>";
pub const PAD_TOKEN: &str = "<pad>";
const WORD_END: &str = "</w>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        let slots = pattern.matches(CATEGORY_SLOT).count();
        if slots != 1 {
            return Err(Error::InvalidArgument(format!(
                "template `{pattern}` must contain exactly one {CATEGORY_SLOT} slot, found {slots}"
            )));
        }
        Ok(Self { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn render(&self, phrase: &str) -> String {
        self.pattern
            .replace(CATEGORY_SLOT, phrase)
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            pattern: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

pub fn render_prompt(template: &PromptTemplate, phrase: &str) -> String {
    template.render(phrase)
}

/// Substring rewrites applied to raw category labels before prompting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviourVocabulary {
    remap: Vec<(String, String)>,
}

impl BehaviourVocabulary {
    /// Rules are applied longest pattern first (ties in lexical order). A
    /// replacement may not contain any pattern, which keeps the rewrite
    /// idempotent.
    pub fn new(rules: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut remap: Vec<(String, String)> = rules.into_iter().collect();
        if remap.iter().any(|(from, _)| from.is_empty()) {
            return Err(Error::InvalidArgument("empty remap pattern".into()));
        }
        for (_, to) in &remap {
            if let Some((from, _)) = remap.iter().find(|(from, _)| to.contains(from.as_str())) {
                return Err(Error::InvalidArgument(format!(
                    "replacement `{to}` contains pattern `{from}`"
                )));
            }
        }
        remap.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        remap.dedup_by(|a, b| a.0 == b.0);
        Ok(Self { remap })
    }

    /// No rewriting at all (prompt-remap ablation).
    pub fn identity() -> Self {
        Self { remap: Vec::new() }
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.remap
    }

    pub fn apply(&self, label: &str) -> String {
        let mut out = label.to_string();
        for (from, to) in &self.remap {
            out = out.replace(from.as_str(), to);
        }
        out
    }
}

impl Default for BehaviourVocabulary {
    fn default() -> Self {
        Self::new([
            ("ruminating".to_string(), "chewing".to_string()),
            ("-".to_string(), " ".to_string()),
        ])
        .expect("default remap is valid")
    }
}

pub fn remap_category(label: &str, vocab: &BehaviourVocabulary) -> String {
    vocab.apply(label)
}

/// Token ids framed by start and end markers and padded to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub eos_position: usize,
}

impl TokenSequence {
    pub fn content_len(&self) -> usize {
        self.eos_position + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Mode {
    Desk,
    Bpe { ranks: HashMap<(String, String), usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerMode {
    Desk,
    BpeFile,
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, usize>,
    tokens: Vec<String>,
    start_id: usize,
    end_id: usize,
    pad_id: usize,
    capacity: usize,
    mode: Mode,
}

/// Words built into the desk vocabulary after the specials and characters.
const DESK_WORDS: &[&str] = &[
    "a", "an", "the", "photo", "video", "of", "cow", "cattle", "is", "feeding", "drinking",
    "standing", "lying", "self", "grooming", "chewing", "eating", "resting",
];

const DESK_CHARS: &str = "abcdefghijklmnopqrstuvwxyz0123456789.,-'!?;:";

impl Tokenizer {
    /// The built-in word-level vocabulary with character fallback.
    pub fn desk() -> Self {
        let mut tokens: Vec<String> = vec![PAD_TOKEN.into(), START_TOKEN.into(), END_TOKEN.into()];
        for c in DESK_CHARS.chars() {
            tokens.push(c.to_string());
        }
        for w in DESK_WORDS {
            if !tokens.iter().any(|t| t == w) {
                tokens.push((*w).to_string());
            }
        }
        Self::from_tokens(tokens, Mode::Desk).expect("built-in vocabulary has specials")
    }

    /// Desk-mode tokenizer over a vocabulary file (one token per line, id =
    /// zero-based line number).
    pub fn desk_from_file(vocab_path: &Path) -> Result<Self> {
        Self::from_tokens(read_lines(vocab_path)?, Mode::Desk)
    }

    /// Byte-pair tokenizer from a vocabulary file and a merges file (one
    /// space-separated pair per line; `#` lines are ignored; rank = order).
    pub fn bpe_from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let mut ranks = HashMap::new();
        let mut rank = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: merges_path.to_path_buf(),
                    line: i + 1,
                    message: "expected exactly two symbols".into(),
                });
            };
            ranks.entry((a.to_string(), b.to_string())).or_insert(rank);
            rank += 1;
        }
        Self::from_tokens(read_lines(vocab_path)?, Mode::Bpe { ranks })
    }

    fn from_tokens(tokens: Vec<String>, mode: Mode) -> Result<Self> {
        let mut vocab = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            vocab.entry(t.clone()).or_insert(i);
        }
        let find = |t: &str| {
            vocab
                .get(t)
                .copied()
                .ok_or_else(|| Error::Config(format!("vocabulary lacks special token `{t}`")))
        };
        let start_id = find(START_TOKEN)?;
        let end_id = find(END_TOKEN)?;
        let pad_id = vocab.get(PAD_TOKEN).copied().unwrap_or(0);
        Ok(Self {
            vocab,
            tokens,
            start_id,
            end_id,
            pad_id,
            capacity: MAX_TOKENS,
            mode,
        })
    }

    pub fn mode(&self) -> TokenizerMode {
        match self.mode {
            Mode::Desk => TokenizerMode::Desk,
            Mode::Bpe { .. } => TokenizerMode::BpeFile,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn start_id(&self) -> usize {
        self.start_id
    }

    pub fn end_id(&self) -> usize {
        self.end_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Sub-word pieces for one pre-tokenised word.
    pub fn word_pieces(&self, word: &str) -> Result<Vec<String>> {
        match &self.mode {
            Mode::Desk => {
                if self.vocab.contains_key(word) {
                    Ok(vec![word.to_string()])
                } else {
                    Ok(word.chars().map(|c| c.to_string()).collect())
                }
            }
            Mode::Bpe { ranks } => Ok(bpe_merge(word, ranks)),
        }
    }

    fn piece_id(&self, piece: &str) -> Result<usize> {
        self.vocab
            .get(piece)
            .copied()
            .ok_or_else(|| Error::UnknownToken(piece.to_string()))
    }

    /// Content ids without framing.
    pub fn encode_content(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for word in pre_tokenize(text) {
            for piece in self.word_pieces(&word)? {
                ids.push(self.piece_id(&piece)?);
            }
        }
        Ok(ids)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        if text.trim().is_empty() {
            return Err(Error::InvalidArgument("cannot tokenize empty text".into()));
        }
        let content = self.encode_content(text)?;
        let needed = content.len() + 2;
        if needed > self.capacity {
            return Err(Error::TokenOverflow {
                needed,
                capacity: self.capacity,
            });
        }
        let mut ids = Vec::with_capacity(self.capacity);
        ids.push(self.start_id);
        ids.extend(content);
        ids.push(self.end_id);
        let eos_position = ids.len() - 1;
        ids.resize(self.capacity, self.pad_id);
        Ok(TokenSequence { ids, eos_position })
    }

    pub fn decode(&self, seq: &TokenSequence) -> String {
        let pieces: Vec<&str> = seq.ids[1..seq.eos_position]
            .iter()
            .filter_map(|&id| self.token(id))
            .collect();
        match self.mode {
            Mode::Desk => pieces.join(" "),
            Mode::Bpe { .. } => pieces
                .concat()
                .replace(WORD_END, " ")
                .trim_end()
                .to_string(),
        }
    }
}

/// Lower-cases and splits into alphanumeric runs and single punctuation
/// characters.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            current.push(c);
            continue;
        }
        if !current.is_empty() {
            words.push(std::mem::take(&mut current));
        }
        if !c.is_whitespace() {
            words.push(c.to_string());
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

fn bpe_merge(word: &str, ranks: &HashMap<(String, String), usize>) -> Vec<String> {
    let mut symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(WORD_END);
    }
    loop {
        let best = symbols
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
            .min();
        let Some((rank, _)) = best else { break };
        let mut merged = Vec::with_capacity(symbols.len());
        let mut i = 0;
        while i < symbols.len() {
            if i + 1 < symbols.len()
                && ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
            {
                merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                i += 2;
            } else {
                merged.push(symbols[i].clone());
                i += 1;
            }
        }
        symbols = merged;
    }
    symbols
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSplitRow {
    pub phrase: String,
    pub word: String,
    pub pieces: Vec<String>,
    pub token_count: usize,
    pub flagged: bool,
}

/// Reports how each content word of each phrase tokenizes; any word that
/// needs more than one token is flagged as a semantic-split risk.
pub fn check_token_split(phrases: &[String], tokenizer: &Tokenizer) -> Result<Vec<TokenSplitRow>> {
    let mut rows = Vec::new();
    for phrase in phrases {
        for word in pre_tokenize(phrase) {
            if !word.chars().any(char::is_alphanumeric) {
                continue;
            }
            let pieces = tokenizer.word_pieces(&word)?;
            rows.push(TokenSplitRow {
                phrase: phrase.clone(),
                token_count: pieces.len(),
                flagged: pieces.len() > 1,
                word,
                pieces,
            });
        }
    }
    Ok(rows)
}

/// Renders the prompt for every category in order.
pub fn category_prompts(
    categories: &[String],
    template: &PromptTemplate,
    vocab: &BehaviourVocabulary,
) -> Vec<String> {
    categories
        .iter()
        .map(|c| template.render(&vocab.apply(c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DEFAULT_CATEGORIES;
    use proptest::prelude::*;

    #[test]
    fn remap_examples() {
        let v = BehaviourVocabulary::default();
        assert_eq!(remap_category("standing-ruminating", &v), "standing chewing");
        assert_eq!(remap_category("feeding", &v), "feeding");
        assert_eq!(remap_category("lying-self-grooming", &v), "lying self grooming");
    }

    #[test]
    fn remap_rejects_non_idempotent_rules() {
        let r = BehaviourVocabulary::new([("a".to_string(), "ba".to_string())]);
        assert!(r.is_err());
    }

    #[test]
    fn render_examples() {
        let t = PromptTemplate::default();
        assert_eq!(render_prompt(&t, "feeding"), "a photo of a feeding .");
        let bare = PromptTemplate::new("{category}").unwrap();
        assert_eq!(render_prompt(&bare, "drinking"), "drinking");
        assert!(PromptTemplate::new("no slot").is_err());
        assert!(PromptTemplate::new("{category} {category}").is_err());
        let cow = PromptTemplate::new(COW_TEMPLATE).unwrap();
        assert_eq!(cow.render("standing chewing"), "a photo of a cow standing chewing .");
    }

    #[test]
    fn desk_tokenize_frames_and_pads() {
        let tok = Tokenizer::desk();
        let seq = tok.tokenize("a photo of a feeding .").unwrap();
        assert_eq!(seq.ids.len(), MAX_TOKENS);
        assert_eq!(seq.eos_position, 7);
        assert_eq!(seq.ids[0], tok.start_id());
        assert_eq!(seq.ids[7], tok.end_id());
        assert!(seq.ids[8..].iter().all(|&i| i == tok.pad_id()));
        assert_eq!(tok.decode(&seq), "a photo of a feeding .");
        assert_eq!(seq, tok.tokenize("a photo of a feeding .").unwrap());
    }

    #[test]
    fn overflow_is_an_error() {
        let tok = Tokenizer::desk();
        let text = vec!["cow"; 80].join(" ");
        assert!(matches!(
            tok.tokenize(&text),
            Err(Error::TokenOverflow { needed: 82, .. })
        ));
        // 75 content tokens is the exact capacity.
        assert!(tok.tokenize(&vec!["cow"; 75].join(" ")).is_ok());
        assert!(tok.tokenize(&vec!["cow"; 76].join(" ")).is_err());
    }

    #[test]
    fn unknown_words_fall_back_to_characters() {
        let tok = Tokenizer::desk();
        let seq = tok.tokenize("ruminating").unwrap();
        assert_eq!(seq.eos_position, 11);
    }

    #[test]
    fn token_split_flags_multi_token_words() {
        let tok = Tokenizer::desk();
        let rows = check_token_split(&["lying ruminating".into(), "chewing".into()], &tok).unwrap();
        let rum = rows.iter().find(|r| r.word == "ruminating").unwrap();
        assert!(rum.flagged);
        let chew = rows.iter().find(|r| r.word == "chewing").unwrap();
        assert_eq!(chew.token_count, 1);
        assert!(!chew.flagged);
        assert!(check_token_split(&[], &tok).unwrap().is_empty());
    }

    #[test]
    fn bpe_merges_follow_rank_order() {
        let mut ranks = HashMap::new();
        for (i, (a, b)) in [("r", "u"), ("m", "i"), ("mi", "n"), ("a", "t"), ("at", "i")]
            .iter()
            .enumerate()
        {
            ranks.insert((a.to_string(), b.to_string()), i);
        }
        ranks.insert(("ati".into(), "n".into()), 5);
        ranks.insert(("atin".into(), "g</w>".into()), 6);
        assert_eq!(bpe_merge("ruminating", &ranks), vec!["ru", "min", "ating</w>"]);
        assert_eq!(bpe_merge("x", &ranks), vec!["x</w>"]);
    }

    #[test]
    fn prompts_for_default_categories() {
        let cats: Vec<String> = DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect();
        let p = category_prompts(&cats, &PromptTemplate::default(), &BehaviourVocabulary::default());
        assert_eq!(p[3], "a photo of a standing chewing .");
        let tok = Tokenizer::desk();
        for prompt in &p {
            tok.tokenize(prompt).unwrap();
        }
    }

    proptest! {
        #[test]
        fn remap_is_idempotent(label in "[a-z]{0,6}(-[a-z]{1,8}){0,3}(ruminating)?") {
            let v = BehaviourVocabulary::default();
            let once = v.apply(&label);
            prop_assert_eq!(v.apply(&once), once);
        }

        #[test]
        fn eos_terminates_content(words in proptest::collection::vec("[a-z]{1,6}", 1..10)) {
            let tok = Tokenizer::desk();
            let seq = tok.tokenize(&words.join(" ")).unwrap();
            prop_assert_eq!(seq.ids.iter().filter(|&&i| i == tok.end_id()).count(), 1);
            prop_assert_eq!(seq.ids[seq.eos_position], tok.end_id());
            prop_assert!(seq.ids[seq.eos_position + 1..].iter().all(|&i| i == tok.pad_id()));
        }
    }
}
