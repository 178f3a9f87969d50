use crate::error::{Error, Result};

/// The fixed 16-entry toy vocabulary. Index = token id.
pub const TOY_VOCAB: [&str; 16] = [
    "<sos>", "<eos>", "<pad>", "a", "photo", "of", "background", "with", "and", "circle", "square",
    "triangle", "diamond", "ring", "cross", "##s",
];

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;

/// Where one whitespace-separated word landed in the token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    /// Token positions (including the leading `<sos>` at position 0).
    pub positions: Vec<usize>,
}

/// Greedy longest-match word-piece tokenizer over a fixed vocabulary.
/// Continuation pieces carry a `##` prefix.
#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
}

impl Default for WordPieceTokenizer {
    fn default() -> Self {
        Self { vocab: TOY_VOCAB.iter().map(|s| s.to_string()).collect() }
    }
}

impl WordPieceTokenizer {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.vocab.iter().position(|v| v == piece)
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.vocab[id]
    }

    fn split_word(&self, word: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        let mut start = 0;
        while start < word.len() {
            let mut found = None;
            for end in (start + 1..=word.len()).rev() {
                if !word.is_char_boundary(end) {
                    continue;
                }
                let piece = if start == 0 {
                    word[start..end].to_string()
                } else {
                    format!("##{}", &word[start..end])
                };
                if let Some(id) = self.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            let (id, end) = found.ok_or_else(|| Error::UnknownWord(word.to_string()))?;
            ids.push(id);
            start = end;
        }
        Ok(ids)
    }

    /// Token ids with a leading `<sos>`, plus the word-to-position map.
    pub fn encode(&self, text: &str) -> Result<(Vec<usize>, Vec<WordSpan>)> {
        let mut ids = vec![SOS];
        let mut spans = Vec::new();
        for word in text.split_whitespace() {
            let word = word.to_lowercase();
            let pieces = self.split_word(&word)?;
            let positions = (ids.len()..ids.len() + pieces.len()).collect();
            ids.extend(pieces);
            spans.push(WordSpan { word, positions });
        }
        Ok((ids, spans))
    }
}
