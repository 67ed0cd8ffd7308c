use std::collections::HashMap;

pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Whitespace tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Token ↔ id map. Ids 0 and 1 are always `[UNK]` and `[MASK]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.insert(UNK_TOKEN);
        v.insert(MASK_TOKEN);
        v
    }
}

impl Vocabulary {
    /// Vocabulary over every token in `sequences`, in first-seen order.
    pub fn build<'a, I, S>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut v = Self::default();
        for seq in sequences {
            for t in seq {
                v.insert(t.as_ref());
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its token list (as written by [`Self::to_text`]).
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut v = Self::default();
        for t in tokens {
            v.insert(&t);
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn mask_id(&self) -> usize {
        1
    }

    /// Maps tokens to ids, sending unknown tokens to `[UNK]`.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens
            .iter()
            .map(|t| self.get(t.as_ref()).unwrap_or(0))
            .collect()
    }

    /// One token per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(text.lines().map(str::to_owned))
    }
}
