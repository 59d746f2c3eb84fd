use std::collections::HashMap;

/// String-to-index map with index 0 reserved for unknown/padding.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new() -> Self {
        Vocab {
            index: HashMap::new(),
            tokens: vec![String::new()],
        }
    }

    /// Index of `token`, assigning the next free one on first sight.
    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len() as u32;
        self.index.insert(token.to_owned(), i);
        self.tokens.push(token.to_owned());
        i
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: u32) -> Option<&str> {
        self.tokens.get(i as usize).map(String::as_str)
    }

    /// Vocabulary size including the reserved index.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_from_one() {
        let mut v = Vocab::new();
        assert_eq!(v.insert("a"), 1);
        assert_eq!(v.insert("b"), 2);
        assert_eq!(v.insert("a"), 1);
        assert_eq!(v.len(), 3);
        assert_eq!(v.token(2), Some("b"));
        assert_eq!(v.get("c"), None);
    }
}
