//! Closed word-level vocabulary: control tokens, block-framing specials,
//! 500 word slots (grammar + location bins + reserved), and 259 generation
//! token ids. Ids are dense and identical across runs.

use std::collections::BTreeMap;

use crate::synthdata::caption::grammar_words;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG_BEGIN: usize = 3;
pub const IMG_END: usize = 4;
pub const PC_BEGIN: usize = 5;
pub const PC_END: usize = 6;
pub const MOD_IMG: usize = 7;
pub const MOD_PC: usize = 8;
pub const WORD_BASE: usize = 9;
pub const WORD_COUNT: usize = 500;
pub const GEN_BASE: usize = WORD_BASE + WORD_COUNT;
pub const GEN_COUNT: usize = 259;
pub const VOCAB_SIZE: usize = GEN_BASE + GEN_COUNT;
/// number of coordinate quantization bins exposed as <locN> words
pub const LOC_BINS: usize = 32;

#[derive(Clone, Debug)]
pub struct Vocabulary {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Vocabulary {
        Vocabulary::build()
    }
}

impl Vocabulary {
    pub fn build() -> Vocabulary {
        let mut names = vec![
            "<unk>".to_string(),
            "<bos>".to_string(),
            "<eos>".to_string(),
            "<img>".to_string(),
            "</img>".to_string(),
            "<pc>".to_string(),
            "</pc>".to_string(),
            "<mod:img>".to_string(),
            "<mod:pc>".to_string(),
        ];
        let mut words: Vec<String> = Vec::new();
        for w in grammar_words() {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_string());
            }
        }
        for i in 0..LOC_BINS {
            words.push(format!("<loc{i}>"));
        }
        assert!(words.len() <= WORD_COUNT, "grammar outgrew the word budget");
        let used = words.len();
        for i in used..WORD_COUNT {
            words.push(format!("<reserved{i}>"));
        }
        names.extend(words);
        for i in 0..GEN_COUNT {
            names.push(format!("<gen{i}>"));
        }
        debug_assert_eq!(names.len(), VOCAB_SIZE);
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Vocabulary { names, index }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn loc_id(&self, bin: usize) -> usize {
        assert!(bin < LOC_BINS);
        self.id(&format!("<loc{bin}>"))
    }

    /// Unknown words map to UNK; known text round-trips exactly.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.names.get(i).map(|s| s.as_str()).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
