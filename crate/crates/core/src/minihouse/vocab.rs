use crate::error::{Error, Result};
use crate::model::{BOP, EOP, PAD};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};

pub const BOS: &str = "<bos>";
pub const ACT: &str = "<act>";
pub const OBS: &str = "<obs>";
pub const END: &str = "<end>";
pub const PLAN: &str = "<plan>";

pub const SPECIALS: [&str; 8] = [PAD, BOP, EOP, BOS, ACT, OBS, END, PLAN];

const GRAMMAR: [&str; 34] = [
    "go", "to", "take", "from", "put", "in", "open", "close", "on", "you", "see", "nothing", "happened", "is", "closed", "pick",
    "up", "task", ":", "a", "two", ",", ".", ";", "has", "room", "think", "seek", "grab", "carry", "place", "unlock", "and",
    "at",
];

pub const MAX_INSTANCE: u32 = 9;

/// Object and receptacle kinds the environment draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldKinds {
    pub objects: Vec<String>,
    pub receptacles: Vec<String>,
    pub openable: Vec<String>,
}

impl Default for WorldKinds {
    fn default() -> Self {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Self {
            objects: s(&[
                "cup", "apple", "book", "pen", "key", "plate", "bowl", "vase", "phone", "towel", "mug", "egg", "bread", "knife",
                "spoon", "candle", "remote", "pillow", "watch", "tomato",
            ]),
            receptacles: s(&[
                "drawer",
                "cabinet",
                "fridge",
                "safe",
                "microwave",
                "box",
                "shelf",
                "table",
                "counter",
                "desk",
                "sofa",
                "bed",
                "sink",
                "dresser",
                "armchair",
                "stand",
            ]),
            openable: s(&["drawer", "cabinet", "fridge", "safe", "microwave", "box"]),
        }
    }
}

impl WorldKinds {
    pub fn is_openable(&self, kind: &str) -> bool {
        self.openable.iter().any(|k| k == kind)
    }
}

/// Word-level tokenizer over the environment vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(kinds: &WorldKinds) -> Result<Self> {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(GRAMMAR.iter().map(|s| s.to_string()));
        words.extend((1..=MAX_INSTANCE).map(|i| i.to_string()));
        for w in kinds.receptacles.iter().chain(&kinds.objects) {
            if w.contains(char::is_whitespace) || w.is_empty() {
                return Err(Error::Config(format!("kind name {w:?} must be a single word")));
            }
            words.push(w.clone());
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    /// Id of a word known to be in the vocabulary.
    pub fn tok(&self, word: &str) -> u32 {
        self.index[word]
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace().map(|w| self.id(w).ok_or_else(|| Error::Input(format!("unknown word {w:?}")))).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    pub fn special_tokens(&self) -> BTreeMap<String, u32> {
        SPECIALS.iter().map(|s| (s.to_string(), self.tok(s))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_distinct_and_first() {
        let v = Vocab::new(&WorldKinds::default()).unwrap();
        let sp = v.special_tokens();
        assert_eq!(sp.len(), SPECIALS.len());
        assert_eq!(v.tok(PAD), 0);
        assert!(v.len() > 80);
    }

    #[test]
    fn duplicate_kind_is_rejected() {
        let mut k = WorldKinds::default();
        k.objects.push("drawer".into());
        assert!(Vocab::new(&k).is_err());
    }

    #[test]
    fn unknown_word_fails_encode() {
        let v = Vocab::new(&WorldKinds::default()).unwrap();
        assert!(v.encode("go to narnia 1").is_err());
        assert_eq!(v.decode(&v.encode("go to shelf 1").unwrap()), "go to shelf 1");
    }
}
