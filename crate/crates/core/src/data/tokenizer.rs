use std::collections::HashMap;

/// Token ids below this value are raw bytes.
pub const BYTE_TOKENS: usize = 256;

/// Words that get their own id (256 + index, scaffolding first, then
/// content). Everything else falls back to bytes.
const SCAFFOLD: &[&str] = &[
    "Instruct",
    "Answer",
    "answer",
    "the",
    "following",
    "question",
    "Question",
    "using",
    "context",
    "Context",
    "provided",
    "reason",
    "over",
    "it",
    "Please",
    "generate",
    "only",
    "choice",
    "without",
    "any",
    "explanations",
    "Your",
    "must",
    "start",
    "with",
    "correct",
    "option",
    "letter",
    "or",
    "Output",
    "Options",
    "followed",
    "by",
    "text",
    "of",
    "and",
    "is",
    "a",
    "an",
    "which",
    "what",
    "Which",
    "What",
    "to",
    "in",
    "on",
    "for",
    "from",
    "that",
    "this",
    "these",
    "are",
    "be",
    "not",
    "does",
    "do",
    "most",
    "best",
    "likely",
    "one",
    "two",
    "three",
    "four",
    "five",
    "six",
    "seven",
    "eight",
    "none",
    "all",
    "above",
    "both",
    "first",
    "last",
    "next",
    "because",
    "when",
    "where",
    "why",
    "how",
    "many",
    "more",
    "less",
    "than",
    "same",
    "different",
    "used",
    "use",
    "can",
    "will",
    "has",
    "have",
    "was",
    "were",
    "at",
    "as",
    "if",
    "then",
    "each",
    "every",
    "other",
    "its",
    "their",
];

/// Vocabulary for synthetic questions and options.
pub(crate) const CONTENT: &[&str] = &[
    "apple",
    "river",
    "stone",
    "cloud",
    "engine",
    "signal",
    "copper",
    "violet",
    "harbor",
    "lantern",
    "meadow",
    "pepper",
    "quartz",
    "rocket",
    "saddle",
    "thistle",
    "velvet",
    "walnut",
    "yonder",
    "zephyr",
    "amber",
    "basil",
    "cedar",
    "dune",
    "ember",
    "fjord",
    "garnet",
    "hazel",
    "iris",
    "jasper",
    "kelp",
    "lilac",
    "maple",
    "nickel",
    "onyx",
    "pine",
    "quill",
    "ruby",
    "sage",
    "topaz",
    "umber",
    "vine",
    "willow",
    "yarrow",
    "zinc",
    "antenna",
    "beacon",
    "cable",
    "diode",
    "fiber",
    "gateway",
    "handover",
    "latency",
    "modem",
    "node",
    "packet",
    "router",
    "spectrum",
    "tower",
    "uplink",
    "voltage",
    "wave",
    "carrier",
    "channel",
    "protocol",
    "bandwidth",
    "frequency",
    "network",
    "station",
    "cell",
    "core",
    "edge",
    "radio",
    "layer",
    "frame",
    "slot",
    "beam",
    "heart",
    "lung",
    "liver",
    "kidney",
    "nerve",
    "muscle",
    "bone",
    "blood",
    "enzyme",
    "protein",
    "vitamin",
    "hormone",
    "virus",
    "tissue",
    "organ",
    "plant",
    "seed",
    "leaf",
    "root",
    "flower",
    "water",
    "heat",
    "light",
    "sound",
    "energy",
    "force",
    "mass",
    "speed",
    "gravity",
    "friction",
    "magnet",
    "circuit",
    "battery",
    "metal",
    "glass",
    "wood",
    "salt",
    "sugar",
    "oxygen",
    "carbon",
    "north",
    "south",
    "east",
    "west",
    "red",
    "blue",
    "green",
    "yellow",
    "black",
    "white",
    "small",
    "large",
    "cold",
    "warm",
    "fast",
    "slow",
    "high",
    "low",
    "old",
    "new",
    "early",
    "late",
];

/// Deterministic word-level tokenizer with byte fallback.
///
/// Segmentation: every whitespace character is its own token, maximal runs
/// of ASCII letters become one word token when the word is in the lexicon
/// (bytes otherwise), and every other byte is its own token. In particular
/// the digits `1`..`8` and `\n` are single reserved tokens.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    words: Vec<&'static str>,
    ids: HashMap<&'static str, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let words: Vec<&'static str> = SCAFFOLD.iter().chain(CONTENT).copied().collect();
        let ids = words.iter().enumerate().map(|(i, w)| (*w, (BYTE_TOKENS + i) as u32)).collect();
        Self { words, ids }
    }

    pub fn vocab_size(&self) -> usize {
        BYTE_TOKENS + self.words.len()
    }

    /// Lexicon words, in id order.
    pub fn words(&self) -> &[&'static str] {
        &self.words
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i].is_ascii_alphabetic() {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let word = &text[start..i];
                match self.ids.get(word) {
                    Some(&id) => out.push(id),
                    None => out.extend(word.bytes().map(u32::from)),
                }
            } else {
                out.push(u32::from(bytes[i]));
                i += 1;
            }
        }
        out
    }

    /// Inverse of [`tokenize`](Self::tokenize); `None` on unknown ids or
    /// invalid UTF-8.
    pub fn detokenize(&self, tokens: &[u32]) -> Option<String> {
        let mut bytes = Vec::with_capacity(tokens.len());
        for &t in tokens {
            let t = t as usize;
            if t < BYTE_TOKENS {
                bytes.push(t as u8);
            } else {
                bytes.extend_from_slice(self.words.get(t - BYTE_TOKENS)?.as_bytes());
            }
        }
        String::from_utf8(bytes).ok()
    }

    /// Id of `symbol` if it tokenizes to exactly one token.
    pub fn single_token(&self, symbol: &str) -> Option<u32> {
        match self.tokenize(symbol).as_slice() {
            [id] => Some(*id),
            _ => None,
        }
    }
}
