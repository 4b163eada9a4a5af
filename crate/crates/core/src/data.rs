//! Character vocabulary, the instruction template, synthetic tasks, and
//! JSONL ingestion.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;

/// Character-level vocabulary: four specials, newline, then printable ASCII.
#[derive(Debug, Clone)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<char, TokenId>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::ascii()
    }
}

impl Vocab {
    pub fn ascii() -> Self {
        let mut symbols: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        for c in std::iter::once('\n').chain(' '..='~') {
            index.insert(c, symbols.len());
            symbols.push(c.to_string());
        }
        Self { symbols, index }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn pad(&self) -> TokenId {
        PAD_ID
    }

    pub fn bos(&self) -> TokenId {
        BOS_ID
    }

    pub fn eos(&self) -> TokenId {
        EOS_ID
    }

    pub fn unk(&self) -> TokenId {
        UNK_ID
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id <= UNK_ID
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    /// Encodes text one character per token. Unknown characters fail in
    /// strict mode and map to `<unk>` otherwise.
    pub fn encode(&self, text: &str, strict: bool) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| match self.index.get(&c) {
                Some(&id) => Ok(id),
                None if strict => Err(Error::Encoding(c)),
                None => Ok(self.unk()),
            })
            .collect()
    }

    /// Decodes ids, dropping special tokens.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.symbol(id))
            .collect()
    }

    /// Decodes a generated response: everything before the first `<eos>`.
    pub fn decode_response(&self, ids: &[TokenId]) -> String {
        let end = ids.iter().position(|&t| t == self.eos()).unwrap_or(ids.len());
        self.decode(&ids[..end])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionExample {
    pub instruction: String,
    #[serde(default)]
    pub input: String,
    pub response: String,
}

impl InstructionExample {
    pub fn new(
        instruction: impl Into<String>,
        input: impl Into<String>,
        response: impl Into<String>,
    ) -> Result<Self> {
        let ex = Self {
            instruction: instruction.into(),
            input: input.into(),
            response: response.into(),
        };
        if ex.instruction.is_empty() || ex.response.is_empty() {
            return Err(Error::contract("instruction and response must be nonempty"));
        }
        Ok(ex)
    }
}

/// Renders the instruction-following template. The input section is omitted
/// when the input is empty.
pub fn apply_template(ex: &InstructionExample) -> String {
    let mut s = String::from(
        "Below is an instruction that describes a task.\n\
         Write a response that appropriately completes the request.\n\
         ### Instruction:\n",
    );
    s.push_str(&ex.instruction);
    s.push('\n');
    if !ex.input.is_empty() {
        s.push_str("### Input:\n");
        s.push_str(&ex.input);
        s.push('\n');
    }
    s.push_str("### Response:\n");
    s
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedExample {
    /// `<bos>` followed by the templated request.
    pub request_ids: Vec<TokenId>,
    /// Response characters followed by `<eos>`.
    pub response_ids: Vec<TokenId>,
    /// Over the concatenated sequence; true exactly on response positions.
    pub loss_mask: Vec<bool>,
}

impl EncodedExample {
    pub fn from_parts(request_ids: Vec<TokenId>, response_ids: Vec<TokenId>) -> Self {
        let loss_mask = std::iter::repeat(false)
            .take(request_ids.len())
            .chain(std::iter::repeat(true).take(response_ids.len()))
            .collect();
        Self {
            request_ids,
            response_ids,
            loss_mask,
        }
    }

    pub fn len(&self) -> usize {
        self.request_ids.len() + self.response_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn encode_request(ex: &InstructionExample, vocab: &Vocab, strict: bool) -> Result<Vec<TokenId>> {
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.encode(&apply_template(ex), strict)?);
    Ok(ids)
}

pub fn encode_example(ex: &InstructionExample, vocab: &Vocab, strict: bool) -> Result<EncodedExample> {
    let request = encode_request(ex, vocab, strict)?;
    let mut response = vocab.encode(&ex.response, strict)?;
    response.push(vocab.eos());
    Ok(EncodedExample::from_parts(request, response))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticTask {
    Copy,
    Reverse,
    Sort,
    Upper,
}

impl SyntheticTask {
    pub const ALL: [SyntheticTask; 4] = [Self::Copy, Self::Reverse, Self::Sort, Self::Upper];

    pub fn instruction(self) -> &'static str {
        match self {
            Self::Copy => "Copy the string.",
            Self::Reverse => "Reverse the string.",
            Self::Sort => "Sort the letters of the string.",
            Self::Upper => "Convert the string to uppercase.",
        }
    }

    /// Applies the task to the whitespace-separated words of `input`; the
    /// result is joined with single spaces.
    pub fn apply(self, input: &str) -> String {
        let mut words: Vec<String> = input.split_whitespace().map(str::to_string).collect();
        match self {
            Self::Copy => {}
            Self::Reverse => words.reverse(),
            Self::Sort => words.sort_unstable(),
            Self::Upper => words.iter_mut().for_each(|w| *w = w.to_uppercase()),
        }
        words.join(" ")
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Sort => "sort",
            Self::Upper => "upper",
        })
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "sort" => Ok(Self::Sort),
            "upper" => Ok(Self::Upper),
            other => Err(Error::config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

pub const MIN_SYNTHETIC_LEN: usize = 3;

/// Deterministic task examples whose inputs are `3..=max_len` random
/// lowercase letters separated by spaces.
pub fn gen_synthetic(
    task: SyntheticTask,
    count: usize,
    seed: u64,
    max_len: usize,
) -> Result<Vec<InstructionExample>> {
    if count == 0 {
        return Err(Error::config("synthetic example count must be ≥ 1"));
    }
    if max_len < MIN_SYNTHETIC_LEN {
        return Err(Error::config(format!(
            "max_len must be ≥ {MIN_SYNTHETIC_LEN}, got {max_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let len = rng.gen_range(MIN_SYNTHETIC_LEN..=max_len);
            let input = (0..len)
                .map(|_| (rng.gen_range(b'a'..=b'z') as char).to_string())
                .collect::<Vec<_>>()
                .join(" ");
            InstructionExample {
                instruction: task.instruction().to_string(),
                response: task.apply(&input),
                input,
            }
        })
        .collect())
}

/// Seeded shuffle, then the first `n_val` items become validation.
pub fn split<T: Clone>(items: &[T], n_val: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = n_val.min(shuffled.len());
    let train = shuffled.split_off(n_val);
    (train, shuffled)
}

#[derive(Debug, Default)]
pub struct JsonlLoad {
    pub examples: Vec<InstructionExample>,
    /// (1-based line, reason) for every skipped line.
    pub skipped: Vec<(usize, String)>,
}

fn parse_record(line: &str) -> std::result::Result<InstructionExample, String> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;
    let field = |names: &[&str]| -> Option<String> {
        names
            .iter()
            .find_map(|n| obj.get(*n).and_then(|v| v.as_str()).map(str::to_string))
    };
    let instruction = field(&["instruction"]).ok_or("missing field \"instruction\"")?;
    let input = field(&["input", "context"]).unwrap_or_default();
    let response = field(&["response", "output"]).ok_or("missing field \"response\"")?;
    InstructionExample::new(instruction, input, response).map_err(|e| e.to_string())
}

/// Parses Dolly-style JSONL. `input` may be absent (or named `context`);
/// `output` is accepted for `response`. Blank lines are ignored.
pub fn parse_jsonl(text: &str, strict: bool) -> Result<JsonlLoad> {
    let mut load = JsonlLoad::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line) {
            Ok(ex) => load.examples.push(ex),
            Err(message) if strict => return Err(Error::Parse { line: i + 1, message }),
            Err(message) => load.skipped.push((i + 1, message)),
        }
    }
    Ok(load)
}

pub fn load_jsonl(path: impl AsRef<Path>, strict: bool) -> Result<JsonlLoad> {
    parse_jsonl(&std::fs::read_to_string(path)?, strict)
}

pub fn emit_jsonl(examples: &[InstructionExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(ex).expect("plain strings serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_dense_and_round_trips() {
        let v = Vocab::ascii();
        assert_eq!(v.len(), 100);
        let text = "Hello, World!\n### Response: 42 ~";
        assert_eq!(v.decode(&v.encode(text, true).unwrap()), text);
    }

    #[test]
    fn strict_encoding_rejects_unknown() {
        let v = Vocab::ascii();
        assert!(matches!(v.encode("café", true), Err(Error::Encoding('é'))));
        let ids = v.encode("café", false).unwrap();
        assert_eq!(ids[3], v.unk());
        assert_eq!(v.decode(&ids), "caf");
    }

    #[test]
    fn template_sections_in_order() {
        let ex = InstructionExample::new("Reverse the string.", "abc", "cba").unwrap();
        let t = apply_template(&ex);
        let i = t.find("### Instruction:").unwrap();
        let j = t.find("### Input:").unwrap();
        let k = t.find("### Response:").unwrap();
        assert!(i < j && j < k);
        assert!(t.ends_with("### Response:\n"));
        assert_eq!(t, apply_template(&ex));
    }

    #[test]
    fn empty_input_omits_section() {
        let ex = InstructionExample::new("Say hi.", "", "hi").unwrap();
        assert!(!apply_template(&ex).contains("### Input:"));
    }

    #[test]
    fn encoded_lengths_follow_character_counts() {
        let v = Vocab::ascii();
        let ex = InstructionExample::new("Copy the string.", "xyz", "xyz").unwrap();
        let enc = encode_example(&ex, &v, true).unwrap();
        assert_eq!(enc.request_ids.len(), 1 + apply_template(&ex).chars().count());
        assert_eq!(enc.response_ids.len(), 3 + 1);
        assert_eq!(*enc.response_ids.last().unwrap(), v.eos());
        assert_eq!(enc.request_ids[0], v.bos());
        assert_eq!(enc.loss_mask.iter().filter(|&&m| m).count(), 4);
        assert!(enc.loss_mask[enc.request_ids.len()..].iter().all(|&m| m));
    }

    #[test]
    fn synthetic_tasks() {
        assert_eq!(SyntheticTask::Reverse.apply("a b c"), "c b a");
        assert_eq!(SyntheticTask::Sort.apply("c a b"), "a b c");
        assert_eq!(SyntheticTask::Upper.apply("a b"), "A B");
        assert_eq!(SyntheticTask::Copy.apply(" x  y "), "x y");
        let a = gen_synthetic(SyntheticTask::Sort, 20, 7, 8).unwrap();
        assert_eq!(a, gen_synthetic(SyntheticTask::Sort, 20, 7, 8).unwrap());
        for ex in &a {
            let words: Vec<&str> = ex.input.split(' ').collect();
            assert!((3..=8).contains(&words.len()));
            assert!(words.iter().all(|w| w.len() == 1 && w.chars().all(|c| c.is_ascii_lowercase())));
            assert_eq!(ex.response, SyntheticTask::Sort.apply(&ex.input));
        }
        assert!("shuffle".parse::<SyntheticTask>().is_err());
        assert!(gen_synthetic(SyntheticTask::Copy, 0, 1, 8).is_err());
    }

    #[test]
    fn split_is_deterministic() {
        let items: Vec<u32> = (0..50).collect();
        let (t1, v1) = split(&items, 10, 3);
        let (t2, v2) = split(&items, 10, 3);
        assert_eq!((t1.clone(), v1.clone()), (t2, v2));
        assert_eq!(t1.len() + v1.len(), 50);
        assert_ne!(split(&items, 10, 4).1, v1);
    }

    #[test]
    fn jsonl_strictness() {
        let good = r#"{"instruction":"Say hi.","response":"hi"}"#;
        let load = parse_jsonl(good, true).unwrap();
        assert_eq!(load.examples.len(), 1);
        assert_eq!(load.examples[0].input, "");

        let bad = r#"{"instruction":"Say hi."}"#;
        match parse_jsonl(bad, true) {
            Err(Error::Parse { line: 1, message }) => assert!(message.contains("response")),
            other => panic!("expected parse error, got {other:?}"),
        }
        let lax = parse_jsonl(&format!("{bad}\n{good}\n"), false).unwrap();
        assert_eq!(lax.examples.len(), 1);
        assert_eq!(lax.skipped[0].0, 1);
    }

    #[test]
    fn jsonl_aliases() {
        let line = r#"{"instruction":"Sum.","context":"1 2","output":"3"}"#;
        let ex = &parse_jsonl(line, true).unwrap().examples[0];
        assert_eq!((ex.input.as_str(), ex.response.as_str()), ("1 2", "3"));
    }
}
