//! Synthetic multi-operand addition with step-by-step partial sums.
//!
//! A problem `2+5+1` becomes the prompt `<Q>2+5+1=` and the gold trace
//! `<R>7,8<ANS>8<EOS>`: every running sum in order, then the answer. Digits are
//! one token each, most significant first.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::SamplerSpec;

pub type TokenId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Symbol {
    Digit(u8),
    Plus,
    Equals,
    Sep,
    Question,
    Reasoning,
    Answer,
    Eos,
    Pad,
}

/// Fixed vocabulary: ids 0–9 are the digits, followed by the operators and
/// role markers.
pub struct Vocab;

impl Vocab {
    pub const PLUS: TokenId = 10;
    pub const EQUALS: TokenId = 11;
    pub const SEP: TokenId = 12;
    pub const Q: TokenId = 13;
    pub const R: TokenId = 14;
    pub const ANS: TokenId = 15;
    pub const EOS: TokenId = 16;
    pub const PAD: TokenId = 17;
    pub const SIZE: usize = 18;

    pub fn id(symbol: Symbol) -> TokenId {
        match symbol {
            Symbol::Digit(d) => {
                assert!(d < 10, "digit out of range");
                d as TokenId
            }
            Symbol::Plus => Self::PLUS,
            Symbol::Equals => Self::EQUALS,
            Symbol::Sep => Self::SEP,
            Symbol::Question => Self::Q,
            Symbol::Reasoning => Self::R,
            Symbol::Answer => Self::ANS,
            Symbol::Eos => Self::EOS,
            Symbol::Pad => Self::PAD,
        }
    }

    pub fn symbol(id: TokenId) -> Option<Symbol> {
        Some(match id {
            0..=9 => Symbol::Digit(id as u8),
            Self::PLUS => Symbol::Plus,
            Self::EQUALS => Symbol::Equals,
            Self::SEP => Symbol::Sep,
            Self::Q => Symbol::Question,
            Self::R => Symbol::Reasoning,
            Self::ANS => Symbol::Answer,
            Self::EOS => Symbol::Eos,
            Self::PAD => Symbol::Pad,
            _ => return None,
        })
    }

    pub fn text(symbol: Symbol) -> String {
        match symbol {
            Symbol::Digit(d) => char::from(b'0' + d).to_string(),
            Symbol::Plus => "+".into(),
            Symbol::Equals => "=".into(),
            Symbol::Sep => ",".into(),
            Symbol::Question => "<Q>".into(),
            Symbol::Reasoning => "<R>".into(),
            Symbol::Answer => "<ANS>".into(),
            Symbol::Eos => "<EOS>".into(),
            Symbol::Pad => "<PAD>".into(),
        }
    }
}

pub fn tokenize(text: &str) -> Result<Vec<TokenId>> {
    const MARKERS: [(&str, TokenId); 5] = [
        ("<Q>", Vocab::Q),
        ("<R>", Vocab::R),
        ("<ANS>", Vocab::ANS),
        ("<EOS>", Vocab::EOS),
        ("<PAD>", Vocab::PAD),
    ];
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while let Some(c) = rest.chars().next() {
        match c {
            '0'..='9' => out.push((c as u8 - b'0') as TokenId),
            '+' => out.push(Vocab::PLUS),
            '=' => out.push(Vocab::EQUALS),
            ',' => out.push(Vocab::SEP),
            '<' => {
                for (m, id) in MARKERS {
                    if let Some(r) = rest.strip_prefix(m) {
                        out.push(id);
                        rest = r;
                        continue 'outer;
                    }
                }
                return Err(Error::invalid(format!("unknown marker at `{rest}`")));
            }
            other => return Err(Error::invalid(format!("unknown symbol `{other}`"))),
        }
        rest = &rest[c.len_utf8()..];
    }
    Ok(out)
}

pub fn detokenize(tokens: &[TokenId]) -> Result<String> {
    tokens
        .iter()
        .map(|&t| {
            Vocab::symbol(t)
                .map(Vocab::text)
                .ok_or_else(|| Error::invalid(format!("token id {t} outside vocabulary")))
        })
        .collect()
}

fn push_number(out: &mut Vec<TokenId>, n: u64) {
    out.extend(n.to_string().bytes().map(|b| (b - b'0') as TokenId));
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<TokenId>,
    pub gold_trace_tokens: Vec<TokenId>,
    pub gold_answer: u64,
}

impl TaskInstance {
    pub fn from_operands(operands: &[u64]) -> Result<Self> {
        if operands.len() < 2 {
            return Err(Error::invalid("a problem needs at least two operands"));
        }
        let mut prompt = vec![Vocab::Q];
        for (i, &x) in operands.iter().enumerate() {
            if i > 0 {
                prompt.push(Vocab::PLUS);
            }
            push_number(&mut prompt, x);
        }
        prompt.push(Vocab::EQUALS);

        let mut trace = vec![Vocab::R];
        let mut acc = operands[0];
        for (i, &x) in operands[1..].iter().enumerate() {
            acc += x;
            if i > 0 {
                trace.push(Vocab::SEP);
            }
            push_number(&mut trace, acc);
        }
        trace.push(Vocab::ANS);
        push_number(&mut trace, acc);
        trace.push(Vocab::EOS);
        Ok(Self {
            prompt_tokens: prompt,
            gold_trace_tokens: trace,
            gold_answer: acc,
        })
    }

    /// Prompt followed by the gold trace.
    pub fn full_tokens(&self) -> Vec<TokenId> {
        let mut t = self.prompt_tokens.clone();
        t.extend_from_slice(&self.gold_trace_tokens);
        t
    }
}

/// Reads the operands back out of a prompt `<Q>a+b+…=`.
pub fn parse_prompt(prompt: &[TokenId]) -> Option<Vec<u64>> {
    let body = prompt.strip_prefix(&[Vocab::Q])?.strip_suffix(&[Vocab::EQUALS])?;
    body.split(|&t| t == Vocab::PLUS)
        .map(|digits| {
            if digits.is_empty() || digits.len() > 18 || digits.iter().any(|&d| d > 9) {
                return None;
            }
            Some(digits.iter().fold(0u64, |acc, &d| acc * 10 + d as u64))
        })
        .collect()
}

/// Integer after the last `<ANS>` marker, up to the next non-digit token.
pub fn extract_answer(trace: &[TokenId]) -> Option<u64> {
    let pos = trace.iter().rposition(|&t| t == Vocab::ANS)?;
    let digits: Vec<u64> = trace[pos + 1..]
        .iter()
        .take_while(|&&t| t <= 9)
        .map(|&t| t as u64)
        .collect();
    if digits.is_empty() || digits.len() > 18 {
        return None;
    }
    Some(digits.iter().fold(0, |acc, d| acc * 10 + d))
}

fn numbers_with_digits(d: usize) -> u64 {
    if d == 1 {
        10
    } else {
        9 * 10u64.pow(d as u32 - 1)
    }
}

/// Number of distinct prompts expressible with the given ranges (saturating).
pub fn problem_space_size(operand_counts: (usize, usize), operand_digits: (usize, usize)) -> u128 {
    let per_operand: u128 = (operand_digits.0..=operand_digits.1)
        .map(|d| numbers_with_digits(d) as u128)
        .sum();
    (operand_counts.0..=operand_counts.1)
        .map(|n| per_operand.saturating_pow(n as u32))
        .fold(0u128, |a, b| a.saturating_add(b))
}

pub fn generate_dataset(
    seed: u64,
    count: usize,
    operand_counts: (usize, usize),
    operand_digits: (usize, usize),
) -> Result<Vec<TaskInstance>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be positive"));
    }
    let (cmin, cmax) = operand_counts;
    let (dmin, dmax) = operand_digits;
    if cmin < 2 || cmin > cmax {
        return Err(Error::invalid(format!("bad operand count range [{cmin}, {cmax}]")));
    }
    if dmin < 1 || dmin > dmax || dmax > 9 {
        return Err(Error::invalid(format!("bad operand digit range [{dmin}, {dmax}]")));
    }
    let space = problem_space_size(operand_counts, operand_digits);
    if count as u128 > space {
        return Err(Error::invalid(format!(
            "{count} unique problems requested but only {space} exist"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.gen_range(cmin..=cmax);
        let operands: Vec<u64> = (0..n)
            .map(|_| {
                let d = rng.gen_range(dmin..=dmax);
                if d == 1 {
                    rng.gen_range(0..10)
                } else {
                    let lo = 10u64.pow(d as u32 - 1);
                    rng.gen_range(lo..lo * 10)
                }
            })
            .collect();
        let inst = TaskInstance::from_operands(&operands)?;
        if seen.insert(inst.prompt_tokens.clone()) {
            out.push(inst);
        }
    }
    Ok(out)
}

/// Splits a pool in order: the first `⌊fraction·n⌋` items train, the rest hold out.
pub fn split_dataset(pool: &[TaskInstance], train_fraction: f64) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    if pool.len() < 2 {
        return Err(Error::invalid("need at least two items to split"));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!("train fraction {train_fraction} not in (0, 1)")));
    }
    let cut = (train_fraction * pool.len() as f64).floor() as usize;
    Ok((pool[..cut].to_vec(), pool[cut..].to_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Holdout => "holdout",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "holdout" => Ok(Split::Holdout),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub operand_counts: (usize, usize),
    pub operand_digits: (usize, usize),
    /// Gold-trace corpus the teacher is trained on.
    pub teacher_corpus_size: usize,
    /// Pool split into train and holdout.
    pub pool_size: usize,
    pub test_size: usize,
    pub train_fraction: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            operand_counts: (3, 4),
            operand_digits: (1, 1),
            teacher_corpus_size: 4000,
            pool_size: 1400,
            test_size: 200,
            train_fraction: 0.7,
        }
    }
}

/// All problem sets of an experiment, pairwise disjoint by prompt.
#[derive(Clone, Debug)]
pub struct DatasetSplits {
    pub teacher_corpus: Vec<TaskInstance>,
    pub train: Vec<TaskInstance>,
    pub holdout: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
}

impl DatasetSplits {
    /// Draws one unique set of problems and partitions it, so the test set
    /// never shares a prompt with any other set.
    pub fn build(cfg: &TaskConfig) -> Result<Self> {
        let total = cfg.teacher_corpus_size + cfg.pool_size + cfg.test_size;
        let mut all = generate_dataset(cfg.seed, total, cfg.operand_counts, cfg.operand_digits)?;
        let test = all.split_off(cfg.teacher_corpus_size + cfg.pool_size);
        let pool = all.split_off(cfg.teacher_corpus_size);
        let (train, holdout) = split_dataset(&pool, cfg.train_fraction)?;
        Ok(Self {
            teacher_corpus: all,
            train,
            holdout,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &[TaskInstance] {
        match split {
            Split::Train => &self.train,
            Split::Holdout => &self.holdout,
            Split::Test => &self.test,
        }
    }
}

/// `k` full exemplars (prompt and gold trace) followed by the instance prompt.
pub fn build_icl_prompt(
    instance: &TaskInstance,
    exemplars: &[TaskInstance],
    k: usize,
    max_seq_len: usize,
) -> Result<Vec<TokenId>> {
    if k > exemplars.len() {
        return Err(Error::invalid(format!("{k} exemplars requested, {} available", exemplars.len())));
    }
    let mut out = Vec::new();
    for ex in &exemplars[..k] {
        if ex.prompt_tokens == instance.prompt_tokens {
            return Err(Error::invalid("exemplar duplicates the instance"));
        }
        out.extend_from_slice(&ex.prompt_tokens);
        out.extend_from_slice(&ex.gold_trace_tokens);
    }
    out.extend_from_slice(&instance.prompt_tokens);
    if out.len() > max_seq_len {
        return Err(Error::invalid(format!(
            "in-context prompt has {} tokens, limit {max_seq_len}",
            out.len()
        )));
    }
    Ok(out)
}

/// One line of a trace JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceFileRecord {
    pub prompt_tokens: Vec<TokenId>,
    pub trace_tokens: Vec<TokenId>,
    pub gold_answer: u64,
    pub split: Split,
    pub source_artifact: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_answer: Option<u64>,
    #[serde(default)]
    pub correct: bool,
}

pub fn write_jsonl(path: &Path, records: &[TraceFileRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TraceFileRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<TokenId> {
        tokenize(s).unwrap()
    }

    #[test]
    fn worked_example() {
        let inst = TaskInstance::from_operands(&[2, 5, 1]).unwrap();
        assert_eq!(detokenize(&inst.prompt_tokens).unwrap(), "<Q>2+5+1=");
        assert_eq!(detokenize(&inst.gold_trace_tokens).unwrap(), "<R>7,8<ANS>8<EOS>");
        assert_eq!(inst.gold_answer, 8);
        assert_eq!(extract_answer(&inst.gold_trace_tokens), Some(8));
    }

    #[test]
    fn multi_digit_numbers_are_big_endian() {
        let inst = TaskInstance::from_operands(&[47, 58]).unwrap();
        assert_eq!(detokenize(&inst.gold_trace_tokens).unwrap(), "<R>105<ANS>105<EOS>");
        assert_eq!(parse_prompt(&inst.prompt_tokens), Some(vec![47, 58]));
    }

    #[test]
    fn extract_answer_cases() {
        assert_eq!(extract_answer(&t("<R>1,4<ANS>42<EOS>")), Some(42));
        assert_eq!(extract_answer(&t("<R>1,4,5<EOS>")), None);
        assert_eq!(extract_answer(&t("<R>1<ANS>3<ANS>17<EOS>")), Some(17));
        assert_eq!(extract_answer(&t("<R>1<ANS>3<ANS><EOS>")), None);
        assert_eq!(extract_answer(&t("<ANS>12+3")), Some(12));
        assert_eq!(extract_answer(&t("<ANS>12")), Some(12));
        assert_eq!(extract_answer(&[]), None);
    }

    #[test]
    fn tokenize_rejects_garbage() {
        assert!(tokenize("<Q>1?2").is_err());
        assert!(tokenize("<X>").is_err());
        assert!(detokenize(&[99]).is_err());
    }

    #[test]
    fn generation_is_deterministic_and_unique() {
        let a = generate_dataset(3, 500, (2, 3), (1, 2)).unwrap();
        let b = generate_dataset(3, 500, (2, 3), (1, 2)).unwrap();
        assert_eq!(a, b);
        let prompts: HashSet<_> = a.iter().map(|i| i.prompt_tokens.clone()).collect();
        assert_eq!(prompts.len(), 500);
        assert_ne!(a, generate_dataset(4, 500, (2, 3), (1, 2)).unwrap());
    }

    #[test]
    fn generation_rejects_impossible_requests() {
        // Two single-digit operands: 100 distinct prompts.
        assert_eq!(problem_space_size((2, 2), (1, 1)), 100);
        assert!(generate_dataset(1, 100, (2, 2), (1, 1)).is_ok());
        assert!(matches!(generate_dataset(1, 101, (2, 2), (1, 1)), Err(Error::InvalidArgument(_))));
        assert!(generate_dataset(1, 0, (2, 2), (1, 1)).is_err());
        assert!(generate_dataset(1, 5, (1, 2), (1, 1)).is_err());
        assert!(generate_dataset(1, 5, (2, 2), (0, 1)).is_err());
    }

    #[test]
    fn split_examples() {
        let pool = generate_dataset(1, 10, (2, 2), (1, 1)).unwrap();
        let (train, holdout) = split_dataset(&pool, 0.7).unwrap();
        assert_eq!((train.len(), holdout.len()), (7, 3));
        assert_eq!(&pool[..7], &train[..]);
        let (a, b) = split_dataset(&pool[..2], 0.5).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert!(split_dataset(&pool[..1], 0.5).is_err());
        assert!(split_dataset(&pool, 1.0).is_err());
        assert!(split_dataset(&pool, 0.0).is_err());
    }

    #[test]
    fn icl_prompt_structure() {
        let data = generate_dataset(9, 5, (2, 3), (1, 2)).unwrap();
        let (inst, ex) = (&data[0], &data[1..]);
        assert_eq!(build_icl_prompt(inst, ex, 0, 64).unwrap(), inst.prompt_tokens);

        let p = build_icl_prompt(inst, ex, 2, 128).unwrap();
        assert_eq!(p[..ex[0].prompt_tokens.len()], ex[0].prompt_tokens[..]);
        let last_q = p.iter().rposition(|&x| x == Vocab::Q).unwrap();
        assert_eq!(p[..last_q].iter().filter(|&&x| x == Vocab::EOS).count(), 2);

        let p3 = build_icl_prompt(inst, ex, 3, 128).unwrap();
        let expected: usize = ex[..3].iter().map(|e| e.full_tokens().len()).sum::<usize>() + inst.prompt_tokens.len();
        assert_eq!(p3.len(), expected);

        assert!(build_icl_prompt(inst, ex, 3, 10).is_err());
        assert!(build_icl_prompt(inst, ex, 5, 500).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        let cfg = TaskConfig {
            teacher_corpus_size: 300,
            pool_size: 1000,
            test_size: 100,
            ..TaskConfig::default()
        };
        let s = DatasetSplits::build(&cfg).unwrap();
        assert_eq!((s.train.len(), s.holdout.len(), s.test.len()), (700, 300, 100));
        let prompts = |v: &[TaskInstance]| v.iter().map(|i| i.prompt_tokens.clone()).collect::<HashSet<_>>();
        let (tr, ho, te, tc) = (prompts(&s.train), prompts(&s.holdout), prompts(&s.test), prompts(&s.teacher_corpus));
        assert!(tr.is_disjoint(&ho) && tr.is_disjoint(&te) && ho.is_disjoint(&te));
        assert!(tc.is_disjoint(&te) && tc.is_disjoint(&tr) && tc.is_disjoint(&ho));
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let inst = TaskInstance::from_operands(&[3, 4]).unwrap();
        let rec = TraceFileRecord {
            prompt_tokens: inst.prompt_tokens.clone(),
            trace_tokens: inst.gold_trace_tokens.clone(),
            gold_answer: 7,
            split: Split::Test,
            source_artifact: "teacher_lambda=0.0_test".into(),
            sampler: None,
            extracted_answer: Some(7),
            correct: true,
        };
        write_jsonl(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), vec![rec.clone(), rec]);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"prompt_tokens\":[13,3,10,4,11],\"trace_tokens\""));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gold_traces_round_trip_and_parse(ops in proptest::collection::vec(0u64..1000, 2..6)) {
                let inst = TaskInstance::from_operands(&ops).unwrap();
                let text = detokenize(&inst.full_tokens()).unwrap();
                prop_assert_eq!(detokenize(&tokenize(&text).unwrap()).unwrap(), text);
                prop_assert_eq!(extract_answer(&inst.gold_trace_tokens), Some(ops.iter().sum()));
                prop_assert_eq!(parse_prompt(&inst.prompt_tokens), Some(ops));
            }
        }
    }
}
