//! Prompt streams and extrinsic rewards.
//!
//! A task maps an abstract prompt index to a concrete prompt and can score
//! any generated output for that index. Indices are an unbounded namespace:
//! training consumes low indices, evaluation uses indices offset by
//! `EVAL_BASE` so the two never collide.

use crate::corpus::RawRecord;
use crate::derive_seed;
use crate::error::Result;
use crate::lm::vocab::{TokenSequence, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Offset added to prompt indices during evaluation.
pub const EVAL_BASE: u64 = 1 << 40;

#[derive(Clone, Debug)]
pub struct TaskPrompt {
    pub id: String,
    pub prompt: TokenSequence,
}

pub trait TaskStream {
    fn prompt(&self, index: u64) -> Result<TaskPrompt>;
    fn extrinsic_reward(&self, index: u64, output_text: &str) -> f64;
}

/// Constraints one styled prompt asks for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleSpec {
    pub style: usize,
    pub tone: usize,
    pub line_count: usize,
    pub min_line_chars: usize,
    pub max_line_chars: usize,
    pub marker: char,
}

/// Tone index i maps to TONE_MARKERS[i - 1]. None of these characters occur
/// in the word bank or the line patterns, so a marker in an output is only
/// there because the generator put it there.
pub const TONE_MARKERS: [char; 10] = ['k', 'j', 'q', 'v', 'x', 'z', 'w', 'y', 'f', 'g'];

const WORD_BANK: [&str; 16] = [
    "sun", "moon", "bird", "tree", "rain", "sea", "star", "stone", "cloud", "dream", "dust",
    "mist", "rose", "thorn", "pine", "reed",
];

const MIN_LINE_CHARS: usize = 6;
const MAX_LINE_CHARS: usize = 28;

/// Styles cycle through line counts 2, 3, 4; all share the length bounds.
pub fn style_spec(style: usize, tone: usize) -> StyleSpec {
    assert!((1..=10).contains(&style) && (1..=10).contains(&tone));
    StyleSpec {
        style,
        tone,
        line_count: 2 + (style - 1) % 3,
        min_line_chars: MIN_LINE_CHARS,
        max_line_chars: MAX_LINE_CHARS,
        marker: TONE_MARKERS[tone - 1],
    }
}

/// Fraction of satisfied constraint groups: exact line count, every line
/// within the length bounds, and the tone marker appearing somewhere.
/// A single trailing newline does not count as an extra line.
pub fn constraint_reward(output: &str, spec: &StyleSpec) -> f64 {
    let mut lines: Vec<&str> = output.split('\n').collect();
    if lines.last() == Some(&"") {
        lines.pop();
    }
    let count_ok = lines.len() == spec.line_count;
    let lengths_ok = !lines.is_empty()
        && lines.iter().all(|l| {
            let n = l.chars().count();
            (spec.min_line_chars..=spec.max_line_chars).contains(&n)
        });
    let marker_ok = output.contains(spec.marker);
    (count_ok as u8 + lengths_ok as u8 + marker_ok as u8) as f64 / 3.0
}

fn bank_word<R: Rng>(rng: &mut R) -> &'static str {
    WORD_BANK[rng.random_range(0..WORD_BANK.len())]
}

fn poem_line<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..5u32) {
        0 => format!("the {} and the {}", bank_word(rng), bank_word(rng)),
        1 => format!("a {} in the {}", bank_word(rng), bank_word(rng)),
        2 => format!("that {} near the {}", bank_word(rng), bank_word(rng)),
        3 => format!("old {} under {}", bank_word(rng), bank_word(rng)),
        _ => format!("the {} sleeps", bank_word(rng)),
    }
}

/// Deterministic poem satisfying `style_spec(style, tone)` exactly.
/// The tone marker rides at the end of the first line.
pub fn generate_poem(style: usize, tone: usize, seed: u64) -> String {
    let spec = style_spec(style, tone);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines: Vec<String> = (0..spec.line_count).map(|_| poem_line(&mut rng)).collect();
    lines[0].push(' ');
    lines[0].push(spec.marker);
    lines.join("\n")
}

/// Which 5x5 block of (style, tone) pairs a stream draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptPool {
    /// Styles and tones 1 through 5.
    Train,
    /// Styles and tones 6 through 10; disjoint from every training prompt.
    Test,
}

pub struct StyledTask {
    vocab: Arc<Vocabulary>,
    pool: PromptPool,
}

impl StyledTask {
    pub fn new(vocab: Arc<Vocabulary>, pool: PromptPool) -> Self {
        StyledTask { vocab, pool }
    }

    pub fn prompt_text(style: usize, tone: usize) -> String {
        format!("write a t{tone} s{style} poem:\n")
    }

    /// Cycles through the pool's 25 pairs, styles varying fastest.
    pub fn pair_for_index(&self, index: u64) -> (usize, usize) {
        let pair = (index % 25) as usize;
        let base = match self.pool {
            PromptPool::Train => 1,
            PromptPool::Test => 6,
        };
        (base + pair % 5, base + pair / 5)
    }

    pub fn spec_for_index(&self, index: u64) -> StyleSpec {
        let (style, tone) = self.pair_for_index(index);
        style_spec(style, tone)
    }
}

impl TaskStream for StyledTask {
    fn prompt(&self, index: u64) -> Result<TaskPrompt> {
        let (style, tone) = self.pair_for_index(index);
        let text = StyledTask::prompt_text(style, tone);
        Ok(TaskPrompt {
            id: format!("s{style}t{tone}i{index}"),
            prompt: TokenSequence::from_text(&self.vocab, &text)?,
        })
    }

    fn extrinsic_reward(&self, index: u64, output_text: &str) -> f64 {
        constraint_reward(output_text, &self.spec_for_index(index))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StyledCorpusSpec {
    pub docs_per_pair: usize,
    pub reverse_per_pair: usize,
    pub seed: u64,
}

impl Default for StyledCorpusSpec {
    fn default() -> Self {
        StyledCorpusSpec {
            docs_per_pair: 4,
            reverse_per_pair: 2,
            seed: 7,
        }
    }
}

/// Training documents for the styled family. Forward documents pair each
/// prompt with a conforming poem; reverse documents continue a poem with a
/// statement of which prompt it answers, which is the direction the
/// originality scorer conditions on.
pub fn synthesize_styled_corpus(spec: &StyledCorpusSpec) -> Vec<RawRecord> {
    let mut out = Vec::new();
    for tone in 1..=5usize {
        for style in 1..=5usize {
            for p in 0..spec.docs_per_pair {
                let seed = derive_seed(spec.seed, &[style as u64, tone as u64, p as u64]);
                let poem = generate_poem(style, tone, seed);
                out.push(RawRecord {
                    id: format!("s{style}t{tone}p{p}"),
                    title: None,
                    text: format!("{}{}", StyledTask::prompt_text(style, tone), poem),
                });
                if p < spec.reverse_per_pair {
                    out.push(RawRecord {
                        id: format!("s{style}t{tone}r{p}"),
                        title: None,
                        text: format!("{poem}\nthis is a t{tone} s{style}\n"),
                    });
                }
            }
        }
    }
    out
}

pub const ANSWER_DELIMITER: &str = "a:";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArithInstance {
    pub a: u32,
    pub b: u32,
    pub op: char,
    pub expected: i64,
}

impl ArithInstance {
    pub fn prompt_text(&self) -> String {
        format!("q: {}{}{}\n", self.a, self.op, self.b)
    }

    pub fn answer_text(&self) -> String {
        format!("a: {}\n", self.expected)
    }
}

/// Extracts the integer after the last answer delimiter, if any.
pub fn parse_answer(output: &str, delimiter: &str) -> Option<i64> {
    let pos = output.rfind(delimiter)?;
    let rest = output[pos + delimiter.len()..].trim_start_matches(' ');
    let (sign, rest) = match rest.strip_prefix('-') {
        Some(r) => (-1i64, r),
        None => (1i64, rest),
    };
    let digits: &str = &rest[..rest.chars().take_while(|c| c.is_ascii_digit()).count()];
    if digits.is_empty() {
        return None;
    }
    digits.parse::<i64>().ok().map(|v| sign * v)
}

pub struct ArithmeticTask {
    vocab: Arc<Vocabulary>,
    operand_max: u32,
    reward_value: f64,
}

const ARITH_STREAM_SALT: u64 = 0x61726974;

impl ArithmeticTask {
    pub fn new(vocab: Arc<Vocabulary>, operand_max: u32, reward_value: f64) -> Self {
        ArithmeticTask {
            vocab,
            operand_max,
            reward_value,
        }
    }

    /// Instance derivation is a pure function of the index, independent of
    /// any training seed, so evaluation sees the same problems every run.
    pub fn instance(&self, index: u64) -> ArithInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ARITH_STREAM_SALT, &[index]));
        let op = if rng.random_range(0..2u32) == 0 { '+' } else { '-' };
        let mut a = rng.random_range(0..=self.operand_max);
        let mut b = rng.random_range(0..=self.operand_max);
        if op == '-' && b > a {
            std::mem::swap(&mut a, &mut b);
        }
        let expected = match op {
            '+' => a as i64 + b as i64,
            _ => a as i64 - b as i64,
        };
        ArithInstance { a, b, op, expected }
    }
}

impl TaskStream for ArithmeticTask {
    fn prompt(&self, index: u64) -> Result<TaskPrompt> {
        let inst = self.instance(index);
        Ok(TaskPrompt {
            id: format!("q{}{}{}i{index}", inst.a, inst.op, inst.b),
            prompt: TokenSequence::from_text(&self.vocab, &inst.prompt_text())?,
        })
    }

    fn extrinsic_reward(&self, index: u64, output_text: &str) -> f64 {
        let inst = self.instance(index);
        match parse_answer(output_text, ANSWER_DELIMITER) {
            Some(v) if v == inst.expected => self.reward_value,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ArithmeticCorpusSpec {
    /// Operands covered by the corpus; kept below the task's operand range
    /// so some evaluation problems are genuinely unseen.
    pub operand_max: u32,
    /// Every nth forward document also gets a reverse companion.
    pub reverse_every: usize,
}

impl Default for ArithmeticCorpusSpec {
    fn default() -> Self {
        ArithmeticCorpusSpec {
            operand_max: 9,
            reverse_every: 3,
        }
    }
}

/// Enumerates worked problems: additions over the full operand square and
/// subtractions with non-negative results. Reverse documents continue an
/// answer with the question it came from.
pub fn synthesize_arithmetic_corpus(spec: &ArithmeticCorpusSpec) -> Vec<RawRecord> {
    let mut out = Vec::new();
    let mut forward = 0usize;
    let push = |out: &mut Vec<RawRecord>,
                    forward: &mut usize,
                    id: String,
                    a: u32,
                    op: char,
                    b: u32,
                    ans: i64| {
        out.push(RawRecord {
            id: id.clone(),
            title: None,
            text: format!("q: {a}{op}{b}\na: {ans}\n"),
        });
        if *forward % spec.reverse_every == 0 {
            out.push(RawRecord {
                id: format!("r{id}"),
                title: None,
                text: format!("a: {ans}\nfrom q: {a}{op}{b}\n"),
            });
        }
        *forward += 1;
    };
    for a in 0..=spec.operand_max {
        for b in 0..=spec.operand_max {
            push(
                &mut out,
                &mut forward,
                format!("add-{a}-{b}"),
                a,
                '+',
                b,
                a as i64 + b as i64,
            );
            if a >= b {
                push(
                    &mut out,
                    &mut forward,
                    format!("sub-{a}-{b}"),
                    a,
                    '-',
                    b,
                    a as i64 - b as i64,
                );
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Arc<Vocabulary> {
        Arc::new(Vocabulary::from_charset("\n abcdefghijklmnopqrstuvwxyz0123456789:+-").unwrap())
    }

    #[test]
    fn styled_prompts_are_deterministic_and_cycle() {
        let task = StyledTask::new(vocab(), PromptPool::Train);
        let p0 = task.prompt(0).unwrap();
        let p0b = task.prompt(0).unwrap();
        assert_eq!(p0.id, p0b.id);
        assert_eq!(p0.prompt.ids, p0b.prompt.ids);
        assert_eq!(p0.prompt.text, "write a t1 s1 poem:\n");
        let p26 = task.prompt(26).unwrap();
        assert_eq!(p26.prompt.text, task.prompt(1).unwrap().prompt.text);
        assert_ne!(p26.id, task.prompt(1).unwrap().id);
    }

    #[test]
    fn train_and_test_pools_share_no_prompts() {
        let train = StyledTask::new(vocab(), PromptPool::Train);
        let test = StyledTask::new(vocab(), PromptPool::Test);
        let collect = |t: &StyledTask| -> std::collections::BTreeSet<String> {
            (0..25).map(|i| t.prompt(i).unwrap().prompt.text).collect()
        };
        let a = collect(&train);
        let b = collect(&test);
        assert_eq!(a.len(), 25);
        assert_eq!(b.len(), 25);
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn generated_poems_satisfy_their_own_spec() {
        for style in 1..=10 {
            for tone in 1..=10 {
                for s in 0..4 {
                    let poem = generate_poem(style, tone, derive_seed(9, &[style as u64, tone as u64, s]));
                    let spec = style_spec(style, tone);
                    assert_eq!(constraint_reward(&poem, &spec), 1.0, "{style} {tone}:\n{poem}");
                }
            }
        }
    }

    #[test]
    fn constraint_reward_gives_partial_credit() {
        let spec = style_spec(1, 1);
        assert_eq!(spec.line_count, 2);
        assert_eq!(spec.marker, 'k');
        // Two lines and a marker, but the first line is too short.
        let out = "hi\nthere is a k";
        assert!((constraint_reward(out, &spec) - 2.0 / 3.0).abs() < 1e-12);
        // Right lengths and marker, wrong line count.
        let out = "the sun sleeps k\nthe sea sleeps\nold rose under mist";
        assert!((constraint_reward(out, &spec) - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(constraint_reward("", &spec), 0.0);
        // A single trailing newline is not an extra line.
        let good = "the sun sleeps k\nthe sea sleeps";
        assert_eq!(constraint_reward(good, &spec), 1.0);
        assert_eq!(constraint_reward(&format!("{good}\n"), &spec), 1.0);
    }

    #[test]
    fn marker_chars_stay_out_of_poem_bodies() {
        for style in 1..=10 {
            for tone in 1..=10 {
                let poem = generate_poem(style, tone, 42);
                let marker = style_spec(style, tone).marker;
                assert_eq!(poem.chars().filter(|&c| c == marker).count(), 1);
            }
        }
    }

    #[test]
    fn styled_corpus_is_deterministic_and_tokenizes() {
        let spec = StyledCorpusSpec::default();
        let a = synthesize_styled_corpus(&spec);
        let b = synthesize_styled_corpus(&spec);
        assert_eq!(a, b);
        assert_eq!(a.len(), 25 * (spec.docs_per_pair + spec.reverse_per_pair));
        let v = vocab();
        for rec in &a {
            v.tokenize(&rec.text).unwrap();
        }
        assert!(a.iter().any(|r| r.text.contains("\nthis is a t")));
    }

    #[test]
    fn arithmetic_instances_are_deterministic_with_nonnegative_results() {
        let task = ArithmeticTask::new(vocab(), 12, 1.0);
        let mut seen_sub = false;
        for i in 0..200u64 {
            let inst = task.instance(i);
            assert_eq!(inst, task.instance(i));
            assert!(inst.a <= 12 && inst.b <= 12);
            if inst.op == '-' {
                seen_sub = true;
                assert!(inst.a >= inst.b);
            }
            assert!(inst.expected >= 0);
        }
        assert!(seen_sub);
        // Evaluation indices live far away from training indices.
        assert!(EVAL_BASE > 1 << 32);
    }

    #[test]
    fn answer_parsing_takes_the_last_delimiter() {
        assert_eq!(parse_answer("a: 11\n", "a:"), Some(11));
        assert_eq!(parse_answer("noise a:7 tail", "a:"), Some(7));
        assert_eq!(parse_answer("a: 3\na: 5\n", "a:"), Some(5));
        assert_eq!(parse_answer("a: -4\n", "a:"), Some(-4));
        assert_eq!(parse_answer("a: x\n", "a:"), None);
        assert_eq!(parse_answer("nothing here", "a:"), None);
        assert_eq!(parse_answer("a:", "a:"), None);
    }

    #[test]
    fn arithmetic_reward_scores_exact_answers_only() {
        let task = ArithmeticTask::new(vocab(), 12, 0.5);
        let inst = task.instance(3);
        let good = inst.answer_text();
        assert_eq!(task.extrinsic_reward(3, &good), 0.5);
        let bad = format!("a: {}\n", inst.expected + 1);
        assert_eq!(task.extrinsic_reward(3, &bad), 0.0);
        assert_eq!(task.extrinsic_reward(3, ""), 0.0);
    }

    #[test]
    fn arithmetic_corpus_enumerates_worked_problems() {
        let spec = ArithmeticCorpusSpec {
            operand_max: 4,
            reverse_every: 3,
        };
        let docs = synthesize_arithmetic_corpus(&spec);
        // 25 additions plus 15 subtractions, with a reverse doc for every
        // third forward doc.
        let forward = 25 + 15;
        assert_eq!(docs.iter().filter(|d| !d.id.starts_with('r')).count(), forward);
        assert_eq!(
            docs.iter().filter(|d| d.id.starts_with('r')).count(),
            forward.div_ceil(3)
        );
        assert!(docs.iter().any(|d| d.text == "q: 3+4\na: 7\n"));
        assert!(docs.iter().any(|d| d.text.starts_with("a: ") && d.text.contains("\nfrom q: ")));
        let v = vocab();
        for rec in &docs {
            v.tokenize(&rec.text).unwrap();
        }
    }

    #[test]
    fn prompt_ids_identify_the_instance() {
        let task = ArithmeticTask::new(vocab(), 12, 1.0);
        let p = task.prompt(5).unwrap();
        let inst = task.instance(5);
        assert!(p.id.contains(&format!("{}{}{}", inst.a, inst.op, inst.b)));
        assert_eq!(p.prompt.text, inst.prompt_text());
    }
}
