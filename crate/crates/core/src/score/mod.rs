//! Composite score of a generation under a frozen reference model.
//!
//! Two directions, both length-normalized and measured against the best
//! token the reference could have predicted at each step:
//!
//! - value: how predictable the scored prompt segment x is after reading
//!   the generation wrapped in a reverse template. Mean of
//!   (logp(x_i) - row max), never positive.
//! - originality: how surprising the generation y is given the prompt.
//!   Negated mean of (logp(y_j) - row max), never negative.
//!
//! total = lambda_v * value + lambda_o * originality. Setting
//! `normalize_by_row_max = false` drops the row-max reference and uses the
//! plain per-token log-probabilities; it is never the default.
//!
//! Per-token log-probs are floored at -60 nats before differencing so a
//! single unrepresentable token cannot dominate a score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::Model;
use crate::lm::vocab::{TokenSequence, Vocabulary};
use crate::tensor::Elem;

pub const LOGP_FLOOR: f64 = -60.0;

/// Template with exactly one `{output}` slot, rendered around the
/// generation to form the reverse-direction context.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReverseTemplate {
    prefix: String,
    suffix: String,
}

impl ReverseTemplate {
    pub fn parse(template: &str) -> Result<Self> {
        let slot = "{output}";
        let first = template.find(slot).ok_or_else(|| {
            Error::Config("reverse template must contain an {output} slot".into())
        })?;
        let rest = &template[first + slot.len()..];
        if rest.contains(slot) {
            return Err(Error::Config(
                "reverse template must contain exactly one {output} slot".into(),
            ));
        }
        Ok(ReverseTemplate {
            prefix: template[..first].to_string(),
            suffix: rest.to_string(),
        })
    }

    pub fn render(&self, output: &str) -> String {
        format!("{}{}{}", self.prefix, output, self.suffix)
    }
}

/// Picks the prompt segment scored by the value direction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueTargetSelector {
    /// Score the whole prompt.
    Full,
    /// Score the substring between the first `start` marker (exclusive)
    /// and the first following `end` marker (exclusive). A missing bound
    /// extends to the prompt edge.
    Between {
        start: Option<String>,
        end: Option<String>,
    },
}

impl ValueTargetSelector {
    pub fn extract<'a>(&self, prompt: &'a str) -> Result<&'a str> {
        match self {
            ValueTargetSelector::Full => Ok(prompt),
            ValueTargetSelector::Between { start, end } => {
                let begin = match start {
                    Some(m) => {
                        let at = prompt.find(m.as_str()).ok_or_else(|| {
                            Error::Config(format!(
                                "value target start marker {m:?} not found in prompt {prompt:?}"
                            ))
                        })?;
                        at + m.len()
                    }
                    None => 0,
                };
                let stop = match end {
                    Some(m) => {
                        let at = prompt[begin..].find(m.as_str()).ok_or_else(|| {
                            Error::Config(format!(
                                "value target end marker {m:?} not found in prompt {prompt:?}"
                            ))
                        })?;
                        begin + at
                    }
                    None => prompt.len(),
                };
                Ok(&prompt[begin..stop])
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CovoConfig {
    pub lambda_v: f64,
    pub lambda_o: f64,
    pub reverse_template: ReverseTemplate,
    pub value_target: ValueTargetSelector,
    pub normalize_by_row_max: bool,
}

impl Default for CovoConfig {
    fn default() -> Self {
        CovoConfig {
            lambda_v: 1.0,
            lambda_o: 1.0,
            reverse_template: ReverseTemplate::parse("{output}").expect("valid template"),
            value_target: ValueTargetSelector::Full,
            normalize_by_row_max: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovoBreakdown {
    pub s_v: f64,
    pub s_o: f64,
    pub total: f64,
}

/// Drops everything from the first special token on. Generations carry a
/// terminal `<eos>`; scores must not.
pub fn trim_generation(vocab: &Vocabulary, ids: &[u32]) -> Vec<u32> {
    let cut = ids
        .iter()
        .position(|&id| vocab.is_special(id))
        .unwrap_or(ids.len());
    ids[..cut].to_vec()
}

/// Renders the reverse context for a generation and tokenizes it.
pub fn build_reverse_input(
    vocab: &Vocabulary,
    template: &ReverseTemplate,
    output_text: &str,
) -> Result<TokenSequence> {
    TokenSequence::from_text(vocab, &template.render(output_text))
}

fn floored(lp: f64) -> f64 {
    lp.max(LOGP_FLOOR)
}

/// Mean of (floored logp - row max) over `x` continued from `y_prime`.
/// Always <= 0; exactly 0 when every x token is the row argmax.
pub fn value_component<F: Elem>(
    reference: &Model<F>,
    y_prime: &[u32],
    x: &[u32],
    normalize_by_row_max: bool,
) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::InvalidInput("value target is empty".into()));
    }
    let ss = reference.sequence_scores(y_prime, x)?;
    let n = x.len() as f64;
    let mut acc = 0.0;
    for j in 0..x.len() {
        let lp = floored(ss.logps[j]);
        acc += if normalize_by_row_max {
            lp - ss.maxes[j]
        } else {
            lp
        };
    }
    Ok(acc / n)
}

/// Negated mean of (floored logp - row max) over `y` given the prompt.
/// Always >= 0; exactly 0 when every y token is the row argmax.
pub fn originality_component<F: Elem>(
    reference: &Model<F>,
    prompt: &[u32],
    y: &[u32],
    normalize_by_row_max: bool,
) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::InvalidInput("generation is empty".into()));
    }
    let ss = reference.sequence_scores(prompt, y)?;
    let n = y.len() as f64;
    let mut acc = 0.0;
    for j in 0..y.len() {
        let lp = floored(ss.logps[j]);
        acc += if normalize_by_row_max {
            lp - ss.maxes[j]
        } else {
            lp
        };
    }
    Ok(-acc / n)
}

/// Full breakdown for one generation. `y` may carry trailing specials;
/// they are trimmed before scoring. The originality direction conditions
/// on the full prompt; the value direction reads the templated generation
/// and scores the selected prompt segment.
pub fn covo_score<F: Elem>(
    reference: &Model<F>,
    prompt: &TokenSequence,
    y: &[u32],
    cfg: &CovoConfig,
) -> Result<CovoBreakdown> {
    let vocab = reference.vocab();
    let y_trim = trim_generation(vocab, y);
    if y_trim.is_empty() {
        return Err(Error::InvalidInput(
            "generation is empty after trimming specials".into(),
        ));
    }
    let y_text = vocab.detokenize(&y_trim)?;

    let s_o = originality_component(
        reference,
        &prompt.ids,
        &y_trim,
        cfg.normalize_by_row_max,
    )?;

    let y_prime = build_reverse_input(vocab, &cfg.reverse_template, &y_text)?;
    let x_text = cfg.value_target.extract(&prompt.text)?;
    let x = vocab.tokenize(x_text)?;
    if x.is_empty() {
        return Err(Error::InvalidInput(format!(
            "value target selector produced an empty segment from prompt {:?}",
            prompt.text
        )));
    }
    let s_v = value_component(reference, &y_prime.ids, &x, cfg.normalize_by_row_max)?;

    Ok(CovoBreakdown {
        s_v,
        s_o,
        total: cfg.lambda_v * s_v + cfg.lambda_o * s_o,
    })
}

/// Max absolute difference between the two pointwise mutual information
/// forms ln(p(x|y)/p(x)) and ln(p(y|x)/p(y)) over the cells of a joint
/// table. Cells with zero mass are skipped.
pub fn mi_identity_check(joint: &[Vec<f64>]) -> Result<f64> {
    if joint.is_empty() || joint[0].is_empty() {
        return Err(Error::InvalidInput("empty joint table".into()));
    }
    let cols = joint[0].len();
    let mut total = 0.0;
    for row in joint {
        if row.len() != cols {
            return Err(Error::InvalidInput("ragged joint table".into()));
        }
        for &p in row {
            if !(p >= 0.0) || !p.is_finite() {
                return Err(Error::InvalidInput(format!("bad probability {p}")));
            }
            total += p;
        }
    }
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "joint table sums to {total}, expected 1"
        )));
    }
    let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let py: Vec<f64> = (0..cols).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let mut worst: f64 = 0.0;
    for (i, row) in joint.iter().enumerate() {
        for (j, &pxy) in row.iter().enumerate() {
            if pxy <= 0.0 {
                continue;
            }
            let lhs = (pxy / py[j]).ln() - px[i].ln();
            let rhs = (pxy / px[i]).ln() - py[j].ln();
            worst = worst.max((lhs - rhs).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::model::{ModelConfig, Params};
    use std::sync::Arc;

    /// Embedding-only model whose next-token distribution depends only on
    /// the current token: row(cur) = softmax of hand-set log-weights.
    fn table_model(rows: &[(u32, Vec<(u32, f64)>)]) -> Model<f64> {
        let vocab = Arc::new(Vocabulary::from_charset("\nabcp").unwrap());
        let n = vocab.size();
        let cfg = ModelConfig {
            dim: n,
            layers: 0,
            heads: 1,
            context: 32,
            tied_head: false,
            final_norm: false,
        };
        let mut params: Params<f64> = Params::zeros(&cfg, n);
        for tok in 0..n {
            params.wte.set(tok, tok, 1.0);
        }
        let head = params.head.as_mut().unwrap();
        // Default every row to a hard floor so unset entries vanish.
        for next in 0..n {
            for cur in 0..n {
                head.set(next, cur, -1000.0);
            }
        }
        for (cur, dist) in rows {
            for (next, logw) in dist {
                head.set(*next as usize, *cur as usize, *logw);
            }
        }
        // Cancel the -1000 rows being added via the position channel: wpe
        // stays zero and embeddings are one-hot, so logits[next] is exactly
        // head[next][cur].
        Model::from_params(cfg, vocab, params, 0).unwrap()
    }

    // Vocab ids: <pad>=0 <eos>=1 \n=2 a=3 b=4 c=5 p=6

    #[test]
    fn template_parse_and_render() {
        let t = ReverseTemplate::parse("{output}\nthis is a ").unwrap();
        assert_eq!(t.render("x y"), "x y\nthis is a ");
        assert!(ReverseTemplate::parse("no slot here").is_err());
        assert!(ReverseTemplate::parse("{output}{output}").is_err());
    }

    #[test]
    fn instruction_style_template_renders_byte_exact() {
        let template = "Below is a response that appropriately completes a request. \
Write the instruction that describes the task.\n\n### Response:\n{output}\n\n### Instruction:";
        let t = ReverseTemplate::parse(template).unwrap();
        let rendered = t.render("some answer");
        assert_eq!(
            rendered,
            "Below is a response that appropriately completes a request. \
Write the instruction that describes the task.\n\n### Response:\nsome answer\n\n### Instruction:"
        );
        // Representable when the vocabulary covers the template characters.
        let mut chars: std::collections::BTreeSet<char> = rendered.chars().collect();
        chars.insert('\n');
        let charset: String = chars.into_iter().collect();
        let vocab = Vocabulary::from_charset(&charset).unwrap();
        let seq = TokenSequence::from_text(&vocab, &rendered).unwrap();
        assert_eq!(vocab.detokenize(&seq.ids).unwrap(), rendered);
    }

    #[test]
    fn selector_variants() {
        let full = ValueTargetSelector::Full;
        assert_eq!(full.extract("write a t1 s1 poem:\n").unwrap(), "write a t1 s1 poem:\n");
        let between = ValueTargetSelector::Between {
            start: Some("write a ".into()),
            end: Some(" poem".into()),
        };
        assert_eq!(between.extract("write a t1 s1 poem:\n").unwrap(), "t1 s1");
        let tail = ValueTargetSelector::Between {
            start: Some("q: ".into()),
            end: None,
        };
        assert_eq!(tail.extract("q: 7+4\n").unwrap(), "7+4\n");
        let head = ValueTargetSelector::Between {
            start: None,
            end: Some(":".into()),
        };
        assert_eq!(head.extract("abc: def").unwrap(), "abc");
        assert!(between.extract("no markers").is_err());
    }

    #[test]
    fn originality_hand_value() {
        // After p: P(a)=0.3, P(b)=0.7. After a: P(b)=0.7, P(c)=0.3.
        let m = table_model(&[
            (6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())]),
            (3, vec![(4, 0.7f64.ln()), (5, 0.3f64.ln())]),
        ]);
        // y = "ab": logp(a|p) = ln 0.3 with row max ln 0.7; logp(b|a) = ln 0.7 = max.
        let s_o = originality_component(&m, &[6], &[3, 4], true).unwrap();
        let expect = -((0.3f64.ln() - 0.7f64.ln()) + 0.0) / 2.0;
        assert!((s_o - expect).abs() < 1e-10, "{s_o} vs {expect}");
        assert!((s_o - 0.4236489301936017).abs() < 1e-4);

        // Single-token version reproduces the one-step margin.
        let s1 = originality_component(&m, &[6], &[3], true).unwrap();
        assert!((s1 - 0.8472978603872034).abs() < 1e-4);
    }

    #[test]
    fn value_hand_value_and_sign() {
        let m = table_model(&[
            (6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())]),
            (3, vec![(4, 0.7f64.ln()), (5, 0.3f64.ln())]),
        ]);
        // x = "a" after y' = "p": logp - max = ln 0.3 - ln 0.7.
        let s_v = value_component(&m, &[6], &[3], true).unwrap();
        assert!((s_v - (0.3f64.ln() - 0.7f64.ln())).abs() < 1e-10);
        assert!((s_v + 0.8473).abs() < 1e-4);
        assert!(s_v <= 0.0);
    }

    #[test]
    fn argmax_continuations_score_exactly_zero() {
        let m = table_model(&[
            (6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())]),
            (4, vec![(4, 2.0), (5, 0.4)]),
        ]);
        // Greedy after p is b, greedy after b is b again.
        let s_o = originality_component(&m, &[6], &[4, 4, 4], true).unwrap();
        assert_eq!(s_o, 0.0);
        let s_v = value_component(&m, &[6], &[4, 4], true).unwrap();
        assert_eq!(s_v, 0.0);
    }

    #[test]
    fn uniform_rows_score_zero() {
        // All-zero head: every row uniform, every token is a row argmax.
        let m = table_model(&[]);
        // Overwrite the -1000 fill with a constant row.
        let s_o = originality_component(&m, &[6], &[3, 4, 5], true).unwrap();
        assert_eq!(s_o, 0.0);
    }

    #[test]
    fn unigram_model_originality_is_length_invariant() {
        // One shared distribution for every context.
        let mut rows = Vec::new();
        for cur in 0..7u32 {
            rows.push((cur, vec![(3, 0.1f64.ln()), (4, 0.6f64.ln()), (5, 0.3f64.ln())]));
        }
        let m = table_model(&rows);
        let per_token = originality_component(&m, &[6], &[3], true).unwrap();
        for len in [1usize, 2, 5, 9] {
            let y = vec![3u32; len];
            let s = originality_component(&m, &[6], &y, true).unwrap();
            assert!((s - per_token).abs() < 1e-12, "len {len}: {s} vs {per_token}");
        }
    }

    #[test]
    fn covo_breakdown_combines_linearly() {
        let m = table_model(&[
            (6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())]),
            (3, vec![(4, 0.7f64.ln()), (5, 0.3f64.ln())]),
            (4, vec![(3, 0.5f64.ln()), (6, 0.5f64.ln())]),
        ]);
        let vocab = m.vocab().clone();
        let prompt = TokenSequence::from_text(&vocab, "p").unwrap();
        let cfg = CovoConfig {
            lambda_v: 2.0,
            lambda_o: 0.5,
            ..CovoConfig::default()
        };
        let bd = covo_score(&m, &prompt, &[3, 4], &cfg).unwrap();
        assert!(bd.s_v <= 0.0);
        assert!(bd.s_o >= 0.0);
        assert!((bd.total - (2.0 * bd.s_v + 0.5 * bd.s_o)).abs() < 1e-12);

        // Default weights are 1.0 each.
        let dflt = CovoConfig::default();
        assert_eq!(dflt.lambda_v, 1.0);
        assert_eq!(dflt.lambda_o, 1.0);
        let bd1 = covo_score(&m, &prompt, &[3, 4], &dflt).unwrap();
        assert!((bd1.total - (bd1.s_v + bd1.s_o)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_trimmed_at_first_special() {
        let m = table_model(&[
            (6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())]),
            (3, vec![(4, 0.7f64.ln()), (5, 0.3f64.ln())]),
        ]);
        let vocab = m.vocab().clone();
        let prompt = TokenSequence::from_text(&vocab, "p").unwrap();
        let cfg = CovoConfig::default();
        let with_eos = covo_score(&m, &prompt, &[3, 4, 1, 0, 0], &cfg).unwrap();
        let plain = covo_score(&m, &prompt, &[3, 4], &cfg).unwrap();
        assert_eq!(with_eos, plain);

        let only_eos = covo_score(&m, &prompt, &[1], &cfg);
        assert!(only_eos.is_err());
    }

    #[test]
    fn unnormalized_variant_drops_row_max() {
        let m = table_model(&[(6, vec![(3, 0.3f64.ln()), (4, 0.7f64.ln())])]);
        let s_plain = originality_component(&m, &[6], &[3], false).unwrap();
        // Plain negative mean log-prob: -ln 0.3.
        assert!((s_plain + 0.3f64.ln()).abs() < 1e-10);
        let s_norm = originality_component(&m, &[6], &[3], true).unwrap();
        // Subtracting the row max can only shrink the surprisal measure.
        assert!(s_norm <= s_plain + 1e-12);
        assert!(s_plain >= 0.0 && s_norm >= 0.0);
    }

    #[test]
    fn floor_bounds_extreme_tokens() {
        // Token c is astronomically unlikely after p; the floor caps it.
        let m = table_model(&[(6, vec![(3, 0.0), (5, -500.0)])]);
        let s_o = originality_component(&m, &[6], &[5], true).unwrap();
        assert!(s_o <= -LOGP_FLOOR + 1.0);
        assert!(s_o >= 0.0);
    }

    #[test]
    fn mi_identity_hand_table() {
        let joint = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let worst = mi_identity_check(&joint).unwrap();
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn mi_identity_rejects_bad_tables() {
        assert!(mi_identity_check(&[vec![0.3, 0.3]]).is_err()); // sums to 0.6
        assert!(mi_identity_check(&[vec![1.2, -0.2]]).is_err());
        assert!(mi_identity_check(&[]).is_err());
    }

    #[test]
    fn mi_identity_skips_zero_cells() {
        let joint = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        let worst = mi_identity_check(&joint).unwrap();
        assert!(worst <= 1e-12);
    }
}
