//! Prompt templates: pattern-prior annotation prompts and hint prompts.

use super::{ParoError, PatternPrior};
use crate::dataset::{assemble_target, ANSWER_OPEN};

pub const NSM_INSTRUCTION: &str = "Determine whether Value 1 and Value 2, highlighted in the two contexts below, \
refer to the same numerical fact. If they are semantically equivalent, please output \"yes\", otherwise please output \"no\".";

pub const NSM_STEPS: [&str; 2] = [
    "Analyze the semantics of Value 1 and Value 2;",
    "Compare the similarities and differences between their semantics in terms of time, subject, scope, entity, etc. \
If there is a difference in any aspect, then the output should be \"no\", otherwise output \"yes\".",
];

pub const TPC_INSTRUCTION: &str =
    "Please classify the purpose of the given bank transaction into one of the predefined categories.";

pub const TPC_STEPS: [&str; 4] = [
    "Entity Identification: Determine whether the account holder is an enterprise (e.g., company, corporation) \
or an individual (personal name).",
    "Direction Determination: Identify the transaction direction, i.e. whether it represents income (credit) \
or expense (debit).",
    "Information Matching: Prioritize transaction keyword matching, then analyze the counterparty information:\n\
   - Financial institutions -> investment / wealth management / loan categories\n\
   - Tax authorities -> tax-related categories\n\
   - Judicial authorities -> penalty / compensation categories\n\
   - Government departments -> subsidy / tax-related categories",
    "Refined Classification: Combine the subject type and transaction nature to select the most appropriate \
purpose category.",
];

pub const RATIONALE_DIRECTIVE: &str =
    "Please first provide your reasoning process in <rationale> and </rationale> tags, following these steps:";

const FORMAT_DIRECTIVE: &str = "Please follow the format below for output and do not output any other content:";

const QUERY_MARKER: &str = "[Question]";

/// Annotation prompt: instruction, tag directive, numbered steps, the two
/// exemplars, then the question with an empty output slot.
pub fn build_pattern_prompt(prior: &PatternPrior, question: &str) -> Result<String, ParoError> {
    prior.validate()?;
    let mut out = String::new();
    out.push_str(prior.instruction.trim_end());
    out.push('\n');
    out.push_str(RATIONALE_DIRECTIVE);
    out.push('\n');
    for (i, step) in prior.steps.iter().enumerate() {
        out.push_str(&format!("{}. {}\n", i + 1, step.trim_end()));
    }
    out.push_str(FORMAT_DIRECTIVE);
    out.push('\n');
    for (i, ex) in prior.exemplars.iter().enumerate() {
        let target = assemble_target(&ex.rationale, &ex.qa.answer)?;
        out.push_str(&format!(
            "\n[Example {}]\nInput:\n{}\nOutput:\n{}\n",
            i + 1,
            ex.qa.question.trim_end(),
            target
        ));
    }
    out.push_str(&format!("\n{QUERY_MARKER}\nInput:\n{}\nOutput:\n", question.trim_end()));
    Ok(out)
}

/// The part of an annotation prompt that holds the record being annotated.
pub fn query_section(prompt: &str) -> Option<&str> {
    prompt.rfind(QUERY_MARKER).map(|i| &prompt[i..])
}

/// True when the query section carries anything in its answer slot: an
/// `<answer>` tag, a `Label:` line with the gold label, or text after the
/// final `Output:` line.
pub fn answer_slot_filled(prompt: &str, gold: &str) -> bool {
    let Some(query) = query_section(prompt) else {
        return true;
    };
    let after_output = query.rfind("Output:\n").map_or("", |i| &query[i + "Output:\n".len()..]);
    query.contains(ANSWER_OPEN) || query.contains(&format!("Label: {gold}")) || !after_output.trim().is_empty()
}

pub const HINT_CAVEAT: &str = "Please note that this sample provides manually annotated hints before the Output. \
You may refer to the Hint content, but be aware that the Hint may not be complete.";

const HINT_HEADER: &str = "\n# Hint\n";
const OUTPUT_HEADER: &str = "\n\n# Output\n";

/// Hint prompt with the default numerical-matching instruction.
pub fn build_hint_prompt(question: &str, rationale: &str) -> Result<String, ParoError> {
    build_hint_prompt_with(NSM_INSTRUCTION, question, rationale)
}

pub fn build_hint_prompt_with(instruction: &str, question: &str, rationale: &str) -> Result<String, ParoError> {
    if rationale.trim().is_empty() {
        return Err(ParoError::Empty("hint rationale"));
    }
    if question.trim().is_empty() {
        return Err(ParoError::Empty("question"));
    }
    Ok(format!(
        "# Task Instructions\n{instruction}\n{HINT_CAVEAT}\n\n# Input\n{question}\n{HINT_HEADER}{rationale}{OUTPUT_HEADER}"
    ))
}

/// The `# Hint` body of a prompt built by [`build_hint_prompt_with`].
pub fn hint_body(prompt: &str) -> Option<&str> {
    let start = prompt.find(HINT_HEADER)? + HINT_HEADER.len();
    let end = prompt.rfind(OUTPUT_HEADER)?;
    (end >= start).then(|| &prompt[start..end])
}

/// Leading share of a rationale by whitespace tokens, original spacing kept.
/// At least one token is kept for a non-empty rationale.
pub fn truncate_hint(rationale: &str, fraction: f64) -> &str {
    let fraction = fraction.clamp(0.0, 1.0);
    let words: Vec<(usize, &str)> = rationale
        .split_whitespace()
        .map(|w| (w.as_ptr() as usize - rationale.as_ptr() as usize, w))
        .collect();
    if words.is_empty() {
        return rationale;
    }
    let keep = ((words.len() as f64 * fraction).ceil() as usize).clamp(1, words.len());
    let (start, word) = words[keep - 1];
    &rationale[..start + word.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Task;
    use crate::paro::tests::exemplar;

    #[test]
    fn pattern_prompt_structure() {
        let prior = PatternPrior::nsm(vec![exemplar("e1", Task::Nsm, "yes"), exemplar("e2", Task::Nsm, "no")]);
        let p = build_pattern_prompt(&prior, "Value 1: 12 in table A. Value 2: 12 in note 3.").unwrap();
        let order = [
            NSM_INSTRUCTION,
            RATIONALE_DIRECTIVE,
            "1. Analyze the semantics",
            "2. Compare the similarities",
            "[Example 1]",
            "[Example 2]",
            "[Question]",
        ];
        let mut last = 0;
        for needle in order {
            let at = p[last..].find(needle).unwrap_or_else(|| panic!("missing {needle:?}")) + last;
            last = at;
        }
        assert!(p.ends_with("Output:\n"));
        assert!(!answer_slot_filled(&p, "yes"));
        assert!(answer_slot_filled(&format!("{p}<answer>yes</answer>"), "yes"));
    }

    #[test]
    fn one_exemplar_is_rejected() {
        let prior = PatternPrior::tpc(vec![exemplar("e1", Task::Tpc, "L")]);
        assert!(matches!(build_pattern_prompt(&prior, "q"), Err(ParoError::ExemplarCount(1))));
    }

    #[test]
    fn hint_prompt() {
        let p = build_hint_prompt("q?", "first check the year").unwrap();
        assert!(p.starts_with("# Task Instructions\n"));
        assert!(p.contains(HINT_CAVEAT));
        assert_eq!(hint_body(&p), Some("first check the year"));
        assert!(p.ends_with("# Output\n"));
        let order = ["# Task Instructions", "# Input", "# Hint", "# Output"];
        let positions: Vec<usize> = order.iter().map(|h| p.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert!(matches!(build_hint_prompt("q", "  "), Err(ParoError::Empty(_))));
    }

    #[test]
    fn truncated_hint_still_builds() {
        let r = "one two  three four";
        assert_eq!(truncate_hint(r, 0.5), "one two");
        assert_eq!(truncate_hint(r, 1.0), r);
        assert_eq!(truncate_hint(r, 0.0), "one");
        let p = build_hint_prompt("q", truncate_hint(r, 0.5)).unwrap();
        assert_eq!(hint_body(&p), Some("one two"));
    }
}
