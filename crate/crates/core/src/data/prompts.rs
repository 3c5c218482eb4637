use crate::appearance::PromptSpec;
use crate::backbone::tokenize;

/// Evaluation prompt template; `{subject}` and `{context}` are filled from
/// the lists passed to [`build_eval_prompts`].
pub const EVAL_TEMPLATE: &str = "A {subject} is {motion} {context}";

/// Six instantiations of [`EVAL_TEMPLATE`], cycling through the
/// subject × context product in row-major order.
///
/// ```
/// use motion_transfer::data::build_eval_prompts;
/// let p = build_eval_prompts(&["cat", "dog", "panda"], &["in the living room", "on the beach"], "circling");
/// assert_eq!(p.len(), 6);
/// assert_eq!(p[0].base_prompt, "A cat is circling in the living room");
/// assert_eq!(p[1].base_prompt, "A cat is circling on the beach");
/// ```
pub fn build_eval_prompts(subjects: &[&str], contexts: &[&str], verb: &str) -> Vec<PromptSpec> {
    assert!(
        !subjects.is_empty() && !contexts.is_empty(),
        "subjects and contexts must be non-empty"
    );
    let pairs: Vec<(&str, &str)> = subjects
        .iter()
        .flat_map(|s| contexts.iter().map(move |c| (*s, *c)))
        .collect();
    (0..6)
        .map(|i| {
            let (s, c) = pairs[i % pairs.len()];
            let text = EVAL_TEMPLATE
                .replace("{subject}", s)
                .replace("{motion}", verb)
                .replace("{context}", c);
            let text = text.trim_end().to_string();
            let verb_index = tokenize(&text).iter().position(|t| t == verb);
            PromptSpec {
                base_prompt: text,
                recaptioned_prompt: None,
                verb_index,
            }
        })
        .collect()
}

/// The entity-only prompt: the tokens before the verb minus trailing
/// auxiliaries, e.g. `"a panda"` for `"A panda is skateboarding in the park"`.
pub fn entity_prompt(prompt: &PromptSpec) -> String {
    let toks = tokenize(&prompt.base_prompt);
    let end = prompt.verb_index.unwrap_or(toks.len()).min(toks.len());
    let mut head = &toks[..end];
    while let Some((last, rest)) = head.split_last() {
        if ["is", "are", "was", "were", "am", "be"].contains(&last.as_str()) {
            head = rest;
        } else {
            break;
        }
    }
    head.join(" ")
}
