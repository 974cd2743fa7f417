//! Prompt templates for every generator call, shipped as asset files.
//!
//! Templates use `{name}` placeholders. Rendering is single pass and only
//! touches the names passed in, so literal braces in the template text
//! (`{Solution Code in Python}`, the JSON example in the topic prompt) and
//! braces inside substituted values are left alone.

use crate::evolve::Difficulty;
use crate::topics::TOPIC_BANK;

pub const MUTATION_EASIER: &str = include_str!("../assets/prompts/mutation_easier.txt");
pub const MUTATION_EQUAL: &str = include_str!("../assets/prompts/mutation_equal.txt");
pub const MUTATION_HARDER: &str = include_str!("../assets/prompts/mutation_harder.txt");
pub const CROSSOVER: &str = include_str!("../assets/prompts/crossover.txt");
pub const OUTPUT_FORMAT: &str = include_str!("../assets/prompts/output_format.txt");
pub const SOLUTION: &str = include_str!("../assets/prompts/solution.txt");
pub const SOLUTION_FEEDBACK: &str = include_str!("../assets/prompts/solution_feedback.txt");
pub const FEEDBACK_ATTEMPT: &str = include_str!("../assets/prompts/feedback_attempt.txt");
pub const POSTPROCESS: &str = include_str!("../assets/prompts/postprocess.txt");
pub const TOPIC_LABEL: &str = include_str!("../assets/prompts/topic_label.txt");
pub const TESTTAKER: &str = include_str!("../assets/prompts/testtaker.txt");

/// Substitute `{key}` occurrences for the given keys in one left-to-right pass.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

pub fn mutation(difficulty: Difficulty, statement: &str) -> String {
    let template = match difficulty {
        Difficulty::Easier => MUTATION_EASIER,
        Difficulty::Equal => MUTATION_EQUAL,
        Difficulty::Harder => MUTATION_HARDER,
    };
    render(template, &[("instruction", statement)])
}

pub fn crossover<S: AsRef<str>>(statements: &[S]) -> String {
    let questions = statements
        .iter()
        .enumerate()
        .map(|(i, s)| format!("Question {}:\n{}", i + 1, s.as_ref()))
        .collect::<Vec<_>>()
        .join("\n\n");
    render(CROSSOVER, &[("questions", &questions)])
}

pub fn solution(problem: &str) -> String {
    render(
        SOLUTION,
        &[("output_format", OUTPUT_FORMAT), ("problem", problem)],
    )
}

/// One prior attempt as shown in the chat history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptRecord {
    pub response: String,
    pub execution_output: String,
}

pub fn feedback_history(attempts: &[AttemptRecord]) -> String {
    attempts
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let n = (i + 1).to_string();
            render(
                FEEDBACK_ATTEMPT,
                &[
                    ("attempt", &n),
                    ("solution", &a.response),
                    ("output", &a.execution_output),
                ],
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn solution_with_feedback(problem: &str, attempts: &[AttemptRecord]) -> String {
    let history = feedback_history(attempts);
    render(
        SOLUTION_FEEDBACK,
        &[
            ("output_format", OUTPUT_FORMAT),
            ("history", &history),
            ("problem", problem),
        ],
    )
}

pub fn postprocess(question: &str, tests: &str) -> String {
    render(POSTPROCESS, &[("question", question), ("tests", tests)])
}

pub fn topic_label(problem: &str, solution: &str) -> String {
    let bank = TOPIC_BANK.join("; ");
    render(
        TOPIC_LABEL,
        &[("bank", &bank), ("problem", problem), ("solution", solution)],
    )
}

pub fn testtaker(problem: &str) -> String {
    render(TESTTAKER, &[("problem", problem)])
}
