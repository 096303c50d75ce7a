//! Tasks, templated questions, the oracle and answer formatting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Intensity, Shape, SynthImage, GRID};
use super::vocab::{tok, vocab, Token, ANS, END_ANS, END_THINK, EOS, THINK};
use crate::error::{GenError, Result};
use crate::seeding::rng_for;

const TARGET_STREAM: u64 = 0x746172;
pub const TEMPLATES_PER_TASK: u8 = 2;
pub const NUM_TEMPLATES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Diagnosis,
    Counting,
    Location,
    Presence,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Diagnosis, Task::Counting, Task::Location, Task::Presence];

    pub fn name(self) -> &'static str {
        ["diagnosis", "counting", "location", "presence"][self as usize]
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Answer values this task can take.
    pub fn domain(self) -> Vec<AnswerValue> {
        match self {
            Task::Diagnosis => (1..=6).map(AnswerValue::Condition).collect(),
            Task::Counting => (1..=6).map(AnswerValue::Count).collect(),
            Task::Location => Quadrant::ALL.into_iter().map(AnswerValue::Quadrant).collect(),
            Task::Presence => vec![AnswerValue::Presence(true), AnswerValue::Presence(false)],
        }
    }

    pub fn in_domain(self, v: AnswerValue) -> bool {
        match (self, v) {
            (Task::Diagnosis, AnswerValue::Condition(c)) => (1..=6).contains(&c),
            (Task::Counting, AnswerValue::Count(n)) => (1..=6).contains(&n),
            (Task::Location, AnswerValue::Quadrant(_)) => true,
            (Task::Presence, AnswerValue::Presence(_)) => true,
            _ => false,
        }
    }

    /// Token naming the expected answer type, used by the self-check trace.
    pub fn type_token(self) -> Token {
        tok(["type-condition", "type-number", "type-quadrant", "type-yesno"][self as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrant {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::UpperLeft, Quadrant::UpperRight, Quadrant::LowerLeft, Quadrant::LowerRight];

    pub fn of(row: u8, col: u8) -> Quadrant {
        let half = (GRID / 2) as u8;
        match (row >= half, col >= half) {
            (false, false) => Quadrant::UpperLeft,
            (false, true) => Quadrant::UpperRight,
            (true, false) => Quadrant::LowerLeft,
            (true, true) => Quadrant::LowerRight,
        }
    }

    pub fn word(self) -> &'static str {
        ["upper-left", "upper-right", "lower-left", "lower-right"][self as usize]
    }
}

/// A semantic answer value after synonym normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AnswerValue {
    Condition(u8),
    Count(u8),
    Quadrant(Quadrant),
    Presence(bool),
}

impl AnswerValue {
    pub fn token(self) -> Token {
        match self {
            AnswerValue::Condition(c) => tok(&format!("C{c}")),
            AnswerValue::Count(n) => tok(&n.to_string()),
            AnswerValue::Quadrant(q) => tok(q.word()),
            AnswerValue::Presence(true) => tok("yes"),
            AnswerValue::Presence(false) => tok("no"),
        }
    }

    pub fn from_token(t: Token) -> Option<AnswerValue> {
        let w = vocab().word(vocab().canonical(t));
        match w {
            "yes" => Some(AnswerValue::Presence(true)),
            "no" => Some(AnswerValue::Presence(false)),
            _ => {
                if let Some(q) = Quadrant::ALL.into_iter().find(|q| q.word() == w) {
                    return Some(AnswerValue::Quadrant(q));
                }
                if let Some(c) = w.strip_prefix('C').and_then(|d| d.parse::<u8>().ok()) {
                    return Some(AnswerValue::Condition(c));
                }
                if w.len() == 1 {
                    return w.parse::<u8>().ok().map(AnswerValue::Count);
                }
                None
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Shape(Shape),
    Intensity(Intensity),
}

impl Target {
    pub fn word(self) -> &'static str {
        match self {
            Target::Shape(s) => s.word(),
            Target::Intensity(i) => i.word(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Question {
    pub task: Task,
    pub template: u8,
    pub target: Option<Target>,
    pub tokens: Vec<Token>,
}

impl Question {
    /// Template index across all tasks, in `0..NUM_TEMPLATES`.
    pub fn global_template(&self) -> usize {
        global_template(self.task, self.template)
    }
}

pub fn global_template(task: Task, template: u8) -> usize {
    task as usize * TEMPLATES_PER_TASK as usize + template as usize
}

pub fn template_from_global(g: usize) -> (Task, u8) {
    (Task::ALL[g / TEMPLATES_PER_TASK as usize], (g % TEMPLATES_PER_TASK as usize) as u8)
}

fn template_text(task: Task, template: u8) -> Option<&'static str> {
    Some(match (task, template) {
        (Task::Diagnosis, 0) => "what is the diagnosis",
        (Task::Diagnosis, 1) => "which condition is shown in this image",
        (Task::Counting, 0) => "how many findings are there",
        (Task::Counting, 1) => "count the findings in this image",
        (Task::Location, 0) => "where is the largest finding",
        (Task::Location, 1) => "which quadrant contains the largest finding",
        (Task::Presence, 0) => "is there a {} finding",
        (Task::Presence, 1) => "is there a {} intensity finding",
        _ => return None,
    })
}

fn choose_target(image: &SynthImage, template: u8) -> Target {
    let mut rng = rng_for(image.seed, &[TARGET_STREAM, template as u64]);
    let want_present = rng.gen_bool(0.5);
    let options: Vec<Target> = if template == 0 {
        Shape::ALL.into_iter().map(Target::Shape).collect()
    } else {
        Intensity::ALL.into_iter().map(Target::Intensity).collect()
    };
    let (present, absent): (Vec<Target>, Vec<Target>) = options.into_iter().partition(|t| has_target(image, *t));
    let pool = if (want_present && !present.is_empty()) || absent.is_empty() { present } else { absent };
    pool[rng.gen_range(0..pool.len())]
}

fn has_target(image: &SynthImage, t: Target) -> bool {
    image.findings.iter().any(|f| match t {
        Target::Shape(s) => f.shape == s,
        Target::Intensity(i) => f.intensity == i,
    })
}

pub fn render_question(task: Task, template: u8, image: &SynthImage) -> Result<Question> {
    let text = template_text(task, template)
        .ok_or_else(|| GenError::Config(format!("unknown template {template} for task {}", task.name())))?;
    let target = (task == Task::Presence).then(|| choose_target(image, template));
    let text = match target {
        Some(t) => text.replace("{}", t.word()),
        None => text.to_string(),
    };
    let tokens = vocab().tokenize(&text)?;
    Ok(Question { task, template, target, tokens })
}

/// Fixed rule table from the largest finding's (shape, intensity) to a condition label.
pub fn diagnosis_rule(shape: Shape, intensity: Intensity) -> u8 {
    use Intensity::*;
    use Shape::*;
    match (shape, intensity) {
        (Round, Low) | (Round, Mid) => 1,
        (Round, High) | (Linear, High) => 2,
        (Spiculated, Low) | (Diffuse, Mid) => 3,
        (Spiculated, Mid) | (Spiculated, High) => 4,
        (Linear, Low) | (Linear, Mid) => 5,
        (Diffuse, Low) | (Diffuse, High) => 6,
    }
}

pub fn oracle_value(image: &SynthImage, q: &Question) -> AnswerValue {
    match q.task {
        Task::Diagnosis => {
            let f = image.largest();
            AnswerValue::Condition(diagnosis_rule(f.shape, f.intensity))
        }
        Task::Counting => AnswerValue::Count(image.findings.len() as u8),
        Task::Location => {
            let f = image.largest();
            AnswerValue::Quadrant(Quadrant::of(f.row, f.col))
        }
        Task::Presence => AnswerValue::Presence(q.target.is_some_and(|t| has_target(image, t))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationalePolicy {
    None,
    Trace,
    TraceWithSelfCheck,
}

/// Rationale span including its THINK markers; empty for `RationalePolicy::None`.
pub fn render_rationale(image: &SynthImage, q: &Question, policy: RationalePolicy) -> Vec<Token> {
    if policy == RationalePolicy::None {
        return Vec::new();
    }
    let mut out = vec![THINK];
    match q.task {
        Task::Counting => out.extend(image.findings.iter().map(|f| tok(f.shape.word()))),
        Task::Presence => out.extend(image.findings.iter().map(|f| match q.target {
            Some(Target::Intensity(_)) => tok(f.intensity.word()),
            _ => tok(f.shape.word()),
        })),
        Task::Location => {
            let f = image.largest();
            out.push(tok("large"));
            out.push(tok(&format!("r{}", f.row)));
            out.push(tok(&format!("c{}", f.col)));
        }
        Task::Diagnosis => {
            let f = image.largest();
            out.push(tok(f.shape.word()));
            out.push(tok(f.intensity.word()));
            out.push(tok("rule"));
        }
    }
    if policy == RationalePolicy::TraceWithSelfCheck {
        out.push(q.task.type_token());
    }
    out.push(END_THINK);
    out
}

pub fn format_answer(rationale: &[Token], value: AnswerValue) -> Vec<Token> {
    let mut out = rationale.to_vec();
    out.extend([ANS, value.token(), END_ANS, EOS]);
    out
}

pub fn oracle_answer(image: &SynthImage, q: &Question, policy: RationalePolicy) -> Vec<Token> {
    format_answer(&render_rationale(image, q, policy), oracle_value(image, q))
}

/// Normalized value of the unique ANS span, or `None` when the answer is invalid.
pub fn extract(answer: &[Token]) -> Option<AnswerValue> {
    let opens: Vec<usize> = answer.iter().enumerate().filter(|(_, &t)| t == ANS).map(|(i, _)| i).collect();
    let closes = answer.iter().filter(|&&t| t == END_ANS).count();
    if opens.len() != 1 || closes != 1 {
        return None;
    }
    let i = opens[0];
    if answer.get(i + 2) != Some(&END_ANS) {
        return None;
    }
    AnswerValue::from_token(answer[i + 1])
}

/// Whether the answer carries a non-empty THINK span.
pub fn has_rationale(answer: &[Token]) -> bool {
    match (answer.iter().position(|&t| t == THINK), answer.iter().position(|&t| t == END_THINK)) {
        (Some(a), Some(b)) => b > a + 1,
        _ => false,
    }
}
