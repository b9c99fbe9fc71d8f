//! Prompt assembly and turn generation for the two conversation players.
//!
//! The assistant player is strategy-conditioned: its task instruction carries
//! an `[action]` slot filled with the chosen strategy's natural-language
//! instruction (or dropped entirely in standard mode). The user simulator
//! gets only its role description, never a strategy. Both prompts end with
//! the full dialogue so far rendered as alternating chat messages, from each
//! player's own point of view.
//!
//! Templates are plain text files keyed by domain and role, so a new domain
//! is data, not code. Message boundaries are `@@system` / `@@user` /
//! `@@assistant` marker lines; `[name]` placeholders are substituted from
//! case fields in a single pass, and `[[name]]` escapes to a literal
//! `[name]` for prompts that must show bracketed text verbatim.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use thiserror::Error;

use crate::catalog::SpeakerLabels;
use crate::domain::{CaseDetails, CaseProfile, DialogueState, DomainKind, Speaker, StrategyAction, Turn};
use crate::gateway::{ChatMessage, ChatRole, CompletionRequest, Gateway, GatewayError};

pub const NEGOTIATION_ASSISTANT: &str = include_str!("../assets/templates/negotiation.assistant.txt");
pub const NEGOTIATION_USER: &str = include_str!("../assets/templates/negotiation.user.txt");
pub const NEGOTIATION_OPENING: &str = include_str!("../assets/templates/negotiation.opening.txt");
pub const NEGOTIATION_REWARD: &str = include_str!("../assets/templates/negotiation.reward.txt");
pub const EMOTIONAL_SUPPORT_ASSISTANT: &str =
    include_str!("../assets/templates/emotional_support.assistant.txt");
pub const EMOTIONAL_SUPPORT_USER: &str =
    include_str!("../assets/templates/emotional_support.user.txt");
pub const EMOTIONAL_SUPPORT_OPENING: &str =
    include_str!("../assets/templates/emotional_support.opening.txt");
pub const EMOTIONAL_SUPPORT_REWARD: &str =
    include_str!("../assets/templates/emotional_support.reward.txt");
pub const TUTORING_ASSISTANT: &str = include_str!("../assets/templates/tutoring.assistant.txt");
pub const TUTORING_USER: &str = include_str!("../assets/templates/tutoring.user.txt");
pub const TUTORING_OPENING: &str = include_str!("../assets/templates/tutoring.opening.txt");
pub const TUTORING_REWARD: &str = include_str!("../assets/templates/tutoring.reward.txt");

/// Embedded template sources in fixed order, for the run-manifest fingerprint.
pub const EMBEDDED: [(&str, &str); 12] = [
    ("templates/negotiation.assistant.txt", NEGOTIATION_ASSISTANT),
    ("templates/negotiation.user.txt", NEGOTIATION_USER),
    ("templates/negotiation.opening.txt", NEGOTIATION_OPENING),
    ("templates/negotiation.reward.txt", NEGOTIATION_REWARD),
    ("templates/emotional_support.assistant.txt", EMOTIONAL_SUPPORT_ASSISTANT),
    ("templates/emotional_support.user.txt", EMOTIONAL_SUPPORT_USER),
    ("templates/emotional_support.opening.txt", EMOTIONAL_SUPPORT_OPENING),
    ("templates/emotional_support.reward.txt", EMOTIONAL_SUPPORT_REWARD),
    ("templates/tutoring.assistant.txt", TUTORING_ASSISTANT),
    ("templates/tutoring.user.txt", TUTORING_USER),
    ("templates/tutoring.opening.txt", TUTORING_OPENING),
    ("templates/tutoring.reward.txt", TUTORING_REWARD),
];

#[derive(Debug, Error)]
pub enum RoleplayError {
    #[error("template {name} line {line}: {message}")]
    Parse { name: String, line: usize, message: String },
    #[error("template {template}: unknown placeholder [{placeholder}]")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("template {template}: unterminated bracket starting at byte {offset}")]
    UnterminatedBracket { template: String, offset: usize },
    #[error("action for domain {action} used with a {case} case")]
    DomainMismatch { action: DomainKind, case: DomainKind },
    #[error("templates for domain {templates} used with a {case} case")]
    TemplateDomainMismatch { templates: DomainKind, case: DomainKind },
    #[error("opening template may only use @@system and @@user markers")]
    BadOpeningRole,
    #[error("backend returned an empty completion twice in a row")]
    EmptyCompletion,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("template io: {0}")]
    Io(#[from] std::io::Error),
}

/// One message skeleton inside a template: a chat role plus body text that
/// may contain placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateMessage {
    pub role: ChatRole,
    pub body: String,
}

/// A parsed template file: an ordered list of role-tagged message bodies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub name: String,
    pub messages: Vec<TemplateMessage>,
}

fn marker_role(line: &str) -> Option<ChatRole> {
    match line {
        "@@system" => Some(ChatRole::System),
        "@@user" => Some(ChatRole::User),
        "@@assistant" => Some(ChatRole::Assistant),
        _ => None,
    }
}

/// Parses `@@role` marker files. Each message body is the lines between its
/// marker and the next one, with the final newline stripped; interior blank
/// lines are preserved.
pub fn parse_template(name: &str, text: &str) -> Result<Template, RoleplayError> {
    let mut messages: Vec<TemplateMessage> = Vec::new();
    let mut current: Option<(ChatRole, Vec<&str>, usize)> = None;
    for (number, line) in text.lines().enumerate() {
        if let Some(role) = marker_role(line) {
            if let Some((prev_role, lines, start)) = current.take() {
                let body = lines.join("\n");
                if body.is_empty() {
                    return Err(RoleplayError::Parse {
                        name: name.to_string(),
                        line: start,
                        message: "message body is empty".into(),
                    });
                }
                messages.push(TemplateMessage { role: prev_role, body });
            }
            current = Some((role, Vec::new(), number + 1));
        } else if let Some((_, lines, _)) = current.as_mut() {
            lines.push(line);
        } else if !line.trim().is_empty() {
            return Err(RoleplayError::Parse {
                name: name.to_string(),
                line: number + 1,
                message: "content before the first @@ marker".into(),
            });
        }
    }
    if let Some((role, lines, start)) = current.take() {
        let body = lines.join("\n");
        if body.is_empty() {
            return Err(RoleplayError::Parse {
                name: name.to_string(),
                line: start,
                message: "message body is empty".into(),
            });
        }
        messages.push(TemplateMessage { role, body });
    }
    if messages.is_empty() {
        return Err(RoleplayError::Parse {
            name: name.to_string(),
            line: 1,
            message: "template has no @@ markers".into(),
        });
    }
    Ok(Template { name: name.to_string(), messages })
}

/// Single-pass placeholder substitution. `[name]` is replaced from `values`
/// (error if absent), `[[name]]` becomes the literal `[name]`, and inserted
/// values are never rescanned.
pub fn substitute(
    template_name: &str,
    body: &str,
    values: &BTreeMap<&str, String>,
) -> Result<String, RoleplayError> {
    let mut out = String::with_capacity(body.len());
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            if bytes.get(i + 1) == Some(&b'[') {
                let rest = &body[i + 2..];
                let Some(end) = rest.find("]]") else {
                    return Err(RoleplayError::UnterminatedBracket {
                        template: template_name.to_string(),
                        offset: i,
                    });
                };
                out.push('[');
                out.push_str(&rest[..end]);
                out.push(']');
                i += 2 + end + 2;
            } else {
                let rest = &body[i + 1..];
                let Some(end) = rest.find(']') else {
                    return Err(RoleplayError::UnterminatedBracket {
                        template: template_name.to_string(),
                        offset: i,
                    });
                };
                let placeholder = &rest[..end];
                match values.get(placeholder) {
                    Some(value) => out.push_str(value),
                    None => {
                        return Err(RoleplayError::UnknownPlaceholder {
                            template: template_name.to_string(),
                            placeholder: placeholder.to_string(),
                        })
                    }
                }
                i += 1 + end + 1;
            }
        } else {
            let ch = body[i..].chars().next().expect("in-bounds char");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    Ok(out)
}

/// The four templates a domain needs: assistant-player prompt, user-simulator
/// prompt, scripted opening turns, and the judge prompt.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    domain: DomainKind,
    pub assistant: Template,
    pub user: Template,
    pub opening: Template,
    pub reward: Template,
}

impl TemplateSet {
    fn from_sources(
        domain: DomainKind,
        assistant: (&str, &str),
        user: (&str, &str),
        opening: (&str, &str),
        reward: (&str, &str),
    ) -> Result<Self, RoleplayError> {
        Ok(TemplateSet {
            domain,
            assistant: parse_template(assistant.0, assistant.1)?,
            user: parse_template(user.0, user.1)?,
            opening: parse_template(opening.0, opening.1)?,
            reward: parse_template(reward.0, reward.1)?,
        })
    }

    /// The embedded templates for a domain, parsed once.
    pub fn builtin(domain: DomainKind) -> &'static TemplateSet {
        static SETS: OnceLock<[TemplateSet; 3]> = OnceLock::new();
        let all = SETS.get_or_init(|| {
            let build = |domain: DomainKind| {
                let key = domain.key();
                let pick = |suffix: &str| {
                    let name = format!("templates/{key}.{suffix}.txt");
                    EMBEDDED
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(n, text)| (*n, *text))
                        .expect("embedded template present")
                };
                TemplateSet::from_sources(
                    domain,
                    pick("assistant"),
                    pick("user"),
                    pick("opening"),
                    pick("reward"),
                )
                .expect("embedded templates parse")
            };
            [
                build(DomainKind::Negotiation),
                build(DomainKind::EmotionalSupport),
                build(DomainKind::Tutoring),
            ]
        });
        match domain {
            DomainKind::Negotiation => &all[0],
            DomainKind::EmotionalSupport => &all[1],
            DomainKind::Tutoring => &all[2],
        }
    }

    /// Loads `{domain_key}.{assistant,user,opening,reward}.txt` from a
    /// directory, for custom prompt sets.
    pub fn from_dir(dir: &Path, domain: DomainKind) -> Result<Self, RoleplayError> {
        let key = domain.key();
        let read = |suffix: &str| -> Result<(String, String), RoleplayError> {
            let path = dir.join(format!("{key}.{suffix}.txt"));
            let text = std::fs::read_to_string(&path)?;
            Ok((path.display().to_string(), text))
        };
        let assistant = read("assistant")?;
        let user = read("user")?;
        let opening = read("opening")?;
        let reward = read("reward")?;
        TemplateSet::from_sources(
            domain,
            (&assistant.0, &assistant.1),
            (&user.0, &user.1),
            (&opening.0, &opening.1),
            (&reward.0, &reward.1),
        )
    }

    pub fn domain(&self) -> DomainKind {
        self.domain
    }
}

/// Placeholder values available to every template of a case.
pub fn case_values(case: &CaseProfile) -> BTreeMap<&'static str, String> {
    let mut values = BTreeMap::new();
    match &case.details {
        CaseDetails::Negotiation {
            item_name,
            item_description,
            buyer_target_price,
            seller_target_price,
        } => {
            values.insert("item_name", item_name.clone());
            values.insert("item_description", item_description.clone());
            values.insert("buyer_target_price", buyer_target_price.to_string());
            values.insert("seller_target_price", seller_target_price.to_string());
        }
        CaseDetails::EmotionalSupport { emotion_type, problem_type, situation } => {
            values.insert("emotion_type", emotion_type.clone());
            values.insert("problem_type", problem_type.clone());
            values.insert("situation", situation.clone());
        }
        CaseDetails::Tutoring { exercise, situation } => {
            values.insert("exercise", exercise.clone());
            values.insert("situation", situation.clone());
        }
    }
    values
}

fn render_messages(
    template: &Template,
    values: &BTreeMap<&str, String>,
    action: Option<&StrategyAction>,
) -> Result<Vec<ChatMessage>, RoleplayError> {
    let mut values = values.clone();
    let mut messages = Vec::with_capacity(template.messages.len());
    for message in &template.messages {
        let body = match action {
            Some(action) => {
                values.insert("action", action.instruction.clone());
                message.body.clone()
            }
            // Standard mode drops the whole strategy sentence, leaving the
            // rest of the instruction byte-identical.
            None => message.body.replace("[action] ", "").replace("[action]", ""),
        };
        let content = substitute(&template.name, &body, &values)?;
        messages.push(ChatMessage { role: message.role, content });
    }
    Ok(messages)
}

fn history_messages(state: &DialogueState, viewpoint: Speaker) -> Vec<ChatMessage> {
    state
        .turns
        .iter()
        .map(|turn| {
            let role =
                if turn.speaker == viewpoint { ChatRole::Assistant } else { ChatRole::User };
            ChatMessage { role, content: turn.text.clone() }
        })
        .collect()
}

fn check_domains(
    templates: &TemplateSet,
    case: &CaseProfile,
    action: Option<&StrategyAction>,
) -> Result<(), RoleplayError> {
    let case_domain = case.domain();
    if templates.domain != case_domain {
        return Err(RoleplayError::TemplateDomainMismatch {
            templates: templates.domain,
            case: case_domain,
        });
    }
    if let Some(action) = action {
        if action.domain != case_domain {
            return Err(RoleplayError::DomainMismatch { action: action.domain, case: case_domain });
        }
    }
    Ok(())
}

/// The assistant player's full prompt: role preamble, task instruction with
/// the strategy slot filled (`None` renders standard mode), then the whole
/// dialogue so far with this player's turns as assistant messages.
pub fn build_assistant_prompt(
    case: &CaseProfile,
    action: Option<&StrategyAction>,
    state: &DialogueState,
    templates: &TemplateSet,
) -> Result<Vec<ChatMessage>, RoleplayError> {
    check_domains(templates, case, action)?;
    let values = case_values(case);
    let mut messages = render_messages(&templates.assistant, &values, action)?;
    messages.extend(history_messages(state, Speaker::System));
    Ok(messages)
}

/// The user simulator's full prompt: role preamble and task instruction with
/// no strategy slot, then the dialogue so far with the simulated user's own
/// turns as assistant messages.
pub fn build_user_prompt(
    case: &CaseProfile,
    state: &DialogueState,
    templates: &TemplateSet,
) -> Result<Vec<ChatMessage>, RoleplayError> {
    check_domains(templates, case, None)?;
    let values = case_values(case);
    let mut messages = render_messages(&templates.user, &values, None)?;
    messages.extend(history_messages(state, Speaker::User));
    Ok(messages)
}

/// The scripted turns that precede the first policy decision: buyer greeting
/// and seller listing price, the patient's situation, or the teacher's
/// exercise and the student's situation.
pub fn opening_exchange(
    case: &CaseProfile,
    templates: &TemplateSet,
) -> Result<Vec<Turn>, RoleplayError> {
    check_domains(templates, case, None)?;
    let values = case_values(case);
    let mut turns = Vec::with_capacity(templates.opening.messages.len());
    for (index, message) in templates.opening.messages.iter().enumerate() {
        let text = substitute(&templates.opening.name, &message.body, &values)?;
        let mut turn = match message.role {
            ChatRole::System => Turn::system(text, None),
            ChatRole::User => Turn::user(text),
            ChatRole::Assistant => return Err(RoleplayError::BadOpeningRole),
        };
        turn.index = index as u32;
        turns.push(turn);
    }
    Ok(turns)
}

/// Trims a raw completion and strips at most one leading speaker label the
/// model may have echoed ("Seller: ...").
fn clean_completion(raw: &str, speakers: &SpeakerLabels) -> String {
    let mut text = raw.trim();
    for label in [&speakers.system, &speakers.user] {
        if let Some(rest) = text.strip_prefix(&format!("{label}:")) {
            text = rest.trim_start();
            break;
        }
    }
    text.to_string()
}

fn generate_turn(
    gateway: &Gateway,
    messages: Vec<ChatMessage>,
    max_new_tokens: u32,
    speakers: &SpeakerLabels,
) -> Result<String, RoleplayError> {
    let request = CompletionRequest {
        messages,
        temperature: 0.0,
        max_new_tokens,
        n_samples: 1,
        seed: None,
    };
    for _ in 0..2 {
        let outputs = gateway.complete(&request)?;
        let text = clean_completion(&outputs[0], speakers);
        if !text.is_empty() {
            return Ok(text);
        }
    }
    Err(RoleplayError::EmptyCompletion)
}

/// One deterministic assistant-player turn (temperature 0, single sample).
/// An empty completion is retried once, then reported as an error.
#[allow(clippy::too_many_arguments)]
pub fn generate_assistant_turn(
    gateway: &Gateway,
    case: &CaseProfile,
    action: Option<&StrategyAction>,
    state: &DialogueState,
    templates: &TemplateSet,
    speakers: &SpeakerLabels,
    max_new_tokens: u32,
) -> Result<Turn, RoleplayError> {
    let messages = build_assistant_prompt(case, action, state, templates)?;
    let text = generate_turn(gateway, messages, max_new_tokens, speakers)?;
    Ok(Turn::system(text, action.cloned()))
}

/// One deterministic user-simulator turn; never carries a strategy.
pub fn generate_user_turn(
    gateway: &Gateway,
    case: &CaseProfile,
    state: &DialogueState,
    templates: &TemplateSet,
    speakers: &SpeakerLabels,
    max_new_tokens: u32,
) -> Result<Turn, RoleplayError> {
    let messages = build_user_prompt(case, state, templates)?;
    let text = generate_turn(gateway, messages, max_new_tokens, speakers)?;
    Ok(Turn::user(text))
}
