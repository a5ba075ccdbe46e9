//! Template action space: verb phrases with object placeholders.
//!
//! An action is `<verb template, arg0, arg1>`; unused arguments are `none`.
//! Filling the `OBJ` placeholders of a template with object names yields the
//! concrete command text the engine understands.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of an object in its game spec's object list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjId(pub usize);

/// Index of a template in its game spec's template list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TplId(pub usize);

pub const PLACEHOLDER: &str = "OBJ";

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("template {template:?} takes {expected} objects, action supplies {found}")]
    ArityMismatch {
        template: TplId,
        expected: u8,
        found: u8,
    },
}

/// A verb phrase with 0-2 `OBJ` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: TplId,
    pub verb: String,
    pub arity: u8,
}

impl Template {
    pub fn new(id: TplId, verb: impl Into<String>, arity: u8) -> Self {
        let verb = verb.into();
        debug_assert_eq!(placeholder_count(&verb), arity as usize);
        Template { id, verb, arity }
    }

    /// Verb words with placeholders included, e.g. `["unlock", "OBJ", "with", "OBJ"]`.
    pub fn words(&self) -> Vec<&str> {
        self.verb.split_whitespace().collect()
    }
}

pub fn placeholder_count(verb: &str) -> usize {
    verb.split_whitespace()
        .filter(|w| *w == PLACEHOLDER)
        .count()
}

/// One instantiated template action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TemplateAction {
    pub template: TplId,
    pub arg0: Option<ObjId>,
    pub arg1: Option<ObjId>,
}

impl TemplateAction {
    pub fn nullary(template: TplId) -> Self {
        TemplateAction {
            template,
            arg0: None,
            arg1: None,
        }
    }

    pub fn unary(template: TplId, arg0: ObjId) -> Self {
        TemplateAction {
            template,
            arg0: Some(arg0),
            arg1: None,
        }
    }

    pub fn binary(template: TplId, arg0: ObjId, arg1: ObjId) -> Self {
        TemplateAction {
            template,
            arg0: Some(arg0),
            arg1: Some(arg1),
        }
    }
}

/// All instantiations of `templates` over `candidates`.
///
/// Order is deterministic: template order, then arg0, then arg1 in candidate
/// order. Arity-2 templates take ordered pairs of distinct objects.
pub fn enumerate_actions(templates: &[Template], candidates: &[ObjId]) -> Vec<TemplateAction> {
    let mut out = Vec::new();
    for t in templates {
        match t.arity {
            0 => out.push(TemplateAction::nullary(t.id)),
            1 => {
                for &o in candidates {
                    out.push(TemplateAction::unary(t.id, o));
                }
            }
            2 => {
                for &a in candidates {
                    for &b in candidates {
                        if a != b {
                            out.push(TemplateAction::binary(t.id, a, b));
                        }
                    }
                }
            }
            _ => unreachable!("arity is 0..=2"),
        }
    }
    out
}

/// Substitute placeholders left-to-right with the action's object names.
pub fn render(
    action: &TemplateAction,
    templates: &[Template],
    object_names: &[String],
) -> Result<String, ActionError> {
    let template = &templates[action.template.0];
    let found = action.arg0.is_some() as u8 + action.arg1.is_some() as u8;
    if found != template.arity {
        return Err(ActionError::ArityMismatch {
            template: template.id,
            expected: template.arity,
            found,
        });
    }
    let mut args = [action.arg0, action.arg1].into_iter().flatten();
    let words: Vec<String> = template
        .words()
        .iter()
        .map(|w| {
            if *w == PLACEHOLDER {
                object_names[args.next().expect("arity checked").0].clone()
            } else {
                w.to_string()
            }
        })
        .collect();
    Ok(words.join(" "))
}

/// Parse a command string back into a template action, if any template and
/// object names match. The inverse of [`render`] on well-formed commands.
pub fn parse(
    command: &str,
    templates: &[Template],
    object_names: &[String],
) -> Option<TemplateAction> {
    let cmd: Vec<String> = crate::text::tokenize(command);
    let name_tokens: Vec<(Vec<String>, ObjId)> = {
        let mut v: Vec<(Vec<String>, ObjId)> = object_names
            .iter()
            .enumerate()
            .map(|(i, n)| (crate::text::tokenize(n), ObjId(i)))
            .collect();
        v.sort_by(|a, b| b.0.len().cmp(&a.0.len()));
        v
    };
    'tpl: for t in templates {
        let words = t.words();
        let mut pos = 0;
        let mut args: Vec<ObjId> = Vec::new();
        for w in &words {
            if *w == PLACEHOLDER {
                let mut matched = false;
                for (name, id) in &name_tokens {
                    let end = pos + name.len();
                    if end <= cmd.len() && cmd[pos..end].iter().zip(name).all(|(a, b)| a == b) {
                        args.push(*id);
                        pos = end;
                        matched = true;
                        break;
                    }
                }
                if !matched {
                    continue 'tpl;
                }
            } else if pos < cmd.len() && cmd[pos] == *w {
                pos += 1;
            } else {
                continue 'tpl;
            }
        }
        if pos != cmd.len() {
            continue;
        }
        let action = match t.arity {
            0 => TemplateAction::nullary(t.id),
            1 => TemplateAction::unary(t.id, args[0]),
            2 => {
                if args[0] == args[1] {
                    continue;
                }
                TemplateAction::binary(t.id, args[0], args[1])
            }
            _ => continue,
        };
        return Some(action);
    }
    None
}
