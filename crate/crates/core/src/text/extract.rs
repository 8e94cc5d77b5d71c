//! Main-object extraction over a dependency parse, with rollback to the
//! whole expression when no noun is reachable from the root.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use super::parse::DependencyParse;
use crate::error::{argument, Result};

/// Left dependents that stay attached to the head noun.
const PHRASE_DEPRELS: [&str; 4] = ["det", "amod", "compound", "nummod"];

pub const PROMPT_PREFIX: &str = "A Photo of ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MainObjectResult {
    pub phrase: String,
    pub rolled_back: bool,
}

pub fn extract_main_object(parse: &DependencyParse) -> MainObjectResult {
    match find_head_noun(parse) {
        Some(head) => MainObjectResult {
            phrase: parse.span_text(noun_phrase_span(parse, head)),
            rolled_back: false,
        },
        None => MainObjectResult {
            phrase: parse.text(),
            rolled_back: true,
        },
    }
}

/// The root when it is a noun, else the nearest noun below it: breadth-first
/// by depth, surface order within a depth.
fn find_head_noun(parse: &DependencyParse) -> Option<usize> {
    let tokens = parse.tokens();
    let root = parse.root();
    if tokens[root].is_noun() {
        return Some(root);
    }
    let mut queue: VecDeque<usize> = parse.children(root).into();
    while let Some(i) = queue.pop_front() {
        if tokens[i].is_noun() {
            return Some(i);
        }
        queue.extend(parse.children(i));
    }
    None
}

fn noun_phrase_span(parse: &DependencyParse, head: usize) -> std::ops::Range<usize> {
    let tokens = parse.tokens();
    let mut start = head;
    while start > 0 {
        let t = &tokens[start - 1];
        let base = t.deprel.split(':').next().unwrap_or("");
        if t.head == super::parse::Head::Token(head) && PHRASE_DEPRELS.contains(&base) {
            start -= 1;
        } else {
            break;
        }
    }
    start..head + 1
}

pub fn build_prompt(object_phrase: &str) -> Result<String> {
    if object_phrase.trim().is_empty() {
        return argument("object phrase must be nonempty");
    }
    Ok(format!("{PROMPT_PREFIX}{object_phrase}"))
}
