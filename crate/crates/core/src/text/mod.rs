//! Expression handling: dependency parses, main-object extraction, prompt
//! construction and the word-level text encoder.

mod encoder;
mod extract;
mod parse;

pub use encoder::{TextEncoder, TokenBatch, Vocabulary, WordFeatures, PAD_ID, UNK_ID};
pub use extract::{build_prompt, extract_main_object, MainObjectResult, PROMPT_PREFIX};
pub use parse::{read_conllu, DependencyParse, Head, Token};
