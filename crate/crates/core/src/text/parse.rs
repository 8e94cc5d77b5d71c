//! Dependency parses and the CoNLL-U-like TSV reader used to ingest parses
//! produced by an external parser.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head of a token: either the artificial root or another token (0-based).
///
/// Serialized with the CoNLL-U convention: `0` for the root, `i + 1` for
/// token `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "u32", into = "u32")]
pub enum Head {
    Root,
    Token(usize),
}

impl From<u32> for Head {
    fn from(v: u32) -> Self {
        match v {
            0 => Head::Root,
            i => Head::Token(i as usize - 1),
        }
    }
}

impl From<Head> for u32 {
    fn from(h: Head) -> u32 {
        match h {
            Head::Root => 0,
            Head::Token(i) => i as u32 + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub form: String,
    pub upos: String,
    pub head: Head,
    pub deprel: String,
}

impl Token {
    pub fn new(form: &str, upos: &str, head: Head, deprel: &str) -> Self {
        Self {
            form: form.to_string(),
            upos: upos.to_string(),
            head,
            deprel: deprel.to_string(),
        }
    }

    pub fn is_noun(&self) -> bool {
        self.upos == "NOUN" || self.upos == "PROPN"
    }
}

/// A validated dependency tree: one root, in-range heads, no cycles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Token>", into = "Vec<Token>")]
pub struct DependencyParse {
    tokens: Vec<Token>,
    root: usize,
}

impl DependencyParse {
    pub fn new(tokens: Vec<Token>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidParse("parse has no tokens".into()));
        }
        let roots: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.head == Head::Root)
            .map(|(i, _)| i)
            .collect();
        if roots.len() != 1 {
            return Err(Error::InvalidParse(format!(
                "expected exactly one root, found {}",
                roots.len()
            )));
        }
        for (i, t) in tokens.iter().enumerate() {
            if let Head::Token(h) = t.head {
                if h >= tokens.len() {
                    return Err(Error::InvalidParse(format!(
                        "token {} ({}) has head {} out of range",
                        i + 1,
                        t.form,
                        h + 1
                    )));
                }
                if h == i {
                    return Err(Error::InvalidParse(format!(
                        "token {} ({}) is its own head",
                        i + 1,
                        t.form
                    )));
                }
            }
        }
        // Every token must reach the root within n steps.
        for start in 0..tokens.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Head::Token(h) = tokens[cur].head {
                cur = h;
                steps += 1;
                if steps > tokens.len() {
                    return Err(Error::InvalidParse(format!(
                        "cycle through token {} ({})",
                        start + 1,
                        tokens[start].form
                    )));
                }
            }
        }
        Ok(Self { root: roots[0], tokens })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Direct dependents of `i`, in surface order.
    pub fn children(&self, i: usize) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.head == Head::Token(i))
            .map(|(j, _)| j)
            .collect()
    }

    pub fn forms(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.form.as_str())
    }

    /// Space-joined surface text.
    pub fn text(&self) -> String {
        self.forms().collect::<Vec<_>>().join(" ")
    }

    pub fn span_text(&self, range: std::ops::Range<usize>) -> String {
        self.tokens[range]
            .iter()
            .map(|t| t.form.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<Token>> for DependencyParse {
    type Error = Error;

    fn try_from(tokens: Vec<Token>) -> Result<Self> {
        DependencyParse::new(tokens)
    }
}

impl From<DependencyParse> for Vec<Token> {
    fn from(p: DependencyParse) -> Self {
        p.tokens
    }
}

/// Reads blank-line separated sentences of tab-separated columns.
///
/// Accepts the five-column layout `index form upos head deprel` as well as
/// full ten-column CoNLL-U. Lines starting with `#` are comments; multiword
/// ranges (`1-2`) and empty nodes (`1.1`) are skipped.
pub fn read_conllu(input: &str) -> Result<Vec<DependencyParse>> {
    let mut sentences = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut start_line = 1;

    let finish = |tokens: &mut Vec<Token>, line: usize, out: &mut Vec<DependencyParse>| {
        if tokens.is_empty() {
            return Ok(());
        }
        let parse = DependencyParse::new(std::mem::take(tokens)).map_err(|e| {
            Error::InvalidParse(format!("sentence starting at line {line}: {e}"))
        })?;
        out.push(parse);
        Ok::<_, Error>(())
    };

    for (n, line) in input.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            finish(&mut current, start_line, &mut sentences)?;
            start_line = lineno + 1;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (id, form, upos, head, deprel) = match cols.len() {
            5 => (cols[0], cols[1], cols[2], cols[3], cols[4]),
            10 => (cols[0], cols[1], cols[3], cols[6], cols[7]),
            k => {
                return Err(Error::InvalidParse(format!(
                    "line {lineno}: expected 5 or 10 tab-separated columns, found {k}"
                )))
            }
        };
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let id: usize = id
            .parse()
            .map_err(|_| Error::InvalidParse(format!("line {lineno}: bad token index {id:?}")))?;
        if id != current.len() + 1 {
            return Err(Error::InvalidParse(format!(
                "line {lineno}: token index {id} out of sequence"
            )));
        }
        let head: u32 = head
            .parse()
            .map_err(|_| Error::InvalidParse(format!("line {lineno}: bad head index {head:?}")))?;
        current.push(Token::new(form, upos, Head::from(head), deprel));
    }
    finish(&mut current, start_line, &mut sentences)?;
    Ok(sentences)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(form: &str, upos: &str, head: u32, deprel: &str) -> Token {
        Token::new(form, upos, Head::from(head), deprel)
    }

    #[test]
    fn rejects_two_roots() {
        let err = DependencyParse::new(vec![tok("a", "NOUN", 0, "root"), tok("b", "NOUN", 0, "root")]);
        assert!(matches!(err, Err(Error::InvalidParse(_))));
    }

    #[test]
    fn rejects_cycle() {
        let err = DependencyParse::new(vec![
            tok("a", "NOUN", 0, "root"),
            tok("b", "NOUN", 3, "nmod"),
            tok("c", "NOUN", 2, "nmod"),
        ]);
        assert!(matches!(err, Err(Error::InvalidParse(_))));
    }

    #[test]
    fn rejects_out_of_range_head() {
        let err = DependencyParse::new(vec![tok("a", "NOUN", 0, "root"), tok("b", "DET", 7, "det")]);
        assert!(matches!(err, Err(Error::InvalidParse(_))));
    }

    #[test]
    fn reads_five_and_ten_column_blocks() {
        let input = "# sent 1\n1\tthe\tDET\t2\tdet\n2\tbull\tNOUN\t0\troot\n\n\
                     1\tman\tman\tNOUN\t_\t_\t0\troot\t_\t_\n";
        let parses = read_conllu(input).unwrap();
        assert_eq!(parses.len(), 2);
        assert_eq!(parses[0].text(), "the bull");
        assert_eq!(parses[0].root(), 1);
        assert_eq!(parses[1].tokens()[0].upos, "NOUN");
    }

    #[test]
    fn reports_line_of_bad_record() {
        let err = read_conllu("1\tthe\tDET\tx\tdet\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }

    #[test]
    fn serde_uses_conllu_heads() {
        let p = DependencyParse::new(vec![tok("the", "DET", 2, "det"), tok("bull", "NOUN", 0, "root")]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert!(json.contains("\"head\":2"));
        assert!(json.contains("\"head\":0"));
        let back: DependencyParse = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        let bad = json.replace("\"head\":2", "\"head\":0");
        assert!(serde_json::from_str::<DependencyParse>(&bad).is_err());
    }
}
