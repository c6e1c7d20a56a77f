//! Binary parse trees and their canonical text form.
//!
//! Leaves print as `t<code>`, internal nodes as `(<nonterminal> <left> <right>)`
//! with nonterminals numbered from 1 (1 is the start symbol). Two trees are
//! equal exactly when their canonical strings are equal.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ParseTree {
    Leaf(u32),
    Node {
        /// 0-based nonterminal index.
        nonterminal: usize,
        left: Box<ParseTree>,
        right: Box<ParseTree>,
    },
}

/// Terminal codes dominated by a subtree.
pub type CoverSet = BTreeSet<u32>;

impl ParseTree {
    pub fn node(nonterminal: usize, left: ParseTree, right: ParseTree) -> Self {
        ParseTree::Node {
            nonterminal,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn canonical_form(&self) -> String {
        self.to_string()
    }

    pub fn leaves(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<u32>) {
        match self {
            ParseTree::Leaf(t) => out.push(*t),
            ParseTree::Node { left, right, .. } => {
                left.collect_leaves(out);
                right.collect_leaves(out);
            }
        }
    }

    pub fn cover(&self) -> CoverSet {
        self.leaves().into_iter().collect()
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseTree::Leaf(t) => write!(f, "t{t}"),
            ParseTree::Node {
                nonterminal,
                left,
                right,
            } => write!(f, "({} {left} {right})", nonterminal + 1),
        }
    }
}

impl FromStr for ParseTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut parser = TreeParser { src: s, pos: 0 };
        let tree = parser.tree()?;
        if parser.pos != s.len() {
            return Err(parser.error("trailing input"));
        }
        Ok(tree)
    }
}

struct TreeParser<'a> {
    src: &'a str,
    pos: usize,
}

impl TreeParser<'_> {
    fn error(&self, what: &str) -> Error {
        Error::Argument(format!(
            "bad canonical tree {:?} at byte {}: {what}",
            self.src, self.pos
        ))
    }

    fn number(&mut self) -> Result<u64, Error> {
        let rest = &self.src[self.pos..];
        let len = rest.bytes().take_while(u8::is_ascii_digit).count();
        if len == 0 || (len > 1 && rest.starts_with('0')) {
            return Err(self.error("expected number"));
        }
        self.pos += len;
        rest[..len]
            .parse()
            .map_err(|_| self.error("number out of range"))
    }

    fn expect(&mut self, byte: u8) -> Result<(), Error> {
        if self.src.as_bytes().get(self.pos) == Some(&byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected {:?}", byte as char)))
        }
    }

    fn tree(&mut self) -> Result<ParseTree, Error> {
        match self.src.as_bytes().get(self.pos) {
            Some(b't') => {
                self.pos += 1;
                let code =
                    u32::try_from(self.number()?).map_err(|_| self.error("code out of range"))?;
                Ok(ParseTree::Leaf(code))
            }
            Some(b'(') => {
                self.pos += 1;
                let nt = self.number()?;
                if nt == 0 {
                    return Err(self.error("nonterminals are numbered from 1"));
                }
                self.expect(b' ')?;
                let left = self.tree()?;
                self.expect(b' ')?;
                let right = self.tree()?;
                self.expect(b')')?;
                Ok(ParseTree::node(nt as usize - 1, left, right))
            }
            _ => Err(self.error("expected 't' or '('")),
        }
    }
}
