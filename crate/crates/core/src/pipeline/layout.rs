//! Pipeline layout DSL.
//!
//! ```text
//! layout := item+
//! item   := unit ['*' INT] | '|'
//! unit   := 'E' | 't' | 'm' | 'L' | '(' item+ ')'
//! ```
//!
//! `E` embedding, `t` decoder layer, `m` MTP block, `L` loss. `|` closes a
//! stage; a trailing unterminated stage is closed implicitly. Stage `s` runs
//! on pipeline rank `s % pp` as virtual chunk `s / pp`.

use std::fmt;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
pub enum Symbol {
    #[serde(rename = "E")]
    Embedding,
    #[serde(rename = "t")]
    Decoder,
    #[serde(rename = "m")]
    Mtp,
    #[serde(rename = "L")]
    Loss,
}

impl Symbol {
    pub fn as_char(self) -> char {
        match self {
            Symbol::Embedding => 'E',
            Symbol::Decoder => 't',
            Symbol::Mtp => 'm',
            Symbol::Loss => 'L',
        }
    }

    fn from_byte(b: u8) -> Option<Symbol> {
        match b {
            b'E' => Some(Symbol::Embedding),
            b't' => Some(Symbol::Decoder),
            b'm' => Some(Symbol::Mtp),
            b'L' => Some(Symbol::Loss),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Layout {
    pub stages: Vec<Vec<Symbol>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tok {
    Sym(Symbol),
    Sep,
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::LayoutSyntax {
            offset: self.pos,
            message: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    /// item+ until end of input or a closing paren.
    fn items(&mut self, out: &mut Vec<Tok>, nested: bool) -> Result<()> {
        let start = out.len();
        let mut any = false;
        loop {
            match self.peek() {
                None => break,
                Some(b')') if nested => break,
                Some(_) => {
                    self.item(out)?;
                    any = true;
                }
            }
        }
        if !any {
            return self.err("expected at least one item");
        }
        debug_assert!(out.len() >= start);
        Ok(())
    }

    fn item(&mut self, out: &mut Vec<Tok>) -> Result<()> {
        let c = self.peek().expect("caller checked");
        if c == b'|' {
            self.pos += 1;
            out.push(Tok::Sep);
            return Ok(());
        }
        let mut unit = Vec::new();
        if let Some(s) = Symbol::from_byte(c) {
            self.pos += 1;
            unit.push(Tok::Sym(s));
        } else if c == b'(' {
            self.pos += 1;
            self.items(&mut unit, true)?;
            if self.peek() != Some(b')') {
                return self.err("unclosed '('");
            }
            self.pos += 1;
        } else if c == b'*' {
            return self.err("'*' without a preceding unit");
        } else if c == b')' {
            return self.err("unmatched ')'");
        } else {
            return self.err(format!("unexpected character '{}'", c as char));
        }
        let mut reps = 1usize;
        if self.peek() == Some(b'*') {
            self.pos += 1;
            self.skip_ws();
            let begin = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if begin == self.pos {
                return self.err("expected repeat count after '*'");
            }
            let text = std::str::from_utf8(&self.src[begin..self.pos]).expect("ascii digits");
            reps = match text.parse::<usize>() {
                Ok(n) if n > 0 => n,
                _ => {
                    self.pos = begin;
                    return self.err("repeat count must be a positive integer");
                }
            };
        }
        for _ in 0..reps {
            out.extend_from_slice(&unit);
        }
        Ok(())
    }
}

/// Parse layout text into stages.
pub fn parse(text: &str) -> Result<Layout> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
    };
    let mut toks = Vec::new();
    p.items(&mut toks, false)?;
    if p.peek().is_some() {
        return p.err("unmatched ')'");
    }
    let mut stages = Vec::new();
    let mut cur = Vec::new();
    let mut open = false;
    for t in toks {
        match t {
            Tok::Sym(s) => {
                cur.push(s);
                open = true;
            }
            Tok::Sep => {
                stages.push(std::mem::take(&mut cur));
                open = false;
            }
        }
    }
    if open {
        stages.push(cur);
    }
    Ok(Layout { stages })
}

fn render_stage(stage: &[Symbol], out: &mut String) {
    let mut i = 0;
    while i < stage.len() {
        let s = stage[i];
        let mut j = i;
        while j < stage.len() && stage[j] == s {
            j += 1;
        }
        let run = j - i;
        if run >= 3 {
            out.push(s.as_char());
            out.push('*');
            out.push_str(&run.to_string());
        } else {
            for _ in 0..run {
                out.push(s.as_char());
            }
        }
        i = j;
    }
}

/// Canonical text: symbol runs of three or more use `*n`, runs of two or
/// more identical stages are grouped as `(..|)*n`, no trailing separator.
pub fn render(layout: &Layout) -> String {
    let st = &layout.stages;
    let mut out = String::new();
    let mut i = 0;
    while i < st.len() {
        let mut j = i;
        while j < st.len() && st[j] == st[i] {
            j += 1;
        }
        let run = j - i;
        if run >= 2 {
            out.push('(');
            render_stage(&st[i], &mut out);
            out.push_str("|)*");
            out.push_str(&run.to_string());
        } else {
            render_stage(&st[i], &mut out);
            if j < st.len() {
                out.push('|');
            }
        }
        i = j;
    }
    out
}

/// Canonical form of layout text.
pub fn normalize(text: &str) -> Result<String> {
    Ok(render(&parse(text)?))
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&render(self))
    }
}

impl Layout {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn count(&self, sym: Symbol) -> usize {
        self.stages
            .iter()
            .map(|s| s.iter().filter(|&&x| x == sym).count())
            .sum()
    }

    /// Check against a model's decoder count and the expected pp*vpp stages.
    pub fn check_against(&self, num_layers: usize, expected_stages: usize) -> Result<()> {
        if self.num_stages() != expected_stages {
            return Err(Error::LayoutArity {
                expected: expected_stages,
                actual: self.num_stages(),
            });
        }
        let t = self.count(Symbol::Decoder);
        if t != num_layers {
            return Err(Error::InvalidArgument(format!(
                "layout has {t} decoder layers, model has {num_layers}"
            )));
        }
        let last = self.stages.len().saturating_sub(1);
        for (i, s) in self.stages.iter().enumerate() {
            if i != 0 && s.contains(&Symbol::Embedding) {
                return Err(Error::InvalidArgument(format!(
                    "embedding placed in stage {i}, only stage 0 may hold it"
                )));
            }
            if i != last && s.contains(&Symbol::Loss) {
                return Err(Error::InvalidArgument(format!(
                    "loss placed in stage {i}, only the last stage may hold it"
                )));
            }
        }
        Ok(())
    }

    /// Global decoder-layer indices held by each stage.
    pub fn decoder_indices(&self) -> Vec<Vec<usize>> {
        let mut next = 0;
        self.stages
            .iter()
            .map(|s| {
                let n = s.iter().filter(|&&x| x == Symbol::Decoder).count();
                let v: Vec<usize> = (next..next + n).collect();
                next += n;
                v
            })
            .collect()
    }

    /// (pp_rank, vpp_rank) of a stage.
    pub fn stage_position(stage: usize, pp: usize) -> (usize, usize) {
        (stage % pp, stage / pp)
    }
}

/// One row of a per-rank layout table: a range of pipeline ranks and the
/// contents of each of their virtual stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TableRow {
    pub first_rank: usize,
    pub last_rank: usize,
    pub per_vpp: Vec<Vec<Symbol>>,
}

/// Build a layout from per-rank rows. Every rank must be covered exactly once.
pub fn layout_from_table(rows: &[TableRow], pp: usize, vpp: usize) -> Result<Layout> {
    let mut stages: Vec<Option<Vec<Symbol>>> = vec![None; pp * vpp];
    for row in rows {
        if row.first_rank > row.last_rank || row.last_rank >= pp {
            return Err(Error::InvalidArgument(format!(
                "rank range {}..={} outside pp={pp}",
                row.first_rank, row.last_rank
            )));
        }
        if row.per_vpp.len() != vpp {
            return Err(Error::LayoutArity {
                expected: vpp,
                actual: row.per_vpp.len(),
            });
        }
        for r in row.first_rank..=row.last_rank {
            for (v, content) in row.per_vpp.iter().enumerate() {
                let s = v * pp + r;
                if stages[s].is_some() {
                    return Err(Error::InvalidArgument(format!("rank {r} listed twice")));
                }
                stages[s] = Some(content.clone());
            }
        }
    }
    let stages = stages
        .into_iter()
        .enumerate()
        .map(|(s, c)| {
            c.ok_or_else(|| Error::InvalidArgument(format!("rank {} has no row", s % pp)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout { stages })
}

/// The asymmetric DeepSeek-V3 placement for PP=16, VPP=2: the first stage
/// carries the embedding and the three dense layers, MTP and loss get
/// standalone stages at the tail.
pub fn deepseek_pp16_vpp2_rows() -> Vec<TableRow> {
    use Symbol::*;
    let t2 = vec![Decoder, Decoder];
    vec![
        TableRow {
            first_rank: 0,
            last_rank: 0,
            per_vpp: vec![vec![Embedding, Decoder, Decoder, Decoder], t2.clone()],
        },
        TableRow {
            first_rank: 1,
            last_rank: 13,
            per_vpp: vec![t2.clone(), t2.clone()],
        },
        TableRow {
            first_rank: 14,
            last_rank: 14,
            per_vpp: vec![t2.clone(), vec![Mtp]],
        },
        TableRow {
            first_rank: 15,
            last_rank: 15,
            per_vpp: vec![t2, vec![Loss]],
        },
    ]
}

/// Even decoder split over `stages`, embedding on the first stage and the
/// MTP block and loss on the last. Earlier stages take the remainder.
pub fn uniform_split(num_layers: usize, stages: usize, embedding: bool, mtp: bool) -> Layout {
    let stages_n = stages.max(1);
    let base = num_layers / stages_n;
    let extra = num_layers % stages_n;
    let mut out = Vec::with_capacity(stages_n);
    for s in 0..stages_n {
        let mut st = Vec::new();
        if s == 0 && embedding {
            st.push(Symbol::Embedding);
        }
        let n = base + usize::from(s < extra);
        st.extend(std::iter::repeat_n(Symbol::Decoder, n));
        if s + 1 == stages_n {
            if mtp {
                st.push(Symbol::Mtp);
            }
            if embedding {
                st.push(Symbol::Loss);
            }
        }
        out.push(st);
    }
    Layout { stages: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use Symbol::*;

    #[test]
    fn h100_layout() {
        let l = parse("Et*3|(tt|)*29m|L").unwrap();
        assert_eq!(l.num_stages(), 32);
        assert_eq!(l.stages[0], vec![Embedding, Decoder, Decoder, Decoder]);
        for s in 1..30 {
            assert_eq!(l.stages[s], vec![Decoder, Decoder]);
        }
        assert_eq!(l.stages[30], vec![Mtp]);
        assert_eq!(l.stages[31], vec![Loss]);
        assert_eq!(l.count(Decoder), 61);
        l.check_against(61, 32).unwrap();
        assert_eq!(render(&l), "Et*3|(tt|)*29m|L");
    }

    #[test]
    fn gb200_layout() {
        let l = parse("Et*4|(tttt|)*14tmL").unwrap();
        assert_eq!(l.num_stages(), 16);
        assert_eq!(l.stages[0].len(), 5);
        assert_eq!(l.stages[15], vec![Decoder, Mtp, Loss]);
        assert_eq!(l.count(Decoder), 61);
        let canon = render(&l);
        assert_eq!(canon, "Et*4|(t*4|)*14tmL");
        assert_eq!(parse(&canon).unwrap(), l);
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        match parse("Et*|t") {
            Err(Error::LayoutSyntax { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("{other:?}"),
        }
        match parse("(tt|*2") {
            Err(Error::LayoutSyntax { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse("tx"),
            Err(Error::LayoutSyntax { offset: 1, .. })
        ));
        assert!(matches!(
            parse("t)"),
            Err(Error::LayoutSyntax { offset: 1, .. })
        ));
        assert!(matches!(
            parse("t*0"),
            Err(Error::LayoutSyntax { offset: 2, .. })
        ));
        assert!(parse("").is_err());
    }

    #[test]
    fn arity_error() {
        let l = parse("Et|t|tL").unwrap();
        assert_eq!(
            l.check_against(3, 4),
            Err(Error::LayoutArity {
                expected: 4,
                actual: 3
            })
        );
        assert!(l.check_against(4, 3).is_err());
    }

    #[test]
    fn misplaced_embedding_or_loss() {
        assert!(parse("t|Et").unwrap().check_against(2, 2).is_err());
        assert!(parse("tL|t").unwrap().check_against(2, 2).is_err());
    }

    #[test]
    fn nested_groups_and_trailing() {
        let l = parse("((t|)*2 m|)*2").unwrap();
        assert_eq!(l.num_stages(), 6);
        assert_eq!(l.stages[2], vec![Mtp]);
        let l = parse("t|").unwrap();
        assert_eq!(l.num_stages(), 1);
    }

    #[test]
    fn table_layout() {
        let l = layout_from_table(&deepseek_pp16_vpp2_rows(), 16, 2).unwrap();
        assert_eq!(l.num_stages(), 32);
        assert_eq!(l.count(Decoder), 61);
        assert_eq!(l.stages[0], vec![Embedding, Decoder, Decoder, Decoder]);
        // rank 14, vpp 1 and rank 15, vpp 1
        assert_eq!(l.stages[30], vec![Mtp]);
        assert_eq!(l.stages[31], vec![Loss]);
        assert_eq!(Layout::stage_position(30, 16), (14, 1));
        l.check_against(61, 32).unwrap();
        assert_eq!(render(&l), "Et*3|(tt|)*29m|L");
    }

    #[test]
    fn table_layout_rejects_gaps() {
        let mut rows = deepseek_pp16_vpp2_rows();
        rows.pop();
        assert!(layout_from_table(&rows, 16, 2).is_err());
    }

    #[test]
    fn uniform() {
        let l = uniform_split(61, 32, true, true);
        assert_eq!(l.count(Decoder), 61);
        assert_eq!(l.stages[0][0], Embedding);
        assert_eq!(l.stages[31].last(), Some(&Loss));
    }
}
