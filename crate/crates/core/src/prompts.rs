// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt suite generation. Specs are plain data handed to a capture tool
//! as JSON lines; labels are the join key for every downstream analysis.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Identical tokens.
    P1,
    /// Identical tokens plus an intruder.
    P2,
    /// Distinct words.
    P3,
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "P1" => Ok(Self::P1),
            "P2" => Ok(Self::P2),
            "P3" => Ok(Self::P3),
            _ => Err(Error::Usage(format!("unknown condition {s:?}"))),
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Delimiter {
    Space,
    Comma,
}

impl Delimiter {
    pub fn separator(self) -> &'static str {
        match self {
            Self::Space => " ",
            Self::Comma => ", ",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Space => "space",
            Self::Comma => "comma",
        }
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "space" | "SP" | "sp" => Ok(Self::Space),
            "comma" | "CS" | "cs" => Ok(Self::Comma),
            _ => Err(Error::Usage(format!("unknown delimiter {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paraphrase {
    Original,
    HowMany,
    ListFirst,
    Tally,
    Simple,
}

impl Paraphrase {
    pub const ALL: [Paraphrase; 5] = [
        Self::Original,
        Self::HowMany,
        Self::ListFirst,
        Self::Tally,
        Self::Simple,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Original => "original",
            Self::HowMany => "how_many",
            Self::ListFirst => "list_first",
            Self::Tally => "tally",
            Self::Simple => "simple",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Intruder {
    /// First intruder slot; `count` consecutive slots are replaced.
    pub position: usize,
    pub token: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub label: String,
    pub condition: Condition,
    pub n: usize,
    pub delimiter: Delimiter,
    pub paraphrase: Paraphrase,
    pub symbol: String,
    pub intruder: Option<Intruder>,
    pub expected_answer: i64,
    pub text: String,
    /// The list items in order, as they appear in `text`.
    pub payload: Vec<String>,
}

pub const INTRUDER_TOKEN: &str = "banana";
pub const DEFAULT_INTRUDER_POSITION: usize = 5;

/// Common single-token nouns for the distinct-word control.
pub const UNIQUE_WORDS: [&str; 15] = [
    "cat", "dog", "house", "tree", "car", "book", "chair", "table", "river", "cloud", "window",
    "garden", "bread", "horse", "stone",
];

pub const N_SWEEP: [usize; 10] = [5, 6, 7, 8, 9, 10, 11, 12, 15, 20];
pub const PER_N_SET: [usize; 7] = [7, 8, 9, 10, 11, 12, 15];
pub const SYMBOLS: [&str; 8] = ["apple", "cat", "the", "a", "X", "1", "0", "7"];
pub const SWEEP_LIST_LEN: usize = 10;

const SUFFIX: &str = "Respond only with the integer, nothing else.";

fn p1_text(symbol: &str, list: &str) -> String {
    format!("Count the number of times \"{symbol}\" appears in this list: {list}. {SUFFIX}")
}

fn p3_text(list: &str) -> String {
    format!("Count the number of words in this list: {list}. {SUFFIX}")
}

fn label(condition: Condition, delimiter: Delimiter, n: usize) -> String {
    format!("{condition}.{}.n{n}", delimiter.as_str())
}

fn repeated_payload(symbol: &str, n: usize, intruder: Option<&Intruder>) -> Vec<String> {
    (0..n)
        .map(|i| match intruder {
            Some(x) if (x.position..x.position + x.count).contains(&i) => x.token.clone(),
            _ => symbol.to_string(),
        })
        .collect()
}

fn check_n_symbol(n: usize, symbol: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("n must be at least 1".into()));
    }
    if symbol.is_empty() {
        return Err(Error::Usage("symbol must be nonempty".into()));
    }
    Ok(())
}

fn repeated_spec(
    condition: Condition,
    n: usize,
    delimiter: Delimiter,
    symbol: &str,
    intruder: Option<Intruder>,
) -> Result<PromptSpec> {
    check_n_symbol(n, symbol)?;
    if let Some(x) = &intruder {
        if x.count == 0 || x.position + x.count > n {
            return Err(Error::Usage(format!(
                "intruder span {}..{} outside a list of {n}",
                x.position,
                x.position + x.count
            )));
        }
    }
    let payload = repeated_payload(symbol, n, intruder.as_ref());
    let list = payload.join(delimiter.separator());
    let expected_answer = (n - intruder.as_ref().map_or(0, |x| x.count)) as i64;
    Ok(PromptSpec {
        label: label(condition, delimiter, n),
        condition,
        n,
        delimiter,
        paraphrase: Paraphrase::Original,
        symbol: symbol.to_string(),
        intruder,
        expected_answer,
        text: p1_text(symbol, &list),
        payload,
    })
}

/// Builds one prompt of the given condition. P2 puts a single intruder at
/// slot 5 (or the last slot for shorter lists).
pub fn gen_condition(
    condition: Condition,
    n: usize,
    delimiter: Delimiter,
    symbol: &str,
) -> Result<PromptSpec> {
    check_n_symbol(n, symbol)?;
    match condition {
        Condition::P1 => repeated_spec(condition, n, delimiter, symbol, None),
        Condition::P2 => {
            if n < 2 {
                return Err(Error::Usage("P2 needs at least 2 list slots".into()));
            }
            let intruder = Intruder {
                position: DEFAULT_INTRUDER_POSITION.min(n - 1),
                token: INTRUDER_TOKEN.into(),
                count: 1,
            };
            repeated_spec(condition, n, delimiter, symbol, Some(intruder))
        }
        Condition::P3 => {
            if n > UNIQUE_WORDS.len() {
                return Err(Error::Usage(format!(
                    "P3 supports at most {} distinct words",
                    UNIQUE_WORDS.len()
                )));
            }
            let payload: Vec<String> = UNIQUE_WORDS[..n].iter().map(|w| w.to_string()).collect();
            let list = payload.join(delimiter.separator());
            Ok(PromptSpec {
                label: label(condition, delimiter, n),
                condition,
                n,
                delimiter,
                paraphrase: Paraphrase::Original,
                symbol: symbol.to_string(),
                intruder: None,
                expected_answer: n as i64,
                text: p3_text(&list),
                payload,
            })
        }
    }
}

/// Repeated-token prompts for `n` in 3..=15 followed by distinct-word prompts
/// for `n` in 3..=13, the datasets behind the count probes.
pub fn gen_probe_suite() -> Vec<PromptSpec> {
    let mut out = Vec::with_capacity(24);
    for n in 3..=15 {
        let mut s = gen_condition(Condition::P1, n, Delimiter::Space, "apple").expect("valid n");
        s.label = format!("probe.repeated.n{n:02}");
        out.push(s);
    }
    for n in 3..=13 {
        let mut s = gen_condition(Condition::P3, n, Delimiter::Space, "apple").expect("valid n");
        s.label = format!("probe.unique.n{n:02}");
        out.push(s);
    }
    out
}

/// Paraphrase templates keyed by label. `{symbol}` and `{list}` are
/// substituted; the rest of the text is opaque to the analyses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParaphraseTemplates(pub BTreeMap<Paraphrase, String>);

impl Default for ParaphraseTemplates {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert(
            Paraphrase::Original,
            format!(
                "Count the number of times \"{{symbol}}\" appears in this list: {{list}}. {SUFFIX}"
            ),
        );
        m.insert(
            Paraphrase::HowMany,
            format!("How many times does \"{{symbol}}\" appear in this list: {{list}}? {SUFFIX}"),
        );
        m.insert(
            Paraphrase::ListFirst,
            format!("List: {{list}}. Count the number of times \"{{symbol}}\" appears in the list above. {SUFFIX}"),
        );
        m.insert(
            Paraphrase::Tally,
            format!("Tally the occurrences of \"{{symbol}}\" in this list: {{list}}. {SUFFIX}"),
        );
        m.insert(
            Paraphrase::Simple,
            "How many \"{symbol}\" are here: {list}? Answer with a number.".into(),
        );
        Self(m)
    }
}

impl ParaphraseTemplates {
    pub fn render(&self, p: Paraphrase, symbol: &str, list: &str) -> Result<String> {
        let t = self
            .0
            .get(&p)
            .ok_or_else(|| Error::Config(format!("no template for paraphrase {}", p.as_str())))?;
        if !t.contains("{list}") {
            return Err(Error::Config(format!(
                "template for {} lacks a {{list}} placeholder",
                p.as_str()
            )));
        }
        Ok(t.replace("{symbol}", symbol).replace("{list}", list))
    }
}

pub fn gen_paraphrase(
    p: Paraphrase,
    n: usize,
    symbol: &str,
    templates: &ParaphraseTemplates,
) -> Result<PromptSpec> {
    let mut s = gen_condition(Condition::P1, n, Delimiter::Space, symbol)?;
    s.text = templates.render(p, symbol, &s.payload.join(" "))?;
    s.paraphrase = p;
    s.label = format!("paraphrase.{}.n{n}", p.as_str());
    Ok(s)
}

/// Every behavioral sweep: `n`-sweep, per-`n` writer set, intruder position
/// and count, symbols, paraphrases, and two edge cases.
pub fn gen_sweeps() -> Vec<PromptSpec> {
    gen_sweeps_with(&ParaphraseTemplates::default()).expect("default templates are complete")
}

pub fn gen_sweeps_with(templates: &ParaphraseTemplates) -> Result<Vec<PromptSpec>> {
    let mut out = Vec::new();
    for &n in &N_SWEEP {
        let mut s = gen_condition(Condition::P1, n, Delimiter::Space, "apple")?;
        s.label = format!("nsweep.n{n:02}");
        out.push(s);
    }
    for &n in &PER_N_SET {
        let mut s = gen_condition(Condition::P1, n, Delimiter::Space, "apple")?;
        s.label = format!("pern.n{n:02}");
        out.push(s);
    }
    for pos in 0..SWEEP_LIST_LEN {
        let intruder = Intruder {
            position: pos,
            token: INTRUDER_TOKEN.into(),
            count: 1,
        };
        let mut s = repeated_spec(
            Condition::P2,
            SWEEP_LIST_LEN,
            Delimiter::Space,
            "apple",
            Some(intruder),
        )?;
        s.label = format!("intruder.pos{pos}");
        out.push(s);
    }
    for count in 1..=5 {
        let intruder = Intruder {
            position: 0,
            token: INTRUDER_TOKEN.into(),
            count,
        };
        let mut s = repeated_spec(
            Condition::P2,
            SWEEP_LIST_LEN,
            Delimiter::Space,
            "apple",
            Some(intruder),
        )?;
        s.label = format!("intruder.count{count}");
        out.push(s);
    }
    for (i, sym) in SYMBOLS.iter().enumerate() {
        let mut s = gen_condition(Condition::P1, SWEEP_LIST_LEN, Delimiter::Space, sym)?;
        s.label = format!("symbol.{i}.{sym}");
        out.push(s);
    }
    for p in Paraphrase::ALL {
        out.push(gen_paraphrase(p, SWEEP_LIST_LEN, "apple", templates)?);
    }
    let all = Intruder {
        position: 0,
        token: INTRUDER_TOKEN.into(),
        count: SWEEP_LIST_LEN,
    };
    let mut s = repeated_spec(
        Condition::P2,
        SWEEP_LIST_LEN,
        Delimiter::Space,
        "apple",
        Some(all),
    )?;
    s.label = "edge.all_intruders".into();
    out.push(s);
    let mut s = gen_condition(Condition::P1, 1, Delimiter::Space, "apple")?;
    s.label = "edge.single".into();
    out.push(s);
    Ok(out)
}

/// The P1/P2/P3 grid at `n = 10` under both delimiters.
pub fn gen_condition_grid() -> Vec<PromptSpec> {
    let mut out = Vec::new();
    for c in [Condition::P1, Condition::P2, Condition::P3] {
        for d in [Delimiter::Space, Delimiter::Comma] {
            out.push(gen_condition(c, SWEEP_LIST_LEN, d, "apple").expect("valid grid cell"));
        }
    }
    out
}

pub fn write_jsonl<W: Write>(mut w: W, specs: &[PromptSpec]) -> Result<()> {
    for s in specs {
        let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<PromptSpec>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn list_part(text: &str) -> &str {
        let start = text.find(": ").unwrap() + 2;
        let end = text.find(". Respond").unwrap();
        &text[start..end]
    }

    #[test]
    fn p1_template_verbatim() {
        let s = gen_condition(Condition::P1, 10, Delimiter::Space, "apple").unwrap();
        assert_eq!(
            s.text,
            "Count the number of times \"apple\" appears in this list: apple apple apple \
             apple apple apple apple apple apple apple. Respond only with the integer, \
             nothing else."
        );
        assert_eq!(s.expected_answer, 10);
        assert_eq!(s.label, "P1.space.n10");
    }

    #[test]
    fn p2_intruder_at_five() {
        let s = gen_condition(Condition::P2, 10, Delimiter::Space, "apple").unwrap();
        assert_eq!(s.payload[5], "banana");
        assert_eq!(s.payload.iter().filter(|w| *w == "apple").count(), 9);
        assert_eq!(s.expected_answer, 9);
    }

    #[test]
    fn comma_keeps_phrase() {
        let s = gen_condition(Condition::P1, 3, Delimiter::Comma, "apple").unwrap();
        assert!(s.text.contains("in this list: apple, apple, apple."));
        assert!(!s.text.contains("comma-separated"));
    }

    #[test]
    fn minimal_list() {
        let s = gen_condition(Condition::P1, 1, Delimiter::Space, "apple").unwrap();
        assert_eq!(list_part(&s.text), "apple");
        assert_eq!(s.expected_answer, 1);
    }

    #[test]
    fn bad_inputs() {
        assert!(gen_condition(Condition::P1, 0, Delimiter::Space, "apple").is_err());
        assert!(gen_condition(Condition::P1, 3, Delimiter::Space, "").is_err());
        assert!(gen_condition(Condition::P3, 16, Delimiter::Space, "apple").is_err());
        assert!("P4".parse::<Condition>().is_err());
    }

    #[test]
    fn probe_suite_shape() {
        let s = gen_probe_suite();
        assert_eq!(s.len(), 24);
        let rep: Vec<usize> = s
            .iter()
            .filter(|p| p.condition == Condition::P1)
            .map(|p| p.n)
            .collect();
        assert_eq!(rep, (3..=15).collect::<Vec<_>>());
        for p in s.iter().filter(|p| p.condition == Condition::P3) {
            let set: BTreeSet<&str> = list_part(&p.text).split(' ').collect();
            assert_eq!(set.len(), p.n);
        }
    }

    #[test]
    fn sweeps_contents() {
        let s = gen_sweeps();
        let labels: BTreeSet<&str> = s.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels.len(), s.len(), "labels unique");
        assert_eq!(
            s.iter().filter(|p| p.label.starts_with("symbol.")).count(),
            8
        );
        let five = s.iter().find(|p| p.label == "intruder.count5").unwrap();
        assert_eq!(&five.payload[..5], &["banana"; 5]);
        assert_eq!(five.expected_answer, 5);
        let paras: Vec<&str> = s
            .iter()
            .filter(|p| p.label.starts_with("paraphrase."))
            .map(|p| p.paraphrase.as_str())
            .collect();
        assert_eq!(
            paras,
            ["original", "how_many", "list_first", "tally", "simple"]
        );
        let orig = s
            .iter()
            .find(|p| p.label == "paraphrase.original.n10")
            .unwrap();
        assert_eq!(
            orig.text,
            gen_condition(Condition::P1, 10, Delimiter::Space, "apple")
                .unwrap()
                .text
        );
        let edge = s.iter().find(|p| p.label == "edge.all_intruders").unwrap();
        assert_eq!(edge.expected_answer, 0);
        assert_eq!(gen_sweeps(), s, "deterministic");
    }

    #[test]
    fn jsonl_round_trip() {
        let specs = gen_probe_suite();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &specs).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 24);
        assert_eq!(read_jsonl(&buf[..]).unwrap(), specs);
    }

    #[test]
    fn template_without_list_rejected() {
        let mut t = ParaphraseTemplates::default();
        t.0.insert(Paraphrase::Tally, "no list".into());
        assert!(gen_paraphrase(Paraphrase::Tally, 10, "apple", &t).is_err());
    }

    proptest! {
        #[test]
        fn payload_count_matches_n(n in 1usize..40, comma in any::<bool>(), p2 in any::<bool>()) {
            let d = if comma { Delimiter::Comma } else { Delimiter::Space };
            let c = if p2 && n >= 2 { Condition::P2 } else { Condition::P1 };
            let s = gen_condition(c, n, d, "apple").unwrap();
            let items: Vec<&str> = list_part(&s.text).split(d.separator()).collect();
            prop_assert_eq!(items.len(), n);
            prop_assert_eq!(items, s.payload.iter().map(String::as_str).collect::<Vec<_>>());
            if let Some(x) = &s.intruder {
                prop_assert!(x.position < n);
                prop_assert_eq!(s.expected_answer, (n - x.count) as i64);
            }
        }
    }
}
