use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Hypothesis;
use crate::error::{Error, Result};

fn score(s: Option<f64>) -> String {
    s.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
}

fn tokens_text(tokens: &[usize]) -> String {
    tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// `id  tokens  s_ctc  s_l2r  s_r2l  s_final`, tab separated; absent
/// scores are written as `NA`. Scores print in shortest round-trip form.
pub fn transcript_line(id: &str, h: &Hypothesis) -> String {
    format!(
        "{id}\t{}\t{}\t{}\t{}\t{}",
        tokens_text(&h.tokens),
        score(h.s_ctc),
        score(h.s_l2r),
        score(h.s_r2l),
        score(Some(h.s_final))
    )
}

/// Same as [`transcript_line`] with the candidate's rank after the id.
pub fn nbest_line(id: &str, rank: usize, h: &Hypothesis) -> String {
    let line = transcript_line(id, h);
    let (id, rest) = line.split_once('\t').expect("line has fields");
    format!("{id}\t{rank}\t{rest}")
}

fn parse_score(path: &Path, field: &str) -> Result<Option<f64>> {
    if field == "NA" {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::format(path, format!("bad score '{field}'")))
}

fn parse_fields(path: &Path, fields: &[&str]) -> Result<Hypothesis> {
    let tokens = fields[0]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::format(path, format!("bad token '{t}'"))))
        .collect::<Result<Vec<usize>>>()?;
    Ok(Hypothesis {
        tokens,
        s_ctc: parse_score(path, fields[1])?,
        s_l2r: parse_score(path, fields[2])?,
        s_r2l: parse_score(path, fields[3])?,
        s_final: parse_score(path, fields[4])?.ok_or_else(|| Error::format(path, "missing final score"))?,
    })
}

/// Reads a transcript written with [`transcript_line`].
pub fn read_transcript(path: &Path) -> Result<BTreeMap<String, Hypothesis>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::format(path, format!("expected 6 fields, got {}", fields.len())));
        }
        out.insert(fields[0].to_string(), parse_fields(path, &fields[1..])?);
    }
    Ok(out)
}

/// Reads an n-best dump written with [`nbest_line`], candidates in rank order.
pub fn read_nbest(path: &Path) -> Result<BTreeMap<String, Vec<Hypothesis>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: BTreeMap<String, Vec<Hypothesis>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::format(path, format!("expected 7 fields, got {}", fields.len())));
        }
        out.entry(fields[0].to_string())
            .or_default()
            .push(parse_fields(path, &fields[2..])?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = Hypothesis {
            tokens: vec![3, 1],
            s_ctc: Some(-0.1 - 0.2),
            s_l2r: None,
            s_r2l: Some(-1e-300),
            s_final: -2.15,
        };
        let empty = Hypothesis::from_ctc(vec![], -7.25);
        let p = dir.path().join("t.tsv");
        fs::write(&p, format!("{}\n{}\n", transcript_line("a", &h), transcript_line("b", &empty))).unwrap();
        let back = read_transcript(&p).unwrap();
        assert_eq!(back["a"], h);
        assert_eq!(back["b"], empty);
        let q = dir.path().join("n.tsv");
        fs::write(&q, format!("{}\n{}\n", nbest_line("a", 0, &h), nbest_line("a", 1, &empty))).unwrap();
        assert_eq!(read_nbest(&q).unwrap()["a"], vec![h, empty]);
    }
}
