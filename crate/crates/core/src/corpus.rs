//! Multiple-choice question corpora.
//!
//! Two on-disk layouts are accepted: the headerless CSV of the public
//! distribution (`question,A,B,C,D,answer`, one file per subject, subject
//! taken from the file stem) and JSONL with one [`QuestionRecord`] per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub subject: String,
    pub question: String,
    pub options: [String; 4],
    /// 0..=3 for A..D. JSONL input may also give the letter.
    #[serde(deserialize_with = "answer_index")]
    pub answer: usize,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.answer >= 4 {
            return Err(Error::Input(format!("question {}: answer index {} out of range", self.id, self.answer)));
        }
        Ok(())
    }

    pub fn answer_letter(&self) -> char {
        (b'A' + self.answer as u8) as char
    }
}

pub fn letter_to_index(s: &str) -> Option<usize> {
    match s.trim() {
        "A" => Some(0),
        "B" => Some(1),
        "C" => Some(2),
        "D" => Some(3),
        _ => None,
    }
}

fn answer_index<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<usize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Answer {
        Index(usize),
        Letter(String),
    }
    match Answer::deserialize(d)? {
        Answer::Index(i) if i < 4 => Ok(i),
        Answer::Index(i) => Err(serde::de::Error::custom(format!("answer index {i} out of range"))),
        Answer::Letter(s) => {
            letter_to_index(&s).ok_or_else(|| serde::de::Error::custom(format!("bad answer letter `{s}`")))
        }
    }
}

/// `abstract_algebra_test.csv` → `abstract_algebra`.
pub fn subject_from_path(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown");
    ["_test", "_dev", "_val"].iter().find_map(|suffix| stem.strip_suffix(suffix)).unwrap_or(stem).to_string()
}

/// Loads a CSV file, a JSONL file, or a directory of per-subject CSVs.
pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(load_csv(&f)?);
        }
        return Ok(out);
    }
    match path.extension().and_then(|x| x.to_str()) {
        Some("jsonl") => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_jsonl(&text, path)
        }
        _ => load_csv(path),
    }
}

pub fn parse_jsonl(text: &str, origin: &Path) -> Result<Vec<QuestionRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: QuestionRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_csv(path: &Path) -> Result<Vec<QuestionRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&bytes, &subject_from_path(path), path)
}

pub fn parse_csv(bytes: &[u8], subject: &str, origin: &Path) -> Result<Vec<QuestionRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(bytes);
    let mut out = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let parse_err = |line: usize, reason: String| Error::Parse { path: origin.to_path_buf(), line, reason };
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(row + 1, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(row + 1, |p| p.line() as usize);
        if rec.len() != 6 {
            return Err(parse_err(line, format!("expected 6 columns, found {}", rec.len())));
        }
        let answer =
            letter_to_index(&rec[5]).ok_or_else(|| parse_err(line, format!("bad answer letter `{}`", &rec[5])))?;
        out.push(QuestionRecord {
            id: format!("{subject}-{}", out.len()),
            subject: subject.to_string(),
            question: rec[0].to_string(),
            options: [rec[1].to_string(), rec[2].to_string(), rec[3].to_string(), rec[4].to_string()],
            answer,
        });
    }
    Ok(out)
}

pub fn write_jsonl(records: &[QuestionRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Writes one `<subject>_test.csv` per subject into `dir`.
pub fn write_csv_dir(records: &[QuestionRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_subject: BTreeMap<&str, Vec<&QuestionRecord>> = BTreeMap::new();
    for r in records {
        by_subject.entry(&r.subject).or_default().push(r);
    }
    for (subject, recs) in by_subject {
        let path = dir.join(format!("{subject}_test.csv"));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in recs {
            let letter = r.answer_letter().to_string();
            w.write_record([r.question.as_str(), &r.options[0], &r.options[1], &r.options[2], &r.options[3], &letter])
                .map_err(|e| Error::Input(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_answer_letter_maps_to_index() {
        let recs = parse_csv(b"What?,w,x,y,z,C\n", "misc", Path::new("misc_test.csv")).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].answer, 2);
        assert_eq!(recs[0].id, "misc-0");
        assert_eq!(recs[0].options[3], "z");
    }

    #[test]
    fn csv_short_row_names_the_line() {
        let err = parse_csv(b"ok,a,b,c,d,A\nbad,a,b,c,B\n", "m", Path::new("m.csv")).unwrap_err();
        match err {
            Error::Parse { line, reason, .. } => {
                assert_eq!(line, 2);
                assert!(reason.contains("5"), "{reason}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn csv_bad_letter() {
        let err = parse_csv(b"q,a,b,c,d,E\n", "m", Path::new("m.csv")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn quoted_commas_survive() {
        let recs =
            parse_csv(b"\"Is 1,000 big?\",yes,no,\"maybe, maybe not\",never,A\n", "m", Path::new("m.csv")).unwrap();
        assert_eq!(recs[0].question, "Is 1,000 big?");
        assert_eq!(recs[0].options[2], "maybe, maybe not");
    }

    #[test]
    fn jsonl_accepts_letters_and_indices() {
        let text = r#"{"id":"a-0","subject":"a","question":"q","options":["1","2","3","4"],"answer":"D"}
{"id":"a-1","subject":"a","question":"q","options":["1","2","3","4"],"answer":1}
"#;
        let recs = parse_jsonl(text, Path::new("x.jsonl")).unwrap();
        assert_eq!((recs[0].answer, recs[1].answer), (3, 1));
        let bad = r#"{"id":"a-0","subject":"a","question":"q","options":["1","2","3"],"answer":"D"}"#;
        assert!(matches!(parse_jsonl(bad, Path::new("x.jsonl")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn subject_from_file_stem() {
        assert_eq!(subject_from_path(Path::new("/x/abstract_algebra_test.csv")), "abstract_algebra");
        assert_eq!(subject_from_path(Path::new("anatomy.csv")), "anatomy");
    }
}
