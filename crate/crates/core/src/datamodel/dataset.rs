//! Line-delimited JSON datasets: one `{query, steps, answer, category}`
//! record per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;

use super::{normalize_answer, Demonstration, TaskKind, UNPARSED};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    query: String,
    #[serde(default)]
    steps: Vec<String>,
    answer: String,
    #[serde(default)]
    category: Option<String>,
}

/// Reads a dataset file. Blank lines are skipped; line numbers in errors
/// are 1-based.
pub fn load_dataset(path: impl AsRef<Path>, kind: TaskKind) -> Result<Vec<Demonstration>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let answer = normalize_answer(&record.answer, kind);
        if answer == UNPARSED {
            return Err(parse_err(format!(
                "answer `{}` is not a valid {kind} answer",
                record.answer
            )));
        }
        let demo = Demonstration {
            query: record.query,
            steps: record.steps,
            answer,
            category: record.category,
        };
        demo.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(demo);
    }
    Ok(out)
}

/// [`load_dataset`] with the task kind given by name.
pub fn load_dataset_str(path: impl AsRef<Path>, kind: &str) -> Result<Vec<Demonstration>> {
    load_dataset(path, kind.parse()?)
}

pub fn write_dataset(path: impl AsRef<Path>, demos: &[Demonstration]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for demo in demos {
        let line = serde_json::to_string(demo).expect("demonstration serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
