use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{DatasetBundle, ParallelExample, SeqLabel, Split};
use crate::error::{Error, Result};
use crate::objectives::TaskKind;

fn is_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes one JSON record per line; a `.gz` suffix selects gzip compression.
pub fn save_jsonl(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out: Box<dyn Write> = if is_gzip(path) {
        Box::new(GzEncoder::new(BufWriter::new(file), Compression::default()))
    } else {
        Box::new(BufWriter::new(file))
    };
    for example in bundle.train.iter().chain(&bundle.test) {
        serde_json::to_writer(&mut out, example)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn task_of(label: &SeqLabel) -> TaskKind {
    match label {
        SeqLabel::Class(_) => TaskKind::Classification,
        SeqLabel::Tags(_) => TaskKind::Structured,
        SeqLabel::Span { .. } => TaskKind::Span,
    }
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader: Box<dyn Read> = if is_gzip(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut bundle: Option<DatasetBundle> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example: ParallelExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let b = bundle.get_or_insert_with(|| DatasetBundle::empty(task_of(&example.label.src)));
        example.validate(b.task).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        match example.split {
            Split::Train => b.train.push(example),
            Split::Test => b.test.push(example),
        }
    }
    Ok(bundle.unwrap_or_else(|| DatasetBundle::empty(TaskKind::Classification)))
}
