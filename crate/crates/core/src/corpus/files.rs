//! Line-delimited record files.
//!
//! Every data file starts with a one-line JSON header carrying a format tag,
//! followed by one JSON record per line. The format is streamable and
//! diff-friendly; parse errors report the 1-based line number.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{CorpusError, InteractionSequence, RawReview};
use crate::corpus::pairs::TrainingPair;

pub const REVIEWS_FORMAT: &str = "reviews/v1";
pub const SEQUENCES_FORMAT: &str = "sequences/v1";
pub const PAIRS_FORMAT: &str = "pairs/v1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
}

fn write_records<T: Serialize>(
    path: &Path,
    format: &str,
    records: &[T],
) -> Result<(), CorpusError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(
        &mut w,
        &Header {
            format: format.to_string(),
        },
    )
    .map_err(|e| CorpusError::BadRecord { line: 1, source: e })?;
    w.write_all(b"\n")?;
    for (i, record) in records.iter().enumerate() {
        serde_json::to_writer(&mut w, record).map_err(|e| CorpusError::BadRecord {
            line: i + 2,
            source: e,
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_records<T: DeserializeOwned>(path: &Path, format: &str) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| CorpusError::BadHeader {
            expected: format.to_string(),
        })?;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|_| CorpusError::BadHeader {
            expected: format.to_string(),
        })?;
    if header.format != format {
        return Err(CorpusError::Version {
            found: header.format,
            expected: format.to_string(),
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::BadRecord {
            line: i + 2,
            source: e,
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_reviews(path: &Path, reviews: &[RawReview]) -> Result<(), CorpusError> {
    write_records(path, REVIEWS_FORMAT, reviews)
}

pub fn read_reviews(path: &Path) -> Result<Vec<RawReview>, CorpusError> {
    read_records(path, REVIEWS_FORMAT)
}

pub fn write_sequences(path: &Path, sequences: &[InteractionSequence]) -> Result<(), CorpusError> {
    write_records(path, SEQUENCES_FORMAT, sequences)
}

pub fn read_sequences(path: &Path) -> Result<Vec<InteractionSequence>, CorpusError> {
    read_records(path, SEQUENCES_FORMAT)
}

pub fn write_pairs(path: &Path, pairs: &[TrainingPair]) -> Result<(), CorpusError> {
    write_records(path, PAIRS_FORMAT, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<TrainingPair>, CorpusError> {
    read_records(path, PAIRS_FORMAT)
}
