//! Append-only CSV log with one row per optimiser step.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use orthodiff_core::training::TrainRecord;

use crate::error::{Error, Result};

pub struct TrainLog {
    path: PathBuf,
    writer: csv::Writer<std::fs::File>,
    last_step: Option<u64>,
}

impl TrainLog {
    /// Open `path` for appending. Existing rows are checked so a resumed run continues the sequence.
    pub fn open(path: &Path) -> Result<Self> {
        let existing = if path.is_file() { read(path)? } else { Vec::new() };
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(existing.is_empty()).from_writer(file);
        Ok(Self { path: path.to_path_buf(), writer, last_step: existing.last().map(|r| r.step) })
    }

    pub fn append(&mut self, rec: &TrainRecord) -> Result<()> {
        if let Some(last) = self.last_step {
            if rec.step != last + 1 {
                return Err(Error::Integrity(format!(
                    "{}: step {} does not follow step {last}",
                    self.path.display(),
                    rec.step
                )));
            }
        }
        self.writer.serialize(rec).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_step = Some(rec.step);
        Ok(())
    }
}

pub fn read(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Corrupt(format!("{}: {e}", path.display()))
}
