use std::fs::{File, OpenOptions};
use std::path::Path;

use crate::error::{Error, Result};
use crate::objective::LossBreakdown;

/// Append-only per-step loss log in CSV form.
pub struct TrainLog {
    writer: csv::Writer<File>,
}

impl TrainLog {
    /// Opens `path` for appending, writing the header only to a new or
    /// empty file.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::Writer::from_writer(file);
        if fresh {
            writer
                .write_record(LossBreakdown::CSV_HEADER)
                .map_err(|e| Error::Data(e.to_string()))?;
            writer.flush()?;
        }
        Ok(TrainLog { writer })
    }

    pub fn append(&mut self, step: u64, b: &LossBreakdown) -> Result<()> {
        self.writer
            .write_record(b.csv_row(step))
            .map_err(|e| Error::Data(e.to_string()))?;
        self.writer.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let b = LossBreakdown {
            total: 1.5,
            ..Default::default()
        };
        TrainLog::open(&path).unwrap().append(1, &b).unwrap();
        TrainLog::open(&path).unwrap().append(2, &b).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], LossBreakdown::CSV_HEADER.join(","));
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }
}
