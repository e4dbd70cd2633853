use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 8] = [
    "mode",
    "n_frames",
    "tokens_per_frame",
    "steps",
    "wall_ms",
    "flops_model",
    "peak_resident_minibatches",
    "seed",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub mode: String,
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub steps: usize,
    pub wall_ms: f64,
    pub flops_model: u64,
    pub peak_resident_minibatches: usize,
    pub seed: u64,
}

/// Appends rows, writing the header only when the file is new or empty. An
/// existing file must carry the same header.
pub fn append_records(path: &Path, records: &[BenchRecord]) -> Result<()> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io_at(path, e))?;
    let mut existing = String::new();
    file.read_to_string(&mut existing)?;
    let fresh = existing.trim().is_empty();
    if !fresh {
        let header = existing.lines().next().unwrap_or("");
        if header.trim() != CSV_HEADER.join(",") {
            return Err(Error::Config(format!(
                "{} has an unexpected header `{header}`",
                path.display()
            )));
        }
        if !existing.ends_with('\n') {
            return Err(Error::Config(format!("{} does not end with a newline", path.display())));
        }
    }
    file.seek(SeekFrom::End(0))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<BenchRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(Error::Config(format!(
            "{} has columns {header:?}, expected {CSV_HEADER:?}",
            path.display()
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(mode: &str, n: usize, ms: f64) -> BenchRecord {
        BenchRecord {
            mode: mode.into(),
            n_frames: n,
            tokens_per_frame: 64,
            steps: 2,
            wall_ms: ms,
            flops_model: 12345,
            peak_resident_minibatches: 1,
            seed: 42,
        }
    }

    #[test]
    fn header_and_append() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        append_records(&path, &[rec("ttt", 8, 1.5)]).unwrap();
        append_records(&path, &[rec("softmax_reference", 8, 2.25), rec("ttt", 16, 3.0)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "mode,n_frames,tokens_per_frame,steps,wall_ms,flops_model,peak_resident_minibatches,seed");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "ttt,8,64,2,1.5,12345,1,42");
        let back = read_records(&path).unwrap();
        assert_eq!(back, vec![rec("ttt", 8, 1.5), rec("softmax_reference", 8, 2.25), rec("ttt", 16, 3.0)]);
    }

    #[test]
    fn empty_file_gets_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "").unwrap();
        append_records(&path, &[rec("ttt", 1, 0.5)]).unwrap();
        assert_eq!(read_records(&path).unwrap().len(), 1);
    }

    #[test]
    fn foreign_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        std::fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(append_records(&path, &[rec("ttt", 1, 0.5)]).is_err());
        assert!(read_records(&path).is_err());
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
    }

    #[test]
    fn unwritable_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("s.csv");
        assert!(matches!(append_records(&path, &[]), Err(Error::Io(_))));
    }
}
