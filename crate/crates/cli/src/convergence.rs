//! Per-epoch convergence logs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use transrec::pipeline::EpochRecord;

use crate::CliError;

pub const FILE_NAME: &str = "convergence.csv";
pub const HEADER: &str = "run_id,epoch,split,loss,hr@10,ndcg@10";

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Appends each epoch's rows with a single write, so an interrupted run
/// leaves only whole epochs behind.
pub struct ConvergenceLog {
    file: File,
    path: PathBuf,
    run_id: String,
}

impl ConvergenceLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path, run_id: &str) -> Result<Self, CliError> {
        let fresh = !path.exists();
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
        if fresh {
            writeln!(file, "{HEADER}").map_err(|e| CliError::io(path, e))?;
        }
        Ok(Self { file, path: path.to_path_buf(), run_id: run_id.to_string() })
    }

    pub fn append(&mut self, rows: &[EpochRecord]) -> Result<(), CliError> {
        let mut chunk = String::new();
        for r in rows {
            chunk += &format!("{},{},{},{},{},{}\n", self.run_id, r.epoch, r.split, cell(r.loss), cell(r.hr), cell(r.ndcg));
        }
        self.file.write_all(chunk.as_bytes()).map_err(|e| CliError::io(&self.path, e))?;
        self.file.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Concatenates the logs of several run directories under one header.
pub fn emit_convergence(run_dirs: &[PathBuf]) -> Result<String, CliError> {
    let mut out = format!("{HEADER}\n");
    for dir in run_dirs {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read_to_string(&path).map_err(|_| CliError::data(format!("{}: missing history", path.display())))?;
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(CliError::data(format!("{}: unexpected header", path.display())));
        }
        let rows: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if rows.is_empty() {
            return Err(CliError::data(format!("{}: missing history", path.display())));
        }
        for r in rows {
            out += r;
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(epoch: usize) -> Vec<EpochRecord> {
        vec![
            EpochRecord { epoch, split: "train".into(), loss: 1.5, hr: f64::NAN, ndcg: f64::NAN },
            EpochRecord { epoch, split: "valid".into(), loss: f64::NAN, hr: 0.25, ndcg: 0.125 },
        ]
    }

    #[test]
    fn ten_epochs_give_ten_rows_per_split() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = ConvergenceLog::open(&dir.path().join(FILE_NAME), "a").unwrap();
        for e in 1..=10 {
            log.append(&rows(e)).unwrap();
        }
        let text = emit_convergence(&[dir.path().to_path_buf()]).unwrap();
        let body: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(body.iter().filter(|l| l.contains(",train,")).count(), 10);
        assert_eq!(body.iter().filter(|l| l.contains(",valid,")).count(), 10);
        assert_eq!(body[0], "a,1,train,1.5,,");
        assert_eq!(body[1], "a,1,valid,,0.25,0.125");
    }

    #[test]
    fn merged_runs_are_told_apart_by_run_id() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        ConvergenceLog::open(&a.path().join(FILE_NAME), "frac0.2").unwrap().append(&rows(1)).unwrap();
        ConvergenceLog::open(&b.path().join(FILE_NAME), "frac1.0").unwrap().append(&rows(1)).unwrap();
        let text = emit_convergence(&[a.path().to_path_buf(), b.path().to_path_buf()]).unwrap();
        let ids: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(ids, ["frac0.2", "frac0.2", "frac1.0", "frac1.0"]);
    }

    #[test]
    fn a_run_without_epochs_has_no_history() {
        let dir = tempfile::tempdir().unwrap();
        ConvergenceLog::open(&dir.path().join(FILE_NAME), "x").unwrap();
        assert!(emit_convergence(&[dir.path().to_path_buf()]).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(emit_convergence(&[empty.path().to_path_buf()]).is_err());
    }
}
