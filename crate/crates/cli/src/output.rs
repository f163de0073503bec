//! Output directories and CSV writing. Floats use Rust's shortest
//! round-trip formatting so reruns produce identical bytes.

use std::fmt::Display;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::args::OUT_ENV;
use crate::error::{CliError, Result};

/// `--out` if given, else `$QCOORD_OUT_DIR/<command>`, else `runs/<command>`.
pub fn out_dir(flag: Option<&Path>, command: &str) -> PathBuf {
    match flag {
        Some(p) => p.to_path_buf(),
        None => {
            let root =
                std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command)
        }
    }
}

pub fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Buffered CSV file with a fixed header.
pub struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl Csv {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut csv = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            columns: header.len(),
        };
        csv.line(header.join(","))?;
        Ok(csv)
    }

    fn line(&mut self, text: String) -> Result<()> {
        writeln!(self.out, "{text}").map_err(|e| CliError::io(&self.path, e))
    }

    pub fn row(&mut self, cells: &[&dyn Display]) -> Result<()> {
        debug_assert_eq!(cells.len(), self.columns);
        let text: Vec<String> = cells.iter().map(|c| c.to_string()).collect();
        self.line(text.join(","))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Wait limits name files without locale or precision surprises.
pub fn limit_tag(limit: f64) -> String {
    format!("{limit:.2}").replace('.', "_")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_follow_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let mut csv = Csv::create(&path, &["a", "b"]).unwrap();
        csv.row(&[&1, &0.1]).unwrap();
        csv.finish().unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "a,b\n1,0.1\n");
    }

    #[test]
    fn explicit_out_wins() {
        assert_eq!(out_dir(Some(Path::new("x")), "eval"), PathBuf::from("x"));
        assert_eq!(limit_tag(5.5), "5_50");
    }
}
