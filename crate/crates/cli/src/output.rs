//! Result files: every file starts with `# qclt <version> config=<hash>`;
//! wall-clock times go to a separate sidecar so result files stay
//! byte-reproducible.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

pub struct OutputDir {
    dir: PathBuf,
    header: String,
    written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn new(dir: PathBuf, config_hash: &str) -> Self {
        Self {
            dir,
            header: format!("# qclt {} config={config_hash}\n", qclt::VERSION),
            written: Vec::new(),
        }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn header(&self) -> &str {
        &self.header
    }

    pub fn write(&mut self, name: &str, body: &str) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut text = String::with_capacity(self.header.len() + body.len());
        text.push_str(&self.header);
        text.push_str(body);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_toml<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let body = toml::to_string(value).map_err(|e| CliError::Internal(format!("{name}: {e}")))?;
        self.write(name, &body)
    }

    pub fn write_csv(&mut self, name: &str, table: &Csv) -> Result<PathBuf, CliError> {
        self.write(name, &table.text)
    }

    /// `<command>.timestamp`: seconds since the Unix epoch at completion.
    pub fn write_sidecar(&self, command: &str) -> Result<(), CliError> {
        let path = self.dir.join(format!("{command}.timestamp"));
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        std::fs::write(&path, format!("{secs}\n")).map_err(|e| CliError::io(&path, e))
    }
}

/// Plain CSV with `{:.16e}` floats.
pub struct Csv {
    text: String,
}

pub enum Cell<'a> {
    Int(u64),
    Float(f64),
    Text(&'a str),
}

impl Csv {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            text: format!("{}\n", columns.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[Cell<'_>]) {
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            match c {
                Cell::Int(v) => write!(self.text, "{v}"),
                Cell::Float(v) => write!(self.text, "{}", fmt_float(*v)),
                Cell::Text(s) => write!(self.text, "{s}"),
            }
            .expect("write to string");
        }
        self.text.push('\n');
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

pub fn fmt_float(v: f64) -> String {
    format!("{v:.16e}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_use_fixed_precision() {
        let mut t = Csv::new(&["k", "x", "name"]);
        t.row(&[Cell::Int(3), Cell::Float(0.1), Cell::Text("a")]);
        assert_eq!(t.text(), "k,x,name\n3,1.0000000000000001e-1,a\n");
    }

    #[test]
    fn files_start_with_the_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = OutputDir::new(dir.path().to_path_buf(), "abc");
        let p = out.write("x.csv", "a\n").unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert_eq!(text, format!("# qclt {} config=abc\na\n", qclt::VERSION));
    }
}
