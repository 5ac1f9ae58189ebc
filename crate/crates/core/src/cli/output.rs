//! CSV files with fixed column order and C-style `%.12e` numbers, so that
//! identical runs produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::CliError;

/// `printf("%.12e", x)`.
pub fn sci(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.12e}");
    let (mant, exp) = s.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

/// One CSV file.
pub struct Csv {
    path: PathBuf,
    out: BufWriter<File>,
    columns: usize,
}

impl Csv {
    pub fn create(dir: &Path, name: &str, header: &[String]) -> Result<Self, CliError> {
        let path = dir.join(name);
        let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut csv = Self {
            path,
            out: BufWriter::new(file),
            columns: header.len(),
        };
        csv.line(&header.join(","))?;
        Ok(csv)
    }

    fn line(&mut self, s: &str) -> Result<(), CliError> {
        writeln!(self.out, "{s}").map_err(|e| CliError::io(&self.path, e))
    }

    /// Time followed by floats.
    pub fn row(&mut self, time: f64, values: &[f64]) -> Result<(), CliError> {
        let mut s = sci(time);
        for v in values {
            s.push(',');
            s.push_str(&sci(*v));
        }
        self.check(1 + values.len())?;
        self.line(&s)
    }

    /// Pre-formatted fields after the time.
    pub fn raw(&mut self, time: f64, fields: &[String]) -> Result<(), CliError> {
        self.check(1 + fields.len())?;
        let s = std::iter::once(sci(time))
            .chain(fields.iter().cloned())
            .collect::<Vec<_>>()
            .join(",");
        self.line(&s)
    }

    fn check(&self, n: usize) -> Result<(), CliError> {
        if n != self.columns {
            return Err(CliError::Run(format!(
                "{}: row has {n} fields, header {}",
                self.path.display(),
                self.columns
            )));
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// `["time", "{prefix}1", …, "{prefix}n"]`.
pub fn header(prefix: &str, n: usize) -> Vec<String> {
    std::iter::once("time".to_string())
        .chain((1..=n).map(|i| format!("{prefix}{i}")))
        .collect()
}

pub fn named(cols: &[&str]) -> Vec<String> {
    std::iter::once("time")
        .chain(cols.iter().copied())
        .map(String::from)
        .collect()
}

/// Reads back a CSV written here: header and numeric rows.
pub fn read_csv(path: &Path) -> std::io::Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap_or_default()
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .map(|l| {
            l.split(',')
                .map(|f| match f {
                    "true" => 1.0,
                    "false" => 0.0,
                    _ => f.parse().unwrap_or(f64::NAN),
                })
                .collect()
        })
        .collect();
    Ok((header, rows))
}
