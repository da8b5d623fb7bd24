//! Versioned CSV tables, the dataset schema, and JSON artifacts.
//!
//! Every CSV starts with a `# <schema> v<version>` line followed by a header
//! row. Readers refuse files whose schema line does not match.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use cmp_core::{CountVector, SpikeDataset64, Stimulus};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{CliError, CliResult};

pub const DATASET_SCHEMA: &str = "cmp-dataset";
pub const SCHEMA_VERSION: u32 = 1;

fn schema_line(schema: &str) -> String {
    format!("# {schema} v{SCHEMA_VERSION}")
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes a header-commented CSV table.
pub fn write_table<S: AsRef<str>>(path: &Path, schema: &str, header: &[S], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = create(path)?;
    writeln!(out, "{}", schema_line(schema)).map_err(|e| CliError::io(path, e))?;
    let mut w = csv::Writer::from_writer(out);
    let to_io = |e: csv::Error| CliError::io(path, std::io::Error::other(e));
    w.write_record(header.iter().map(|h| h.as_ref())).map_err(to_io)?;
    for row in rows {
        w.write_record(row).map_err(to_io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn check_schema(path: &Path, schema: &str, first: &str) -> CliResult<()> {
    let first = first.trim_end_matches(['\r', '\n']);
    if first == schema_line(schema) {
        return Ok(());
    }
    let message = match first.strip_prefix(&format!("# {schema} v")) {
        Some(v) => format!("unsupported {schema} schema version {v}; this build reads v{SCHEMA_VERSION}"),
        None => format!("expected schema line `{}`", schema_line(schema)),
    };
    Err(CliError::Dataset {
        path: path.to_path_buf(),
        line: 1,
        column: None,
        message,
    })
}

fn open_versioned(path: &Path, schema: &str, producer: &'static str) -> CliResult<BufReader<File>> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        },
        _ => CliError::io(path, e),
    })?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first).map_err(|e| CliError::io(path, e))?;
    check_schema(path, schema, &first)?;
    Ok(reader)
}

fn dataset_error(path: &Path, line: u64, column: Option<usize>, message: impl Into<String>) -> CliError {
    CliError::Dataset {
        path: path.to_path_buf(),
        line,
        column,
        message: message.into(),
    }
}

/// Parses a dataset CSV body (everything after the schema line).
fn parse_dataset<R: Read>(path: &Path, body: R) -> CliResult<SpikeDataset64> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body);
    // Line numbers reported by the csv reader exclude the schema line.
    let csv_err = |e: csv::Error| {
        let line = e.position().map(|p| p.line() + 1).unwrap_or(2);
        dataset_error(path, line, None, e.to_string())
    };
    let header = rdr.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("stimulus") {
        return Err(dataset_error(path, 2, Some(1), "first column must be `stimulus`"));
    }
    let neurons = header.len() - 1;
    if neurons == 0 {
        return Err(dataset_error(path, 2, None, "no count columns"));
    }
    for (k, name) in header.iter().enumerate().skip(1) {
        if name != format!("n_{k}") {
            return Err(dataset_error(path, 2, Some(k + 1), format!("expected column `n_{k}`, found `{name}`")));
        }
    }
    let mut trials = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_err)?;
        let line = record.position().map(|p| p.line() + 1).unwrap_or(0);
        if record.len() != neurons + 1 {
            return Err(dataset_error(
                path,
                line,
                None,
                format!("expected {} fields, found {}", neurons + 1, record.len()),
            ));
        }
        let z: f64 = record[0]
            .trim()
            .parse()
            .map_err(|_| dataset_error(path, line, Some(1), format!("`{}` is not a number", &record[0])))?;
        if !(0.0..PI).contains(&z) {
            return Err(dataset_error(path, line, Some(1), format!("stimulus {z} is outside [0, π)")));
        }
        let mut counts = Vec::with_capacity(neurons);
        for (c, field) in record.iter().enumerate().skip(1) {
            let n: u32 = field.trim().parse().map_err(|_| {
                dataset_error(path, line, Some(c + 1), format!("`{field}` is not a nonnegative integer count"))
            })?;
            counts.push(n);
        }
        trials.push((CountVector::new(counts), Stimulus::new(z)));
    }
    if trials.is_empty() {
        return Err(dataset_error(path, 3, None, "dataset has no trials"));
    }
    Ok(SpikeDataset64::new(trials)?)
}

pub fn read_dataset(path: &Path) -> CliResult<SpikeDataset64> {
    let reader = open_versioned(path, DATASET_SCHEMA, "synth")?;
    parse_dataset(path, reader)
}

pub fn write_dataset(path: &Path, d: &SpikeDataset64) -> CliResult<()> {
    let mut header = vec!["stimulus".to_string()];
    header.extend((1..=d.neurons()).map(|k| format!("n_{k}")));
    let rows: Vec<Vec<String>> = d
        .trials()
        .iter()
        .map(|t| {
            let mut row = vec![t.stimulus.angle().to_string()];
            row.extend(t.counts.as_slice().iter().map(u32::to_string));
            row
        })
        .collect();
    write_table(path, DATASET_SCHEMA, &header, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    writeln!(out).and_then(|_| out.flush()).map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, producer: &'static str) -> CliResult<T> {
    let file = File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        },
        _ => CliError::io(path, e),
    })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| CliError::Artifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> CliResult<SpikeDataset64> {
        let mut lines = text.splitn(2, '\n');
        let first = lines.next().unwrap();
        check_schema(Path::new("d.csv"), DATASET_SCHEMA, first)?;
        parse_dataset(Path::new("d.csv"), lines.next().unwrap_or("").as_bytes())
    }

    #[test]
    fn parses_valid_dataset() {
        let d = parse("# cmp-dataset v1\nstimulus,n_1,n_2\n0,1,2\n1.5,0,7\n").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.neurons(), 2);
        assert_eq!(d.trials()[1].counts.as_slice(), &[0, 7]);
    }

    #[test]
    fn diagnostics_name_line_and_column() {
        let err = parse("# cmp-dataset v1\nstimulus,n_1,n_2\n0,1,2\n0.5,3,-1\n").unwrap_err();
        match err {
            CliError::Dataset { line, column, .. } => assert_eq!((line, column), (4, Some(3))),
            other => panic!("{other:?}"),
        }
        let err = parse("# cmp-dataset v1\nstimulus,n_1\n4.0,1\n").unwrap_err();
        assert!(matches!(err, CliError::Dataset { line: 3, column: Some(1), .. }));
    }

    #[test]
    fn rejects_other_versions_and_headers() {
        let err = parse("# cmp-dataset v2\nstimulus,n_1\n0,1\n").unwrap_err();
        assert!(err.to_string().contains("version 2"));
        assert!(parse("stimulus,n_1\n0,1\n").is_err());
        assert!(parse("# cmp-dataset v1\nz,n_1\n0,1\n").is_err());
        assert!(parse("# cmp-dataset v1\nstimulus,n_2\n0,1\n").is_err());
        assert!(parse("# cmp-dataset v1\nstimulus,n_1\n").is_err());
    }

    #[test]
    fn ragged_rows_are_reported() {
        let err = parse("# cmp-dataset v1\nstimulus,n_1,n_2\n0,1\n").unwrap_err();
        assert!(matches!(err, CliError::Dataset { line: 3, .. }), "{err:?}");
    }
}
