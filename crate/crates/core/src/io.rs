//! Versioned CSV tables. Every file starts with a `# <schema> v<version>` line followed by a
//! header row; numbers use the shortest round-trip decimal form, so reruns are byte-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{OedError, Result};
use crate::forward::{DataSample, ForwardModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static [&'static str],
}

impl CsvSchema {
    pub fn tag(&self) -> String {
        format!("# {} v{}", self.name, self.version)
    }
}

pub mod schemas {
    use super::CsvSchema;

    pub const FORWARD: CsvSchema = CsvSchema {
        name: "forward",
        version: 1,
        columns: &["node", "x", "y", "m", "u"],
    };
    pub const DATA: CsvSchema = CsvSchema {
        name: "data",
        version: 1,
        columns: &["sample", "sensor", "x", "y", "value"],
    };
    pub const MAP_HISTORY: CsvSchema = CsvSchema {
        name: "map-history",
        version: 1,
        columns: &["iteration", "cost", "grad_norm", "cg_iterations", "step_length", "mode"],
    };
    pub const OED_EVAL: CsvSchema = CsvSchema {
        name: "oed-eval",
        version: 1,
        columns: &["sensor", "x", "y", "w", "gradient"],
    };
    pub const SUMMARY: CsvSchema = CsvSchema {
        name: "summary",
        version: 1,
        columns: &["key", "value"],
    };
    pub const OED_HISTORY: CsvSchema = CsvSchema {
        name: "oed-history",
        version: 1,
        columns: &[
            "stage",
            "penalty",
            "mu",
            "iteration",
            "psi_hat",
            "penalty_value",
            "barrier_objective",
            "grad_norm",
            "n_active",
        ],
    };
    pub const DESIGN: CsvSchema = CsvSchema {
        name: "design",
        version: 1,
        columns: &["sensor", "x", "y", "w"],
    };
    pub const CLOUD: CsvSchema = CsvSchema {
        name: "design-cloud",
        version: 1,
        columns: &["design_id", "kind", "gamma", "n_active", "E_rel", "trace", "V_bar", "E_bar"],
    };
    pub const SCALING: CsvSchema = CsvSchema {
        name: "scaling",
        version: 1,
        columns: &[
            "sweep",
            "n_params",
            "n_sensors",
            "inner_cg",
            "outer_cg",
            "outer_iterations",
            "newton_iterations",
            "forward_like_solves",
            "predicted_forward_like",
        ],
    };
    pub const DELTA: CsvSchema = CsvSchema {
        name: "delta-check",
        version: 1,
        columns: &["delta", "trace_estimate", "exact_trace"],
    };
    pub const GRADCHECK: CsvSchema = CsvSchema {
        name: "gradcheck",
        version: 1,
        columns: &["suite", "component", "reference", "value", "rel_error", "tolerance", "pass"],
    };
}

/// Shortest round-trip decimal form.
pub fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub fn write_table(path: impl AsRef<Path>, schema: &CsvSchema, rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path.as_ref())?);
    writeln!(f, "{}", schema.tag())?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
    w.write_record(schema.columns)?;
    for r in rows {
        if r.len() != schema.columns.len() {
            return Err(OedError::DimensionMismatch {
                what: "csv row",
                expected: schema.columns.len(),
                got: r.len(),
            });
        }
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rows of a table written by `write_table`, after checking its tag and header.
pub fn read_table(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Vec<Vec<String>>> {
    let mut rd = BufReader::new(File::open(path.as_ref())?);
    let mut first = String::new();
    rd.read_line(&mut first)?;
    if first.trim_end() != schema.tag() {
        return Err(OedError::Config(format!(
            "{}: expected '{}', found '{}'",
            path.as_ref().display(),
            schema.tag(),
            first.trim_end()
        )));
    }
    let mut r = csv::Reader::from_reader(rd);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != schema.columns {
        return Err(OedError::Config(format!(
            "{}: unexpected columns {header:?}",
            path.as_ref().display()
        )));
    }
    r.records()
        .map(|rec| Ok(rec?.iter().map(str::to_owned).collect()))
        .collect()
}

pub fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| OedError::Config(format!("not a number: '{s}'")))
}

pub fn write_data_samples(path: impl AsRef<Path>, model: &ForwardModel, samples: &[DataSample]) -> Result<()> {
    let mut rows = Vec::new();
    for s in samples {
        for (j, (x, v)) in model.sensors().iter().zip(&s.d).enumerate() {
            rows.push(vec![s.index.to_string(), j.to_string(), fmt(x[0]), fmt(x[1]), fmt(*v)]);
        }
    }
    write_table(path, &schemas::DATA, &rows)
}

/// Data vectors by sample index from a data table with `n_sensors` rows per sample.
pub fn read_data_samples(path: impl AsRef<Path>, n_sensors: usize) -> Result<Vec<Vec<f64>>> {
    let rows = read_table(path, &schemas::DATA)?;
    let mut out: Vec<Vec<f64>> = Vec::new();
    for r in rows {
        let i: usize = r[0].parse().map_err(|_| OedError::Config(format!("bad sample index '{}'", r[0])))?;
        let j: usize = r[1].parse().map_err(|_| OedError::Config(format!("bad sensor index '{}'", r[1])))?;
        if j >= n_sensors {
            return Err(OedError::Config(format!("sensor index {j} out of range")));
        }
        while out.len() <= i {
            out.push(vec![f64::NAN; n_sensors]);
        }
        out[i][j] = parse_f64(&r[4])?;
    }
    if out.iter().flatten().any(|v| v.is_nan()) {
        return Err(OedError::Config("data table is missing entries".into()));
    }
    Ok(out)
}

/// One-column summary table of named scalars.
pub fn write_summary(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let rows: Vec<Vec<String>> = entries.iter().map(|(k, v)| vec![k.clone(), v.clone()]).collect();
    write_table(path, &schemas::SUMMARY, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_tag_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let rows = vec![vec![fmt(0.1), fmt(1e-300), fmt(3.0)]];
        write_table(&p, &schemas::DELTA, &rows).unwrap();
        let back = read_table(&p, &schemas::DELTA).unwrap();
        assert_eq!(back, rows);
        assert_eq!(parse_f64(&back[0][1]).unwrap(), 1e-300);
        assert!(read_table(&p, &schemas::DESIGN).is_err());
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# delta-check v1\ndelta,trace_estimate,exact_trace\n"));
    }

    #[test]
    fn row_width_checked() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        assert!(write_table(&p, &schemas::DELTA, &[vec!["1".into()]]).is_err());
    }
}
