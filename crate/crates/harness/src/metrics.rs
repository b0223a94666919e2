//! Per-seed metric tables, their CSV form and cross-seed aggregation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{HarnessError, Result};

/// Name of the index column every metric file starts with.
pub const INDEX_COLUMN: &str = "iteration";

/// Normal-approximation multiplier for a two-sided 95% interval.
pub const CI_Z: f64 = 1.96;

/// One metric file: an iteration index and named real columns.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub columns: Vec<String>,
    pub rows: Vec<MetricRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub iteration: usize,
    pub values: Vec<f64>,
}

/// Formats a real with 17 significant digits, enough to round-trip.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricTable {
    pub fn new(columns: Vec<String>) -> Self {
        MetricTable { columns, rows: Vec::new() }
    }

    /// Appends a row; `values` must have one entry per column.
    pub fn push(&mut self, iteration: usize, values: Vec<f64>) {
        assert_eq!(values.len(), self.columns.len(), "row width");
        self.rows.push(MetricRow { iteration, values });
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.columns.iter().position(|n| n == name)?;
        Some(self.rows.iter().map(|r| r.values[c]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<&str> = std::iter::once(INDEX_COLUMN).chain(self.columns.iter().map(String::as_str)).collect();
        w.write_record(&header)?;
        for r in &self.rows {
            let record: Vec<String> =
                std::iter::once(r.iteration.to_string()).chain(r.values.iter().map(|v| fmt_real(*v))).collect();
            w.write_record(&record)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        self.write_csv(BufWriter::new(file)).map_err(|e| HarnessError::io(path, e))
    }

    /// Parses a file written by [`MetricTable::write_csv`].
    pub fn read_csv<R: std::io::Read>(input: R, label: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers().map_err(|e| HarnessError::SchemaMismatch(format!("{label}: {e}")))?.clone();
        if header.get(0) != Some(INDEX_COLUMN) {
            return Err(HarnessError::SchemaMismatch(format!("{label}: first column must be `{INDEX_COLUMN}`")));
        }
        let mut table = MetricTable::new(header.iter().skip(1).map(str::to_owned).collect());
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(|e| HarnessError::SchemaMismatch(format!("{label}: {e}")))?;
            let bad = |what: &str| HarnessError::SchemaMismatch(format!("{label}: row {}: {what}", line + 1));
            let iteration = record[0].parse::<usize>().map_err(|_| bad("iteration is not an integer"))?;
            let values = record
                .iter()
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|_| bad("value is not a real")))
                .collect::<Result<Vec<_>>>()?;
            table.push(iteration, values);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
        Self::read_csv(file, &path.display().to_string())
    }
}

/// Cross-seed summary: per iteration and column the mean and the interval
/// `mean ± 1.96·s/√n` with the sample standard deviation `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub columns: Vec<String>,
    pub inputs: usize,
    /// Fewer than two inputs: the interval has zero width by construction.
    pub degenerate: bool,
    pub rows: Vec<AggregateRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub iteration: usize,
    pub mean: Vec<f64>,
    /// `1.96·stderr`; zero when degenerate.
    pub half_width: Vec<f64>,
}

impl AggregateRow {
    pub fn ci(&self, c: usize) -> (f64, f64) {
        (self.mean[c] - self.half_width[c], self.mean[c] + self.half_width[c])
    }
}

/// Aggregates tables that share columns and iteration indices.
pub fn aggregate(tables: &[MetricTable]) -> Result<Aggregate> {
    let first = tables.first().ok_or_else(|| HarnessError::SchemaMismatch("no input tables".into()))?;
    for (i, t) in tables.iter().enumerate().skip(1) {
        if t.columns != first.columns {
            return Err(HarnessError::SchemaMismatch(format!(
                "input {i} has columns {:?}, expected {:?}",
                t.columns, first.columns
            )));
        }
        let same_index =
            t.rows.len() == first.rows.len() && t.rows.iter().zip(&first.rows).all(|(a, b)| a.iteration == b.iteration);
        if !same_index {
            return Err(HarnessError::SchemaMismatch(format!("input {i} has a different iteration index")));
        }
    }
    let n = tables.len();
    let width = first.columns.len();
    let rows = (0..first.rows.len())
        .map(|r| {
            let mut mean = vec![0.0; width];
            let mut half_width = vec![0.0; width];
            for c in 0..width {
                let xs: Vec<f64> = tables.iter().map(|t| t.rows[r].values[c]).collect();
                let m = xs.iter().sum::<f64>() / n as f64;
                mean[c] = m;
                if n > 1 {
                    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
                    half_width[c] = CI_Z * (var / n as f64).sqrt();
                }
            }
            AggregateRow { iteration: first.rows[r].iteration, mean, half_width }
        })
        .collect();
    Ok(Aggregate { columns: first.columns.clone(), inputs: n, degenerate: n < 2, rows })
}

impl Aggregate {
    pub fn final_row(&self) -> Option<&AggregateRow> {
        self.rows.last()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Columns `iteration,seeds,degenerate` then `<c>_mean,<c>_ci_low,<c>_ci_high`.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![INDEX_COLUMN.to_owned(), "seeds".to_owned(), "degenerate".to_owned()];
        for c in &self.columns {
            header.extend([format!("{c}_mean"), format!("{c}_ci_low"), format!("{c}_ci_high")]);
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut record = vec![r.iteration.to_string(), self.inputs.to_string(), u8::from(self.degenerate).to_string()];
            for c in 0..self.columns.len() {
                let (lo, hi) = r.ci(c);
                record.extend([fmt_real(r.mean[c]), fmt_real(lo), fmt_real(hi)]);
            }
            w.write_record(&record)?;
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
        self.write_csv(BufWriter::new(file)).map_err(|e| HarnessError::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(offset: f64) -> MetricTable {
        let mut t = MetricTable::new(vec!["return".into(), "violation_0".into()]);
        for k in 0..4 {
            t.push(k, vec![k as f64 + offset, 0.5 * offset]);
        }
        t
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let mut t = MetricTable::new(vec!["a".into()]);
        t.push(0, vec![0.1 + 0.2]);
        t.push(3, vec![-1e-300]);
        t.push(7, vec![f64::MAX]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iteration,a\n0,3.0000000000000004e-1\n"), "{text}");
        assert_eq!(MetricTable::read_csv(&buf[..], "t").unwrap(), t);
    }

    #[test]
    fn single_input_is_degenerate() {
        let a = aggregate(&[table(1.0)]).unwrap();
        assert!(a.degenerate);
        assert_eq!(a.inputs, 1);
        assert!(a.rows.iter().all(|r| r.half_width.iter().all(|w| *w == 0.0)));
        assert_eq!(a.rows[2].mean, vec![3.0, 0.5]);
    }

    #[test]
    fn identical_inputs_have_zero_width() {
        let a = aggregate(&vec![table(2.0); 5]).unwrap();
        assert!(!a.degenerate);
        for (r, src) in a.rows.iter().zip(&table(2.0).rows) {
            assert_eq!(r.mean, src.values);
            assert_eq!(r.half_width, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn schema_mismatch_is_reported() {
        let mut other = table(0.0);
        other.columns[1] = "violation_1".into();
        assert!(matches!(aggregate(&[table(0.0), other]), Err(HarnessError::SchemaMismatch(_))));
        let mut short = table(0.0);
        short.rows.pop();
        assert!(matches!(aggregate(&[table(0.0), short]), Err(HarnessError::SchemaMismatch(_))));
        assert!(matches!(aggregate(&[]), Err(HarnessError::SchemaMismatch(_))));
        let bad = "step,a\n0,1\n";
        assert!(matches!(MetricTable::read_csv(bad.as_bytes(), "x"), Err(HarnessError::SchemaMismatch(_))));
    }
}
