//! Dataset CSV schema and report emission.
//!
//! Dataset files carry the header `cluster_id,household_id,y,a,x1..xd`;
//! rows are grouped by cluster_id in order of first appearance, preserving
//! household order within a cluster.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use omar_core::{ClusterData, Dataset, Error, Household, Result};

/// Reads a dataset CSV, validating binary outcomes/treatments and a
/// rectangular covariate block. Errors cite the 1-based file line.
pub fn ingest_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?
        .clone();
    let fixed = ["cluster_id", "household_id", "y", "a"];
    if headers.len() < fixed.len() + 1 {
        return Err(Error::InvalidData(format!(
            "{}: header needs cluster_id,household_id,y,a,x1.. (got {} columns)",
            path.display(),
            headers.len()
        )));
    }
    for (k, name) in fixed.iter().enumerate() {
        if &headers[k] != *name {
            return Err(Error::InvalidData(format!(
                "{}: column {} must be '{name}', found '{}'",
                path.display(),
                k + 1,
                &headers[k]
            )));
        }
    }
    let d = headers.len() - fixed.len();
    for k in 0..d {
        let expected = format!("x{}", k + 1);
        if &headers[fixed.len() + k] != expected.as_str() {
            return Err(Error::InvalidData(format!(
                "{}: covariate column {} must be '{expected}', found '{}'",
                path.display(),
                fixed.len() + k + 1,
                &headers[fixed.len() + k]
            )));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<Household>> =
        std::collections::HashMap::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record =
            record.map_err(|e| Error::InvalidData(format!("{} line {line}: {e}", path.display())))?;
        if record.len() != headers.len() {
            return Err(Error::InvalidData(format!(
                "{} line {line}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                record.len()
            )));
        }
        let cluster_id = record[0].to_string();
        let parse_binary = |field: usize, name: &str| -> Result<u8> {
            match record[field].trim() {
                "0" => Ok(0),
                "1" => Ok(1),
                other => Err(Error::InvalidData(format!(
                    "{} line {line}: {name} must be 0 or 1, found '{other}'",
                    path.display()
                ))),
            }
        };
        let y = parse_binary(2, "y")?;
        let a = parse_binary(3, "a")?;
        let mut x = Vec::with_capacity(d);
        for k in 0..d {
            let v: f64 = record[4 + k].trim().parse().map_err(|_| {
                Error::InvalidData(format!(
                    "{} line {line}: x{} is not a number: '{}'",
                    path.display(),
                    k + 1,
                    &record[4 + k]
                ))
            })?;
            x.push(v);
        }
        if !groups.contains_key(&cluster_id) {
            order.push(cluster_id.clone());
        }
        groups.entry(cluster_id).or_default().push(Household { y, a, x });
    }
    if order.is_empty() {
        return Err(Error::InvalidData(format!("{}: no data rows", path.display())));
    }
    let clusters = order
        .into_iter()
        .map(|id| {
            let households = groups.remove(&id).expect("grouped rows");
            ClusterData::new(id, households)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(clusters)
}

/// Writes a dataset in the ingest schema. Floats print in shortest
/// round-trip form so export-then-ingest reproduces the dataset exactly.
pub fn export_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path)
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let d = dataset.covariate_dim();
    let mut header = String::from("cluster_id,household_id,y,a");
    for k in 0..d {
        header.push_str(&format!(",x{}", k + 1));
    }
    writeln!(w, "{header}").map_err(io_err(path))?;
    for cluster in dataset.clusters() {
        for (j, h) in cluster.households.iter().enumerate() {
            let mut row = format!("{},{},{},{}", cluster.cluster_id, j, h.y, h.a);
            for v in &h.x {
                row.push_str(&format!(",{v}"));
            }
            writeln!(w, "{row}").map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::InvalidData(format!("{}: {e}", path.display()))
}

/// Formats a float with six significant digits, deterministically.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

/// A rectangular report: stable column order, one row per record. The CSV
/// and JSON emissions carry identical content.
pub struct Report {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Report {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "report row width");
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", self.columns.join(",")).map_err(io_err(path))?;
        for row in &self.rows {
            writeln!(w, "{}", row.join(",")).map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let records: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|row| {
                let map: serde_json::Map<String, serde_json::Value> = self
                    .columns
                    .iter()
                    .zip(row)
                    .map(|(c, v)| (c.clone(), serde_json::Value::String(v.clone())))
                    .collect();
                serde_json::Value::Object(map)
            })
            .collect();
        let body = serde_json::to_string_pretty(&records)
            .map_err(|e| Error::InvalidData(format!("serialize report: {e}")))?;
        std::fs::write(path, body).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_six_digits() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.123456789), "0.123457");
        assert_eq!(fmt_sig(1234.5678), "1234.57");
        assert_eq!(fmt_sig(-0.000012345678), "-0.0000123457");
        assert_eq!(fmt_sig(1.0), "1.00000");
    }

    #[test]
    fn ingest_rejects_bad_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");

        std::fs::write(&path, "cluster_id,household_id,y,a,x1\nc1,0,2,0,0.5\n").unwrap();
        let err = ingest_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");

        std::fs::write(
            &path,
            "cluster_id,household_id,y,a,x1\nc1,0,1,0,0.5\nc1,1,1,0,0.25\nc2,0,1,1,zzz\n",
        )
        .unwrap();
        let err = ingest_csv(&path).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");

        std::fs::write(&path, "cluster_id,household_id,y,b,x1\nc1,0,1,0,0.5\n").unwrap();
        assert!(ingest_csv(&path).is_err());
    }

    #[test]
    fn ingest_groups_clusters_in_file_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.csv");
        std::fs::write(
            &path,
            "cluster_id,household_id,y,a,x1,x2\n\
             b,0,1,0,0.5,1\n\
             b,1,0,1,0.25,2\n\
             a,0,1,1,0.75,3\n\
             a,1,0,0,0.5,4\n\
             a,2,1,0,0.1,5\n",
        )
        .unwrap();
        let data = ingest_csv(&path).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.clusters()[0].cluster_id, "b");
        assert_eq!(data.clusters()[0].n(), 2);
        assert_eq!(data.clusters()[1].cluster_id, "a");
        assert_eq!(data.clusters()[1].n(), 3);
        assert_eq!(data.covariate_dim(), 2);
    }

    #[test]
    fn export_ingest_roundtrip() {
        use omar_core::simulation::{simulate, SimConfig};
        let data = simulate(&SimConfig { n_clusters: 30, ..Default::default() }, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        export_csv(&data, &path).unwrap();
        let back = ingest_csv(&path).unwrap();
        assert_eq!(data, back);
    }
}
