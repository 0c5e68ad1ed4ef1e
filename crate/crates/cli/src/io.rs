//! CSV artifacts. Data files start with `#` comment lines carrying the
//! provenance, followed by a header row.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ibis_core::bilevel::CanarySet;
use ibis_core::influence::InfluenceMatrix;
use ibis_core::{Dataset, Sample, Task};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Provenance {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn comment(&self) -> String {
        format!(
            "# ibis {} config_hash={} seed={}\n",
            self.version, self.config_hash, self.seed
        )
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_table(path: &Path, prov: Option<&Provenance>, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut out = String::new();
    if let Some(p) = prov {
        out.push_str(&p.comment());
    }
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(|e| CliError::Input(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Input(e.to_string()))?;
    out.push_str(&String::from_utf8(bytes).expect("csv output is utf-8"));
    write_text(path, &out)
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn feature_header(d: usize) -> Vec<String> {
    (0..d).map(|j| format!("f{j}")).collect()
}

/// `f0,...,f{d-1},label` rows.
pub fn export_csv(dataset: &Dataset, path: &Path, prov: Option<&Provenance>) -> Result<(), CliError> {
    let mut header = feature_header(dataset.dim());
    header.push("label".into());
    let rows: Vec<Vec<String>> = dataset
        .samples()
        .iter()
        .map(|z| z.x.iter().map(|&v| num(v)).chain(std::iter::once(num(z.y))).collect())
        .collect();
    write_table(path, prov, &header, &rows)
}

fn reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_float(field: &str, line: u64, column: &str) -> Result<f64, CliError> {
    field
        .parse::<f64>()
        .map_err(|_| CliError::Input(format!("line {line}: column `{column}` holds `{field}`, not a number")))
}

/// Reads a dataset with header `f0,...,f{d-1},label`, keeping row order.
pub fn ingest_csv(path: &Path, task: Task) -> Result<Dataset, CliError> {
    let mut rdr = reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    if names.last() != Some(&"label") {
        return Err(CliError::Input(format!(
            "{}: missing column `label` (expected as the last header field)",
            path.display()
        )));
    }
    let d = names.len() - 1;
    for (j, name) in names[..d].iter().enumerate() {
        if *name != format!("f{j}") {
            return Err(CliError::Input(format!(
                "{}: header column {} is `{name}`, expected `f{j}`",
                path.display(),
                j + 1
            )));
        }
    }
    if d == 0 {
        return Err(CliError::Input(format!("{}: no feature columns", path.display())));
    }
    let mut samples = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 1 {
            return Err(CliError::Input(format!(
                "line {line}: expected {} fields, found {}",
                d + 1,
                rec.len()
            )));
        }
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            x.push(parse_float(&rec[j], line, &names[j])?);
        }
        let y = parse_float(&rec[d], line, "label")?;
        task.validate_label(y)
            .map_err(|e| CliError::Input(format!("line {line}: {e}")))?;
        samples.push(Sample::new(x, y));
    }
    Ok(Dataset::new(samples, d, task)?)
}

/// One row per canary: `origin_index,label,f0,...`.
pub fn write_canaries(canaries: &CanarySet, path: &Path, prov: &Provenance) -> Result<(), CliError> {
    let d = canaries.canaries.first().map(|c| c.x.len()).unwrap_or(0);
    let mut header = vec!["origin_index".to_string(), "label".to_string()];
    header.extend(feature_header(d));
    let rows: Vec<Vec<String>> = canaries
        .canaries
        .iter()
        .zip(&canaries.origin_indices)
        .map(|(c, i)| {
            let mut r = vec![i.to_string(), num(c.y)];
            r.extend(c.x.iter().map(|&v| num(v)));
            r
        })
        .collect();
    write_table(path, Some(prov), &header, &rows)
}

pub fn read_canaries(path: &Path) -> Result<CanarySet, CliError> {
    let mut rdr = reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?
        .clone();
    if header.get(0) != Some("origin_index") || header.get(1) != Some("label") {
        return Err(CliError::Input(format!(
            "{}: canary files start with `origin_index,label`",
            path.display()
        )));
    }
    let d = header.len() - 2;
    let mut canaries = Vec::new();
    let mut origin_indices = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != d + 2 {
            return Err(CliError::Input(format!("line {line}: expected {} fields, found {}", d + 2, rec.len())));
        }
        let idx = rec[0]
            .parse::<usize>()
            .map_err(|_| CliError::Input(format!("line {line}: bad origin index `{}`", &rec[0])))?;
        let y = parse_float(&rec[1], line, "label")?;
        let x = (0..d)
            .map(|j| parse_float(&rec[j + 2], line, &header[j + 2]))
            .collect::<Result<Vec<_>, _>>()?;
        origin_indices.push(idx);
        canaries.push(Sample::new(x, y));
    }
    Ok(CanarySet {
        canaries,
        origin_indices,
        box_bounds: None,
    })
}

/// Header row of pool indices, then one row per pool member.
pub fn write_matrix(matrix: &InfluenceMatrix, path: &Path, prov: &Provenance) -> Result<(), CliError> {
    let header: Vec<String> = matrix.indices.iter().map(|i| i.to_string()).collect();
    let rows: Vec<Vec<String>> = matrix
        .scores
        .iter()
        .map(|r| r.iter().map(|&v| num(v)).collect())
        .collect();
    write_table(path, Some(prov), &header, &rows)
}

pub fn write_rows(path: &Path, prov: &Provenance, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    write_table(path, Some(prov), &header, rows)
}

pub fn fmt_num(v: f64) -> String {
    num(v)
}
