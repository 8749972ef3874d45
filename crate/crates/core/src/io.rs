//! CSV input and output of clustered datasets.
//!
//! Schema: a header row with `cluster`, `y`, between covariates
//! `b_1..b_pb` and within covariates `w_1..w_pw`, in any column order.
//! Rows of a cluster need not be contiguous; clusters keep the order of
//! their first appearance. Between covariates must be exactly constant
//! within each cluster.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Cluster, ClusteredDataset};

fn numbered_columns(header: &csv::StringRecord, prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (col, name) in header.iter().enumerate() {
        if let Some(k) = name.trim().strip_prefix(prefix) {
            let k: usize = k
                .parse()
                .map_err(|_| Error::Parse(format!("unrecognized column '{name}'")))?;
            found.push((k, col));
        }
    }
    found.sort_unstable();
    for (expect, &(k, _)) in (1..).zip(&found) {
        if k != expect {
            return Err(Error::Parse(format!("columns {prefix}1.. must be numbered consecutively")));
        }
    }
    Ok(found.into_iter().map(|(_, col)| col).collect())
}

fn find_column(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse(format!("missing column '{name}'")))
}

fn parse_value(raw: &str, line: u64, column: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse(format!("line {line}: column '{column}' has non-numeric value '{raw}'")))
}

struct Pending {
    id: String,
    y: Vec<f64>,
    x_b: Vec<f64>,
    x_w: Vec<f64>,
}

pub fn read_dataset<R: Read>(reader: R) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.clone();
    let c_cluster = find_column(&header, "cluster")?;
    let c_y = find_column(&header, "y")?;
    let c_b = numbered_columns(&header, "b_")?;
    let c_w = numbered_columns(&header, "w_")?;
    let known = 2 + c_b.len() + c_w.len();
    if header.len() != known {
        let extra: Vec<&str> = header
            .iter()
            .filter(|h| *h != "cluster" && *h != "y" && !h.starts_with("b_") && !h.starts_with("w_"))
            .collect();
        return Err(Error::Parse(format!("unrecognized columns {extra:?}")));
    }

    let mut order: Vec<Pending> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let id = record[c_cluster].to_string();
        if id.is_empty() {
            return Err(Error::Parse(format!("line {line}: empty cluster id")));
        }
        let y = parse_value(&record[c_y], line, "y")?;
        let x_b = c_b
            .iter()
            .map(|&c| parse_value(&record[c], line, &header[c]))
            .collect::<Result<Vec<_>>>()?;
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(Pending {
                id: id.clone(),
                y: Vec::new(),
                x_b: x_b.clone(),
                x_w: Vec::new(),
            });
            order.len() - 1
        });
        let pending = &mut order[slot];
        // Bitwise comparison so that NaN is caught later as non-finite, not here.
        if let Some(k) = (0..x_b.len()).find(|&k| x_b[k].to_bits() != pending.x_b[k].to_bits()) {
            return Err(Error::Parse(format!(
                "line {line}: between covariate {} is not constant within cluster '{}'",
                &header[c_b[k]], pending.id
            )));
        }
        pending.y.push(y);
        for &c in &c_w {
            pending.x_w.push(parse_value(&record[c], line, &header[c])?);
        }
    }

    let p_w = c_w.len();
    let clusters = order
        .into_iter()
        .map(|p| {
            let m = p.y.len();
            Cluster::new(p.id, p.y, p.x_b, DMatrix::from_row_slice(m, p_w, &p.x_w))
        })
        .collect();
    ClusteredDataset::new(clusters, c_b.len(), p_w)
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<ClusteredDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    read_dataset(file)
}

/// Writes the dataset in the input schema. Reals use the shortest
/// representation that parses back to the same value.
pub fn write_dataset<W: Write>(ds: &ClusteredDataset, writer: W) -> Result<()> {
    let err = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["cluster".to_string(), "y".to_string()];
    header.extend((1..=ds.p_b()).map(|k| format!("b_{k}")));
    header.extend((1..=ds.p_w()).map(|k| format!("w_{k}")));
    w.write_record(&header).map_err(err)?;
    for c in ds.clusters() {
        for (j, y) in c.y.iter().enumerate() {
            let mut row = vec![c.id.clone(), y.to_string()];
            row.extend(c.x_b.iter().map(f64::to_string));
            row.extend(c.x_w.row(j).iter().map(f64::to_string));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn write_dataset_file(ds: &ClusteredDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    write_dataset(ds, file)
}
