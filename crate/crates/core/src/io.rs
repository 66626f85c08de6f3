//! File formats. Node ids and group labels are 1-based on disk.
//!
//! * edge list CSV: header `from,to`, one directed edge per row (`from` follows `to`);
//! * panel CSV (long): header `node,t,y` with `t = 0..T`;
//! * covariates CSV: header `node,<name_1>,..,<name_p>`;
//! * parameters, memberships and fits: JSON.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Panel;
use crate::net::Network;

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn to_zero_based(id: usize, n: usize, what: &str) -> Result<usize> {
    if id == 0 || id > n {
        return Err(Error::Invalid(format!("{what} {id} outside 1..={n}")));
    }
    Ok(id - 1)
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    from: usize,
    to: usize,
}

pub fn read_edges<R: Read>(n: usize, rdr: R) -> Result<Network> {
    let mut csv = csv::Reader::from_reader(rdr);
    let mut edges = Vec::new();
    for row in csv.deserialize() {
        let e: EdgeRow = row?;
        edges.push((to_zero_based(e.from, n, "node")?, to_zero_based(e.to, n, "node")?));
    }
    Network::from_edges(n, &edges)
}

/// Reads an edge list; the node count is the largest id present unless given.
pub fn load_edges(path: &Path, n: Option<usize>) -> Result<Network> {
    let n = match n {
        Some(n) => n,
        None => {
            let mut csv = csv::Reader::from_reader(open(path)?);
            let mut max = 0;
            for row in csv.deserialize() {
                let e: EdgeRow = row?;
                max = max.max(e.from).max(e.to);
            }
            max
        }
    };
    read_edges(n, open(path)?)
}

pub fn write_edges<W: Write>(net: &Network, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for (i, j) in net.edges() {
        wr.serialize(EdgeRow { from: i + 1, to: j + 1 })?;
    }
    wr.flush().map_err(|e| Error::io("<edges>", e))?;
    Ok(())
}

pub fn save_edges(net: &Network, path: &Path) -> Result<()> {
    write_edges(net, create(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct PanelRow {
    node: usize,
    t: usize,
    y: f64,
}

/// Long-format observations as an `N × (T+1)` matrix; every `(node, t)` cell
/// must appear exactly once.
pub fn read_series<R: Read>(rdr: R) -> Result<DMatrix<f64>> {
    let mut csv = csv::Reader::from_reader(rdr);
    let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let (mut n, mut t_max) = (0, 0);
    for row in csv.deserialize() {
        let r: PanelRow = row?;
        if r.node == 0 {
            return Err(Error::Invalid("node ids are 1-based".into()));
        }
        if cells.insert((r.node - 1, r.t), r.y).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate observation for node {} at t = {}",
                r.node, r.t
            )));
        }
        n = n.max(r.node);
        t_max = t_max.max(r.t);
    }
    if cells.len() != n * (t_max + 1) {
        return Err(Error::Invalid(format!(
            "panel has {} observations, expected {n} nodes x {} periods",
            cells.len(),
            t_max + 1
        )));
    }
    Ok(DMatrix::from_fn(n, t_max + 1, |i, t| cells[&(i, t)]))
}

pub fn write_series<W: Write>(y: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    for i in 0..y.nrows() {
        for t in 0..y.ncols() {
            wr.serialize(PanelRow {
                node: i + 1,
                t,
                y: y[(i, t)],
            })?;
        }
    }
    wr.flush().map_err(|e| Error::io("<panel>", e))?;
    Ok(())
}

/// Covariate matrix and column names; rows may come in any node order.
pub fn read_covariates<R: Read>(n: usize, rdr: R) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut csv = csv::Reader::from_reader(rdr);
    let headers = csv.headers()?.clone();
    if headers.get(0) != Some("node") {
        return Err(Error::Invalid("covariates file must start with a `node` column".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let p = names.len();
    let mut z = DMatrix::zeros(n, p);
    let mut seen = vec![false; n];
    for rec in csv.records() {
        let rec = rec?;
        let node: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Invalid(format!("bad node id `{}`", &rec[0])))?;
        let i = to_zero_based(node, n, "node")?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Invalid(format!("duplicate covariates for node {node}")));
        }
        for k in 0..p {
            z[(i, k)] = rec[k + 1]
                .trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad covariate value `{}`", &rec[k + 1])))?;
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Invalid(format!("no covariates for node {}", i + 1)));
    }
    Ok((z, names))
}

pub fn write_covariates<W: Write>(z: &DMatrix<f64>, names: &[String], out: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(out);
    let header: Vec<String> = std::iter::once("node".to_string())
        .chain((0..z.ncols()).map(|k| names.get(k).cloned().unwrap_or_else(|| format!("z{}", k + 1))))
        .collect();
    wr.write_record(&header)?;
    for i in 0..z.nrows() {
        let rec: Vec<String> = std::iter::once((i + 1).to_string())
            .chain(z.row(i).iter().map(|v| v.to_string()))
            .collect();
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::io("<covariates>", e))?;
    Ok(())
}

/// Panel from a long-format series file and an optional covariates file.
pub fn load_panel(series: &Path, covariates: Option<&Path>) -> Result<Panel> {
    let y = read_series(open(series)?)?;
    match covariates {
        Some(c) => {
            let (z, names) = read_covariates(y.nrows(), open(c)?)?;
            Panel::with_names(&y, z, names)
        }
        None => Panel::new(&y, DMatrix::zeros(y.nrows(), 0)),
    }
}

/// Writes the long-format series file and the covariates file.
pub fn save_panel(panel: &Panel, series: &Path, covariates: &Path) -> Result<()> {
    write_series(&panel.y_matrix(), create(series)?)?;
    write_covariates(panel.z(), panel.covariate_names(), create(covariates)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(open(path)?)?)
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
