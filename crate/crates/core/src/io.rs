//! On-disk formats. Every table is a CSV preceded by `# key: value`
//! metadata lines; the first two are always `schema` and `kind`, and readers
//! refuse a file whose schema or kind does not match.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSystem;
use crate::cluster::{alert_name, ClusterModel};
use crate::curve::{FunctionalDataset, RawCurve, SmoothedCurve};
use crate::error::{Error, Result};
use crate::fosr::{CoefficientFunctions, MeanFitModel, QuantileFitModel, Standardization};
use crate::ingest::csv_error;

pub const SCHEMA_VERSION: &str = "fdapanel/1";

/// Ordered `key: value` header of a table file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metadata {
    entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn new(kind: &str, manifest_digest: &str) -> Self {
        let mut m = Metadata::default();
        m.set("schema", SCHEMA_VERSION);
        m.set("kind", kind);
        m.set("manifest", manifest_digest);
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        let value = value.to_string();
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.entries.push((key.to_string(), value)),
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    fn require(&self, key: &str, source: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Schema {
            path: source.to_string(),
            msg: format!("metadata key `{key}` missing"),
        })
    }

    fn number<T: std::str::FromStr>(&self, key: &str, source: &str) -> Result<T> {
        let s = self.require(key, source)?;
        s.parse().map_err(|_| Error::Schema {
            path: source.to_string(),
            msg: format!("metadata `{key}` has bad value `{s}`"),
        })
    }
}

/// A parsed table: metadata, header and rows with their line numbers.
#[derive(Debug, Clone)]
pub struct Table {
    pub source: String,
    pub meta: Metadata,
    pub header: Vec<String>,
    pub rows: Vec<(usize, Vec<String>)>,
}

impl Table {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: self.source.clone(),
            msg: format!("missing column `{name}`"),
        })
    }

    fn bad(&self, line: usize, msg: String) -> Error {
        Error::Parse {
            path: self.source.clone(),
            line,
            msg,
        }
    }

    fn float(&self, line: usize, s: &str) -> Result<f64> {
        s.parse().map_err(|_| self.bad(line, format!("bad number `{s}`")))
    }
}

/// Shortest round-trip text of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_table<I>(path: impl AsRef<Path>, meta: &Metadata, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (k, v) in &meta.entries {
        writeln!(out, "# {k}: {v}").map_err(io)?;
    }
    {
        let mut w = csv::Writer::from_writer(&mut out);
        let src = path.display().to_string();
        w.write_record(header).map_err(|e| csv_error(&src, e))?;
        for row in rows {
            w.write_record(&row).map_err(|e| csv_error(&src, e))?;
        }
        w.flush().map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a table and checks its schema version and kind.
pub fn read_table(path: impl AsRef<Path>, kind: &str) -> Result<Table> {
    let path = path.as_ref();
    let source = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut meta = Metadata::default();
    let mut body = String::new();
    let mut meta_lines = 0;
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        match line.strip_prefix('#') {
            Some(rest) => {
                meta_lines += 1;
                if let Some((k, v)) = rest.split_once(':') {
                    meta.entries.push((k.trim().to_string(), v.trim().to_string()));
                }
            }
            None => {
                body.push_str(&line);
                reader.read_to_string(&mut body).map_err(|e| Error::io(path, e))?;
                break;
            }
        }
    }
    match meta.get("schema") {
        Some(SCHEMA_VERSION) => {}
        other => {
            return Err(Error::Schema {
                path: source,
                msg: format!("expected schema {SCHEMA_VERSION}, found {}", other.unwrap_or("none")),
            })
        }
    }
    if meta.get("kind") != Some(kind) {
        return Err(Error::Schema {
            path: source,
            msg: format!("expected a {kind} file, found {}", meta.get("kind").unwrap_or("none")),
        });
    }
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| csv_error(&source, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(&source, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize) + meta_lines;
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        source,
        meta,
        header,
        rows,
    })
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// Long format `city_id,t,value`.
pub fn write_raw_curves(path: impl AsRef<Path>, meta: &Metadata, curves: &[RawCurve]) -> Result<()> {
    let rows = curves.iter().flat_map(|c| {
        c.times
            .iter()
            .zip(&c.values)
            .map(|(t, v)| vec![c.id.clone(), fmt_f64(*t), fmt_f64(*v)])
    });
    write_table(path, meta, &strings(&["city_id", "t", "value"]), rows)
}

pub fn read_raw_curves(path: impl AsRef<Path>) -> Result<(Metadata, Vec<RawCurve>)> {
    let table = read_table(path, "raw-curves")?;
    let (ci, ti, vi) = (table.column("city_id")?, table.column("t")?, table.column("value")?);
    let mut grouped: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (line, row) in &table.rows {
        let e = grouped.entry(row[ci].clone()).or_default();
        e.0.push(table.float(*line, &row[ti])?);
        e.1.push(table.float(*line, &row[vi])?);
    }
    let curves = grouped
        .into_iter()
        .map(|(id, (t, v))| RawCurve::new(id, t, v))
        .collect::<Result<Vec<_>>>()?;
    Ok((table.meta, curves))
}

/// `city_id,observed_hi,w_1..w_K`, with the basis and grid in the metadata.
pub fn write_smoothed(path: impl AsRef<Path>, meta: &Metadata, ds: &FunctionalDataset) -> Result<()> {
    let mut meta = meta.clone();
    let (lo, hi) = ds.basis.domain();
    meta.set("basis_lo", fmt_f64(lo))
        .set("basis_hi", fmt_f64(hi))
        .set("basis_order", ds.basis.order())
        .set("num_basis", ds.basis.num_basis())
        .set("grid_points", ds.grid.len());
    let mut header = strings(&["city_id", "observed_hi"]);
    header.extend((1..=ds.basis.num_basis()).map(|k| format!("w_{k}")));
    let rows = ds.curves.iter().map(|c| {
        let mut row = vec![c.id.clone(), fmt_f64(c.observed_hi)];
        row.extend(c.coefficients.iter().map(|w| fmt_f64(*w)));
        row
    });
    write_table(path, &meta, &header, rows)
}

pub fn read_smoothed(path: impl AsRef<Path>) -> Result<(Metadata, FunctionalDataset)> {
    let table = read_table(path, "smoothed-curves")?;
    let src = table.source.as_str();
    let basis = Arc::new(BasisSystem::new(
        table.meta.number("basis_lo", src)?,
        table.meta.number("basis_hi", src)?,
        table.meta.number("num_basis", src)?,
        table.meta.number("basis_order", src)?,
    )?);
    let grid = basis.uniform_grid(table.meta.number("grid_points", src)?)?;
    let k = basis.num_basis();
    let ci = table.column("city_id")?;
    let oi = table.column("observed_hi")?;
    let wi = (1..=k)
        .map(|j| table.column(&format!("w_{j}")))
        .collect::<Result<Vec<_>>>()?;
    let mut curves = Vec::with_capacity(table.rows.len());
    for (line, row) in &table.rows {
        let coefs = wi.iter().map(|&c| table.float(*line, &row[c])).collect::<Result<Vec<_>>>()?;
        let hi = table.float(*line, &row[oi])?;
        curves.push(SmoothedCurve::new(row[ci].clone(), basis.clone(), coefs)?.with_observed_hi(hi));
    }
    let ds = FunctionalDataset::new(basis, curves, grid)?;
    Ok((table.meta, ds))
}

/// `city_id,cluster,alert_label,ell` with clusters numbered from 1.
pub fn write_clusters(path: impl AsRef<Path>, meta: &Metadata, model: &ClusterModel) -> Result<()> {
    let mut meta = meta.clone();
    meta.set("k", model.k)
        .set("ell", model.ell)
        .set("assignment", "nearest centroid, L2 distance normalized by the shared observed range")
        .set("within_dispersion", fmt_f64(model.within_dispersion))
        .set("iterations", model.iterations)
        .set(
            "dispersion_trace",
            model.dispersion_trace.iter().map(|d| fmt_f64(*d)).collect::<Vec<_>>().join(" "),
        );
    let rows = model.ids.iter().zip(&model.assignments).map(|(id, &a)| {
        vec![
            id.clone(),
            (a + 1).to_string(),
            model.alert_label(a).to_string(),
            model.ell.to_string(),
        ]
    });
    write_table(path, &meta, &strings(&["city_id", "cluster", "alert_label", "ell"]), rows)
}

/// `t,centroid_1..K`.
pub fn write_centroids(path: impl AsRef<Path>, meta: &Metadata, model: &ClusterModel) -> Result<()> {
    let mut header = strings(&["t"]);
    header.extend((1..=model.k).map(|c| format!("centroid_{c}")));
    let rows = model.grid.iter().enumerate().map(|(g, t)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(model.centroids.iter().map(|c| fmt_f64(c[g])));
        row
    });
    write_table(path, meta, &header, rows)
}

/// Rebuilds a clustering from its assignment and centroid files.
pub fn read_clusters(clusters: impl AsRef<Path>, centroids: impl AsRef<Path>) -> Result<ClusterModel> {
    let table = read_table(clusters, "clusters")?;
    let src = table.source.clone();
    let k: usize = table.meta.number("k", &src)?;
    let ell: usize = table.meta.number("ell", &src)?;
    let (ci, ki, li) = (
        table.column("city_id")?,
        table.column("cluster")?,
        table.column("alert_label")?,
    );
    let mut entries = Vec::with_capacity(table.rows.len());
    let mut alert_ranks = vec![usize::MAX; k];
    for (line, row) in &table.rows {
        let c: usize = row[ki]
            .parse()
            .ok()
            .filter(|c| (1..=k).contains(c))
            .ok_or_else(|| table.bad(*line, format!("bad cluster `{}`", row[ki])))?;
        let rank = (0..k)
            .find(|&r| alert_name(r, k) == row[li])
            .ok_or_else(|| table.bad(*line, format!("unknown alert label `{}`", row[li])))?;
        if alert_ranks[c - 1] != usize::MAX && alert_ranks[c - 1] != rank {
            return Err(table.bad(*line, format!("cluster {c} carries two labels")));
        }
        alert_ranks[c - 1] = rank;
        entries.push((row[ci].clone(), c - 1));
    }
    if alert_ranks.contains(&usize::MAX) {
        return Err(Error::Schema {
            path: src,
            msg: "a cluster has no members".into(),
        });
    }
    entries.sort();
    let (ids, assignments) = entries.into_iter().unzip();

    let cent = read_table(centroids, "centroids")?;
    let ti = cent.column("t")?;
    let cols = (1..=k)
        .map(|c| cent.column(&format!("centroid_{c}")))
        .collect::<Result<Vec<_>>>()?;
    let mut grid = Vec::with_capacity(cent.rows.len());
    let mut cents = vec![Vec::with_capacity(cent.rows.len()); k];
    for (line, row) in &cent.rows {
        grid.push(cent.float(*line, &row[ti])?);
        for (c, &col) in cols.iter().enumerate() {
            cents[c].push(cent.float(*line, &row[col])?);
        }
    }
    let trace = table
        .meta
        .get("dispersion_trace")
        .unwrap_or("")
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Schema {
            path: src.clone(),
            msg: "bad dispersion_trace".into(),
        })?;
    Ok(ClusterModel {
        k,
        ell,
        grid,
        ids,
        assignments,
        centroids: cents,
        within_dispersion: table.meta.number("within_dispersion", &src)?,
        dispersion_trace: trace,
        iterations: table.meta.number("iterations", &src)?,
        alert_ranks,
    })
}

/// Serialized coefficient functions of a fitted regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub schema: String,
    /// `"fosqr"` or `"flm"`.
    pub model: String,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub manifest: String,
    pub basis: BasisSpec,
    pub standardization: Standardization,
    /// Coefficient vectors of `β_0..β_p`.
    pub coefficients: Vec<Vec<f64>>,
    pub observed_hi: Vec<f64>,
    pub smoothing_residual: Vec<f64>,
    /// Grid indices without a pointwise fit.
    pub skipped: Vec<usize>,
    /// Indices (0-based, slopes only) of covariates active at some grid point.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub domain_lo: f64,
    pub domain_hi: f64,
    pub order: usize,
    pub num_basis: usize,
}

impl BasisSpec {
    pub fn of(b: &BasisSystem) -> Self {
        let (domain_lo, domain_hi) = b.domain();
        BasisSpec {
            domain_lo,
            domain_hi,
            order: b.order(),
            num_basis: b.num_basis(),
        }
    }

    pub fn build(&self) -> Result<BasisSystem> {
        BasisSystem::new(self.domain_lo, self.domain_hi, self.num_basis, self.order)
    }
}

impl ModelFile {
    fn from_coefficients(
        model: &str,
        tau: Option<f64>,
        lambda: Option<f64>,
        manifest: &str,
        coef: &CoefficientFunctions,
        skipped: &[usize],
        active: Vec<usize>,
    ) -> Self {
        ModelFile {
            schema: SCHEMA_VERSION.to_string(),
            model: model.to_string(),
            tau,
            lambda,
            manifest: manifest.to_string(),
            basis: BasisSpec::of(&coef.basis),
            standardization: coef.standardization.clone(),
            coefficients: coef.curves.iter().map(|c| c.coefficients.clone()).collect(),
            observed_hi: coef.curves.iter().map(|c| c.observed_hi).collect(),
            smoothing_residual: coef.smoothing_residual.clone(),
            skipped: skipped.to_vec(),
            active,
        }
    }

    pub fn from_quantile(m: &QuantileFitModel, manifest: &str) -> Self {
        ModelFile::from_coefficients(
            "fosqr",
            Some(m.tau),
            Some(m.lambda),
            manifest,
            &m.coefficients,
            &m.skipped,
            m.active_covariates(),
        )
    }

    pub fn from_mean(m: &MeanFitModel, manifest: &str) -> Self {
        let p = m.coefficients.num_covariates();
        ModelFile::from_coefficients("flm", None, None, manifest, &m.coefficients, &m.skipped, (0..p).collect())
    }

    pub fn coefficient_functions(&self) -> Result<CoefficientFunctions> {
        let basis = Arc::new(self.basis.build()?);
        if self.coefficients.len() != self.standardization.len() + 1 || self.observed_hi.len() != self.coefficients.len() {
            return Err(Error::DimensionMismatch {
                expected: self.standardization.len() + 1,
                got: self.coefficients.len(),
            });
        }
        let curves = self
            .coefficients
            .iter()
            .zip(&self.observed_hi)
            .enumerate()
            .map(|(j, (w, hi))| Ok(SmoothedCurve::new(format!("beta_{j}"), basis.clone(), w.clone())?.with_observed_hi(*hi)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoefficientFunctions {
            basis,
            curves,
            standardization: self.standardization.clone(),
            smoothing_residual: self.smoothing_residual.clone(),
        })
    }

    /// Quantile model without its pointwise fits.
    pub fn into_quantile(self) -> Result<QuantileFitModel> {
        let (Some(tau), Some(lambda)) = (self.tau, self.lambda) else {
            return Err(Error::InvalidConfig(format!("a {} model has no quantile level", self.model)));
        };
        Ok(QuantileFitModel {
            tau,
            lambda,
            coefficients: self.coefficient_functions()?,
            pointwise: Vec::new(),
            skipped: self.skipped,
        })
    }

    pub fn into_mean(self) -> Result<MeanFitModel> {
        Ok(MeanFitModel {
            coefficients: self.coefficient_functions()?,
            pointwise: Vec::new(),
            skipped: self.skipped,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelFile::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let m: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: source.to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if m.schema != SCHEMA_VERSION {
            return Err(Error::Schema {
                path: source.to_string(),
                msg: format!("expected schema {SCHEMA_VERSION}, found {}", m.schema),
            });
        }
        Ok(m)
    }
}

/// `t,beta_0..beta_p` on `grid`.
pub fn write_coefficient_curves(
    path: impl AsRef<Path>,
    meta: &Metadata,
    coef: &CoefficientFunctions,
    grid: &[f64],
) -> Result<()> {
    let paths = coef.paths(grid)?;
    let mut header = strings(&["t"]);
    header.extend((0..paths.len()).map(|j| format!("beta_{j}")));
    let rows = grid.iter().enumerate().map(|(g, t)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(paths.iter().map(|p| fmt_f64(p[g])));
        row
    });
    write_table(path, meta, &header, rows)
}

/// Writes a CSV of float columns `t, name_1, ...` sharing one grid.
pub fn write_series(
    path: impl AsRef<Path>,
    meta: &Metadata,
    grid: &[f64],
    series: &[(String, Vec<f64>)],
) -> Result<()> {
    let mut header = strings(&["t"]);
    header.extend(series.iter().map(|(n, _)| n.clone()));
    let rows = grid.iter().enumerate().map(|(g, t)| {
        let mut row = vec![fmt_f64(*t)];
        row.extend(series.iter().map(|(_, v)| fmt_f64(v[g])));
        row
    });
    write_table(path, meta, &header, rows)
}
