//! On-disk formats: headerless data CSV with a JSON sidecar, estimate
//! directories with one dense CSV per layer, and the provenance block every
//! output carries.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mlgem_core::{center_and_wrap, Matrix, PanelDataset, PrecisionStack};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const LAYOUT: &str = "categories-contiguous";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl Provenance {
    pub fn new<C: Serialize>(seed: Option<u64>, config: &C) -> Self {
        Self {
            tool: "mlgem".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config_hash: config_hash(config),
        }
    }
}

/// SHA-256 of the config's canonical JSON encoding.
pub fn config_hash<C: Serialize>(config: &C) -> String {
    let bytes = serde_json::to_vec(config).expect("configs serialise");
    hex(&Sha256::digest(&bytes))
}

pub fn file_sha256(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Reads a JSON document, rejecting unknown keys and wrong schema versions
/// with the parser's line and column.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::invalid(path, e))?;
    match value.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(CliError::invalid(
                path,
                format!("unsupported schema_version {v}, expected {SCHEMA_VERSION}"),
            ))
        }
        None => return Err(CliError::invalid(path, "missing schema_version")),
    }
    serde_json::from_str(&text).map_err(|e| CliError::invalid(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("outputs serialise");
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Shortest decimal form that parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn write_matrix(path: &Path, m: &Matrix) -> CliResult<()> {
    let mut out = String::with_capacity(m.nrows() * m.ncols() * 12);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(m[(i, j)]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

fn read_matrix(path: &Path, ncols: Option<usize>) -> CliResult<Matrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let mut values = Vec::new();
    let mut width = ncols;
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| CliError::invalid(path, e))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(CliError::invalid(
                path,
                format!("line {line}: expected {w} fields, found {}", record.len()),
            ));
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::invalid(
                    path,
                    format!("line {line}, column {}: cannot parse {field:?}", col + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(CliError::invalid(
                    path,
                    format!("line {line}, column {}: non-finite value", col + 1),
                ));
            }
            values.push(v);
        }
        rows += 1;
    }
    let w = width.unwrap_or(0);
    Ok(Matrix::from_row_slice(rows, w, &values))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataManifest {
    pub schema_version: u32,
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: usize,
    pub layout: String,
    pub centered: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

/// Sidecar manifest path for a data CSV: same stem, `.json` extension.
pub fn manifest_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

pub fn write_dataset(path: &Path, data: &PanelDataset, provenance: Provenance) -> CliResult<()> {
    write_matrix(path, data.values())?;
    let manifest = DataManifest {
        schema_version: SCHEMA_VERSION,
        n: data.n(),
        k: data.k_categories(),
        p: data.p(),
        layout: LAYOUT.into(),
        centered: data.is_centered(),
        provenance: Some(provenance),
    };
    write_json(&manifest_path(path), &manifest)
}

pub fn read_dataset(path: &Path) -> CliResult<PanelDataset> {
    let mpath = manifest_path(path);
    if !mpath.exists() {
        return Err(CliError::io(&mpath, "data manifest not found"));
    }
    let manifest: DataManifest = read_json(&mpath)?;
    if manifest.layout != LAYOUT {
        return Err(CliError::invalid(
            &mpath,
            format!("unsupported layout {:?}", manifest.layout),
        ));
    }
    let values = read_matrix(path, Some(manifest.k * manifest.p))?;
    if values.nrows() != manifest.n {
        return Err(CliError::invalid(
            path,
            format!(
                "manifest declares n = {} rows, file has {}",
                manifest.n,
                values.nrows()
            ),
        ));
    }
    let wrapped = if manifest.centered {
        PanelDataset::new(values, manifest.k, manifest.p, true)
    } else {
        center_and_wrap(values, manifest.k, manifest.p)
    };
    wrapped.map_err(|e| CliError::invalid(path, e))
}

/// Everything in an estimate manifest besides the layers themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateManifest {
    pub schema_version: u32,
    #[serde(rename = "K")]
    pub k: usize,
    pub p: usize,
    pub layers: Vec<String>,
    #[serde(default)]
    pub alphas: Option<Vec<f64>>,
    #[serde(default)]
    pub method: Option<String>,
    #[serde(default)]
    pub lambda1: Option<f64>,
    #[serde(default)]
    pub lambda2: Option<f64>,
    #[serde(default)]
    pub converged: Option<bool>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub wall_time_seconds: Option<f64>,
    #[serde(default)]
    pub objective_trace: Vec<f64>,
    #[serde(default)]
    pub edge_count: Option<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub selection: Option<serde_json::Value>,
    pub provenance: Provenance,
}

impl EstimateManifest {
    pub fn for_stack(stack: &PrecisionStack, provenance: Provenance) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            k: stack.k_categories(),
            p: stack.p(),
            layers: (0..=stack.k_categories()).map(layer_file).collect(),
            alphas: stack.alphas_raw().map(<[f64]>::to_vec),
            method: None,
            lambda1: None,
            lambda2: None,
            converged: None,
            iterations: None,
            wall_time_seconds: None,
            objective_trace: Vec::new(),
            edge_count: Some(stack.edge_count()),
            warnings: Vec::new(),
            selection: None,
            provenance,
        }
    }
}

fn layer_file(k: usize) -> String {
    format!("layer_{k}.csv")
}

pub const ESTIMATE_MANIFEST: &str = "manifest.json";
pub const EDGES_FILE: &str = "edges.tsv";

/// Writes `layer_k.csv` for every layer, `edges.tsv` and `manifest.json`.
pub fn write_estimate(
    dir: &Path,
    stack: &PrecisionStack,
    manifest: &EstimateManifest,
) -> CliResult<()> {
    create_dir(dir)?;
    for (k, omega) in stack.omegas().iter().enumerate() {
        write_matrix(&dir.join(layer_file(k)), omega)?;
    }
    let edges_path = dir.join(EDGES_FILE);
    let mut edges = String::from("layer\ti\tj\tweight\n");
    for (k, omega) in stack.omegas().iter().enumerate() {
        for j in 0..omega.ncols() {
            for i in 0..j {
                let w = omega[(i, j)];
                if w != 0.0 {
                    edges.push_str(&format!("{k}\t{i}\t{j}\t{}\n", fmt_f64(w)));
                }
            }
        }
    }
    fs::write(&edges_path, edges).map_err(|e| CliError::io(&edges_path, e))?;
    write_json(&dir.join(ESTIMATE_MANIFEST), manifest)
}

pub fn read_estimate(dir: &Path) -> CliResult<(PrecisionStack, EstimateManifest)> {
    let mpath = dir.join(ESTIMATE_MANIFEST);
    let manifest: EstimateManifest = read_json(&mpath)?;
    if manifest.layers.len() != manifest.k + 1 {
        return Err(CliError::invalid(
            &mpath,
            format!(
                "expected {} layers, manifest lists {}",
                manifest.k + 1,
                manifest.layers.len()
            ),
        ));
    }
    let mut omegas = Vec::with_capacity(manifest.k + 1);
    for name in &manifest.layers {
        let path = dir.join(name);
        let m = read_matrix(&path, Some(manifest.p))?;
        if m.nrows() != manifest.p {
            return Err(CliError::invalid(
                &path,
                format!("expected {} rows, found {}", manifest.p, m.nrows()),
            ));
        }
        omegas.push(m);
    }
    let stack = PrecisionStack::new(omegas, manifest.alphas.clone())
        .map_err(|e| CliError::invalid(&mpath, e))?;
    Ok((stack, manifest))
}

/// Writes rows to a CSV file with a header; rows are already formatted.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(header).map_err(|e| CliError::io(path, e))?;
        for row in rows {
            w.write_record(row).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))?;
    }
    fs::write(path, out).map_err(|e| CliError::io(path, e))
}

/// CSV text for stdout.
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn num(v: f64) -> String {
    fmt_f64(v)
}

pub fn print(text: &str) -> CliResult<()> {
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Io(format!("stdout: {e}")))
}
