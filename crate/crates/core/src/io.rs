//! On-disk formats: datasets, forecasts, metrics, training logs,
//! checkpoints and attention maps.
//!
//! Every CSV written here is read back and checked against its declared
//! header before the writer returns. Floats use Rust's shortest
//! round-trip formatting, so values survive a write/read cycle bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geokernels::SensorGrid;
use crate::grf_sim::{BinEstimate, SimConfig, StDataset};
use crate::model::{AttentionRecord, GeoFormer, ModelConfig, Variant};
use crate::stats::{ForecastResult, MetricSummary, PitSummary};
use crate::training::TrainLog;

fn schema_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        if !p.as_os_str().is_empty() {
            fs::create_dir_all(p)?;
        }
    }
    Ok(())
}

/// Writes a CSV and verifies header and row widths by reading it back.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for r in rows {
            if r.len() != header.len() {
                return Err(schema_err(path, format!("row has {} fields, header {}", r.len(), header.len())));
            }
            w.write_record(r)?;
        }
        w.flush()?;
    }
    check_csv_schema(path, header, Some(rows.len()))
}

/// Confirms that a CSV has exactly `header` and, optionally, `rows` rows.
pub fn check_csv_schema(path: &Path, header: &[String], rows: Option<usize>) -> Result<()> {
    let mut r = csv::Reader::from_path(path)?;
    let got: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if got != header {
        return Err(schema_err(path, format!("header {got:?}, expected {header:?}")));
    }
    let mut count = 0;
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(schema_err(path, format!("record {count} has {} fields", rec.len())));
        }
        count += 1;
    }
    if let Some(n) = rows {
        if n != count {
            return Err(schema_err(path, format!("{count} rows, expected {n}")));
        }
    }
    Ok(())
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|x| x.iter().map(str::to_owned).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| schema_err(path, format!("not a number: {s:?}")))
}

fn parse_usize(path: &Path, s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| schema_err(path, format!("not an index: {s:?}")))
}

fn strs(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| (*s).to_owned()).collect()
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_matrix(path: &Path, data: &[f64], rows: usize, cols: usize, prefix: &str) -> Result<()> {
    let header: Vec<String> = (0..cols).map(|j| format!("{prefix}{j}")).collect();
    let body: Vec<Vec<String>> = data[..rows * cols].chunks(cols).map(|r| r.iter().map(|&x| fmt(x)).collect()).collect();
    write_csv(path, &header, &body)
}

fn read_matrix(path: &Path) -> Result<(usize, Vec<f64>)> {
    let (header, rows) = read_csv(path)?;
    let mut data = Vec::with_capacity(rows.len() * header.len());
    for r in &rows {
        for s in r {
            data.push(parse_f64(path, s)?);
        }
    }
    Ok((header.len(), data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub sim: SimConfig,
    pub seed: u64,
    pub replicate_id: usize,
    pub n: usize,
    pub t_steps: usize,
    pub has_latent: bool,
}

pub const OBSERVATIONS_CSV: &str = "observations.csv";
pub const LATENT_CSV: &str = "latent.csv";
pub const LOCATIONS_CSV: &str = "locations.csv";
pub const META_JSON: &str = "meta.json";

/// Writes `observations.csv` (T rows, one column per site),
/// `locations.csv`, `meta.json` and, when retained, `latent.csv`.
pub fn save_dataset(dir: &Path, ds: &StDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = ds.n();
    write_matrix(&dir.join(OBSERVATIONS_CSV), &ds.observations, ds.t_steps(), n, "")?;
    if let Some(lat) = &ds.latent {
        write_matrix(&dir.join(LATENT_CSV), lat, ds.t_steps(), n, "")?;
    }
    let loc_rows: Vec<Vec<String>> = ds
        .grid
        .locations()
        .iter()
        .enumerate()
        .map(|(i, p)| vec![i.to_string(), fmt(p[0]), fmt(p[1])])
        .collect();
    write_csv(&dir.join(LOCATIONS_CSV), &strs(&["site", "x", "y"]), &loc_rows)?;
    write_json(
        &dir.join(META_JSON),
        &DatasetMeta {
            sim: ds.config.clone(),
            seed: ds.config.seed,
            replicate_id: ds.replicate_id,
            n,
            t_steps: ds.t_steps(),
            has_latent: ds.latent.is_some(),
        },
    )
}

pub fn load_locations(path: &Path) -> Result<SensorGrid> {
    let (header, rows) = read_csv(path)?;
    if header != strs(&["site", "x", "y"]) {
        return Err(schema_err(path, format!("unexpected header {header:?}")));
    }
    let mut locs = vec![[0.0; 2]; rows.len()];
    let mut seen = vec![false; rows.len()];
    for r in &rows {
        let i = parse_usize(path, &r[0])?;
        if i >= rows.len() || seen[i] {
            return Err(schema_err(path, format!("bad or repeated site index {i}")));
        }
        seen[i] = true;
        locs[i] = [parse_f64(path, &r[1])?, parse_f64(path, &r[2])?];
    }
    SensorGrid::new(locs)
}

pub fn load_dataset(dir: &Path) -> Result<StDataset> {
    let meta: DatasetMeta = read_json(&dir.join(META_JSON))?;
    let grid = load_locations(&dir.join(LOCATIONS_CSV))?;
    let obs_path = dir.join(OBSERVATIONS_CSV);
    let (cols, obs) = read_matrix(&obs_path)?;
    if cols != meta.n || grid.n() != meta.n || obs.len() != meta.n * meta.t_steps {
        return Err(schema_err(&obs_path, "dimensions disagree with meta.json"));
    }
    let latent = if meta.has_latent {
        let (_, lat) = read_matrix(&dir.join(LATENT_CSV))?;
        Some(lat)
    } else {
        None
    };
    StDataset::new(grid, obs, latent, meta.sim, meta.replicate_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastSidecar {
    pub model_name: String,
    pub horizon: usize,
    pub n: usize,
    pub t_steps: usize,
    pub has_variance: bool,
}

fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn forecast_header(has_var: bool) -> Vec<String> {
    let mut h = strs(&["t", "site", "target", "prediction"]);
    if has_var {
        h.push("variance".into());
    }
    h
}

/// Long-format forecast CSV plus a JSON sidecar with the same stem.
pub fn save_forecast(path: &Path, r: &ForecastResult) -> Result<()> {
    let has_var = r.variances.is_some();
    let rows: Vec<Vec<String>> = (0..r.predictions.len())
        .map(|k| {
            let mut row = vec![
                (k / r.n).to_string(),
                (k % r.n).to_string(),
                fmt(r.targets[k]),
                fmt(r.predictions[k]),
            ];
            if let Some(v) = &r.variances {
                row.push(fmt(v[k]));
            }
            row
        })
        .collect();
    write_csv(path, &forecast_header(has_var), &rows)?;
    write_json(
        &sidecar_path(path),
        &ForecastSidecar {
            model_name: r.model_name.clone(),
            horizon: r.horizon,
            n: r.n,
            t_steps: r.t_steps(),
            has_variance: has_var,
        },
    )
}

pub fn load_forecast(path: &Path) -> Result<ForecastResult> {
    let side: ForecastSidecar = read_json(&sidecar_path(path))?;
    let (header, rows) = read_csv(path)?;
    if header != forecast_header(side.has_variance) {
        return Err(schema_err(path, format!("unexpected header {header:?}")));
    }
    let total = side.n * side.t_steps;
    if rows.len() != total {
        return Err(schema_err(path, format!("{} rows, sidecar implies {total}", rows.len())));
    }
    let mut pred = vec![f64::NAN; total];
    let mut targ = vec![f64::NAN; total];
    let mut var = side.has_variance.then(|| vec![f64::NAN; total]);
    for r in &rows {
        let (t, s) = (parse_usize(path, &r[0])?, parse_usize(path, &r[1])?);
        if t >= side.t_steps || s >= side.n {
            return Err(schema_err(path, format!("index (t={t}, site={s}) out of range")));
        }
        let k = t * side.n + s;
        targ[k] = parse_f64(path, &r[2])?;
        pred[k] = parse_f64(path, &r[3])?;
        if let Some(v) = var.as_mut() {
            v[k] = parse_f64(path, &r[4])?;
        }
    }
    ForecastResult::new(side.model_name, side.horizon, side.n, pred, var, targ)
}

pub fn save_metrics(path: &Path, m: &MetricSummary) -> Result<()> {
    write_json(path, m)
}

pub fn save_pit_histogram(path: &Path, pit: &PitSummary) -> Result<()> {
    let bins = pit.histogram.len();
    let total: usize = pit.histogram.iter().sum();
    let rows = pit
        .histogram
        .iter()
        .enumerate()
        .map(|(b, &c)| {
            vec![
                fmt(b as f64 / bins as f64),
                fmt((b + 1) as f64 / bins as f64),
                c.to_string(),
                fmt(c as f64 * bins as f64 / total.max(1) as f64),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &strs(&["bin_lo", "bin_hi", "count", "density"]), &rows)
}

/// Binned estimates (variogram or correlogram) with empty bins left blank.
pub fn save_bins(path: &Path, bins: &[BinEstimate], value_name: &str) -> Result<()> {
    let rows = bins
        .iter()
        .map(|b| {
            vec![
                fmt(b.lo),
                fmt(b.hi),
                fmt(b.center()),
                b.n_pairs.to_string(),
                b.value.map(fmt).unwrap_or_default(),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &strs(&["lo", "hi", "center", "n_pairs", value_name]), &rows)
}

/// Columns are `epoch, train_mse, val_mse, lr, rho, lambda,
/// geo_bias_share, seconds`; `rho` and `lambda` are omitted for models
/// without a kernel.
pub fn save_train_log(path: &Path, log: &TrainLog, variant: Variant) -> Result<()> {
    let geo = variant == Variant::Geo;
    let header: Vec<String> = TrainLog::CSV_HEADER
        .iter()
        .filter(|h| geo || !matches!(**h, "rho" | "lambda"))
        .map(|s| (*s).to_owned())
        .collect();
    let rows = log
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string(), fmt(r.train_mse), fmt(r.val_mse), fmt(r.lr)];
            if geo {
                row.push(fmt(r.rho));
                row.push(fmt(r.lambda));
            }
            row.push(fmt(r.geo_bias_share));
            row.push(fmt(r.seconds));
            row
        })
        .collect::<Vec<_>>();
    write_csv(path, &header, &rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    /// Offset into the blob, in doubles.
    pub offset: usize,
    pub shape: Vec<usize>,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub locations: Vec<[f64; 2]>,
    /// Training epochs that produced these weights.
    pub step: usize,
    pub rho: Vec<f64>,
    pub lambda: Vec<f64>,
    pub nugget_floor: f64,
    pub rng_seed: u64,
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

/// Writes `<stem>.json` and `<stem>.bin` (little-endian f64).
pub fn save_checkpoint(path: &Path, model: &GeoFormer, step: usize, rng_seed: u64) -> Result<PathBuf> {
    let manifest_path = path.with_extension("json");
    let blob_path = path.with_extension("bin");
    ensure_parent(&manifest_path)?;
    let mut blob = Vec::new();
    let mut params = Vec::new();
    let mut offset = 0;
    for (_, p) in model.params().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            offset,
            shape: p.value.shape().to_vec(),
            decay: p.decay,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += p.value.numel();
    }
    fs::write(&blob_path, &blob)?;
    let manifest = CheckpointManifest {
        format_version: 1,
        config: model.config().clone(),
        locations: model.grid().locations().to_vec(),
        step,
        rho: model.rho(),
        lambda: model.lambda(),
        nugget_floor: model.nugget_floor(),
        rng_seed,
        blob: blob_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        params,
    };
    write_json(&manifest_path, &manifest)?;
    Ok(manifest_path)
}

pub fn load_checkpoint(path: &Path) -> Result<(GeoFormer, CheckpointManifest)> {
    let manifest_path = path.with_extension("json");
    let manifest: CheckpointManifest = read_json(&manifest_path)?;
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_path)?;
    if bytes.len() % 8 != 0 {
        return Err(schema_err(&blob_path, "blob length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let grid = SensorGrid::new(manifest.locations.clone())?;
    let mut model = GeoFormer::new(manifest.config.clone(), grid)?;
    if model.params().len() != manifest.params.len() {
        return Err(schema_err(&manifest_path, "parameter count differs from the model"));
    }
    for e in &manifest.params {
        let id = model
            .params()
            .id(&e.name)
            .ok_or_else(|| schema_err(&manifest_path, format!("unknown parameter {}", e.name)))?;
        let numel: usize = e.shape.iter().product();
        let slice = values
            .get(e.offset..e.offset + numel)
            .ok_or_else(|| schema_err(&blob_path, format!("blob too short for {}", e.name)))?;
        let t = Tensor::new(e.shape.clone(), slice.to_vec())?;
        let dst = model.params_mut().value_mut(id);
        if dst.shape() != t.shape() {
            return Err(schema_err(&manifest_path, format!("shape mismatch for {}", e.name)));
        }
        *dst = t;
    }
    model.set_nugget_floor(manifest.nugget_floor)?;
    model.invalidate_kernel_cache();
    Ok((model, manifest))
}

/// One CSV per (layer, head) with the `N × N` attention weights and one per
/// kernel group with the `λΨ` bias. Returns the written paths.
pub fn save_attention_maps(dir: &Path, records: &[AttentionRecord]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (l, r) in records.iter().enumerate() {
        let (h, n) = (r.weights.shape()[0], r.weights.shape()[1]);
        for head in 0..h {
            let p = dir.join(format!("attention_layer{l}_head{head}.csv"));
            write_matrix(&p, &r.weights.data()[head * n * n..], n, n, "j")?;
            out.push(p);
        }
    }
    if let Some(bias) = records.first().and_then(|r| r.bias.as_ref()) {
        let (g, n) = (bias.shape()[0], bias.shape()[1]);
        for k in 0..g {
            let p = dir.join(format!("geo_bias_group{k}.csv"));
            write_matrix(&p, &bias.data()[k * n * n..], n, n, "j")?;
            out.push(p);
        }
    }
    Ok(out)
}
