//! On-disk results: value slices as little-endian f64 row-major binaries with
//! JSON sidecars, traces as JSON, and a manifest listing every payload file
//! with its content hash. Writing is deterministic: no timestamps, files
//! sorted by path, fixed float encoding.

use crate::error::{Error, Result};
use crate::grid::{GridSlice, TimeField};
use crate::scenario::{Overrides, Scenario};
use crate::sim::SimTrace;
use crate::solver::{AnchorKey, FieldEntry, SolveResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub scenario: Scenario,
    pub overrides: Overrides,
    pub solve: SolveSummary,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveSummary {
    pub iterations_used: usize,
    pub residual_history: Vec<f64>,
    pub horizon_used: f64,
    pub dt: f64,
    pub converged: bool,
    /// Set when the solver stopped at its iteration cap.
    pub warning_nonconverged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FieldSidecar {
    j: usize,
    points_per_side: usize,
    anchor: SidecarAnchor,
    layer: usize,
    dt: f64,
    times: Vec<f64>,
    slices: usize,
    #[serde(default)]
    has_mask: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
enum SidecarAnchor {
    Mode(usize),
    Distribution,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn write_file(root: &Path, rel: &str, bytes: &[u8], records: &mut Vec<FileRecord>) -> Result<()> {
    let full = root.join(rel);
    if let Some(parent) = full.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&full, bytes).map_err(|e| Error::io(&full, e))?;
    records.push(FileRecord {
        path: rel.to_string(),
        bytes: bytes.len() as u64,
        sha256: sha256_hex(bytes),
    });
    Ok(())
}

fn field_stem(anchor: &AnchorKey, layer: usize) -> String {
    match anchor {
        AnchorKey::Mode(m) => format!("values/m{m}_l{layer}"),
        AnchorKey::Distribution => format!("values/q_l{layer}"),
    }
}

fn encode_field(field: &TimeField) -> Vec<u8> {
    let mut out = Vec::with_capacity(field.slices().len() * field.slice0().data().len() * 8);
    for slice in field.slices() {
        for v in slice.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write value fields, traces, and the manifest under `out_dir`. The
/// manifest's hashes cover every payload byte written.
pub fn write_results(
    out_dir: &Path,
    scenario: &Scenario,
    overrides: &Overrides,
    solve: &SolveResult,
    traces: &[SimTrace],
) -> Result<Manifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();

    let mut entries: Vec<&FieldEntry> = solve.entries.iter().collect();
    entries.sort_by_key(|e| (e.layer, anchor_order(&e.anchor)));
    for entry in entries {
        let stem = field_stem(&entry.anchor, entry.layer);
        let n = entry.field.slice0().n();
        let sidecar = FieldSidecar {
            j: n - 1,
            points_per_side: n,
            anchor: match entry.anchor {
                AnchorKey::Mode(m) => SidecarAnchor::Mode(m),
                AnchorKey::Distribution => SidecarAnchor::Distribution,
            },
            layer: entry.layer,
            dt: solve.dt,
            times: entry.field.times().to_vec(),
            slices: entry.field.slices().len(),
            has_mask: entry.mask.is_some(),
        };
        write_file(
            out_dir,
            &format!("{stem}.f64"),
            &encode_field(&entry.field),
            &mut records,
        )?;
        if let Some(mask) = &entry.mask {
            write_file(
                out_dir,
                &format!("{stem}_mask.f64"),
                &encode_field(mask),
                &mut records,
            )?;
        }
        let sidecar_json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::Json {
            path: out_dir.join(format!("{stem}.json")),
            source: e,
        })?;
        write_file(
            out_dir,
            &format!("{stem}.json"),
            &sidecar_json,
            &mut records,
        )?;
    }

    for (i, trace) in traces.iter().enumerate() {
        let rel = format!("traces/trace_{i:03}.json");
        let body = serde_json::to_vec_pretty(trace).map_err(|e| Error::Json {
            path: out_dir.join(&rel),
            source: e,
        })?;
        write_file(out_dir, &rel, &body, &mut records)?;
    }

    records.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        name: scenario.name.clone(),
        scenario: scenario.clone(),
        overrides: overrides.clone(),
        solve: SolveSummary {
            iterations_used: solve.iterations_used,
            residual_history: solve.residual_history.clone(),
            horizon_used: solve.horizon_used,
            dt: solve.dt,
            converged: solve.converged,
            warning_nonconverged: !solve.converged,
        },
        files: records,
    };
    let manifest_path = out_dir.join("manifest.json");
    let body = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    fs::write(&manifest_path, body).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

fn anchor_order(anchor: &AnchorKey) -> usize {
    match anchor {
        AnchorKey::Mode(m) => *m + 1,
        AnchorKey::Distribution => 0,
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })
}

/// Load a solve back from disk, verifying every payload hash recorded in the
/// manifest.
pub fn read_results(dir: &Path) -> Result<(Manifest, SolveResult)> {
    let manifest = read_manifest(dir)?;
    for record in &manifest.files {
        let full = dir.join(&record.path);
        let bytes = fs::read(&full).map_err(|e| Error::io(&full, e))?;
        let digest = sha256_hex(&bytes);
        if digest != record.sha256 {
            return Err(Error::Raster(format!(
                "{}: content hash mismatch (manifest {}, file {digest})",
                record.path, record.sha256
            )));
        }
    }

    let decode = |bin_path: &Path, n: usize, times: &[f64]| -> Result<TimeField> {
        let bytes = fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
        let per_slice = n * n * 8;
        if bytes.len() != per_slice * times.len() {
            return Err(Error::Raster(format!(
                "{}: payload size does not match sidecar ({} bytes for {} slices)",
                bin_path.display(),
                bytes.len(),
                times.len()
            )));
        }
        let mut slices = Vec::with_capacity(times.len());
        for s in 0..times.len() {
            let mut data = Vec::with_capacity(n * n);
            for w in bytes[s * per_slice..(s + 1) * per_slice].chunks_exact(8) {
                data.push(f64::from_le_bytes(w.try_into().unwrap()));
            }
            slices.push(GridSlice::from_vec(n, data));
        }
        Ok(TimeField::new(times.to_vec(), slices))
    };

    let mut entries = Vec::new();
    for record in &manifest.files {
        if !record.path.ends_with(".json") || !record.path.starts_with("values/") {
            continue;
        }
        let sidecar_path = dir.join(&record.path);
        let sidecar: FieldSidecar = serde_json::from_str(
            &fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?,
        )
        .map_err(|e| Error::Json {
            path: sidecar_path.clone(),
            source: e,
        })?;
        if sidecar.times.len() != sidecar.slices {
            return Err(Error::Raster(format!(
                "{}: sidecar times/slice count mismatch",
                record.path
            )));
        }
        let n = sidecar.points_per_side;
        let bin_rel = record.path.replace(".json", ".f64");
        let field = decode(&dir.join(&bin_rel), n, &sidecar.times)?;
        let mask = if sidecar.has_mask {
            let mask_rel = record.path.replace(".json", "_mask.f64");
            Some(decode(&dir.join(&mask_rel), n, &sidecar.times)?)
        } else {
            None
        };
        entries.push(FieldEntry {
            anchor: match sidecar.anchor {
                SidecarAnchor::Mode(m) => AnchorKey::Mode(m),
                SidecarAnchor::Distribution => AnchorKey::Distribution,
            },
            layer: sidecar.layer,
            field,
            mask,
        });
    }
    if entries.is_empty() {
        return Err(Error::Raster(format!(
            "{}: no value fields recorded",
            dir.display()
        )));
    }

    let solve = SolveResult {
        entries,
        iterations_used: manifest.solve.iterations_used,
        residual_history: manifest.solve.residual_history.clone(),
        horizon_used: manifest.solve.horizon_used,
        dt: manifest.solve.dt,
        converged: manifest.solve.converged,
    };
    Ok((manifest, solve))
}
