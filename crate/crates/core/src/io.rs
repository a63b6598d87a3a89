//! On-disk formats: voxel CSV tables, plot/profile CSVs, JSON reports and
//! the run manifest.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every value bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::LineProfile;
use crate::longitudinal::{LongitudinalReport, PlotTable};
use crate::table::VoxelTable;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn parse_error(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a voxel table from CSV text. The header is
/// `[x,y,z,][mask,]<channel>...`; the spatial columns come as a triple.
pub fn parse_voxel_table(text: &str) -> Result<VoxelTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_error(1, e.to_string()))?,
        None => return Err(parse_error(1, "missing header")),
    };
    let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
    let spatial = ["x", "y", "z"];
    let n_spatial = names
        .iter()
        .filter(|n| spatial.contains(&n.as_str()))
        .count();
    let has_coords = match n_spatial {
        0 => false,
        3 if names[..3] == spatial => true,
        _ => {
            return Err(parse_error(
                1,
                "spatial columns must appear together as the leading x,y,z",
            ))
        }
    };
    let mut first = if has_coords { 3 } else { 0 };
    let has_mask = names.get(first).map(|n| n == "mask").unwrap_or(false);
    if has_mask {
        first += 1;
    }
    let channels: Vec<String> = names[first..].to_vec();
    if channels.is_empty() {
        return Err(parse_error(1, "header names no intensity channels"));
    }
    if let Some(bad) = channels.iter().find(|c| c.is_empty() || *c == "mask") {
        return Err(parse_error(1, format!("invalid channel name {bad:?}")));
    }
    let width = names.len();

    let mut values = Vec::new();
    let mut coords = Vec::new();
    let mut mask = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_error(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != width {
            return Err(parse_error(
                line,
                format!("expected {width} fields, found {}", record.len()),
            ));
        }
        if has_coords {
            let mut c = [0i64; 3];
            for (a, slot) in c.iter_mut().enumerate() {
                *slot = record[a].trim().parse().map_err(|_| {
                    parse_error(
                        line,
                        format!("{} is not an integer: {:?}", spatial[a], &record[a]),
                    )
                })?;
            }
            coords.push(c);
        }
        if has_mask {
            let cell = record[first - 1].trim();
            mask.push(match cell {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => {
                    return Err(parse_error(
                        line,
                        format!("mask must be 0 or 1, found {cell:?}"),
                    ))
                }
            });
        }
        for (k, cell) in record.iter().skip(first).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                parse_error(
                    line,
                    format!("channel {} is not a number: {cell:?}", channels[k]),
                )
            })?;
            if !v.is_finite() {
                return Err(parse_error(
                    line,
                    format!("channel {} is not finite: {cell:?}", channels[k]),
                ));
            }
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(parse_error(2, "table has no rows"));
    }
    let mut table = VoxelTable::new(channels, values).map_err(|e| parse_error(1, e.to_string()))?;
    if has_coords {
        table = table.with_coords(coords)?;
    }
    if has_mask {
        table = table.with_mask(mask)?;
    }
    Ok(table)
}

pub fn read_voxel_table(path: &Path) -> Result<VoxelTable> {
    parse_voxel_table(&read_text(path)?)
}

pub fn format_voxel_table(table: &VoxelTable) -> String {
    let mut out = String::new();
    let mut header: Vec<&str> = Vec::new();
    if table.coords().is_some() {
        header.extend(["x", "y", "z"]);
    }
    if table.mask().is_some() {
        header.push("mask");
    }
    header.extend(table.channels().iter().map(String::as_str));
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, row) in table.rows().enumerate() {
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        if let Some(c) = table.coords() {
            cells.extend(c[i].iter().map(|v| v.to_string()));
        }
        if let Some(m) = table.mask() {
            cells.push(if m[i] { "1" } else { "0" }.into());
        }
        cells.extend(row.iter().map(|v| v.to_string()));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_voxel_table(path: &Path, table: &VoxelTable) -> Result<()> {
    write_bytes(path, format_voxel_table(table).as_bytes())
}

pub fn write_report(path: &Path, report: &LongitudinalReport) -> Result<()> {
    write_bytes(path, report.to_json().as_bytes())
}

pub fn read_report(path: &Path) -> Result<LongitudinalReport> {
    LongitudinalReport::from_json(&read_text(path)?)
}

/// `projection,energy,grad_norm`, one row per masked voxel.
pub fn format_plotdata(plot: &PlotTable) -> String {
    let mut out = String::from("projection,energy,grad_norm\n");
    for i in 0..plot.projection.len() {
        let _ = writeln!(
            out,
            "{},{},{}",
            plot.projection[i], plot.energy[i], plot.grad_norm[i]
        );
    }
    out
}

pub fn write_plotdata(path: &Path, plot: &PlotTable) -> Result<()> {
    write_bytes(path, format_plotdata(plot).as_bytes())
}

/// `t,energy,grad_norm,laplacian`, one row per profile sample.
pub fn format_profile(profile: &LineProfile) -> String {
    let mut out = String::from("t,energy,grad_norm,laplacian\n");
    for i in 0..profile.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            profile.t[i], profile.energy[i], profile.grad_norm[i], profile.laplacian[i]
        );
    }
    out
}

pub fn write_profile(path: &Path, profile: &LineProfile) -> Result<()> {
    write_bytes(path, format_profile(profile).as_bytes())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Reads a JSON document, mapping schema violations to validation errors
/// and malformed text to parse errors.
pub fn from_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| match e.classify() {
        serde_json::error::Category::Data => Error::Validation(e.to_string()),
        _ => Error::Parse {
            line: e.line(),
            message: e.to_string(),
        },
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    from_json(&read_text(path)?)
}

pub const MANIFEST_VERSION: u32 = 1;

/// Inputs, outputs and configuration digest of one command invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub config_digest: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// `manifest.json`: one record per command, keyed by command name. Paths
/// inside the manifest's directory are stored relative to it; there are no
/// timestamps, so identical runs give identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub runs: BTreeMap<String, RunRecord>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            runs: BTreeMap::new(),
        }
    }
}

fn manifest_key(dir: &Path, file: &Path) -> String {
    let rel = file.strip_prefix(dir).unwrap_or(file);
    rel.to_string_lossy().replace('\\', "/")
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let m: Self = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Validation(format!(
                "manifest version {} is not supported",
                m.version
            )));
        }
        Ok(m)
    }

    /// Records a finished command in `<dir>/manifest.json`, keeping the
    /// records of other commands.
    pub fn record(
        dir: &Path,
        command: &str,
        config_digest: &str,
        seed: u64,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut manifest = Self::load_or_default(&path)?;
        let digest_map = |files: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            files
                .iter()
                .map(|f| Ok((manifest_key(dir, f), file_digest(f)?)))
                .collect()
        };
        let record = RunRecord {
            config_digest: config_digest.to_string(),
            seed,
            inputs: digest_map(inputs)?,
            outputs: digest_map(outputs)?,
        };
        manifest.runs.insert(command.to_string(), record);
        write_bytes(&path, to_json_pretty(&manifest).as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_table() {
        let t = parse_voxel_table("T1,T1c,T2,FLAIR,ADC\n1,2,3,4,5\n").unwrap();
        assert_eq!(t.n(), 1);
        assert_eq!(t.row(0), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(t.coords().is_none() && t.mask().is_none());
    }

    #[test]
    fn crlf_coordinates_and_mask() {
        let t =
            parse_voxel_table("x,y,z,mask,a,b\r\n1,2,3,1,0.5,-1e-3\r\n4,5,6,0,2,3\r\n").unwrap();
        assert_eq!(t.channels(), &["a".to_string(), "b".to_string()]);
        assert_eq!(t.coords().unwrap()[1], [4, 5, 6]);
        assert_eq!(t.mask().unwrap(), &[true, false]);
        assert_eq!(t.row(0), &[0.5, -1e-3]);
    }

    #[test]
    fn errors_name_the_line() {
        let line_of = |text: &str| match parse_voxel_table(text) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(line_of("a,b\n1,2\n3,NaN\n"), 3);
        assert_eq!(line_of("a,b\n1,2\n3\n"), 3);
        assert_eq!(line_of("a,b\n1,x\n"), 2);
        assert_eq!(line_of("a,b\n1,inf\n"), 2);
        assert_eq!(line_of(""), 1);
        assert_eq!(line_of("x,y,a\n1,2,3\n"), 1);
        assert_eq!(line_of("a,a\n1,2\n"), 1);
    }

    #[test]
    fn write_then_read_is_bitwise_identical() {
        let values = vec![
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            1e300,
            123456.789,
            f64::MIN_POSITIVE,
        ];
        let t = VoxelTable::new(vec!["p".into(), "q".into()], values)
            .unwrap()
            .with_coords(vec![[0, 0, 0], [-1, 2, 3], [7, 8, 9]])
            .unwrap()
            .with_mask(vec![true, false, true])
            .unwrap();
        let text = format_voxel_table(&t);
        let back = parse_voxel_table(&text).unwrap();
        assert_eq!(back, t);
        for (a, b) in back.values().iter().zip(t.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(format_voxel_table(&back), text);
    }

    #[test]
    fn manifest_merges_commands() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        fs::write(&a, "hello").unwrap();
        Manifest::record(dir.path(), "synth", "c1", 0, &[], std::slice::from_ref(&a)).unwrap();
        Manifest::record(dir.path(), "train", "c2", 1, std::slice::from_ref(&a), &[]).unwrap();
        let m = Manifest::load_or_default(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(m.runs.len(), 2);
        assert_eq!(m.runs["synth"].outputs["a.txt"], sha256_hex(b"hello"));
        assert_eq!(m.runs["train"].inputs["a.txt"], sha256_hex(b"hello"));
    }
}
