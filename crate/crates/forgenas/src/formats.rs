//! On-disk documents. Every JSON document is written in canonical form:
//! keys sorted, no whitespace, floats in shortest round-trip notation, so a
//! parse/serialize cycle reproduces the input bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{bail, Context, Result};
use forgenas_core::c2pn::ActivationMap;
use forgenas_core::genotype::GENOTYPE_SCHEMA_VERSION;
use forgenas_core::metrics::{EpochMetrics, MetricsReport, REPORT_SCHEMA_VERSION};
use forgenas_core::search::SearchEvent;
use forgenas_core::Genotype;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // `serde_json::Map` is a BTreeMap without the `preserve_order` feature
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Write through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("cannot write {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn read_versioned(path: &Path, what: &str, version: u32) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{} is not a JSON document", path.display()))?;
    match value.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(version) => Ok(value),
        Some(v) => bail!("{}: {what} schema version {v}, expected {version}", path.display()),
        None => bail!("{}: {what} without schema_version", path.display()),
    }
}

pub fn genotype_to_string(g: &Genotype) -> Result<String> {
    g.validate()?;
    canonical_json(g)
}

pub fn genotype_from_str(text: &str) -> Result<Genotype> {
    let g: Genotype = serde_json::from_str(text)?;
    g.validate()?;
    Ok(g)
}

pub fn write_genotype(g: &Genotype, path: &Path) -> Result<()> {
    write_atomic(path, genotype_to_string(g)?.as_bytes())
}

pub fn read_genotype(path: &Path) -> Result<Genotype> {
    let value = read_versioned(path, "genotype", GENOTYPE_SCHEMA_VERSION)?;
    let g: Genotype = serde_json::from_value(value).with_context(|| format!("malformed genotype {}", path.display()))?;
    g.validate().with_context(|| format!("invalid genotype {}", path.display()))?;
    Ok(g)
}

pub fn report_to_string(r: &MetricsReport) -> Result<String> {
    r.validate()?;
    canonical_json(r)
}

pub fn report_from_str(text: &str) -> Result<MetricsReport> {
    let r: MetricsReport = serde_json::from_str(text)?;
    r.validate()?;
    Ok(r)
}

pub fn write_report(r: &MetricsReport, path: &Path) -> Result<()> {
    write_atomic(path, report_to_string(r)?.as_bytes())
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let value = read_versioned(path, "report", REPORT_SCHEMA_VERSION)?;
    let r: MetricsReport = serde_json::from_value(value).with_context(|| format!("malformed report {}", path.display()))?;
    r.validate().with_context(|| format!("invalid report {}", path.display()))?;
    Ok(r)
}

/// One canonical JSON record per line.
pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&canonical_json(r)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(records)
}

pub fn write_events(events: &[SearchEvent], path: &Path) -> Result<()> {
    write_jsonl(events, path)
}

pub fn write_curves_csv(curves: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if curves.is_empty() {
        w.write_record(["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc"])?;
    }
    for row in curves {
        w.serialize(row)?;
    }
    write_atomic(path, &w.into_inner()?)
}

/// 8-bit binary portable graymap of a map in `[0, 1]`.
pub fn write_pgm(map: &ActivationMap, path: &Path) -> Result<()> {
    let pixels: Vec<u8> = map.values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let mut bytes = Vec::new();
    PnmEncoder::new(&mut bytes).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary)).write_image(
        &pixels,
        map.width as u32,
        map.height as u32,
        ExtendedColorType::L8,
    )?;
    write_atomic(path, &bytes)
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    body: T,
}

/// Versioned opaque state file tagged with `kind`.
pub fn write_checkpoint<T: Serialize>(kind: &str, body: &T, path: &Path) -> Result<()> {
    let env = Envelope { schema_version: CHECKPOINT_SCHEMA_VERSION, kind: kind.to_string(), body };
    write_atomic(path, canonical_json(&env)?.as_bytes())
}

pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let value = read_versioned(path, "checkpoint", CHECKPOINT_SCHEMA_VERSION)?;
    match value.get("kind").and_then(serde_json::Value::as_str) {
        Some(k) => Ok(k.to_string()),
        None => bail!("{}: checkpoint without kind", path.display()),
    }
}

pub fn read_checkpoint<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T> {
    let value = read_versioned(path, "checkpoint", CHECKPOINT_SCHEMA_VERSION)?;
    let env: Envelope<T> = serde_json::from_value(value).with_context(|| format!("malformed checkpoint {}", path.display()))?;
    if env.kind != kind {
        bail!("{} holds a `{}` checkpoint, expected `{kind}`", path.display(), env.kind);
    }
    Ok(env.body)
}
