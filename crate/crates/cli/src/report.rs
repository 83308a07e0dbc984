//! Report emission: every command writes its summary as both JSON and CSV,
//! atomically (temp file in the target directory, then rename).

use std::path::{Path, PathBuf};

use mmpref::Result;

/// Resolves an output path; relative paths honor MMPREF_OUT_DIR when set.
pub fn out_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os("MMPREF_OUT_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_path_buf(),
    }
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let path = out_path(path);
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or(Path::new(".")))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(&path)
        .map_err(|e| mmpref::Error::Io(e.error))?;
    Ok(())
}

/// One (metric, value, n) row of a report table.
pub struct ReportRow {
    pub metric: String,
    pub value: f64,
    pub n: usize,
}

impl ReportRow {
    pub fn new(metric: &str, value: f64, n: usize) -> Self {
        Self {
            metric: metric.to_string(),
            value,
            n,
        }
    }
}

/// Emits `<prefix>.json` and `<prefix>.csv` with identical content.
pub fn write_report(prefix: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut csv = String::from("metric,value,n\n");
    for row in rows {
        csv.push_str(&format!("{},{},{}\n", row.metric, row.value, row.n));
    }
    write_atomic(&prefix.with_extension("csv"), csv.as_bytes())?;

    let mut map = serde_json::Map::new();
    for row in rows {
        let mut entry = serde_json::Map::new();
        entry.insert("value".into(), json_number(row.value));
        entry.insert("n".into(), serde_json::Value::from(row.n));
        map.insert(row.metric.clone(), serde_json::Value::Object(entry));
    }
    let json = serde_json::to_string_pretty(&serde_json::Value::Object(map))
        .expect("report serializes");
    write_atomic(&prefix.with_extension("json"), json.as_bytes())?;
    Ok(())
}

fn json_number(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}
