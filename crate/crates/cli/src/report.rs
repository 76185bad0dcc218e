//! Structured reports: one JSON document per command, with every number also
//! written to CSV tables (a key/value summary plus one table per list of
//! records).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the effective configuration text.
pub fn config_hash(config_text: &str) -> String {
    let digest = Sha256::digest(config_text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub struct Report {
    pub command: String,
    pub pass: bool,
    pub document: Value,
}

impl Report {
    pub fn new<T: Serialize>(command: &str, config_hash: &str, pass: bool, data: &T) -> serde_json::Result<Self> {
        let document = json!({
            "command": command,
            "library_version": sphereflow::VERSION,
            "config_hash": config_hash,
            "pass": pass,
            "data": serde_json::to_value(data)?,
        });
        Ok(Report { command: command.to_string(), pass, document })
    }

    /// Write `<command>.json`, `<command>.csv` (summary) and one
    /// `<command>_<table>.csv` per record list; returns the files written.
    pub fn write(&self, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let stem = self.command.replace('-', "_");
        let mut written = Vec::new();
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&self.document)? + "\n")?;
        written.push(json_path);
        let tables = tabulate(&self.document);
        for (name, table) in &tables {
            let file = if name.is_empty() { format!("{stem}.csv") } else { format!("{stem}_{}.csv", name.replace('.', "_")) };
            let path = dir.join(file);
            table.write(&path)?;
            written.push(path);
        }
        Ok(written)
    }
}

#[derive(Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<BTreeMap<String, String>>,
}

impl Table {
    fn push(&mut self, row: Vec<(String, String)>) {
        let mut map = BTreeMap::new();
        for (k, v) in row {
            if !self.columns.contains(&k) {
                self.columns.push(k.clone());
            }
            map.insert(k, v);
        }
        self.rows.push(map);
    }

    fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(self.columns.iter().map(|c| row.get(c).map(String::as_str).unwrap_or("")))?;
        }
        w.flush()
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Flatten scalars of `v` into `row`; lists of objects are deferred to
/// `nested` as separate tables.
fn flatten<'a>(v: &'a Value, prefix: &str, row: &mut Vec<(String, String)>, nested: &mut Vec<(String, &'a Vec<Value>)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(child, &join(prefix, k), row, nested);
            }
        }
        Value::Array(items) if !items.is_empty() && items.iter().all(Value::is_object) => {
            nested.push((prefix.to_string(), items));
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(child, &format!("{prefix}[{i}]"), row, nested);
            }
        }
        scalar => row.push((prefix.to_string(), scalar_text(scalar))),
    }
}

/// Summary table (key/value, name "") plus one table per list of records.
pub fn tabulate(document: &Value) -> BTreeMap<String, Table> {
    let mut tables: BTreeMap<String, Table> = BTreeMap::new();
    let mut row = Vec::new();
    let mut nested = Vec::new();
    flatten(document, "", &mut row, &mut nested);
    let summary = tables.entry(String::new()).or_default();
    for (k, v) in row {
        summary.push(vec![("key".into(), k), ("value".into(), v)]);
    }
    let mut queue: Vec<(String, Vec<(String, String)>, &Vec<Value>)> =
        nested.into_iter().map(|(name, items)| (name.trim_start_matches("data.").to_string(), Vec::new(), items)).collect();
    while let Some((name, parents, items)) = queue.pop() {
        for (i, item) in items.iter().enumerate() {
            let mut row = parents.clone();
            row.push((format!("{}_index", name.rsplit('.').next().unwrap_or(&name)), i.to_string()));
            let mut inner = Vec::new();
            flatten(item, "", &mut row, &mut inner);
            for (sub, sub_items) in inner {
                let mut ctx = parents.clone();
                ctx.push((format!("{}_index", name.rsplit('.').next().unwrap_or(&name)), i.to_string()));
                queue.push((join(&name, &sub), ctx, sub_items));
            }
            tables.entry(name.clone()).or_default().push(row);
        }
    }
    tables
}

/// Wrap several reports into the document of the `all` command.
pub fn combined(reports: &[Report], config_hash: &str) -> Value {
    let mut parts = Map::new();
    for r in reports {
        parts.insert(r.command.clone(), json!({ "pass": r.pass }));
    }
    json!({
        "command": "all",
        "library_version": sphereflow::VERSION,
        "config_hash": config_hash,
        "pass": reports.iter().all(|r| r.pass),
        "data": Value::Object(parts),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_number_lands_in_a_table() {
        let doc = json!({
            "pass": true,
            "data": { "max": 1.5, "rows": [ { "s": 0.4, "err": [1.0, 2.0], "fits": [ { "a": 3.0 } ] }, { "s": 0.2, "err": [4.0, 5.0], "fits": [] } ] }
        });
        let t = tabulate(&doc);
        let summary = &t[""];
        assert!(summary.rows.iter().any(|r| r["key"] == "data.max" && r["value"] == "1.5"));
        let rows = &t["rows"];
        assert_eq!(rows.rows.len(), 2);
        assert_eq!(rows.rows[1]["err[1]"], "5.0");
        let fits = &t["rows.fits"];
        assert_eq!(fits.rows[0]["rows_index"], "0");
        assert_eq!(fits.rows[0]["a"], "3.0");
    }

    #[test]
    fn hash_is_stable() {
        assert_eq!(config_hash("m = 2\n"), config_hash("m = 2\n"));
        assert_ne!(config_hash("m = 2\n"), config_hash("m = 3\n"));
        assert_eq!(config_hash("").len(), 64);
    }
}
