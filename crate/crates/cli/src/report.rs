use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::artifacts::{Manifest, DICTIONARY, MANIFEST};
use crate::CliError;

pub const SUMMARY_CSV: &str = "report_summary.csv";
pub const SUMMARY_TXT: &str = "report.txt";

fn read_json(path: &Path) -> Result<Value, CliError> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Collates a run directory into a long-format CSV and a text summary.
pub fn report(dir: &Path) -> Result<(), CliError> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(CliError::Schema(format!("no {MANIFEST} in {}", dir.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| CliError::Schema(format!("unreadable manifest: {e}")))?;
    let hash = manifest.config_hash.clone();

    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != SUMMARY_CSV && n != SUMMARY_TXT)
        .collect();
    names.sort();

    let mut foreign = Vec::new();
    let mut tables = Vec::new();
    let mut documents = Vec::new();
    for name in &names {
        let path = dir.join(name);
        if name.ends_with(".json") {
            let v = read_json(&path)?;
            match v.get("config_hash").and_then(Value::as_str) {
                Some(h) if h == hash => {}
                Some(h) => foreign.push(format!("{name} ({h})")),
                None => foreign.push(format!("{name} (no hash)")),
            }
            documents.push((name.clone(), v));
        } else if name.ends_with(".csv") {
            let mut rdr = csv::Reader::from_path(&path).map_err(|e| CliError::Schema(format!("{name}: {e}")))?;
            let headers: Vec<String> =
                rdr.headers().map_err(|e| CliError::Schema(e.to_string()))?.iter().map(String::from).collect();
            let hcol = headers.iter().position(|h| h == "config_hash");
            let mut rows = Vec::new();
            for rec in rdr.records() {
                let rec = rec.map_err(|e| CliError::Schema(format!("{name}: {e}")))?;
                let row: Vec<String> = rec.iter().map(String::from).collect();
                match hcol {
                    Some(c) if row[c] == hash => {}
                    Some(c) => {
                        foreign.push(format!("{name} ({})", row[c]));
                        break;
                    }
                    None => {
                        foreign.push(format!("{name} (no hash)"));
                        break;
                    }
                }
                rows.push(row);
            }
            tables.push((name.clone(), headers, rows));
        }
    }
    if !foreign.is_empty() {
        return Err(CliError::Schema(format!(
            "mixed configuration hashes in {}: manifest {hash}, but {}",
            dir.display(),
            foreign.join(", ")
        )));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["source", "row", "column", "value", "config_hash"]).map_err(csv_err)?;
    let mut text = String::new();
    let _ = writeln!(text, "run: {} ({})", manifest.command, dir.display());
    let _ = writeln!(text, "config hash: {hash}");
    let _ = writeln!(text, "seeds: {:?}", manifest.seeds);
    let _ = writeln!(text, "artifacts: {}", manifest.artifacts.len());
    for (name, headers, rows) in &tables {
        if name == DICTIONARY {
            continue;
        }
        let _ = writeln!(text, "\n{name}: {} rows", rows.len());
        let _ = writeln!(
            text,
            "  {}",
            headers.iter().filter(|h| *h != "config_hash").cloned().collect::<Vec<_>>().join(" | ")
        );
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> =
                row.iter().zip(headers).filter(|(_, h)| *h != "config_hash").map(|(c, _)| c.as_str()).collect();
            let _ = writeln!(text, "  {}", cells.join(" | "));
            for (c, h) in row.iter().zip(headers) {
                if h != "config_hash" {
                    w.write_record([name.as_str(), &i.to_string(), h, c, &hash]).map_err(csv_err)?;
                }
            }
        }
    }
    for (name, v) in &documents {
        let highlights = highlights(v);
        if !highlights.is_empty() {
            let _ = writeln!(text, "\n{name}:");
            for (k, val) in highlights {
                let _ = writeln!(text, "  {k}: {val}");
            }
        }
    }
    fs::write(dir.join(SUMMARY_CSV), w.into_inner().map_err(|e| CliError::Io(e.to_string()))?)?;
    fs::write(dir.join(SUMMARY_TXT), text)?;
    Ok(())
}

fn highlights(v: &Value) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut take = |label: &str, ptr: &str| {
        if let Some(x) = v.pointer(ptr) {
            out.push((label.to_string(), x.to_string()));
        }
    };
    take("gate", "/report/gate/max_ratio");
    take("terms", "/report/terms");
    take("converged", "/report/converged");
    take("u_norm", "/report/u_norm");
    take("residual_sup", "/residual/sup");
    take("gamma", "/gamma");
    take("gamma_ci", "/gamma_ci");
    take("r_squared", "/r_squared");
    take("p_gaps", "/p_gaps");
    take("all_pass", "/all_pass");
    take("hardy_criticality", "/hardy_criticality");
    take("lps", "/lps");
    take("flagged_paths", "/flagged");
    out
}
