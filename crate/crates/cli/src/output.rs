use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut buf = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut buf, row).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&buf).map_err(|e| io_err(path, e))
}

/// Sibling file `<out>.config.json` for commands whose output is a single file.
pub fn config_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".config.json");
    out.with_file_name(name)
}

/// One line of a score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreLine {
    pub video_id: String,
    #[serde(rename = "Q_p")]
    pub q_p: f64,
}

pub fn read_scores(path: &Path) -> CliResult<Vec<ScoreLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row: ScoreLine = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if seen.insert(row.video_id.clone(), ()).is_some() {
            return Err(CliError::Data(format!(
                "{}: duplicate video_id `{}`",
                path.display(),
                row.video_id
            )));
        }
        out.push(row);
    }
    Ok(out)
}

/// Lists `*.bvqf` files of a directory in name order.
pub fn tensor_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_err(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "bvqf") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}
