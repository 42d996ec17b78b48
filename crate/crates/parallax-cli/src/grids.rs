//! Plain-text grid files: one row per line, whitespace-separated values.

use anyhow::{anyhow, Context, Result};
use parallax::metrics::{LabelGrid, RealGrid};
use std::fmt::Write as _;
use std::path::Path;

fn read_rows<T: std::str::FromStr>(path: &Path, kind: &str) -> Result<(usize, usize, Vec<T>)> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {kind} grid {}", path.display()))?;
    let mut width = None;
    let mut rows = 0usize;
    let mut data = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let v: T = tok.parse().map_err(|_| {
                anyhow!(
                    "{}:{}: '{tok}' is not a valid {kind} value",
                    path.display(),
                    lineno + 1
                )
            })?;
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(anyhow!(
                    "{}:{}: row has {count} values, expected {w}",
                    path.display(),
                    lineno + 1
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    let width = width.ok_or_else(|| anyhow!("{}: grid file is empty", path.display()))?;
    Ok((rows, width, data))
}

pub fn read_label_grid(path: &Path) -> Result<LabelGrid> {
    let (h, w, data) = read_rows::<u32>(path, "label")?;
    Ok(LabelGrid::new(h, w, data))
}

pub fn read_real_grid(path: &Path) -> Result<RealGrid> {
    let (h, w, data) = read_rows::<f64>(path, "real")?;
    Ok(RealGrid::new(h, w, data))
}

pub fn write_label_grid(path: &Path, grid: &LabelGrid) -> Result<()> {
    let mut out = String::new();
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            if x > 0 {
                out.push(' ');
            }
            write!(out, "{}", grid.at(y, x)).expect("writing to a String cannot fail");
        }
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing label grid {}", path.display()))
}
