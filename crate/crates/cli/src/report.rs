//! Render the CSV artifacts under a run directory as aligned plain-text
//! tables, on stdout and in `report.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use zsqd::{Error, Result};

#[derive(clap::Args, Debug)]
pub struct ReportArgs {
    /// Directory tree whose CSV artifacts get rendered
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let root = &args.out;
    if !root.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_csvs(root, root, &mut files)?;
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no CSV artifacts under {}", root.display())));
    }
    let mut doc = String::new();
    for rel in &files {
        let csv = fs::read_to_string(root.join(rel))?;
        doc.push_str(&render_table(rel, &csv));
        doc.push('\n');
    }
    fs::write(root.join("report.txt"), &doc)?;
    print!("{doc}");
    Ok(())
}

fn collect_csvs(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("reading {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.is_dir() {
            collect_csvs(root, &path, out)?;
        } else if path.extension().is_some_and(|e| e == "csv") {
            let rel = path
                .strip_prefix(root)
                .expect("entry under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Column-aligned text table: title, header row, rule, data rows.
pub fn render_table(title: &str, csv: &str) -> String {
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let mut out = format!("== {title} ==\n");
    if rows.is_empty() {
        out.push_str("(empty)\n");
        return out;
    }
    let cols = rows.iter().map(Vec::len).max().expect("nonempty");
    let mut widths = vec![0usize; cols];
    for r in &rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.len());
        }
    }
    for (ri, r) in rows.iter().enumerate() {
        let mut line = String::new();
        for (i, w) in widths.iter().enumerate() {
            let cell = r.get(i).copied().unwrap_or("");
            line.push_str(&format!("{cell:<w$}"));
            if i + 1 < cols {
                line.push_str("  ");
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
        if ri == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("--"));
            out.push('\n');
        }
    }
    out
}
