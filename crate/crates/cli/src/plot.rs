//! Plot-ready whitespace-separated series derived from a report tree.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::slug;
use crate::error::{CliError, CliResult};
use crate::report::Table;
use crate::study::{DATASET_DIR, EVAL_SUMMARY_FILE, SIMILARITY_DIR};

fn write_series(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Writes one `.dat` file per figure family found in `reports` and returns
/// their paths. Fails when `reports` holds no recognized report.
pub fn cmd_plot(reports: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let histogram = reports.join(DATASET_DIR).join("size_histogram.csv");
    let eval = reports.join(EVAL_SUMMARY_FILE);
    let sim_dir = reports.join(SIMILARITY_DIR);
    let mut sim_files: Vec<PathBuf> = match fs::read_dir(&sim_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect(),
        Err(_) => Vec::new(),
    };
    sim_files.sort();
    if !histogram.exists() && !eval.exists() && sim_files.is_empty() {
        return Err(CliError::report(reports, "no reports found"));
    }
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;

    let mut written = Vec::new();
    if histogram.exists() {
        written.push(size_distribution(&histogram, out)?);
    }
    if eval.exists() {
        let table = Table::read(&eval)?;
        written.extend(iou_by_layer(&table, &eval, out)?);
        written.extend(size_bias(&table, &eval, out)?);
    }
    for file in &sim_files {
        written.push(heatmap(file, out)?);
    }
    Ok(written)
}

fn size_distribution(path: &Path, out: &Path) -> CliResult<PathBuf> {
    let table = Table::read(path)?;
    let c = table.columns(path, &["category", "count"])?;
    let mut text = String::from("# category count\n");
    for row in &table.rows {
        let _ = writeln!(text, "{} {}", row[c[0]], row[c[1]]);
    }
    let target = out.join("size_distribution.dat");
    write_series(&target, &text)?;
    Ok(target)
}

const KEY: [&str; 9] = [
    "net",
    "layer",
    "concept",
    "train_category",
    "kernel",
    "test_category",
    "mean_batch_iou",
    "std_batch_iou",
    "mean_pooled_iou",
];

/// One series per (net, concept, kernel) of models trained and tested on all
/// images, in report order of layers.
fn iou_by_layer(table: &Table, path: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let c = table.columns(path, &KEY)?;
    let mut series: BTreeMap<(String, String, String), String> = BTreeMap::new();
    for row in &table.rows {
        if row[c[3]] != "all" || row[c[5]] != "all" {
            continue;
        }
        let text = series
            .entry((row[c[0]].clone(), row[c[2]].clone(), row[c[4]].clone()))
            .or_insert_with(|| String::from("# index layer mean_batch_iou std_batch_iou mean_pooled_iou\n"));
        let index = text.lines().count() - 1;
        let _ = writeln!(text, "{index} {} {} {} {}", row[c[1]], row[c[6]], row[c[7]], row[c[8]]);
    }
    let mut written = Vec::new();
    for ((net, concept, kernel), text) in series {
        let target = out.join(format!("iou_by_layer__{}__{concept}__{kernel}.dat", slug(&net)));
        write_series(&target, &text)?;
        written.push(target);
    }
    Ok(written)
}

/// Per (net, concept, kernel): for each layer and size category, the
/// batch-mean IoU of the all-images model and of the category model.
fn size_bias(table: &Table, path: &Path, out: &Path) -> CliResult<Vec<PathBuf>> {
    let c = table.columns(path, &KEY)?;
    type Key = (String, String, String);
    let mut cells: BTreeMap<Key, Vec<(String, String, Option<String>, Option<String>)>> = BTreeMap::new();
    for row in &table.rows {
        let test = &row[c[5]];
        if test == "all" {
            continue;
        }
        let trained_on_all = row[c[3]] == "all";
        if !trained_on_all && &row[c[3]] != test {
            continue;
        }
        let entries = cells
            .entry((row[c[0]].clone(), row[c[2]].clone(), row[c[4]].clone()))
            .or_default();
        let pos = match entries.iter().position(|e| e.0 == row[c[1]] && &e.1 == test) {
            Some(p) => p,
            None => {
                entries.push((row[c[1]].clone(), test.clone(), None, None));
                entries.len() - 1
            }
        };
        let slot = if trained_on_all { &mut entries[pos].2 } else { &mut entries[pos].3 };
        *slot = Some(row[c[6]].clone());
    }
    let mut written = Vec::new();
    for ((net, concept, kernel), entries) in cells {
        let mut text = String::from("# layer test_category iou_trained_on_all iou_trained_on_category\n");
        for (layer, test, all, own) in entries {
            let na = || "NaN".to_string();
            let _ = writeln!(
                text,
                "{layer} {test} {} {}",
                all.unwrap_or_else(na),
                own.unwrap_or_else(na)
            );
        }
        let target = out.join(format!("size_bias__{}__{concept}__{kernel}.dat", slug(&net)));
        write_series(&target, &text)?;
        written.push(target);
    }
    Ok(written)
}

fn heatmap(path: &Path, out: &Path) -> CliResult<PathBuf> {
    let table = Table::read(path)?;
    table.columns(path, &["concept"])?;
    let names = &table.header[1..];
    let mut text = format!("# row col value; concepts: {}\n", names.join(" "));
    for (i, row) in table.rows.iter().enumerate() {
        if row.len() != names.len() + 1 {
            return Err(CliError::report(path, format!("row {} has {} cells", i + 1, row.len())));
        }
        for (j, v) in row[1..].iter().enumerate() {
            let _ = writeln!(text, "{i} {j} {v}");
        }
        text.push('\n');
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("similarity");
    let target = out.join(format!("heatmap__{stem}.dat"));
    write_series(&target, &text)?;
    Ok(target)
}
