use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::RankReport;
use crate::data::Dataset;
use crate::model::{Model, Phi};
use crate::numerics::Tensor;
use crate::par::{map_indexed, Execution};
use crate::tcpa::LayerRecord;
use crate::{Error, Result};

pub const RANK_HEADER: &str = "layer,head,epsilon,rank,sigma_max";
pub const FEATURE_HEADER_PREFIX: &str = "sample_id,label";

/// Slot names of a captured layer, in row order. TCPA layers carry their own
/// layout; otherwise any rows between CLS and the patches are prompts.
pub fn layout_names(record: &LayerRecord) -> Vec<String> {
    if let Some(mask) = &record.mask {
        return mask.layout.describe();
    }
    let patches = record.tokens.rows().saturating_sub(1);
    let total = record
        .maps
        .first()
        .map_or(patches + 1, |m| m.effective.rows());
    let prompts = total.saturating_sub(patches + 1);
    std::iter::once("cls".to_string())
        .chain((0..prompts).map(|p| format!("prompt:{p}")))
        .chain((0..patches).map(|m| format!("patch:{m}")))
        .collect()
}

/// Writes `attn_l{j}_h{h}.csv` per layer and head, `mask_l{j}.csv` where a
/// mask was assembled, and `layout.csv` naming the slots. Layers are
/// numbered from 1. Returns the written paths.
pub fn export_attention(records: &[LayerRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in records {
        for (h, maps) in r.maps.iter().enumerate() {
            let path = dir.join(format!("attn_l{}_h{h}.csv", r.layer_index));
            write_matrix_csv(&path, &maps.effective)?;
            written.push(path);
        }
        if let Some(mask) = &r.mask {
            let path = dir.join(format!("mask_l{}.csv", r.layer_index));
            write_matrix_csv(&path, &mask.mask)?;
            written.push(path);
        }
    }
    if let Some(first) = records.first() {
        let path = dir.join("layout.csv");
        write_lines(&path, |w| {
            writeln!(w, "slot,name")?;
            for (i, name) in layout_names(first).iter().enumerate() {
                writeln!(w, "{i},{name}")?;
            }
            Ok(())
        })?;
        written.push(path);
    }
    Ok(written)
}

/// Comma-separated rows. Values use the shortest decimal form that parses
/// back to the same `f64`, so a re-import is exact.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    write_lines(path, |w| {
        for i in 0..m.rows() {
            write_row(w, m.row(i))?;
        }
        Ok(())
    })
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Contract(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Contract(format!(
                "{}:{}: expected {} values, found {}",
                path.display(),
                n + 1,
                rows[0].len(),
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(Tensor::from_rows(&rows))
}

pub fn write_rank_csv(path: &Path, reports: &[RankReport]) -> Result<()> {
    write_lines(path, |w| {
        writeln!(w, "{RANK_HEADER}")?;
        for r in reports {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.layer,
                r.head,
                r.epsilon,
                r.epsilon_rank,
                r.sigma_max()
            )?;
        }
        Ok(())
    })
}

/// Classifier-input features of every sample: `sample_id,label,f_0,…`.
pub fn export_features(
    path: &Path,
    model: &Model,
    phi: &Phi,
    dataset: &Dataset,
    exec: Execution,
) -> Result<()> {
    let rows = map_indexed(dataset.len(), exec, |i| {
        model.features(phi, &dataset.image(i))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    write_lines(path, |w| {
        write!(w, "{FEATURE_HEADER_PREFIX}")?;
        for j in 0..model.config.embed_dim {
            write!(w, ",f_{j}")?;
        }
        writeln!(w)?;
        for (i, f) in rows.iter().enumerate() {
            write!(w, "{i},{},", dataset.labels[i])?;
            write_row(w, f)?;
        }
        Ok(())
    })
}

fn write_row(w: &mut impl Write, values: &[f64]) -> std::io::Result<()> {
    for (j, v) in values.iter().enumerate() {
        if j > 0 {
            w.write_all(b",")?;
        }
        write!(w, "{v}")?;
    }
    writeln!(w)
}

fn write_lines<F>(path: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    body(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
