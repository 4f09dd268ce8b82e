//! Head-projection export: normalized matrices for plotting plus
//! conditioning diagnostics.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use thattn_core::attention::{AttentionParams, TalkingHeadsParams};
use thattn_core::linalg::{determinant, eigenvalues, MAX_EIGEN_DIM};
use thattn_core::lm::Model;
use thattn_core::tensor::einsum;
use thattn_core::Tensor;

/// Informational bounds a well-conditioned trained projection clears.
pub const DET_FLOOR: f64 = 1e-9;
pub const EIG_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub max_abs: f64,
    pub abs_det: Option<f64>,
    pub min_abs_eig: Option<f64>,
    /// Why determinant/eigenvalues were skipped.
    pub notice: Option<String>,
}

impl Diagnostics {
    pub fn det_above_floor(&self) -> Option<bool> {
        self.abs_det.map(|d| d > DET_FLOOR)
    }

    pub fn eig_above_floor(&self) -> Option<bool> {
        self.min_abs_eig.map(|e| e > EIG_FLOOR)
    }
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, c) = (t.sizes()[0], t.sizes()[1]);
    (0..r)
        .map(|i| (0..c).map(|j| t.get(&[i, j])).collect())
        .collect()
}

/// Divides by the largest magnitude, so entries land in [-1, 1] with signs
/// kept. An all-zero matrix is returned unchanged.
pub fn normalize(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let max = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return a.to_vec();
    }
    a.iter()
        .map(|r| r.iter().map(|v| v / max).collect())
        .collect()
}

pub fn diagnose(name: &str, a: &[Vec<f64>]) -> anyhow::Result<Diagnostics> {
    let rows = a.len();
    let cols = a.first().map_or(0, Vec::len);
    let mut d = Diagnostics {
        name: name.to_string(),
        rows,
        cols,
        max_abs: a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())),
        abs_det: None,
        min_abs_eig: None,
        notice: None,
    };
    if rows != cols {
        d.notice = Some(format!(
            "{rows}x{cols} is not square; determinant and eigenvalues skipped"
        ));
    } else if rows > MAX_EIGEN_DIM {
        d.notice = Some(format!(
            "{rows}x{rows} exceeds the {MAX_EIGEN_DIM}x{MAX_EIGEN_DIM} limit; skipped"
        ));
    } else {
        d.abs_det = Some(determinant(a)?.abs());
        let eig = eigenvalues(a)?;
        d.min_abs_eig = eig.iter().map(|z| z.norm()).min_by(f64::total_cmp);
    }
    Ok(d)
}

pub fn matrix_csv(a: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for r in a {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", cells.join(",")).unwrap();
    }
    out
}

pub fn diagnostics_csv(ds: &[Diagnostics]) -> String {
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:e}"));
    let flag = |v: Option<bool>| v.map_or(String::new(), |b| b.to_string());
    let mut out = String::from("matrix,rows,cols,max_abs,abs_det,min_abs_eigenvalue,abs_det_above_1e-9,min_eig_above_1e-3,notice\n");
    for d in ds {
        writeln!(
            out,
            "{},{},{},{:e},{},{},{},{},{}",
            d.name,
            d.rows,
            d.cols,
            d.max_abs,
            opt(d.abs_det),
            opt(d.min_abs_eig),
            flag(d.det_above_floor()),
            flag(d.eig_above_floor()),
            d.notice.as_deref().unwrap_or("")
        )
        .unwrap();
    }
    out
}

/// `P_l`, `P_w` and `P_l x P_w` of a layer's (static) head projections.
pub fn projections(model: &Model, layer: usize) -> anyhow::Result<[(&'static str, Tensor); 3]> {
    let params = model.attention_params(layer)?;
    let p: TalkingHeadsParams = match params {
        AttentionParams::TalkingHeads(p) => p,
        AttentionParams::Dynamic(p) => p.base,
        other => bail!(
            "layer {layer} uses {} attention, which has no P_l/P_w pair to export",
            other.variant()
        ),
    };
    let product = einsum(
        &[(&p.p_l, &["h_k", "h"]), (&p.p_w, &["h", "h_v"])],
        &["h_k", "h_v"],
    )?;
    Ok([("P_l", p.p_l), ("P_w", p.p_w), ("P_l_x_P_w", product)])
}

/// Writes `<name>.csv` (normalized) for each projection and
/// `diagnostics.csv`, returning the diagnostics.
pub fn export_projections(
    model: &Model,
    layer: usize,
    out_dir: &Path,
) -> anyhow::Result<Vec<Diagnostics>> {
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut diags = Vec::new();
    for (name, t) in projections(model, layer)? {
        let rows = rows_of(&t);
        let path = out_dir.join(format!("{name}.csv"));
        std::fs::write(&path, matrix_csv(&normalize(&rows)))
            .with_context(|| format!("writing {}", path.display()))?;
        diags.push(diagnose(name, &rows)?);
    }
    let path = out_dir.join("diagnostics.csv");
    std::fs::write(&path, diagnostics_csv(&diags))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(diags)
}
