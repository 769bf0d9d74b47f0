//! `set-transport export-attention`: dump one layer's weighted plan
//! `T̃ = M ⊙ T` for a single input, plus its row and column sums.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use set_transport::model::{Mechanism, SeTformer};
use set_transport::{Error, Matrix, Result};

/// Plan marginals must be within this of uniform before anything is written.
pub const MARGINAL_TOL: f64 = 1e-6;

pub fn plan_file(layer: usize) -> String {
    format!("plan_layer{layer}.csv")
}

pub fn marginals_file(layer: usize) -> String {
    format!("marginals_layer{layer}.csv")
}

/// Parses a headerless numeric CSV, one token (or pixel) per line.
pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), ln + 1)))?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Format(format!("{}: expected a non-empty rectangular table", path.display())));
    }
    let n = rows.len();
    Matrix::new(n, cols, rows.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub n: usize,
    pub m: usize,
    pub plan_violation: f64,
}

/// Writes the files for `layer` (0-based, counted across stages) and
/// `head`. Indices inside the files are 1-based.
pub fn export_attention(
    model: &SeTformer,
    x: &Matrix,
    layer: usize,
    head: usize,
    out_dir: &Path,
) -> Result<ExportSummary> {
    if model.config.mechanism != Mechanism::Set {
        return Err(Error::InvalidArgument("dot-product attention has no transport plan to export".into()));
    }
    let layers = model.num_layers();
    if layer >= layers {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range: model has {layers} layers")));
    }
    let (_, traces) = model.forward_traced(x)?;
    let heads = traces.iter().filter(|t| t.layer == layer).count();
    let trace = traces
        .into_iter()
        .find(|t| t.layer == layer && t.head == head)
        .ok_or_else(|| Error::InvalidArgument(format!("head {head} out of range: layer {layer} has {heads} heads")))?;
    let (n, m) = trace.plan.shape();

    let rows = trace.plan.row_sums();
    let cols = trace.plan.col_sums();
    let violation = rows
        .iter()
        .map(|r| (r - 1.0 / n as f64).abs())
        .chain(cols.iter().map(|c| (c - 1.0 / m as f64).abs()))
        .fold(0.0f64, f64::max);
    if !(violation <= MARGINAL_TOL) {
        return Err(Error::Numerical(format!(
            "layer {layer} plan marginals are off by {violation:e}; raise the Sinkhorn iterations"
        )));
    }
    if trace.plan.min_value() < 0.0 || trace.weighted.min_value() < 0.0 || !trace.weighted.is_finite() {
        return Err(Error::Numerical(format!("layer {layer} plan has negative or non-finite entries")));
    }

    let mut plan = String::from("i,j,value\n");
    for i in 0..n {
        for j in 0..m {
            let _ = writeln!(plan, "{},{},{:?}", i + 1, j + 1, trace.weighted[(i, j)]);
        }
    }
    let mut marg = String::from("axis,index,weighted,plan\n");
    for (i, (w, p)) in trace.weighted.row_sums().iter().zip(&rows).enumerate() {
        let _ = writeln!(marg, "row,{},{w:?},{p:?}", i + 1);
    }
    for (j, (w, p)) in trace.weighted.col_sums().iter().zip(&cols).enumerate() {
        let _ = writeln!(marg, "col,{},{w:?},{p:?}", j + 1);
    }
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(plan_file(layer)), plan)?;
    fs::write(out_dir.join(marginals_file(layer)), marg)?;
    Ok(ExportSummary { n, m, plan_violation: violation })
}
