//! File formats: weights JSON, edge-list and coordinate CSV inputs, the
//! tabular dataset reader, and the CSV writers for scatter, weight
//! comparison, local test, and simulation outputs.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::esda::{ScatterData, WeightComparison};
use crate::inference::LocalTestResult;
use crate::simkit::SimMetrics;
use crate::weights::{Normalization, WeightMatrix};

/// On-disk weights representation: sparse triplets plus the normalization
/// tag, so a file round-trips to the same matrix.
#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    n: usize,
    normalization: Normalization,
    edges: Vec<(usize, usize, f64)>,
}

pub fn write_weights_json(path: &Path, w: &WeightMatrix) -> Result<()> {
    let m = w.matrix();
    let mut edges = Vec::new();
    for i in 0..w.n() {
        for j in 0..w.n() {
            if m[(i, j)] != 0.0 {
                edges.push((i, j, m[(i, j)]));
            }
        }
    }
    let file = WeightsFile {
        n: w.n(),
        normalization: w.normalization(),
        edges,
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_weights_json(path: &Path) -> Result<WeightMatrix> {
    let text = std::fs::read_to_string(path)?;
    let file: WeightsFile = serde_json::from_str(&text)?;
    let mut m = DMatrix::zeros(file.n, file.n);
    for (i, j, v) in file.edges {
        if i >= file.n || j >= file.n {
            return Err(Error::Data(format!(
                "weights entry ({i}, {j}) outside n = {}",
                file.n
            )));
        }
        m[(i, j)] = v;
    }
    WeightMatrix::new(m, file.normalization)
}

/// Reads an undirected edge list `i,j[,w]` with a header row; returns the
/// inferred unit count and symmetrized 0-based edge pairs.
pub fn read_edge_csv(path: &Path) -> Result<(usize, Vec<(usize, usize)>)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut edges = Vec::new();
    let mut max_idx = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() < 2 {
            return Err(Error::Data(format!(
                "edge file row {}: expected at least columns i,j",
                row + 2
            )));
        }
        let parse = |field: &str, name: &str| -> Result<usize> {
            field.trim().parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "edge file row {}: cannot parse {name} '{field}'",
                    row + 2
                ))
            })
        };
        let i = parse(&record[0], "i")?;
        let j = parse(&record[1], "j")?;
        if i == j {
            return Err(Error::Data(format!(
                "edge file row {}: self-loop on unit {i}",
                row + 2
            )));
        }
        max_idx = max_idx.max(i).max(j);
        edges.push((i, j));
        edges.push((j, i));
    }
    if edges.is_empty() {
        return Err(Error::Data("edge file contains no edges".into()));
    }
    edges.sort_unstable();
    edges.dedup();
    Ok((max_idx + 1, edges))
}

/// Reads a two-column coordinate CSV (header row, `x,y` or `id,x,y`).
pub fn read_coords_csv(path: &Path) -> Result<Vec<(f64, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let (xi, yi) = match (headers.iter().position(|h| h == "x"), headers.iter().position(|h| h == "y")) {
        (Some(a), Some(b)) => (a, b),
        _ => (headers.len() - 2, headers.len() - 1),
    };
    let mut coords = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let get = |idx: usize, name: &str| -> Result<f64> {
            record
                .get(idx)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .ok_or_else(|| {
                    Error::Data(format!(
                        "coordinate file row {}: cannot parse {name}",
                        row + 2
                    ))
                })
        };
        coords.push((get(xi, "x")?, get(yi, "y")?));
    }
    if coords.len() < 2 {
        return Err(Error::Data("coordinate file needs at least 2 points".into()));
    }
    Ok(coords)
}

/// Column-selected tabular data for one analysis.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub response: DVector<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub ids: Vec<String>,
    pub coords: Option<Vec<(f64, f64)>>,
}

/// Reads the selected columns from a headered CSV. Any missing or
/// unparseable value in a selected column is a hard error naming the row.
pub fn read_dataset(
    path: &Path,
    response: &str,
    covariates: &[String],
    id_column: Option<&str>,
    coord_columns: Option<(&str, &str)>,
) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column '{name}' not found in {}", path.display())))
    };
    let resp_idx = col(response)?;
    let cov_idx: Vec<usize> = covariates.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let id_idx = id_column.map(col).transpose()?;
    let coord_idx = coord_columns
        .map(|(cx, cy)| Ok::<_, Error>((col(cx)?, col(cy)?)))
        .transpose()?;

    let mut z = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let numeric = |idx: usize| -> Result<f64> {
            let field = record.get(idx).unwrap_or("");
            let trimmed = field.trim();
            if trimmed.is_empty() {
                return Err(Error::Data(format!(
                    "missing value in column '{}' at data row {}",
                    &headers[idx],
                    row + 2
                )));
            }
            trimmed.parse::<f64>().map_err(|_| {
                Error::Data(format!(
                    "cannot parse '{trimmed}' in column '{}' at data row {}",
                    &headers[idx],
                    row + 2
                ))
            })
        };
        z.push(numeric(resp_idx)?);
        x_rows.push(cov_idx.iter().map(|&i| numeric(i)).collect::<Result<_>>()?);
        ids.push(match id_idx {
            Some(i) => record.get(i).unwrap_or("").to_string(),
            None => row.to_string(),
        });
        if let Some((cx, cy)) = coord_idx {
            coords.push((numeric(cx)?, numeric(cy)?));
        }
    }
    let n = z.len();
    if n == 0 {
        return Err(Error::Data("dataset contains no rows".into()));
    }
    let p = covariates.len();
    let covariate_matrix = DMatrix::from_fn(n, p, |i, j| x_rows[i][j]);
    Ok(Dataset {
        response: DVector::from_vec(z),
        covariates: covariate_matrix,
        covariate_names: covariates.to_vec(),
        ids,
        coords: if coord_idx.is_some() { Some(coords) } else { None },
    })
}

pub fn write_scatter_csv(path: &Path, scatter: &ScatterData, ids: Option<&[String]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "x_tilde", "y_tilde", "c_i", "s_i", "leverage"])?;
    for point in &scatter.points {
        let id = match ids {
            Some(ids) => ids[point.id].clone(),
            None => point.id.to_string(),
        };
        writer.write_record([
            id,
            format!("{:.17e}", point.x_tilde),
            format!("{:.17e}", point.y_tilde),
            format!("{:.17e}", point.c_i),
            format!("{:.17e}", point.s_i),
            format!("{:.17e}", point.leverage),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_comparison_csv(path: &Path, comparison: &WeightComparison) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["label", "avg_degree", "i_n0", "i_r0", "info_ratio", "selected"])?;
    for row in &comparison.rows {
        writer.write_record([
            row.label.clone(),
            format!("{:.17e}", row.avg_degree),
            format!("{:.17e}", row.i_n0),
            format!("{:.17e}", row.i_r0),
            format!("{:.17e}", row.info_ratio),
            if row.selected { "true".into() } else { "false".into() },
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_local_csv(path: &Path, local: &LocalTestResult, ids: Option<&[String]>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["id", "c_i", "s_i", "p_value", "p_adjusted", "significant"])?;
    for unit in &local.units {
        let id = match ids {
            Some(ids) => ids[unit.id].clone(),
            None => unit.id.to_string(),
        };
        writer.write_record([
            id,
            format!("{:.17e}", unit.c_i),
            format!("{:.17e}", unit.s_i),
            format!("{:.17e}", unit.p_value),
            format!("{:.17e}", unit.p_adjusted),
            if unit.significant { "true".into() } else { "false".into() },
        ])?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_sim_csv(path: &Path, metrics: &SimMetrics) -> Result<()> {
    let text = sim_csv_string(metrics)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Renders SimMetrics to the long-format CSV as an in-memory string, so
/// determinism checks can compare byte-for-byte without touching disk.
pub fn sim_csv_string(metrics: &SimMetrics) -> Result<String> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record([
        "design_id", "topology", "n", "p", "w_label", "method", "rho_true", "metric", "value",
        "mc_se",
    ])?;
    for row in &metrics.rows {
        writer.write_record([
            row.design_id.clone(),
            row.topology.clone(),
            row.n.to_string(),
            row.p.to_string(),
            row.w_label.clone(),
            row.method.clone(),
            format!("{:.17e}", row.rho_true),
            row.metric.clone(),
            format!("{:.17e}", row.value),
            format!("{:.17e}", row.mc_se),
        ])?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::{build_lattice, raw_weights, row_standardize, LatticeScheme};
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_json_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        for w in [
            row_standardize(&build_lattice(3, 3, LatticeScheme::Queen).unwrap()).unwrap(),
            raw_weights(&build_lattice(2, 4, LatticeScheme::Rook).unwrap()).unwrap(),
        ] {
            write_weights_json(&path, &w).unwrap();
            let back = read_weights_json(&path).unwrap();
            assert_eq!(back.normalization(), w.normalization());
            assert_abs_diff_eq!((back.matrix() - w.matrix()).abs().max(), 0.0);
        }
    }

    #[test]
    fn edge_csv_symmetrizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "i,j\n0,1\n1,2\n").unwrap();
        let (n, edges) = read_edge_csv(&path).unwrap();
        assert_eq!(n, 3);
        assert_eq!(edges, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn edge_csv_rejects_self_loop() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        std::fs::write(&path, "i,j\n0,0\n").unwrap();
        assert!(read_edge_csv(&path).is_err());
    }

    #[test]
    fn dataset_reads_selected_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(
            &path,
            "geoid,y,x1,x2,lon,lat\nA,1.0,0.5,2.0,10.0,20.0\nB,2.0,0.6,3.0,11.0,21.0\n",
        )
        .unwrap();
        let ds = read_dataset(
            &path,
            "y",
            &["x1".into(), "x2".into()],
            Some("geoid"),
            Some(("lon", "lat")),
        )
        .unwrap();
        assert_eq!(ds.response.len(), 2);
        assert_eq!(ds.covariates.ncols(), 2);
        assert_eq!(ds.ids, vec!["A", "B"]);
        assert_eq!(ds.coords.as_ref().unwrap()[1], (11.0, 21.0));
    }

    #[test]
    fn dataset_missing_value_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,x1\n1.0,2.0\n,3.0\n").unwrap();
        let err = read_dataset(&path, "y", &["x1".into()], None, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 3"), "{msg}");
        assert!(err.is_validation());
    }

    #[test]
    fn dataset_unknown_column_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "y,x1\n1.0,2.0\n").unwrap();
        assert!(read_dataset(&path, "z", &[], None, None).is_err());
    }

    #[test]
    fn coords_csv_reads_xy() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        std::fs::write(&path, "id,x,y\n0,1.5,2.5\n1,3.0,4.0\n").unwrap();
        let coords = read_coords_csv(&path).unwrap();
        assert_eq!(coords, vec![(1.5, 2.5), (3.0, 4.0)]);
    }

    #[test]
    fn sim_csv_has_schema_header() {
        let metrics = SimMetrics {
            rows: vec![crate::simkit::MetricRow {
                design_id: "d".into(),
                topology: "lattice_queen".into(),
                n: 9,
                p: 1,
                w_label: "queen".into(),
                method: "resaple".into(),
                rho_true: 0.5,
                metric: "bias".into(),
                value: -0.01,
                mc_se: 0.002,
            }],
        };
        let text = sim_csv_string(&metrics).unwrap();
        assert!(text.starts_with("design_id,topology,n,p,w_label,method,rho_true,metric,value,mc_se\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
