//! Tab-separated file formats.
//!
//! * `expression.tsv`: header of gene names, one row of decimals per cell.
//! * `covariates.tsv`: header of covariate names, one row of labels per cell.
//! * `treatments.tsv`: header `treatment`, one label per cell.
//! * `graph.edges.tsv`: header `source\ttarget`, one directed edge per row.
//! * `graph.features.tsv`: header `gene\t<feature names>`, one row per gene.
//! * `split.tsv`: header `cell\ttag`, tags `train`, `val` or `ood`.
//!
//! Row `i` of the three per-cell files describes the same cell.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::dataset::ExpressionDataset;
use super::graph::RelationGraph;
use super::split::{SplitAssignment, SplitTag};
use crate::error::{Error, Result};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

struct Table {
    file: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn parse_table(path: &Path) -> Result<Table> {
    let text = read_to_string(path)?;
    let file = path.display().to_string();
    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split('\t').map(str::to_string).collect(),
        None => {
            return Err(Error::Parse {
                file,
                row: 0,
                column: "-".into(),
                message: "missing header".into(),
            })
        }
    };
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                file,
                row: i + 1,
                column: "-".into(),
                message: format!("expected {} fields, found {}", header.len(), fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok(Table { file, header, rows })
}

fn check_unique(names: &[String], file: &str) -> Result<()> {
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() || names[..i].contains(n) {
            return Err(Error::Parse {
                file: file.to_string(),
                row: 0,
                column: n.clone(),
                message: "empty or duplicate header name".into(),
            });
        }
    }
    Ok(())
}

fn parse_f64(s: &str, file: &str, row: usize, column: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        column: column.to_string(),
        message: format!("non-numeric value {s:?}"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            file: file.to_string(),
            row,
            column: column.to_string(),
            message: format!("non-finite value {s:?}"),
        });
    }
    Ok(v)
}

fn numeric_matrix(t: &Table, skip: usize) -> Result<Array2<f64>> {
    let cols = t.header.len() - skip;
    let mut m = Array2::zeros((t.rows.len(), cols));
    for (r, row) in t.rows.iter().enumerate() {
        for c in 0..cols {
            m[[r, c]] = parse_f64(&row[skip + c], &t.file, r + 1, &t.header[skip + c])?;
        }
    }
    Ok(m)
}

pub fn load_dataset(expression: &Path, covariates: &Path, treatments: &Path) -> Result<ExpressionDataset> {
    let expr = parse_table(expression)?;
    check_unique(&expr.header, &expr.file)?;
    let outcomes = numeric_matrix(&expr, 0)?;

    let cov = parse_table(covariates)?;
    check_unique(&cov.header, &cov.file)?;
    let trt = parse_table(treatments)?;
    if trt.header != ["treatment"] {
        return Err(Error::Parse {
            file: trt.file,
            row: 0,
            column: trt.header.join("\t"),
            message: "unknown header, expected `treatment`".into(),
        });
    }
    let n = outcomes.nrows();
    if cov.rows.len() != n || trt.rows.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "cell counts differ: {n} expression rows, {} covariate rows, {} treatment rows",
            cov.rows.len(),
            trt.rows.len()
        )));
    }
    let treatment_labels: Vec<String> = trt.rows.into_iter().map(|mut r| r.remove(0)).collect();
    ExpressionDataset::from_labels(outcomes, expr.header, cov.header, &cov.rows, &treatment_labels)
}

/// Writes the three per-cell files into `dir`.
pub fn write_dataset(dir: &Path, ds: &ExpressionDataset) -> Result<()> {
    let mut expr = ds.gene_names().join("\t");
    expr.push('\n');
    for row in ds.outcomes().rows() {
        push_row(&mut expr, row.iter());
    }
    write_string(&dir.join("expression.tsv"), &expr)?;

    let mut cov = ds.covariate_names().join("\t");
    cov.push('\n');
    let mut trt = String::from("treatment\n");
    for i in 0..ds.n_cells() {
        let labels: Vec<&str> = ds
            .covariates_of(i)
            .iter()
            .zip(ds.covariate_levels())
            .map(|(&c, l)| l.label(c))
            .collect();
        cov.push_str(&labels.join("\t"));
        cov.push('\n');
        trt.push_str(ds.treatment_levels().label(ds.treatment_of(i)));
        trt.push('\n');
    }
    write_string(&dir.join("covariates.tsv"), &cov)?;
    write_string(&dir.join("treatments.tsv"), &trt)
}

pub(crate) fn push_row<'a>(out: &mut String, values: impl Iterator<Item = &'a f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push('\t');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

/// Loads a graph and aligns its nodes to `genes`.
pub fn load_graph(edges: &Path, features: &Path, genes: &[String]) -> Result<RelationGraph> {
    let index = |name: &str, file: &str, row: usize| {
        genes.iter().position(|g| g == name).ok_or_else(|| Error::Parse {
            file: file.to_string(),
            row,
            column: name.to_string(),
            message: "gene not present in the dataset (gene-set mismatch)".into(),
        })
    };
    let n = genes.len();
    let et = parse_table(edges)?;
    if et.header != ["source", "target"] {
        return Err(Error::Parse {
            file: et.file,
            row: 0,
            column: et.header.join("\t"),
            message: "unknown header, expected `source\\ttarget`".into(),
        });
    }
    let mut adjacency = Array2::zeros((n, n));
    for (r, row) in et.rows.iter().enumerate() {
        let s = index(&row[0], &et.file, r + 1)?;
        let t = index(&row[1], &et.file, r + 1)?;
        adjacency[[s, t]] = 1.0;
    }

    let ft = parse_table(features)?;
    if ft.header.first().map(String::as_str) != Some("gene") {
        return Err(Error::Parse {
            file: ft.file,
            row: 0,
            column: ft.header.first().cloned().unwrap_or_default(),
            message: "unknown header, first column must be `gene`".into(),
        });
    }
    if ft.rows.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {n} genes (gene-set mismatch)",
            ft.rows.len()
        )));
    }
    let values = numeric_matrix(&ft, 1)?;
    let mut node_features = Array2::zeros((n, values.ncols()));
    let mut seen = vec![false; n];
    for (r, row) in ft.rows.iter().enumerate() {
        let g = index(&row[0], &ft.file, r + 1)?;
        if seen[g] {
            return Err(Error::Parse {
                file: ft.file.clone(),
                row: r + 1,
                column: row[0].clone(),
                message: "duplicate gene".into(),
            });
        }
        seen[g] = true;
        node_features.row_mut(g).assign(&values.row(r));
    }
    RelationGraph::new(node_features, adjacency, genes.to_vec())
}

pub fn edges_tsv(graph: &RelationGraph) -> String {
    let mut out = String::from("source\ttarget\n");
    let names = graph.gene_names();
    for (s, t) in graph.edges() {
        let _ = writeln!(out, "{}\t{}", names[s], names[t]);
    }
    out
}

pub fn features_tsv(graph: &RelationGraph) -> String {
    let mut out = String::from("gene");
    for k in 0..graph.node_features().ncols() {
        let _ = write!(out, "\tf{k}");
    }
    out.push('\n');
    for (g, row) in graph.node_features().rows().into_iter().enumerate() {
        out.push_str(&graph.gene_names()[g]);
        out.push('\t');
        push_row(&mut out, row.iter());
    }
    out
}

pub fn write_split(path: &Path, split: &SplitAssignment) -> Result<()> {
    let mut out = String::from("cell\ttag\n");
    for (i, tag) in split.tags().iter().enumerate() {
        let _ = writeln!(out, "{i}\t{}", tag.as_str());
    }
    write_string(path, &out)
}

pub fn read_split(path: &Path) -> Result<SplitAssignment> {
    let t = parse_table(path)?;
    let mut tags = Vec::with_capacity(t.rows.len());
    for (r, row) in t.rows.iter().enumerate() {
        let err = |msg: &str| Error::Parse {
            file: t.file.clone(),
            row: r + 1,
            column: "tag".into(),
            message: msg.to_string(),
        };
        if row[0].parse::<usize>().ok() != Some(r) {
            return Err(err("cell indices must be 0..n in order"));
        }
        tags.push(SplitTag::parse(&row[1]).ok_or_else(|| err("unknown tag"))?);
    }
    Ok(SplitAssignment::new(tags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, s: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, s).unwrap();
        p
    }

    #[test]
    fn loads_three_cell_fixture() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "e.tsv", "g1\tg2\n1\t2\n3.5\t4\n-1e-3\t0\n");
        let c = write(d.path(), "c.tsv", "cell_type\nA\nB\nA\n");
        let t = write(d.path(), "t.tsv", "treatment\nctrl\ndrug\nctrl\n");
        let ds = load_dataset(&e, &c, &t).unwrap();
        assert_eq!(ds.outcomes().dim(), (3, 2));
        assert_eq!(ds.outcomes()[[2, 0]], -1e-3);
        assert_eq!(ds.n_treatments(), 2);
    }

    #[test]
    fn treatment_row_count_mismatch() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "e.tsv", "g1\tg2\n1\t2\n3\t4\n5\t6\n");
        let c = write(d.path(), "c.tsv", "cell_type\nA\nB\nA\n");
        let t = write(d.path(), "t.tsv", "treatment\nctrl\ndrug\n");
        assert!(matches!(load_dataset(&e, &c, &t), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn nan_entry_names_row_and_column() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "e.tsv", "g1\tg2\n1\t2\n3\tNaN\n");
        let c = write(d.path(), "c.tsv", "cell_type\nA\nB\n");
        let t = write(d.path(), "t.tsv", "treatment\nctrl\ndrug\n");
        let err = load_dataset(&e, &c, &t).unwrap_err();
        match &err {
            Error::Parse { row, column, .. } => {
                assert_eq!(*row, 2);
                assert_eq!(column, "g2");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("g2"));
    }

    #[test]
    fn unknown_treatment_header() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "e.tsv", "g1\n1\n");
        let c = write(d.path(), "c.tsv", "ct\nA\n");
        let t = write(d.path(), "t.tsv", "drug\nctrl\n");
        assert!(matches!(load_dataset(&e, &c, &t), Err(Error::Parse { .. })));
    }

    #[test]
    fn dataset_and_graph_file_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let e = write(d.path(), "expression.tsv", "a\tb\tc\n0.1\t2\t3\n4\t5.25\t-6\n");
        let c = write(d.path(), "covariates.tsv", "ct\tdonor\nA\tx\nB\ty\n");
        let t = write(d.path(), "treatments.tsv", "treatment\nctrl\nk1\n");
        let ds = load_dataset(&e, &c, &t).unwrap();
        let out = tempfile::tempdir().unwrap();
        write_dataset(out.path(), &ds).unwrap();
        for f in ["expression.tsv", "covariates.tsv", "treatments.tsv"] {
            assert_eq!(
                fs::read_to_string(d.path().join(f)).unwrap(),
                fs::read_to_string(out.path().join(f)).unwrap()
            );
        }

        let edges = write(d.path(), "g.edges.tsv", "source\ttarget\na\tc\nb\ta\n");
        let feats = write(d.path(), "g.features.tsv", "gene\tf0\nc\t3\na\t1\nb\t2\n");
        let g = load_graph(&edges, &feats, ds.gene_names()).unwrap();
        assert_eq!(g.node_features().column(0).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(g.edges(), vec![(0, 2), (1, 0)]);
        assert_eq!(edges_tsv(&g), "source\ttarget\na\tc\nb\ta\n");

        let bad = write(d.path(), "bad.edges.tsv", "source\ttarget\na\tzz\n");
        assert!(load_graph(&bad, &feats, ds.gene_names()).is_err());
    }
}
