//! CSV formats: feature matrices, performance curves and stress tables.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! write/read cycle reproduces every f64 bit for bit.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::knee::{CurvePoint, PerformanceCurve};
use crate::bounds::TargetSpec;
use crate::spectral::FeatureMatrix;
use crate::two_stage::{CalibrationStats, CalibrationTask};
use crate::synth::StressReport;

fn reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r)
}

fn parse_err(line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { line: line as usize, msg: msg.into() }
}

/// Records with their 1-based line numbers. A first row whose first cell is
/// not a number is taken as a header and skipped.
fn records<R: Read>(r: R) -> Result<Vec<(u64, Vec<String>)>> {
    let mut out = Vec::new();
    for (i, rec) in reader(r).into_records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        let cells: Vec<String> = rec.iter().map(str::to_string).collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        if out.is_empty() && i == 0 && cells[0].parse::<f64>().is_err() {
            continue;
        }
        out.push((line, cells));
    }
    Ok(out)
}

fn number(line: u64, col: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(line, format!("column {}: '{cell}' is not a number", col + 1)))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("column {}: non-finite value", col + 1)));
    }
    Ok(v)
}

pub fn parse_features<R: Read>(r: R) -> Result<FeatureMatrix> {
    let recs = records(r)?;
    if recs.is_empty() {
        return Err(Error::Empty("feature file has no data rows".into()));
    }
    let d = recs[0].1.len();
    let mut rows = Vec::with_capacity(recs.len());
    for (line, cells) in &recs {
        if cells.len() != d {
            return Err(parse_err(*line, format!("expected {d} columns, found {}", cells.len())));
        }
        rows.push(cells.iter().enumerate().map(|(j, c)| number(*line, j, c)).collect::<Result<Vec<_>>>()?);
    }
    FeatureMatrix::from_rows(&rows)
}

pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    parse_features(std::fs::File::open(path)?)
}

pub fn write_features_to<W: Write>(mut w: W, features: &FeatureMatrix) -> Result<()> {
    let d = features.d();
    let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..features.k() {
        let row: Vec<String> = features.data().row(i).iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features_to(&mut f, features)?;
    f.flush()?;
    Ok(())
}

/// Columns `k, score[, rep1, ..., repR]`. Either every row has replicates
/// or none does.
pub fn parse_curve<R: Read>(r: R) -> Result<PerformanceCurve> {
    let recs = records(r)?;
    let mut points = Vec::with_capacity(recs.len());
    let mut reps: Vec<Vec<f64>> = Vec::with_capacity(recs.len());
    let with_reps = recs.first().map(|(_, c)| c.len() > 2).unwrap_or(false);
    for (line, cells) in &recs {
        if cells.len() < 2 {
            return Err(parse_err(*line, "need at least the k and score columns"));
        }
        if (cells.len() > 2) != with_reps {
            return Err(parse_err(*line, "replicate columns must be present on every row or on none"));
        }
        let k: u64 = cells[0]
            .parse()
            .map_err(|_| parse_err(*line, format!("k = '{}' is not a positive integer", cells[0])))?;
        if k == 0 {
            return Err(parse_err(*line, "k must be positive"));
        }
        let score = number(*line, 1, &cells[1])?;
        points.push(CurvePoint { k, score });
        if with_reps {
            reps.push(cells[2..].iter().enumerate().map(|(j, c)| number(*line, j + 2, c)).collect::<Result<_>>()?);
        }
    }
    PerformanceCurve::new(points, with_reps.then_some(reps))
}

pub fn read_curve(path: &Path) -> Result<PerformanceCurve> {
    parse_curve(std::fs::File::open(path)?)
}

pub fn write_curve_to<W: Write>(mut w: W, curve: &PerformanceCurve) -> Result<()> {
    let r = curve.replicates().map(|r| r.iter().map(Vec::len).max().unwrap_or(0)).unwrap_or(0);
    let mut header = vec!["k".to_string(), "score".to_string()];
    header.extend((1..=r).map(|i| format!("rep{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (i, p) in curve.points().iter().enumerate() {
        let mut row = vec![p.k.to_string(), p.score.to_string()];
        if let Some(reps) = curve.replicates() {
            row.extend(reps[i].iter().map(|v| v.to_string()));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn write_curve(path: &Path, curve: &PerformanceCurve) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_curve_to(&mut f, curve)?;
    f.flush()?;
    Ok(())
}

/// Long-form table for plotting, one row per strength.
pub fn write_stress_table_to<W: Write>(mut w: W, report: &StressReport) -> Result<()> {
    writeln!(w, "strength,parameter,k_nominal,k_emp,ci_low,ci_high,delta_k")?;
    for r in &report.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.strength, r.parameter, r.k_nominal, r.k_emp, r.k_emp_ci.0, r.k_emp_ci.1, r.delta_k
        )?;
    }
    Ok(())
}

pub fn write_stress_table(path: &Path, report: &StressReport) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_stress_table_to(&mut f, report)?;
    f.flush()?;
    Ok(())
}

/// Calibration tasks, columns `id, frob_norm, r_eff_tr, lambda_q, delta, xi, knee`
/// with an optional trailing `sigma`. The header row is optional.
pub fn parse_tasks<R: Read>(r: R) -> Result<Vec<CalibrationTask>> {
    let mut out = Vec::new();
    for (i, rec) in reader(r).into_records().enumerate() {
        let rec = rec.map_err(|e| parse_err(e.position().map(|p| p.line()).unwrap_or(0), e.to_string()))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(i as u64 + 1);
        let cells: Vec<&str> = rec.iter().collect();
        if cells.iter().all(|c| c.is_empty()) {
            continue;
        }
        if i == 0 && cells.len() > 1 && cells[1].parse::<f64>().is_err() {
            continue;
        }
        if !(7..=8).contains(&cells.len()) {
            return Err(parse_err(line, format!("expected 7 or 8 columns, found {}", cells.len())));
        }
        let v = |j: usize| number(line, j, cells[j]);
        let knee: u64 = cells[6]
            .parse()
            .map_err(|_| parse_err(line, format!("knee = '{}' is not a positive integer", cells[6])))?;
        let sigma = if cells.len() == 8 { v(7)? } else { 1.0 };
        let spec = TargetSpec::new(v(4)?, v(5)?, sigma).map_err(|e| parse_err(line, e.to_string()))?;
        out.push(CalibrationTask {
            id: cells[0].to_string(),
            stats: CalibrationStats { frob_norm: v(1)?, r_eff_tr: v(2)?, lambda_q: v(3)? },
            knee,
            spec,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("task file has no data rows".into()));
    }
    Ok(out)
}

pub fn read_tasks(path: &Path) -> Result<Vec<CalibrationTask>> {
    parse_tasks(std::fs::File::open(path)?)
}

pub fn write_tasks_to<W: Write>(mut w: W, tasks: &[CalibrationTask]) -> Result<()> {
    writeln!(w, "id,frob_norm,r_eff_tr,lambda_q,delta,xi,knee,sigma")?;
    for t in tasks {
        let s = &t.stats;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            t.id, s.frob_norm, s.r_eff_tr, s.lambda_q, t.spec.delta, t.spec.xi, t.knee, t.spec.sigma
        )?;
    }
    Ok(())
}
