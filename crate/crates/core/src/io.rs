//! Readers and writers for the CSV and JSON interchange formats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_steps, Alternative, ChoiceSet, FitResult, LandscapeGrid, NamedTarget, Point, Trajectory};
use crate::scalar::Real;

fn parse<T: Real>(field: &str, what: &'static str) -> Result<T> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("{what}: cannot parse {field:?}")))?;
    Ok(T::lit(v))
}

/// Writes `x,y` rows.
pub fn write_trajectory<T: Real, W: Write>(trajectory: &Trajectory<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y"])?;
    for p in trajectory.points() {
        w.write_record([p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `x,y` rows into a trajectory.
pub fn read_trajectory<T: Real, R: Read>(input: R) -> Result<Trajectory<T>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers()?.clone();
    let ix = headers
        .iter()
        .position(|h| h.trim() == "x")
        .ok_or_else(|| Error::Format("trajectory CSV lacks an x column".into()))?;
    let iy = headers
        .iter()
        .position(|h| h.trim() == "y")
        .ok_or_else(|| Error::Format("trajectory CSV lacks a y column".into()))?;
    let mut points = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        points.push(Point::new(parse(&rec[ix], "x")?, parse(&rec[iy], "y")?));
    }
    derive_steps(points)
}

/// Writes `t,true_state` with states numbered from 1; row `t` is the step
/// from point `t` to point `t + 1`.
pub fn write_states<W: Write>(states: &[usize], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "true_state"])?;
    for (t, s) in states.iter().enumerate() {
        w.write_record([t.to_string(), (s + 1).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `t,true_state` back into zero-based labels.
pub fn read_states<R: Read>(input: R) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let s: usize = rec
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::Format("bad true_state".into()))?;
        if s == 0 {
            return Err(Error::Format("states are numbered from 1".into()));
        }
        out.push(s - 1);
    }
    Ok(out)
}

/// Long format `t,alt_id,is_case,angle,distance,<covariates>,offset`.
pub fn write_choice_sets<T: Real, W: Write>(sets: &[ChoiceSet<T>], covariate_names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["t", "alt_id", "is_case", "angle", "distance"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(covariate_names.iter().cloned());
    header.push("offset".into());
    w.write_record(&header)?;
    for cs in sets {
        if cs.dim() != covariate_names.len() {
            return Err(Error::DimensionMismatch {
                what: "covariate names",
                expected: cs.dim(),
                got: covariate_names.len(),
            });
        }
        for j in 0..cs.n_alternatives() {
            let mut row = vec![
                cs.time_index().to_string(),
                j.to_string(),
                u8::from(j == 0).to_string(),
                cs.angles()[j].to_string(),
                cs.distances()[j].to_string(),
            ];
            row.extend(cs.covariates(j).iter().map(|v| v.to_string()));
            row.push(cs.offsets()[j].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads the long format; returns the sets and the covariate names.
pub fn read_choice_sets<T: Real, R: Read>(input: R) -> Result<(Vec<ChoiceSet<T>>, Vec<String>)> {
    let mut r = csv::Reader::from_reader(input);
    let headers: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_owned()).collect();
    let fixed = ["t", "alt_id", "is_case", "angle", "distance"];
    if headers.len() < 6 || headers[..5] != fixed || headers.last().map(String::as_str) != Some("offset") {
        return Err(Error::Format(
            "choice-set CSV header must be t,alt_id,is_case,angle,distance,<covariates>,offset".into(),
        ));
    }
    let names = headers[5..headers.len() - 1].to_vec();
    let mut sets = Vec::new();
    let mut current: Option<(usize, Vec<Alternative<T>>)> = None;
    for rec in r.records() {
        let rec = rec?;
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad t {:?}", &rec[0])))?;
        let is_case = rec[2].trim() == "1";
        let alt = Alternative {
            angle: parse(&rec[3], "angle")?,
            distance: parse(&rec[4], "distance")?,
            covariates: (5..5 + names.len())
                .map(|i| parse(&rec[i], "covariate"))
                .collect::<Result<_>>()?,
            offset: parse(&rec[5 + names.len()], "offset")?,
        };
        match &mut current {
            Some((ct, alts)) if *ct == t => {
                if is_case {
                    return Err(Error::Format(format!("choice set {t} has more than one case")));
                }
                alts.push(alt);
            }
            _ => {
                if !is_case {
                    return Err(Error::Format(format!("choice set {t} does not start with its case")));
                }
                if let Some((ct, alts)) = current.take() {
                    sets.push(ChoiceSet::new(ct, alts)?);
                }
                current = Some((t, vec![alt]));
            }
        }
    }
    if let Some((ct, alts)) = current {
        sets.push(ChoiceSet::new(ct, alts)?);
    }
    Ok((sets, names))
}

/// JSON header of a landscape; the class raster lives in a CSV file next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeHeader {
    pub origin: Point<f64>,
    pub cell_size: f64,
    /// Code to class name.
    #[serde(default)]
    pub legend: BTreeMap<u8, String>,
    #[serde(default)]
    pub targets: Vec<NamedTarget<f64>>,
    /// Raster CSV path, relative to the header; absent for target-only landscapes.
    #[serde(default)]
    pub body: Option<String>,
}

/// Reads class codes, one raster row per line starting from the north-west.
pub fn read_landscape_body<R: Read>(input: R) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut classes = Vec::new();
    let mut n_cols = None;
    let mut n_rows = 0;
    for rec in r.records() {
        let rec = rec?;
        if n_cols.is_some_and(|c| c != rec.len()) {
            return Err(Error::Format(format!("landscape row {n_rows} has {} cells", rec.len())));
        }
        n_cols = Some(rec.len());
        for f in rec.iter() {
            classes.push(
                f.trim()
                    .parse::<u8>()
                    .map_err(|_| Error::Format(format!("bad class code {f:?}")))?,
            );
        }
        n_rows += 1;
    }
    Ok((n_rows, n_cols.unwrap_or(0), classes))
}

pub fn read_landscape(header_path: &Path) -> Result<LandscapeGrid<f64>> {
    let header: LandscapeHeader = serde_json::from_reader(BufReader::new(File::open(header_path)?))?;
    match &header.body {
        Some(body) => {
            let path = header_path.parent().unwrap_or(Path::new(".")).join(body);
            let (n_rows, n_cols, classes) = read_landscape_body(BufReader::new(File::open(path)?))?;
            LandscapeGrid::new(
                header.origin,
                header.cell_size,
                n_rows,
                n_cols,
                classes,
                header.legend,
                header.targets,
            )
        }
        None => {
            let mut l = LandscapeGrid::targets_only(header.targets);
            l.legend = header.legend;
            Ok(l)
        }
    }
}

/// Writes `<stem>.json` and, when the raster is not empty, `<stem>.csv`.
pub fn write_landscape(landscape: &LandscapeGrid<f64>, dir: &Path, stem: &str) -> Result<()> {
    let body = if landscape.n_rows > 0 {
        let name = format!("{stem}.csv");
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(dir.join(&name))?;
        for row in landscape.classes.chunks(landscape.n_cols) {
            w.write_record(row.iter().map(|c| c.to_string()))?;
        }
        w.flush()?;
        Some(name)
    } else {
        None
    };
    let header = LandscapeHeader {
        origin: landscape.origin,
        cell_size: landscape.cell_size,
        legend: landscape.legend.clone(),
        targets: landscape.targets.clone(),
        body,
    };
    let mut f = File::create(dir.join(format!("{stem}.json")))?;
    serde_json::to_writer_pretty(&mut f, &header)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// JSON view of a fit: coefficients keyed by state and covariate name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub covariates: Vec<String>,
    /// `state{s}` to covariate name to estimate.
    pub coefficients: BTreeMap<String, BTreeMap<String, f64>>,
    pub coefficient_std_errors: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub transition: Vec<Vec<f64>>,
    pub transition_std_errors: Option<Vec<Vec<Option<f64>>>>,
    pub initial: Vec<f64>,
    pub stationary: Vec<f64>,
    pub hessian_positive_definite: Option<bool>,
    pub loglik: f64,
    pub n_em_iterations: usize,
    pub converged: bool,
    pub loglik_trace: Vec<f64>,
    pub degenerate_states: Vec<usize>,
    /// Natural-parameter tilt added to the distance coefficients after fitting.
    #[serde(default)]
    pub distance_correction: Option<[f64; 2]>,
}

impl FitSummary {
    pub fn new<T: Real>(fit: &FitResult<T>, covariates: &[String]) -> Self {
        let k = fit.state_params.len();
        let f = |v: T| v.to_f64_lossy();
        let mut coefficients = BTreeMap::new();
        let mut coefficient_std_errors = BTreeMap::new();
        for (s, p) in fit.state_params.iter().enumerate() {
            let key = format!("state{}", s + 1);
            coefficients.insert(
                key.clone(),
                covariates.iter().cloned().zip(p.beta.iter().map(|&v| f(v))).collect(),
            );
            if let Some(se) = &fit.std_errors {
                coefficient_std_errors.insert(
                    key,
                    covariates
                        .iter()
                        .cloned()
                        .zip(se.beta[s].iter().map(|v| v.map(f)))
                        .collect(),
                );
            }
        }
        Self {
            covariates: covariates.to_vec(),
            coefficients,
            coefficient_std_errors,
            transition: (0..k)
                .map(|h| fit.hmm.transition.row(h).iter().map(|&v| f(v)).collect())
                .collect(),
            transition_std_errors: fit.std_errors.as_ref().map(|se| {
                se.transition
                    .iter()
                    .map(|row| row.iter().map(|v| v.map(f)).collect())
                    .collect()
            }),
            initial: fit.hmm.initial.iter().map(|&v| f(v)).collect(),
            stationary: fit.hmm.stationary().into_iter().map(f).collect(),
            hessian_positive_definite: fit.std_errors.as_ref().map(|se| se.positive_definite),
            loglik: f(fit.loglik),
            n_em_iterations: fit.n_em_iterations,
            converged: fit.converged,
            loglik_trace: fit.loglik_trace.iter().map(|&v| f(v)).collect(),
            degenerate_states: fit.degenerate_states.clone(),
            distance_correction: None,
        }
    }
}

/// `t,p_state1,…,p_stateK,decoded` with states numbered from 1.
pub fn write_smoothed<T: Real, W: Write>(time_index: &[usize], smoothed: &[Vec<T>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = smoothed.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_owned()];
    header.extend((1..=k).map(|s| format!("p_state{s}")));
    header.push("decoded".into());
    w.write_record(&header)?;
    for (t, row) in time_index.iter().zip(smoothed) {
        let decoded = row
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |b, (i, &p)| if p > b.1 { (i, p) } else { b })
            .0;
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|p| p.to_string()));
        rec.push((decoded + 1).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
