//! CSV persistence of histograms, scans, trajectories and spectra.
//!
//! Every table starts with a fixed header. Readers reject a header mismatch
//! and report malformed rows with their line number.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::alt::{AltFidelityPoint, DiffHistogram, DiffPmf};
use crate::error::{Error, Result};
use crate::readout::{FidelityPoint, Histogram, SpinState};
use crate::spin::EnergyLevels;
use crate::trajectory::{FilterResult, Trajectory};

pub const HISTOGRAM_HEADER: &[&str] = &["n", "count"];
pub const DIFF_HISTOGRAM_HEADER: &[&str] = &["k", "count"];
pub const DIFF_PMF_HEADER: &[&str] = &["k", "prob"];
pub const FIDELITY_HEADER: &[&str] = &["N", "n_dark_max", "n_bright_min", "F_dark", "F_bright", "F_avg", "eta"];
pub const ALT_FIDELITY_HEADER: &[&str] = &["N_pairs", "k_down_max", "k_up_min", "F_down", "F_up", "F_avg", "eta"];
pub const TRAJECTORY_HEADER: &[&str] = &["bin_index", "count"];
pub const TRAJECTORY_TRUTH_HEADER: &[&str] = &["bin_index", "count", "true_state"];
pub const FILTER_HEADER: &[&str] = &["bin_index", "p_bright_filtered", "p_bright_smoothed"];
pub const LEVELS_HEADER: &[&str] = &["index", "energy_MHz", "label_ms", "label_mI", "overlap"];
pub const SPECTRUM_HEADER: &[&str] = &["f_kHz", "contrast"];
pub const SIGNAL_HEADER: &[&str] = &["t_s", "signal"];
pub const PEAKS_HEADER: &[&str] = &["f_kHz"];

/// Writes a table of pre-formatted cells.
pub fn write_table<W: Write, I>(out: W, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Parsed table rows with their 1-based line numbers.
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(usize, csv::StringRecord)>,
}

/// Reads a table whose header must equal one of `headers`.
pub fn read_table<R: Read>(input: R, headers: &[&[&str]]) -> Result<Table> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if !headers.iter().any(|h| h.iter().eq(header.iter())) {
        let expected: Vec<String> = headers.iter().map(|h| h.join(",")).collect();
        return Err(Error::Parse {
            line: 1,
            message: format!("header `{}` does not match `{}`", header.join(","), expected.join("` or `")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec));
    }
    Ok(Table { header, rows })
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize, what: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column `{what}`"),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("`{raw}` is not a valid {what}"),
    })
}

fn count(rec: &csv::StringRecord, i: usize, line: usize) -> Result<u64> {
    field::<u64>(rec, i, line, "non-negative integer count")
}

fn open(path: &Path) -> Result<File> {
    Ok(File::open(path)?)
}

pub fn write_histogram<W: Write>(out: W, h: &Histogram) -> Result<()> {
    write_table(
        out,
        HISTOGRAM_HEADER,
        h.counts.iter().enumerate().map(|(n, c)| vec![n.to_string(), c.to_string()]),
    )
}

pub fn read_histogram<R: Read>(input: R) -> Result<Histogram> {
    let t = read_table(input, &[HISTOGRAM_HEADER])?;
    let mut counts: Vec<Option<u64>> = Vec::new();
    for (line, rec) in &t.rows {
        let n = field::<usize>(rec, 0, *line, "non-negative integer n")?;
        let c = count(rec, 1, *line)?;
        if n >= counts.len() {
            counts.resize(n + 1, None);
        }
        if counts[n].replace(c).is_some() {
            return Err(Error::Parse {
                line: *line,
                message: format!("duplicate n = {n}"),
            });
        }
    }
    Ok(Histogram::from_counts(counts.into_iter().map(|c| c.unwrap_or(0)).collect()))
}

pub fn save_histogram(path: &Path, h: &Histogram) -> Result<()> {
    write_histogram(create(path)?, h)
}

pub fn ingest_histogram(path: &Path) -> Result<Histogram> {
    read_histogram(open(path)?)
}

pub fn write_diff_histogram<W: Write>(out: W, h: &DiffHistogram) -> Result<()> {
    write_table(out, DIFF_HISTOGRAM_HEADER, h.iter().map(|(k, c)| vec![k.to_string(), c.to_string()]))
}

pub fn read_diff_histogram<R: Read>(input: R) -> Result<DiffHistogram> {
    let t = read_table(input, &[DIFF_HISTOGRAM_HEADER])?;
    let mut h = DiffHistogram::default();
    let mut seen = std::collections::HashSet::new();
    for (line, rec) in &t.rows {
        let k = field::<i64>(rec, 0, *line, "integer k")?;
        let c = count(rec, 1, *line)?;
        if !seen.insert(k) {
            return Err(Error::Parse {
                line: *line,
                message: format!("duplicate k = {k}"),
            });
        }
        h.add(k, c);
    }
    Ok(h)
}

pub fn write_diff_pmf<W: Write>(out: W, pmf: &DiffPmf) -> Result<()> {
    write_table(
        out,
        DIFF_PMF_HEADER,
        pmf.support().map(|k| vec![k.to_string(), pmf.prob(k).to_string()]),
    )
}

pub fn write_fidelity_points<W: Write>(out: W, points: &[FidelityPoint]) -> Result<()> {
    write_table(
        out,
        FIDELITY_HEADER,
        points.iter().map(|p| {
            vec![
                p.repetitions.to_string(),
                p.n_dark_max.to_string(),
                p.n_bright_min.to_string(),
                p.f_dark.to_string(),
                p.f_bright.to_string(),
                p.f_avg.to_string(),
                p.eta.to_string(),
            ]
        }),
    )
}

pub fn read_fidelity_points<R: Read>(input: R) -> Result<Vec<FidelityPoint>> {
    let t = read_table(input, &[FIDELITY_HEADER])?;
    t.rows
        .iter()
        .map(|(line, rec)| {
            let l = *line;
            Ok(FidelityPoint {
                repetitions: field(rec, 0, l, "N")?,
                n_dark_max: field(rec, 1, l, "n_dark_max")?,
                n_bright_min: field(rec, 2, l, "n_bright_min")?,
                f_dark: field(rec, 3, l, "F_dark")?,
                f_bright: field(rec, 4, l, "F_bright")?,
                f_avg: field(rec, 5, l, "F_avg")?,
                eta: field(rec, 6, l, "eta")?,
            })
        })
        .collect()
}

pub fn write_alt_fidelity_points<W: Write>(out: W, points: &[AltFidelityPoint]) -> Result<()> {
    write_table(
        out,
        ALT_FIDELITY_HEADER,
        points.iter().map(|p| {
            vec![
                p.n_pairs.to_string(),
                p.k_down_max.to_string(),
                p.k_up_min.to_string(),
                p.f_down.to_string(),
                p.f_up.to_string(),
                p.f_avg.to_string(),
                p.eta.to_string(),
            ]
        }),
    )
}

pub fn write_trajectory<W: Write>(out: W, t: &Trajectory) -> Result<()> {
    match &t.true_states {
        Some(states) => write_table(
            out,
            TRAJECTORY_TRUTH_HEADER,
            t.counts
                .iter()
                .zip(states)
                .enumerate()
                .map(|(i, (c, s))| vec![i.to_string(), c.to_string(), s.to_string()]),
        ),
        None => write_table(
            out,
            TRAJECTORY_HEADER,
            t.counts.iter().enumerate().map(|(i, c)| vec![i.to_string(), c.to_string()]),
        ),
    }
}

/// Reads a binned count record. Bin indices must run `0, 1, 2, …`.
pub fn read_trajectory<R: Read>(input: R, bin_repetitions: usize, t_rep_s: f64) -> Result<Trajectory> {
    let t = read_table(input, &[TRAJECTORY_HEADER, TRAJECTORY_TRUTH_HEADER])?;
    let with_truth = t.header.len() == 3;
    let mut counts = Vec::with_capacity(t.rows.len());
    let mut states = Vec::new();
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        let idx = field::<usize>(rec, 0, *line, "bin index")?;
        if idx != i {
            return Err(Error::Parse {
                line: *line,
                message: format!("bin index {idx} out of sequence (expected {i})"),
            });
        }
        counts.push(count(rec, 1, *line)?);
        if with_truth {
            states.push(field::<SpinState>(rec, 2, *line, "state (bright|dark)")?);
        }
    }
    let mut traj = Trajectory::from_counts(counts, bin_repetitions, t_rep_s)?;
    if with_truth {
        traj.true_states = Some(states);
    }
    Ok(traj)
}

pub fn ingest_trajectory(path: &Path, bin_repetitions: usize, t_rep_s: f64) -> Result<Trajectory> {
    read_trajectory(std::io::BufReader::new(open(path)?), bin_repetitions, t_rep_s)
}

pub fn write_filter<W: Write>(out: W, fr: &FilterResult) -> Result<()> {
    let smoothed = fr.smoothed.as_ref();
    write_table(
        out,
        FILTER_HEADER,
        fr.filtered.iter().enumerate().map(|(i, f)| {
            let s = smoothed.map_or_else(String::new, |s| s[i].to_string());
            vec![i.to_string(), f.to_string(), s]
        }),
    )
}

pub fn read_filter<R: Read>(input: R) -> Result<FilterResult> {
    let t = read_table(input, &[FILTER_HEADER])?;
    let mut filtered = Vec::new();
    let mut smoothed = Vec::new();
    for (i, (line, rec)) in t.rows.iter().enumerate() {
        if field::<usize>(rec, 0, *line, "bin index")? != i {
            return Err(Error::Parse {
                line: *line,
                message: "bin index out of sequence".into(),
            });
        }
        filtered.push(field::<f64>(rec, 1, *line, "probability")?);
        match rec.get(2) {
            Some("") | None => {}
            Some(_) => smoothed.push(field::<f64>(rec, 2, *line, "probability")?),
        }
    }
    let smoothed = match smoothed.len() {
        0 => None,
        n if n == filtered.len() => Some(smoothed),
        _ => {
            return Err(Error::Parse {
                line: 0,
                message: "smoothed column is only partly filled".into(),
            })
        }
    };
    Ok(FilterResult {
        filtered,
        smoothed,
        log_evidence: f64::NAN,
    })
}

pub fn write_levels<W: Write>(out: W, levels: &EnergyLevels) -> Result<()> {
    write_table(
        out,
        LEVELS_HEADER,
        levels.levels.iter().enumerate().map(|(i, l)| {
            vec![
                i.to_string(),
                l.energy_mhz.to_string(),
                l.electron.to_string(),
                l.nuclear.to_string(),
                l.overlap.to_string(),
            ]
        }),
    )
}

pub fn write_xy<W: Write>(out: W, header: &[&str], x: &[f64], y: &[f64]) -> Result<()> {
    write_table(out, header, x.iter().zip(y).map(|(a, b)| vec![a.to_string(), b.to_string()]))
}

pub fn read_xy<R: Read>(input: R, header: &[&str]) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = read_table(input, &[header])?;
    let mut x = Vec::with_capacity(t.rows.len());
    let mut y = Vec::with_capacity(t.rows.len());
    for (line, rec) in &t.rows {
        x.push(field::<f64>(rec, 0, *line, header[0])?);
        y.push(field::<f64>(rec, 1, *line, header[1])?);
    }
    Ok((x, y))
}

pub fn read_peaks<R: Read>(input: R) -> Result<Vec<f64>> {
    let t = read_table(input, &[PEAKS_HEADER])?;
    t.rows.iter().map(|(line, rec)| field::<f64>(rec, 0, *line, "frequency")).collect()
}

pub fn write_peaks<W: Write>(out: W, peaks: &[f64]) -> Result<()> {
    write_table(out, PEAKS_HEADER, peaks.iter().map(|f| vec![f.to_string()]))
}
