//! CSV artifacts of a run: `curves.csv`, `posterior.csv`, `lrs.csv` and
//! `config.echo`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::averaging::PosteriorRow;
use crate::error::{Error, Result};
use crate::features::{read_lrs_csv, write_lr_rows};

use super::run::{CurveRow, RunLog};

pub const CURVES_HEADER: [&str; 5] = ["run_id", "epoch", "split", "loss", "top1"];

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Floats in shortest round-trip form; infinities as `inf`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Csv(format!("bad number `{s}`")))
}

pub fn write_curves<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVES_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.run_id.clone(),
            r.epoch.to_string(),
            r.split.as_str().to_string(),
            fmt_f64(r.loss),
            fmt_f64(r.top1),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves<R: Read>(input: R) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_reader(input);
    if r.headers().map_err(csv_err)? != CURVES_HEADER.as_slice() {
        return Err(Error::Csv("unexpected curves.csv header".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(CurveRow {
                run_id: rec[0].to_string(),
                epoch: rec[1]
                    .parse()
                    .map_err(|_| Error::Csv(format!("bad epoch `{}`", &rec[1])))?,
                split: rec[2].parse()?,
                loss: parse_f64(&rec[3])?,
                top1: parse_f64(&rec[4])?,
            })
        })
        .collect()
}

/// `step,t,a_1..a_n`; `n` is taken from the first row, or is 0 when empty.
pub fn write_posterior<W: Write>(rows: &[PosteriorRow], n_cl: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=n_cl).map(|j| format!("a_{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        if r.weights.len() != n_cl {
            return Err(Error::Csv(format!(
                "posterior row has {} weights, header {n_cl}",
                r.weights.len()
            )));
        }
        let mut rec = vec![r.step.to_string(), r.t.to_string()];
        rec.extend(r.weights.iter().map(|&a| fmt_f64(a)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_posterior<R: Read>(input: R) -> Result<Vec<PosteriorRow>> {
    let mut r = csv::Reader::from_reader(input);
    let h = r.headers().map_err(csv_err)?.clone();
    if h.len() < 2 || &h[0] != "step" || &h[1] != "t" {
        return Err(Error::Csv("unexpected posterior.csv header".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            Ok(PosteriorRow {
                step: rec[0]
                    .parse()
                    .map_err(|_| Error::Csv(format!("bad step `{}`", &rec[0])))?,
                t: rec[1]
                    .parse()
                    .map_err(|_| Error::Csv(format!("bad t `{}`", &rec[1])))?,
                weights: rec.iter().skip(2).map(parse_f64).collect::<Result<_>>()?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunFiles {
    pub curves: PathBuf,
    pub posterior: PathBuf,
    pub lrs: PathBuf,
    pub config: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            curves: dir.join("curves.csv"),
            posterior: dir.join("posterior.csv"),
            lrs: dir.join("lrs.csv"),
            config: dir.join("config.echo"),
        }
    }
}

/// Write the four run artifacts into `out_dir`, creating it if needed.
pub fn emit_csv(log: &RunLog, out_dir: &Path) -> Result<RunFiles> {
    fs::create_dir_all(out_dir)?;
    let files = RunFiles::in_dir(out_dir);
    write_curves(&log.curves, BufWriter::new(File::create(&files.curves)?))?;
    let n_cl = log.posterior.first().map_or(0, |r| r.weights.len());
    write_posterior(
        &log.posterior,
        n_cl,
        BufWriter::new(File::create(&files.posterior)?),
    )?;
    write_lr_rows(&mut BufWriter::new(File::create(&files.lrs)?), &log.lrs)?;
    fs::write(&files.config, &log.config_echo)?;
    Ok(files)
}

/// Curves and posterior rows back from an emitted directory.
pub fn read_run_dir(
    dir: &Path,
) -> Result<(
    Vec<CurveRow>,
    Vec<PosteriorRow>,
    Vec<crate::features::LrRow>,
)> {
    let f = RunFiles::in_dir(dir);
    Ok((
        read_curves(BufReader::new(File::open(&f.curves)?))?,
        read_posterior(BufReader::new(File::open(&f.posterior)?))?,
        read_lrs_csv(BufReader::new(File::open(&f.lrs)?))?,
    ))
}

/// Small table writer for experiment summaries.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
