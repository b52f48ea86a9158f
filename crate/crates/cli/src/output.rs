//! CSV and TOML artifacts. Every file starts with the resolved run config,
//! as `#` comment lines in CSV files and as a `[config]` table in TOML files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use stgrape_core::model::{mhz_to_rad_per_ns, rad_per_ns_to_mhz};
use stgrape_core::ControlGrid;

use crate::config::RunConfig;
use crate::error::CliError;

pub fn write_csv(path: &Path, config: &RunConfig, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(path)?);
    for line in config.to_toml().lines() {
        writeln!(f, "# {line}")?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(f);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    #[serde(flatten)]
    body: &'a T,
    config: &'a RunConfig,
}

pub fn write_toml<T: Serialize>(path: &Path, config: &RunConfig, body: &T) -> Result<(), CliError> {
    let text = toml::to_string(&WithConfig { body, config }).map_err(|e| CliError::Other(e.to_string()))?;
    let header = "# frequencies in MHz (f = omega / 2 pi), times in ns\n";
    std::fs::write(path, format!("{header}{text}"))?;
    Ok(())
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

/// Pulse table: one row per step, start time in ns and amplitudes in MHz.
pub fn write_pulse(path: &Path, config: &RunConfig, grid: &ControlGrid) -> Result<(), CliError> {
    let mut header = vec!["t_ns".to_string()];
    header.extend((1..=grid.channels()).map(|c| format!("u_{c}")));
    let rows: Vec<Vec<String>> = (0..grid.steps())
        .map(|k| {
            let mut r = vec![num(k as f64 * grid.dt())];
            r.extend(grid.step(k).iter().map(|&u| num(rad_per_ns_to_mhz(u))));
            r
        })
        .collect();
    write_csv(path, config, &header, &rows)
}

/// Reads a pulse table into `template`, checking it matches the grid shape.
pub fn read_pulse(path: &Path, template: &ControlGrid) -> Result<ControlGrid, CliError> {
    let bad = |m: String| CliError::Config(format!("pulse file {}: {m}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let nc = template.channels();
    if header.len() != nc + 1 || &header[0] != "t_ns" {
        return Err(bad(format!("expected header t_ns,u_1..u_{nc}, found {} columns", header.len())));
    }
    let mut amps = Vec::with_capacity(template.steps() * nc);
    let mut steps = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        for v in rec.iter().skip(1) {
            let x: f64 = v.trim().parse().map_err(|_| bad(format!("not a number: {v:?}")))?;
            amps.push(mhz_to_rad_per_ns(x));
        }
        steps += 1;
    }
    if steps != template.steps() {
        return Err(bad(format!("expected {} steps, found {steps}", template.steps())));
    }
    template.clone().with_amplitudes(amps).map_err(|e| bad(e.to_string()))
}
