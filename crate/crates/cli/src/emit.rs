use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::bundle::{Profile, ResultBundle};
use crate::config::to_toml;
use crate::plot;

/// Seventeen significant digits.
pub fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes the tables, `summary.json`, `config.toml` and the plots into `dir`,
/// returning the written paths.
pub fn emit(bundle: &ResultBundle, dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    let path = dir.join("config.toml");
    fs::write(&path, to_toml(&bundle.config))?;
    written.push(path);

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(bundle).map_err(io::Error::other)?;
    fs::write(&path, json + "\n")?;
    written.push(path);

    if !bundle.sweep.is_empty() || !bundle.failed_epsilons.is_empty() {
        let path = dir.join("sweep.csv");
        write_sweep(bundle, &path)?;
        written.push(path);
    }
    if !bundle.runs.is_empty() {
        let path = dir.join("runs.csv");
        write_runs(bundle, &path)?;
        written.push(path);
    }
    let path = dir.join("assertions.csv");
    write_assertions(bundle, &path)?;
    written.push(path);
    for p in &bundle.profiles {
        let path = dir.join(format!("profile_{}.csv", p.name));
        write_profile(p, &path)?;
        written.push(path);
    }
    for f in &bundle.figures {
        let path = dir.join(&f.file);
        plot::render(f, &path).map_err(io::Error::other)?;
        written.push(path);
    }
    Ok(written)
}

fn writer(path: &Path) -> io::Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(io::Error::other)
}

fn write_sweep(bundle: &ResultBundle, path: &Path) -> io::Result<()> {
    let dim = bundle.config.model.dim;
    let radii = &bundle.config.sweep.radii;
    let mut header: Vec<String> = vec!["epsilon".into(), "lambda".into(), "lambda_tilde".into()];
    header.extend((1..=dim).map(|k| format!("x_eps_{k}")));
    header.extend((1..=radii.len()).map(|k| format!("mass_fraction_R{k}")));
    for h in ["sup_m_bar", "energy_kinetic", "energy_potential", "energy_coupling", "duality_gap", "optimality_residual", "status"] {
        header.push(h.into());
    }
    let mut w = writer(path)?;
    w.write_record(&header)?;
    for &eps in &bundle.config.epsilons {
        let mut row = vec![num(eps)];
        match bundle.sweep.iter().find(|r| r.epsilon == eps) {
            Some(r) => {
                row.push(num(r.lambda));
                row.push(num(r.lambda_tilde));
                row.extend(r.x_eps.iter().take(dim).map(|x| num(*x)));
                row.extend(r.mass_fraction.iter().map(|(_, f)| num(*f)));
                for x in [r.sup_m_bar, r.energy.kinetic, r.energy.potential, r.energy.coupling, r.duality_gap, r.optimality_residual] {
                    row.push(num(x));
                }
                row.push("ok".into());
            }
            None => {
                row.extend(std::iter::repeat(num(f64::NAN)).take(header.len() - 2));
                row.push("failed".into());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()
}

fn write_runs(bundle: &ResultBundle, path: &Path) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "label",
        "epsilon",
        "mass",
        "lambda",
        "energy_kinetic",
        "energy_potential",
        "energy_coupling",
        "energy_total",
        "duality_gap",
        "duality_gap_relative",
        "optimality_residual",
        "fixedpoint_iterations",
        "sup_m",
    ])?;
    for r in &bundle.runs {
        let mut row = vec![r.label.clone()];
        for x in [
            r.epsilon,
            r.mass,
            r.lambda,
            r.energy.kinetic,
            r.energy.potential,
            r.energy.coupling,
            r.energy.total,
            r.duality_gap,
            r.duality_gap_relative,
            r.optimality_residual,
        ] {
            row.push(num(x));
        }
        row.push(r.fixedpoint_iterations.to_string());
        row.push(num(r.sup_m));
        w.write_record(&row)?;
    }
    w.flush()
}

fn write_assertions(bundle: &ResultBundle, path: &Path) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(["name", "passed", "value", "bound", "detail"])?;
    for a in &bundle.assertions {
        w.write_record([a.name.clone(), a.passed.to_string(), num(a.value), num(a.bound), a.detail.clone()])?;
    }
    w.flush()
}

fn write_profile(p: &Profile, path: &Path) -> io::Result<()> {
    let mut w = writer(path)?;
    w.write_record(p.columns.iter().map(|(n, _)| n.as_str()))?;
    let rows = p.columns.first().map_or(0, |c| c.1.len());
    for i in 0..rows {
        w.write_record(p.columns.iter().map(|(_, c)| num(c[i])))?;
    }
    w.flush()
}
