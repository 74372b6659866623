//! End-to-end pipeline steps shared by the subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use oceanflow::basis::{build, full_rank, BasisModel, Variant};
use oceanflow::ensemble::{generate_synthetic_ensemble, nearest_latent, LatentFitter, LatentSet};
use oceanflow::estimator::{init_kf, reconstruct_grid, span_bound, EstimatorState};
use oceanflow::flowgrid::depth_average;
use oceanflow::flowgrid::flowpack::{ensemble_to_flowpack, field_to_flowpack};
use oceanflow::glider::{evaluate_planning_suite, FlowField, SuiteRow};
use oceanflow::metrics::ErrorReport;
use oceanflow::sensing::{generate_campaign, grid_point_campaign, MeasurementSet};
use oceanflow::{EnsembleForecast, GriddedField, KernelConfig};
use nalgebra::Matrix2;
use serde::Serialize;

use crate::config::{KernelSpec, RunConfig};
use crate::{CliError, CliResult};

/// Synthetic ensemble and its out-of-ensemble truth.
pub fn generate(cfg: &RunConfig) -> CliResult<(EnsembleForecast, GriddedField)> {
    let grid = cfg.grid.build()?;
    let synth = oceanflow::ensemble::SynthConfig { outlier_member: true, ..cfg.synth };
    let s = generate_synthetic_ensemble(&grid, &synth)?;
    let truth = s.truth.ok_or_else(|| CliError::schema("synthetic truth missing"))?;
    Ok((s.ensemble, truth))
}

pub fn fit_latents(ensemble: &EnsembleForecast, kernel: &KernelSpec, ridge: f64) -> CliResult<LatentSet> {
    let cfg = kernel.resolve(ensemble)?;
    let fitter = LatentFitter::new(*ensemble.grid(), cfg, ridge)?;
    let fits = fitter.fit_ensemble(ensemble)?;
    Ok(LatentSet::from_fits(*ensemble.grid(), cfg, &fits)?)
}

pub fn build_model(latents: &LatentSet, variant: Variant, rank: Option<usize>) -> CliResult<BasisModel> {
    let r = rank.unwrap_or_else(|| full_rank(variant, &latents.grid, latents.n_members()));
    Ok(build(variant, &latents.b, &latents.grid, &latents.kernel, r)?)
}

/// `R = r_std² I`.
pub fn noise_matrix(r_std: f64) -> Matrix2<f64> {
    Matrix2::identity() * (r_std * r_std)
}

/// Filter initialised from the ensemble and run over every measurement.
pub fn run_estimate(model: &BasisModel, measurements: &MeasurementSet, r_std: f64) -> CliResult<EstimatorState> {
    let mut state = init_kf(model, noise_matrix(r_std))?;
    state.batch_update(model, measurements)?;
    Ok(state)
}

/// Everything the experiments share: ensemble, truth and fitted latents.
pub struct Prepared {
    pub ensemble: EnsembleForecast,
    pub truth: GriddedField,
    pub latents: LatentSet,
}

impl Prepared {
    pub fn new(cfg: &RunConfig) -> CliResult<Self> {
        let (ensemble, truth) = generate(cfg)?;
        let latents = fit_latents(&ensemble, &cfg.kernel, cfg.ridge)?;
        Ok(Prepared { ensemble, truth, latents })
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.latents.kernel
    }

    pub fn campaign(&self, cfg: &RunConfig) -> CliResult<MeasurementSet> {
        let adcp = cfg.campaign.adcp(cfg.noise.noise_std);
        Ok(generate_campaign(&self.truth, cfg.campaign.n_sites, &adcp, cfg.campaign.seed)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorRow {
    pub method: String,
    pub modes: Option<usize>,
    pub h_elements: Option<usize>,
    pub relative_error: f64,
    pub rmse: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GliderRow {
    pub method: String,
    pub closest_approach: f64,
    pub theta_deg: f64,
    pub phi_deg: f64,
    pub out_of_bounds: bool,
}

fn opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

pub fn error_table_csv(rows: &[ErrorRow]) -> String {
    let mut s = String::from("method,modes,h_elements,rel_error_pct,rmse_cm_s,bound_cm_s\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            opt(&r.modes),
            opt(&r.h_elements),
            r.relative_error,
            r.rmse,
            opt(&r.bound)
        );
    }
    s
}

pub fn glider_table_csv(rows: &[GliderRow]) -> String {
    let mut s = String::from("method,closest_approach_m,theta_deg,phi_deg,out_of_bounds\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.method, r.closest_approach, r.theta_deg, r.phi_deg, r.out_of_bounds
        );
    }
    s
}

fn print_error_table(title: &str, rows: &[ErrorRow]) {
    println!("{title}");
    println!("{:<16} {:>6} {:>10} {:>10} {:>10} {:>10}", "method", "modes", "H elems", "rel %", "rmse", "bound");
    for r in rows {
        println!(
            "{:<16} {:>6} {:>10} {:>10.3} {:>10.4} {:>10}",
            r.method,
            opt(&r.modes),
            opt(&r.h_elements),
            r.relative_error,
            r.rmse,
            r.bound.map(|b| format!("{b:.4}")).unwrap_or_default()
        );
    }
    println!();
}

/// Ranks `S, S/2, S/4, S/8` of the layered model, deduplicated.
pub fn layered_ranks(s: usize) -> Vec<usize> {
    let mut out: Vec<usize> = [1, 2, 4, 8].iter().map(|d| (s / d).max(1)).collect();
    out.dedup();
    out
}

fn error_row(
    method: String,
    model: Option<&BasisModel>,
    estimate: &GriddedField,
    truth: &GriddedField,
    bound: Option<f64>,
) -> CliResult<ErrorRow> {
    let rep = ErrorReport::compute(estimate, truth)?;
    Ok(ErrorRow {
        method,
        modes: model.map(|m| m.rank()),
        h_elements: model.map(|m| m.mode_elements()),
        relative_error: rep.relative_error,
        rmse: rep.rmse,
        bound,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

const GNUPLOT: &str = "\
# gnuplot -p plot.gp
set datafile separator ','
set key autotitle columnhead
set multiplot layout 1,2
set title 'Singular value spectrum'
set logscale y
plot 'spectrum_layered.csv' using 1:2 with linespoints, \\
     'spectrum_naive3d.csv' using 1:2 with linespoints
unset logscale y
set title 'Glider paths (depth down)'
set view 60,30
set yrange [*:*] reverse
splot for [f in system('ls trajectory_*.csv')] f using 2:3:(-$4) with lines title f
unset multiplot
";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub ideal: Vec<ErrorRow>,
    pub noisy: Vec<ErrorRow>,
    pub glider: Vec<GliderRow>,
    pub nearest_member_ideal: usize,
    pub nearest_member_noisy: usize,
}

/// Regenerates every artifact and table under `cfg.output_dir`.
pub fn reproduce(cfg: &RunConfig) -> CliResult<Report> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
    let p = Prepared::new(cfg)?;
    let truth = &p.truth;
    ensemble_to_flowpack(&p.ensemble).save(out.join("ensemble.flowpack"))?;
    field_to_flowpack(truth).save(out.join("truth.flowpack"))?;
    p.latents.to_flowpack().save(out.join("latents.flowpack"))?;

    let grid_meas = grid_point_campaign(truth);
    let campaign = p.campaign(cfg)?;
    grid_meas.to_flowpack().save(out.join("measurements_grid.flowpack"))?;
    campaign.to_flowpack().save(out.join("measurements_campaign.flowpack"))?;

    let e = p.latents.n_members();
    let naive = build_model(&p.latents, Variant::Naive3D, None)?;
    let s = full_rank(Variant::Layered25D, &p.latents.grid, e);
    let mut models = vec![("naive3d".to_string(), naive)];
    for r in layered_ranks(s) {
        models.push((format!("layered_r{r}"), build_model(&p.latents, Variant::Layered25D, Some(r))?));
    }
    write(&out.join("spectrum_layered.csv"), models[1].1.spectrum().to_csv())?;
    write(&out.join("spectrum_naive3d.csv"), models[0].1.spectrum().to_csv())?;
    models[0].1.to_flowpack().save(out.join("basis_naive3d.flowpack"))?;
    models[1].1.to_flowpack().save(out.join("basis_layered.flowpack"))?;

    let mut ideal = Vec::new();
    let mut noisy = Vec::new();
    let mut noisy_states = Vec::new();
    for (name, model) in &models {
        let bound = span_bound(model, truth)?.rmse;
        let st = run_estimate(model, &grid_meas, cfg.noise.r_std_ideal)?;
        let est = reconstruct_grid(model, &st.w)?;
        ideal.push(error_row(name.clone(), Some(model), &est, truth, Some(bound))?);
        let st = run_estimate(model, &campaign, cfg.noise.r_std_noisy)?;
        let est = reconstruct_grid(model, &st.w)?;
        noisy.push(error_row(name.clone(), Some(model), &est, truth, Some(bound))?);
        noisy_states.push(st);
    }
    noisy_states[0].to_flowpack().save(out.join("state_naive3d.flowpack"))?;
    noisy_states[1].to_flowpack().save(out.join("state_layered.flowpack"))?;
    field_to_flowpack(&reconstruct_grid(&models[1].1, &noisy_states[1].w)?).save(out.join("estimate_layered.flowpack"))?;

    let nearest_ideal = nearest_latent(&p.latents, &grid_meas)?;
    let member = &p.ensemble.members()[nearest_ideal];
    ideal.push(error_row(format!("nearest_e{nearest_ideal}"), None, member, truth, None)?);
    let nearest_noisy = nearest_latent(&p.latents, &campaign)?;

    print_error_table("ideal conditions (grid-point measurements)", &ideal);
    print_error_table("noisy campaign", &noisy);
    write(&out.join("table_ideal.csv"), error_table_csv(&ideal))?;
    write(&out.join("table_noisy.csv"), error_table_csv(&noisy))?;

    let layered_est = oceanflow::estimator::estimate_field(&models[1].1, &noisy_states[1].w)?;
    let naive_est = oceanflow::estimator::estimate_field(&models[0].1, &noisy_states[0].w)?;
    let averaged = depth_average(truth);
    let nearest = &p.ensemble.members()[nearest_noisy];
    let estimates: [(&str, &dyn FlowField); 5] = [
        ("true", truth),
        ("nearest_ensemble", nearest),
        ("depth_averaged_true", &averaged),
        ("naive", &naive_est),
        ("layered", &layered_est),
    ];
    let rows = evaluate_planning_suite(truth, &estimates, &cfg.mission)?;
    let glider = glider_rows(&rows);
    for row in &rows {
        let mut csv = Vec::new();
        row.trajectory.write_csv(&mut csv)?;
        write(&out.join(format!("trajectory_{}.csv", row.name)), csv)?;
        let mut vtk = Vec::new();
        row.trajectory.write_vtk(&mut vtk, &row.name)?;
        write(&out.join(format!("trajectory_{}.vtk", row.name)), vtk)?;
    }
    print_glider_table(&glider);
    write(&out.join("table_glider.csv"), glider_table_csv(&glider))?;
    write(&out.join("plot.gp"), GNUPLOT)?;

    let report = Report {
        ideal,
        noisy,
        glider,
        nearest_member_ideal: nearest_ideal,
        nearest_member_noisy: nearest_noisy,
    };
    write(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

pub fn glider_rows(rows: &[SuiteRow]) -> Vec<GliderRow> {
    rows.iter()
        .map(|r| GliderRow {
            method: r.name.clone(),
            closest_approach: r.closest_approach(),
            theta_deg: r.plan.theta_deg,
            phi_deg: r.plan.phi_deg,
            out_of_bounds: r.trajectory.out_of_bounds(),
        })
        .collect()
}

pub fn print_glider_table(rows: &[GliderRow]) {
    println!("glider planning (plan on estimate, fly in truth)");
    println!("{:<22} {:>14} {:>9} {:>8}", "method", "closest (m)", "theta", "phi");
    for r in rows {
        println!(
            "{:<22} {:>14.1} {:>9.3} {:>8.3}{}",
            r.method,
            r.closest_approach,
            r.theta_deg,
            r.phi_deg,
            if r.out_of_bounds { "  (left domain)" } else { "" }
        );
    }
    println!();
}
