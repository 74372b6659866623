//! Plot-ready conversions of flowpack artifacts.

use std::io::Write;

use oceanflow::basis::BasisModel;
use oceanflow::ensemble::LatentSet;
use oceanflow::estimator::EstimatorState;
use oceanflow::flowgrid::flowpack::{decode_value, Flowpack, FlowpackValue, Kind};
use oceanflow::sensing::MeasurementSet;
use oceanflow::{Grid3D, GriddedField};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Vtk,
}

impl std::str::FromStr for Format {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "vtk" => Ok(Format::Vtk),
            other => Err(CliError::usage(format!("unknown export format '{other}'"))),
        }
    }
}

fn vtk_grid_header<W: Write>(out: &mut W, grid: &Grid3D, title: &str) -> CliResult<()> {
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{title}")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET STRUCTURED_GRID")?;
    writeln!(out, "DIMENSIONS {} {} {}", grid.nx, grid.ny, grid.nz)?;
    writeln!(out, "POINTS {} double", grid.len())?;
    for [x, y, z] in grid.points() {
        writeln!(out, "{x} {y} {}", 0.0 - z)?;
    }
    writeln!(out, "POINT_DATA {}", grid.len())?;
    Ok(())
}

fn vtk_vectors<W: Write>(out: &mut W, name: &str, field: &GriddedField) -> CliResult<()> {
    writeln!(out, "VECTORS {name} double")?;
    for [u, v] in field.velocities() {
        writeln!(out, "{u} {v} 0")?;
    }
    Ok(())
}

/// Field as a structured grid with one velocity vector per point; depth is
/// written as negative elevation.
pub fn field_vtk<W: Write>(mut out: W, field: &GriddedField) -> CliResult<()> {
    vtk_grid_header(&mut out, field.grid(), "oceanflow field")?;
    vtk_vectors(&mut out, "velocity", field)
}

fn measurements_vtk<W: Write>(mut out: W, set: &MeasurementSet) -> CliResult<()> {
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "oceanflow measurements")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET POLYDATA")?;
    writeln!(out, "POINTS {} double", set.len())?;
    for m in set.iter() {
        let [x, y, z] = m.position;
        writeln!(out, "{x} {y} {}", 0.0 - z)?;
    }
    writeln!(out, "VERTICES {} {}", set.len(), 2 * set.len())?;
    for k in 0..set.len() {
        writeln!(out, "1 {k}")?;
    }
    writeln!(out, "POINT_DATA {}", set.len())?;
    writeln!(out, "VECTORS velocity double")?;
    for m in set.iter() {
        writeln!(out, "{} {} 0", m.velocity[0], m.velocity[1])?;
    }
    Ok(())
}

fn unsupported(kind: &str, format: Format) -> CliError {
    CliError::schema(format!("cannot export a {kind} artifact as {format:?}"))
}

/// Writes `pack` to `out` in the requested format.
pub fn export<W: Write>(pack: &Flowpack, format: Format, mut out: W) -> CliResult<()> {
    match pack.header.kind {
        Kind::Field | Kind::Ensemble => match (decode_value(pack)?, format) {
            (FlowpackValue::Field(f), Format::Csv) => f.write_csv(out)?,
            (FlowpackValue::Field(f), Format::Vtk) => field_vtk(out, &f)?,
            (FlowpackValue::Ensemble(e), Format::Csv) => e.write_csv(out)?,
            (FlowpackValue::Ensemble(e), Format::Vtk) => {
                vtk_grid_header(&mut out, e.grid(), "oceanflow ensemble")?;
                for (i, m) in e.members().iter().enumerate() {
                    vtk_vectors(&mut out, &format!("member_{i}"), m)?;
                }
            }
        },
        Kind::Measurements => {
            let set = MeasurementSet::from_flowpack(pack)?;
            match format {
                Format::Csv => set.write_csv(out)?,
                Format::Vtk => measurements_vtk(out, &set)?,
            }
        }
        Kind::Basis => {
            if format != Format::Csv {
                return Err(unsupported("basis", format));
            }
            let model = BasisModel::from_flowpack(pack)?;
            out.write_all(model.spectrum().to_csv().as_bytes())?;
        }
        Kind::Latents => {
            if format != Format::Csv {
                return Err(unsupported("latents", format));
            }
            let set = LatentSet::from_flowpack(pack)?;
            writeln!(out, "member,residual")?;
            for (i, r) in set.residuals.iter().enumerate() {
                writeln!(out, "{i},{r}")?;
            }
        }
        Kind::State => {
            if format != Format::Csv {
                return Err(unsupported("state", format));
            }
            let st = EstimatorState::from_flowpack(pack)?;
            writeln!(out, "index,weight,variance")?;
            for i in 0..st.n_weights() {
                writeln!(out, "{i},{},{}", st.w[i], st.p[(i, i)])?;
            }
        }
    }
    Ok(())
}
