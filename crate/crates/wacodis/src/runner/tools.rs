//! Built-in processing tools and the adapter contract they implement.
//!
//! Every tool runs behind the same [`ToolAdapter`] interface: inputs arrive
//! as files fetched into an isolated working directory, parameters as small
//! literals, and outputs leave as files. Adapters must be deterministic for
//! identical inputs and parameters and need no network access at run time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

use super::raster::{raster_read, raster_write, Raster};
use super::{InputSlot, OutputSlot, ParameterSpec, ProcessDescription};

pub const LAND_COVER_TOOL_ID: &str = "de.hsbo.wacodis.land_cover_classification";
pub const NDVI_TOOL_ID: &str = "demo.ndvi";
pub const RASTER_MEDIA_TYPE: &str = "application/x-ascii-grid";

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("input grids have mismatching geometry")]
    GeometryMismatch,
    #[error("thresholds must be strictly increasing")]
    BadThresholds,
    #[error("missing input file for slot {0:?}")]
    MissingInputFile(String),
    #[error("tool failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad input raster: {0}")]
    BadRaster(#[from] super::raster::RasterParseError),
}

/// Working context handed to an adapter: fetched input files per slot plus
/// request parameters. The working directory is private to the execution.
pub struct ToolContext {
    pub workdir: PathBuf,
    pub inputs: BTreeMap<String, Vec<PathBuf>>,
    pub parameters: BTreeMap<String, Value>,
}

impl ToolContext {
    pub fn input_file(&self, slot: &str) -> Result<&Path, ToolError> {
        self.inputs
            .get(slot)
            .and_then(|files| files.first())
            .map(PathBuf::as_path)
            .ok_or_else(|| ToolError::MissingInputFile(slot.to_string()))
    }

    pub fn numeric_parameter(&self, name: &str, default: f64) -> Result<f64, ToolError> {
        match self.parameters.get(name) {
            None => Ok(default),
            Some(v) => v
                .as_f64()
                .ok_or_else(|| ToolError::Failed(format!("parameter {name:?} is not a number"))),
        }
    }
}

pub struct ToolOutput {
    pub identifier: String,
    pub path: PathBuf,
    pub media_type: String,
}

/// Common interface that encapsulates any kind of process behind the runner.
pub trait ToolAdapter: Send + Sync {
    fn description(&self) -> ProcessDescription;
    fn run(&self, ctx: &ToolContext) -> Result<Vec<ToolOutput>, ToolError>;
}

// ---------------------------------------------------------------------------
// NDVI
// ---------------------------------------------------------------------------

/// Per cell: `(nir - red) / (nir + red)`; nodata where the denominator is
/// zero or either input cell is nodata.
pub fn tool_ndvi(red: &Raster, nir: &Raster) -> Result<Raster, ToolError> {
    if !red.same_geometry(nir) {
        return Err(ToolError::GeometryMismatch);
    }
    let nodata = red.nodata;
    let values = red
        .values
        .iter()
        .zip(&nir.values)
        .map(|(&r, &n)| {
            if red.is_nodata(r) || nir.is_nodata(n) || n + r == 0.0 {
                nodata
            } else {
                (n - r) / (n + r)
            }
        })
        .collect();
    Ok(Raster {
        values,
        nodata,
        ..*red
    })
}

/// Classifies cells into codes 1 (water), 2 (soil), 3 (grass), 4 (forest)
/// by comparing against strictly increasing thresholds. Nodata propagates.
pub fn tool_land_cover_classification(
    optical: &Raster,
    thresholds: (f64, f64, f64),
) -> Result<Raster, ToolError> {
    let (t_water, t_soil, t_vegetation) = thresholds;
    if !(t_water < t_soil && t_soil < t_vegetation) {
        return Err(ToolError::BadThresholds);
    }
    let values = optical
        .values
        .iter()
        .map(|&v| {
            if optical.is_nodata(v) {
                optical.nodata
            } else if v < t_water {
                1.0
            } else if v < t_soil {
                2.0
            } else if v < t_vegetation {
                3.0
            } else {
                4.0
            }
        })
        .collect();
    Ok(Raster {
        values,
        ..*optical
    })
}

fn read_raster_file(path: &Path) -> Result<Raster, ToolError> {
    Ok(raster_read(&std::fs::read(path)?)?)
}

fn write_raster_output(
    ctx: &ToolContext,
    identifier: &str,
    raster: &Raster,
) -> Result<ToolOutput, ToolError> {
    let path = ctx.workdir.join(format!("{identifier}.asc"));
    std::fs::write(&path, raster_write(raster))?;
    Ok(ToolOutput {
        identifier: identifier.to_string(),
        path,
        media_type: RASTER_MEDIA_TYPE.to_string(),
    })
}

pub struct NdviTool;

impl ToolAdapter for NdviTool {
    fn description(&self) -> ProcessDescription {
        ProcessDescription {
            process_id: NDVI_TOOL_ID.to_string(),
            title: "Normalized difference vegetation index".to_string(),
            input_slots: vec![
                InputSlot::required("red", RASTER_MEDIA_TYPE),
                InputSlot::required("nir", RASTER_MEDIA_TYPE),
            ],
            output_slots: vec![OutputSlot::new("ndvi", RASTER_MEDIA_TYPE)],
            parameters: vec![],
        }
    }

    fn run(&self, ctx: &ToolContext) -> Result<Vec<ToolOutput>, ToolError> {
        let red = read_raster_file(ctx.input_file("red")?)?;
        let nir = read_raster_file(ctx.input_file("nir")?)?;
        let ndvi = tool_ndvi(&red, &nir)?;
        Ok(vec![write_raster_output(ctx, "ndvi", &ndvi)?])
    }
}

pub struct LandCoverClassificationTool;

impl ToolAdapter for LandCoverClassificationTool {
    fn description(&self) -> ProcessDescription {
        ProcessDescription {
            process_id: LAND_COVER_TOOL_ID.to_string(),
            title: "Threshold land cover classification".to_string(),
            input_slots: vec![InputSlot::required("opticalImage", RASTER_MEDIA_TYPE)],
            output_slots: vec![OutputSlot::new("classification", RASTER_MEDIA_TYPE)],
            parameters: vec![
                ParameterSpec::number("t_water", 0.0),
                ParameterSpec::number("t_soil", 0.2),
                ParameterSpec::number("t_vegetation", 0.5),
            ],
        }
    }

    fn run(&self, ctx: &ToolContext) -> Result<Vec<ToolOutput>, ToolError> {
        let optical = read_raster_file(ctx.input_file("opticalImage")?)?;
        let thresholds = (
            ctx.numeric_parameter("t_water", 0.0)?,
            ctx.numeric_parameter("t_soil", 0.2)?,
            ctx.numeric_parameter("t_vegetation", 0.5)?,
        );
        let classes = tool_land_cover_classification(&optical, thresholds)?;
        Ok(vec![write_raster_output(ctx, "classification", &classes)?])
    }
}

// ---------------------------------------------------------------------------
// External command adapter
// ---------------------------------------------------------------------------

/// Declares one output file an external command is expected to produce in
/// the working directory.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ExternalOutput {
    pub identifier: String,
    #[serde(rename = "fileName")]
    pub file_name: String,
    #[serde(rename = "mediaType")]
    pub media_type: String,
}

/// Wraps an arbitrary executable as a tool: inputs are fetched into the
/// working directory under their slot names, the command runs with that
/// directory as its cwd, and declared output files are collected afterwards.
/// This is the plug-in point for containerized or otherwise externally
/// hosted processing tools.
pub struct ExternalCommandTool {
    pub description: ProcessDescription,
    pub command: String,
    pub args: Vec<String>,
    pub outputs: Vec<ExternalOutput>,
}

impl ToolAdapter for ExternalCommandTool {
    fn description(&self) -> ProcessDescription {
        self.description.clone()
    }

    fn run(&self, ctx: &ToolContext) -> Result<Vec<ToolOutput>, ToolError> {
        let result = Command::new(&self.command)
            .args(&self.args)
            .current_dir(&ctx.workdir)
            .output()
            .map_err(|e| ToolError::Failed(format!("spawn {:?}: {e}", self.command)))?;
        if !result.status.success() {
            return Err(ToolError::Failed(format!(
                "{:?} exited with {}: {}",
                self.command,
                result.status,
                String::from_utf8_lossy(&result.stderr).trim()
            )));
        }
        let mut outputs = Vec::new();
        for spec in &self.outputs {
            let path = ctx.workdir.join(&spec.file_name);
            if !path.is_file() {
                return Err(ToolError::Failed(format!(
                    "declared output {:?} was not produced",
                    spec.file_name
                )));
            }
            outputs.push(ToolOutput {
                identifier: spec.identifier.clone(),
                path,
                media_type: spec.media_type.clone(),
            });
        }
        Ok(outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<f64>) -> Raster {
        let n = values.len();
        Raster::new(n, 1, 0.0, 0.0, 0.01, -9999.0, values).unwrap()
    }

    #[test]
    fn ndvi_basic_value() {
        let red = grid(vec![0.2]);
        let nir = grid(vec![0.6]);
        let out = tool_ndvi(&red, &nir).unwrap();
        assert!((out.values[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ndvi_zero_denominator_is_nodata() {
        let red = grid(vec![0.0]);
        let nir = grid(vec![0.0]);
        let out = tool_ndvi(&red, &nir).unwrap();
        assert!(out.is_nodata(out.values[0]));
    }

    #[test]
    fn ndvi_propagates_nodata() {
        let red = grid(vec![-9999.0, 0.2]);
        let nir = grid(vec![0.5, -9999.0]);
        let out = tool_ndvi(&red, &nir).unwrap();
        assert!(out.is_nodata(out.values[0]));
        assert!(out.is_nodata(out.values[1]));
    }

    #[test]
    fn ndvi_geometry_mismatch() {
        let red = grid(vec![0.2]);
        let nir = grid(vec![0.2, 0.3]);
        assert!(matches!(
            tool_ndvi(&red, &nir),
            Err(ToolError::GeometryMismatch)
        ));
    }

    #[test]
    fn ndvi_oracle_match_and_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..40);
            let red = grid((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            let nir = grid((0..n).map(|_| rng.random_range(0.0..1.0)).collect());
            let out = tool_ndvi(&red, &nir).unwrap();
            for i in 0..n {
                let (r, v) = (red.values[i], nir.values[i]);
                // Independent scalar expression of the same cell math.
                let expected = if v + r == 0.0 { -9999.0 } else { (v - r) / (v + r) };
                assert_eq!(out.values[i], expected);
                if !out.is_nodata(out.values[i]) {
                    assert!((-1.0..=1.0).contains(&out.values[i]));
                }
            }
        }
    }

    #[test]
    fn classification_thresholds() {
        let img = grid(vec![-0.1, 0.1, 0.3, 0.7]);
        let out = tool_land_cover_classification(&img, (0.0, 0.2, 0.5)).unwrap();
        assert_eq!(out.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn classification_all_nodata() {
        let img = grid(vec![-9999.0, -9999.0]);
        let out = tool_land_cover_classification(&img, (0.0, 0.2, 0.5)).unwrap();
        assert!(out.values.iter().all(|&v| out.is_nodata(v)));
    }

    #[test]
    fn classification_bad_thresholds() {
        let img = grid(vec![0.1]);
        assert!(matches!(
            tool_land_cover_classification(&img, (0.5, 0.2, 0.0)),
            Err(ToolError::BadThresholds)
        ));
        assert!(matches!(
            tool_land_cover_classification(&img, (0.2, 0.2, 0.5)),
            Err(ToolError::BadThresholds)
        ));
    }

    #[test]
    fn classification_histogram_matches_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(1..80);
            let img = grid((0..n).map(|_| rng.random_range(-0.5..1.0)).collect());
            let out = tool_land_cover_classification(&img, (0.0, 0.2, 0.5)).unwrap();
            let mut expected = [0usize; 4];
            for &v in &img.values {
                let class = if v < 0.0 {
                    0
                } else if v < 0.2 {
                    1
                } else if v < 0.5 {
                    2
                } else {
                    3
                };
                expected[class] += 1;
            }
            let mut got = [0usize; 4];
            for &v in &out.values {
                got[v as usize - 1] += 1;
            }
            assert_eq!(got, expected);
        }
    }
}
