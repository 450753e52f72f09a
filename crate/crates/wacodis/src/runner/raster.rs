//! Plain-text raster grids: six `key value` header lines (ncols, nrows,
//! xllcorner, yllcorner, cellsize, NODATA_value) followed by nrows lines of
//! ncols space-separated decimal numbers, "\n" line endings throughout.

use std::fmt::Write as _;

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("line {line}: {reason}")]
pub struct RasterParseError {
    pub line: usize,
    pub reason: String,
}

/// Row-major numeric grid with a nodata sentinel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub ncols: usize,
    pub nrows: usize,
    pub xllcorner: f64,
    pub yllcorner: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xllcorner: f64,
        yllcorner: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self, String> {
        if ncols == 0 || nrows == 0 {
            return Err("grid dimensions must be positive".into());
        }
        if cellsize <= 0.0 {
            return Err("cellsize must be positive".into());
        }
        if values.len() != ncols * nrows {
            return Err(format!(
                "expected {} values, got {}",
                ncols * nrows,
                values.len()
            ));
        }
        Ok(Raster {
            ncols,
            nrows,
            xllcorner,
            yllcorner,
            cellsize,
            nodata,
            values,
        })
    }

    pub fn is_nodata(&self, value: f64) -> bool {
        value == self.nodata
    }

    pub fn same_geometry(&self, other: &Raster) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xllcorner == other.xllcorner
            && self.yllcorner == other.yllcorner
            && self.cellsize == other.cellsize
    }
}

fn header_line<'a>(
    lines: &mut impl Iterator<Item = &'a str>,
    line_no: &mut usize,
    key: &str,
) -> Result<f64, RasterParseError> {
    *line_no += 1;
    let line = lines.next().ok_or_else(|| RasterParseError {
        line: *line_no,
        reason: format!("missing header line {key:?}"),
    })?;
    let mut parts = line.split_whitespace();
    let found = parts.next().unwrap_or("");
    if found != key {
        return Err(RasterParseError {
            line: *line_no,
            reason: format!("expected header {key:?}, found {found:?}"),
        });
    }
    let raw = parts.next().ok_or_else(|| RasterParseError {
        line: *line_no,
        reason: format!("header {key:?} has no value"),
    })?;
    if parts.next().is_some() {
        return Err(RasterParseError {
            line: *line_no,
            reason: format!("header {key:?} has trailing content"),
        });
    }
    raw.parse().map_err(|_| RasterParseError {
        line: *line_no,
        reason: format!("header {key:?} value {raw:?} is not a number"),
    })
}

pub fn raster_read(bytes: &[u8]) -> Result<Raster, RasterParseError> {
    let text = std::str::from_utf8(bytes).map_err(|e| RasterParseError {
        line: 0,
        reason: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text.lines();
    let mut line_no = 0usize;

    let ncols = header_line(&mut lines, &mut line_no, "ncols")?;
    let nrows = header_line(&mut lines, &mut line_no, "nrows")?;
    let xllcorner = header_line(&mut lines, &mut line_no, "xllcorner")?;
    let yllcorner = header_line(&mut lines, &mut line_no, "yllcorner")?;
    let cellsize = header_line(&mut lines, &mut line_no, "cellsize")?;
    let nodata = header_line(&mut lines, &mut line_no, "NODATA_value")?;

    let to_count = |v: f64, name: &str, line: usize| -> Result<usize, RasterParseError> {
        if v.fract() != 0.0 || v < 1.0 || v > 1e9 {
            return Err(RasterParseError {
                line,
                reason: format!("{name} must be a positive integer, got {v}"),
            });
        }
        Ok(v as usize)
    };
    let ncols = to_count(ncols, "ncols", 1)?;
    let nrows = to_count(nrows, "nrows", 2)?;

    let mut values = Vec::with_capacity(ncols * nrows);
    for row in 0..nrows {
        line_no += 1;
        let line = lines.next().ok_or_else(|| RasterParseError {
            line: line_no,
            reason: format!("missing data row {}", row + 1),
        })?;
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| RasterParseError {
                line: line_no,
                reason: format!("bad number {tok:?}"),
            })?;
            values.push(v);
            count += 1;
        }
        if count != ncols {
            return Err(RasterParseError {
                line: line_no,
                reason: format!("expected {ncols} values in row, found {count}"),
            });
        }
    }
    for extra in lines {
        line_no += 1;
        if !extra.trim().is_empty() {
            return Err(RasterParseError {
                line: line_no,
                reason: "trailing content after grid".into(),
            });
        }
    }

    Raster::new(ncols, nrows, xllcorner, yllcorner, cellsize, nodata, values)
        .map_err(|reason| RasterParseError { line: line_no, reason })
}

pub fn raster_write(raster: &Raster) -> Vec<u8> {
    let mut out = String::new();
    let _ = writeln!(out, "ncols {}", raster.ncols);
    let _ = writeln!(out, "nrows {}", raster.nrows);
    let _ = writeln!(out, "xllcorner {}", raster.xllcorner);
    let _ = writeln!(out, "yllcorner {}", raster.yllcorner);
    let _ = writeln!(out, "cellsize {}", raster.cellsize);
    let _ = writeln!(out, "NODATA_value {}", raster.nodata);
    for row in raster.values.chunks(raster.ncols) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SAMPLE: &str = "ncols 2\nnrows 2\nxllcorner 6.931\nyllcorner 50.985\ncellsize 0.01\nNODATA_value -9999\n0.2 0.6\n0.1 0.3\n";

    #[test]
    fn parses_sample_grid() {
        let r = raster_read(SAMPLE.as_bytes()).unwrap();
        assert_eq!(r.ncols, 2);
        assert_eq!(r.nrows, 2);
        assert_eq!(r.xllcorner, 6.931);
        assert_eq!(r.yllcorner, 50.985);
        assert_eq!(r.cellsize, 0.01);
        assert_eq!(r.nodata, -9999.0);
        assert_eq!(r.values, vec![0.2, 0.6, 0.1, 0.3]);
    }

    #[test]
    fn canonical_documents_round_trip_exactly() {
        let r = raster_read(SAMPLE.as_bytes()).unwrap();
        assert_eq!(raster_write(&r), SAMPLE.as_bytes());
    }

    #[test]
    fn missing_header_is_named() {
        let broken = SAMPLE.replace("cellsize 0.01\n", "");
        let err = raster_read(broken.as_bytes()).unwrap_err();
        assert_eq!(err.line, 5);
        assert!(err.reason.contains("cellsize"));
    }

    #[test]
    fn short_row_rejected() {
        let broken = SAMPLE.replace("0.2 0.6", "0.2");
        let err = raster_read(broken.as_bytes()).unwrap_err();
        assert_eq!(err.line, 7);
    }

    #[test]
    fn wrong_row_count_rejected() {
        let broken = format!("{SAMPLE}0.9 0.9\n");
        assert!(raster_read(broken.as_bytes()).is_err());
    }

    fn arb_raster() -> impl Strategy<Value = Raster> {
        (1usize..6, 1usize..6).prop_flat_map(|(ncols, nrows)| {
            proptest::collection::vec(
                prop_oneof![(-1.0f64..1.0), Just(-9999.0)],
                ncols * nrows,
            )
            .prop_map(move |values| {
                Raster::new(ncols, nrows, 6.9, 50.9, 0.01, -9999.0, values).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn write_read_identity(r in arb_raster()) {
            let back = raster_read(&raster_write(&r)).unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
