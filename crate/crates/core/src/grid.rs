//! Raster grids of auxiliary data.
//!
//! Provides the ASCII grid reader/writer, Catmull-Rom bicubic sampling of
//! cell-centre values, and extraction of observation-centred patches that
//! feed the convolutional branch of the network.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Catmull-Rom kernel parameter.
pub const CUBIC_A: f64 = -0.5;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("query ({easting}, {northing}) lies outside bicubic support")]
    OutOfSupport { easting: f64, northing: f64 },
    #[error("nodata cell in bicubic support of ({easting}, {northing})")]
    Nodata { easting: f64, northing: f64 },
    #[error("patch centred on ({easting}, {northing}) could not be extracted: {source}")]
    Extraction {
        easting: f64,
        northing: f64,
        #[source]
        source: Box<GridError>,
    },
    #[error("grid standard deviation must be positive, got {0}")]
    NonPositiveScale(f64),
}

impl GridError {
    /// Short machine-readable reason, used in dataset manifests.
    pub fn reason(&self) -> &'static str {
        match self {
            GridError::OutOfSupport { .. } => "outside_support",
            GridError::Nodata { .. } => "nodata",
            GridError::Extraction { source, .. } => source.reason(),
            GridError::Io { .. } => "io",
            GridError::Parse { .. } => "parse",
            GridError::Invalid(_) => "invalid",
            GridError::NonPositiveScale(_) => "scale",
        }
    }
}

/// A north-up grid of square cells, row 0 being the northernmost row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub ncols: usize,
    pub nrows: usize,
    /// Easting of the lower-left grid corner.
    pub xll: f64,
    /// Northing of the lower-left grid corner.
    pub yll: f64,
    pub cellsize: f64,
    pub nodata: f64,
    pub values: Vec<f64>,
}

impl Raster {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
        values: Vec<f64>,
    ) -> Result<Self, GridError> {
        let r = Raster {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            nodata,
            values,
        };
        r.validate()?;
        Ok(r)
    }

    /// Builds a raster by evaluating `f(easting, northing)` at every cell centre.
    pub fn from_fn(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, GridError> {
        let top = yll + nrows as f64 * cellsize;
        let mut values = Vec::with_capacity(ncols * nrows);
        for row in 0..nrows {
            let y = top - (row as f64 + 0.5) * cellsize;
            for col in 0..ncols {
                values.push(f(xll + (col as f64 + 0.5) * cellsize, y));
            }
        }
        Raster::new(ncols, nrows, xll, yll, cellsize, -9999.0, values)
    }

    /// A raster of the given geometry filled with nodata.
    pub fn filled_nodata(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        nodata: f64,
    ) -> Result<Self, GridError> {
        Raster::new(ncols, nrows, xll, yll, cellsize, nodata, vec![nodata; ncols * nrows])
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.ncols == 0 || self.nrows == 0 {
            return Err(GridError::Invalid("ncols and nrows must be at least 1".into()));
        }
        if !(self.cellsize > 0.0 && self.cellsize.is_finite()) {
            return Err(GridError::Invalid(format!("cellsize must be positive, got {}", self.cellsize)));
        }
        if !(self.xll.is_finite() && self.yll.is_finite() && self.nodata.is_finite()) {
            return Err(GridError::Invalid("corner coordinates and nodata must be finite".into()));
        }
        if self.values.len() != self.ncols * self.nrows {
            return Err(GridError::Invalid(format!(
                "expected {} values, found {}",
                self.ncols * self.nrows,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.ncols + col]
    }

    #[inline]
    pub fn is_nodata(&self, v: f64) -> bool {
        v == self.nodata
    }

    /// Northing of the upper grid edge.
    pub fn top(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cellsize
    }

    pub fn right(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cellsize
    }

    pub fn cell_centre(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.xll + (col as f64 + 0.5) * self.cellsize,
            self.top() - (row as f64 + 0.5) * self.cellsize,
        )
    }

    /// Population standard deviation of all non-nodata cells.
    pub fn std_dev(&self) -> Option<f64> {
        let valid: Vec<f64> = self.values.iter().copied().filter(|&v| !self.is_nodata(v)).collect();
        if valid.is_empty() {
            return None;
        }
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let var = valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(var.sqrt())
    }

    /// Catmull-Rom bicubic convolution of the 4x4 cell-centre neighbourhood.
    pub fn bicubic_sample(&self, easting: f64, northing: f64) -> Result<f64, GridError> {
        let out = || GridError::OutOfSupport { easting, northing };
        let cf = (easting - self.xll) / self.cellsize - 0.5;
        let rf = (self.top() - northing) / self.cellsize - 0.5;
        if !(cf.is_finite() && rf.is_finite()) {
            return Err(out());
        }
        let c0 = cf.floor();
        let r0 = rf.floor();
        if c0 < 1.0 || r0 < 1.0 || c0 + 2.0 > (self.ncols - 1) as f64 || r0 + 2.0 > (self.nrows - 1) as f64 {
            return Err(out());
        }
        let (ci, ri) = (c0 as usize - 1, r0 as usize - 1);
        let wx = cubic_weights(cf - c0);
        let wy = cubic_weights(rf - r0);
        let mut acc = 0.0;
        for (dy, wyv) in wy.iter().enumerate() {
            let row = &self.values[(ri + dy) * self.ncols + ci..(ri + dy) * self.ncols + ci + 4];
            let mut line = 0.0;
            for (v, wxv) in row.iter().zip(wx.iter()) {
                if self.is_nodata(*v) {
                    return Err(GridError::Nodata { easting, northing });
                }
                line += wxv * v;
            }
            acc += wyv * line;
        }
        Ok(acc)
    }

    /// Samples a `size`x`size` patch centred on the query at spacing `cellsize`.
    ///
    /// Cell `(i, j)` sits at offset `((j - (size-1)/2) * cellsize, ((size-1)/2 - i) * cellsize)`,
    /// so for even sizes the query point is the shared corner of the middle four cells.
    pub fn extract_patch(
        &self,
        easting: f64,
        northing: f64,
        size: usize,
        cellsize: f64,
    ) -> Result<Patch, GridError> {
        let wrap = |e: GridError| GridError::Extraction {
            easting,
            northing,
            source: Box::new(e),
        };
        if size == 0 || !(cellsize > 0.0) {
            return Err(GridError::Invalid("patch size and cellsize must be positive".into()));
        }
        let centre = self.bicubic_sample(easting, northing).map_err(wrap)?;
        let half = (size as f64 - 1.0) / 2.0;
        let mut values = Vec::with_capacity(size * size);
        for i in 0..size {
            let y = northing + (half - i as f64) * cellsize;
            for j in 0..size {
                let x = easting + (j as f64 - half) * cellsize;
                values.push(self.bicubic_sample(x, y).map_err(wrap)?);
            }
        }
        Ok(Patch {
            size,
            cellsize,
            values,
            centre_easting: easting,
            centre_northing: northing,
            centre_elevation: centre,
            centre_value: centre,
        })
    }
}

/// Catmull-Rom convolution kernel.
#[inline]
pub fn cubic_kernel(d: f64) -> f64 {
    let a = CUBIC_A;
    let x = d.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

#[inline]
fn cubic_weights(t: f64) -> [f64; 4] {
    [
        cubic_kernel(1.0 + t),
        cubic_kernel(t),
        cubic_kernel(1.0 - t),
        cubic_kernel(2.0 - t),
    ]
}

/// An observation-centred window of auxiliary values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub size: usize,
    pub cellsize: f64,
    /// Row-major, row 0 northernmost.
    pub values: Vec<f64>,
    pub centre_easting: f64,
    pub centre_northing: f64,
    /// Raw auxiliary value at the centre, kept through normalisation.
    pub centre_elevation: f64,
    /// Value at the centre point in the current units of `values`.
    pub centre_value: f64,
}

impl Patch {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

/// Re-expresses a patch relative to its centre, in units of `grid_sd`.
pub fn normalize_patch(p: &Patch, grid_sd: f64) -> Result<Patch, GridError> {
    if !(grid_sd > 0.0 && grid_sd.is_finite()) {
        return Err(GridError::NonPositiveScale(grid_sd));
    }
    let c = p.centre_value;
    Ok(Patch {
        values: p.values.iter().map(|v| (v - c) / grid_sd).collect(),
        centre_value: 0.0,
        ..p.clone()
    })
}

/// Formats a value with nine significant digits, keeping trailing zeros.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".to_string();
    }
    let sci = format!("{v:.8e}");
    let exp: i32 = sci
        .split_once('e')
        .and_then(|(_, e)| e.parse().ok())
        .unwrap_or(0);
    if (-4..9).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, v)
    } else {
        sci
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster, GridError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GridError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_raster(&text)
}

const HEADER_KEYS: [&str; 6] = ["ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"];

pub fn parse_raster(text: &str) -> Result<Raster, GridError> {
    let mut lines = text.lines().enumerate();
    let mut header = [0.0f64; 6];
    for (k, key) in HEADER_KEYS.iter().enumerate() {
        let (idx, line) = lines.next().ok_or(GridError::Parse {
            line: k + 1,
            msg: format!("missing header line {}", key.to_uppercase()),
        })?;
        let mut parts = line.split_whitespace();
        let name = parts.next().unwrap_or("");
        if !name.eq_ignore_ascii_case(key) {
            return Err(GridError::Parse {
                line: idx + 1,
                msg: format!("expected {}, found {:?}", key.to_uppercase(), name),
            });
        }
        let value = parts.next().and_then(|v| v.parse::<f64>().ok()).ok_or(GridError::Parse {
            line: idx + 1,
            msg: format!("bad value for {}", key.to_uppercase()),
        })?;
        if parts.next().is_some() {
            return Err(GridError::Parse {
                line: idx + 1,
                msg: "trailing tokens in header".into(),
            });
        }
        header[k] = value;
    }
    let as_count = |v: f64, line: usize| {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(GridError::Parse {
                line,
                msg: format!("dimension must be a positive integer, got {v}"),
            })
        }
    };
    let ncols = as_count(header[0], 1)?;
    let nrows = as_count(header[1], 2)?;
    let mut values = Vec::with_capacity(ncols * nrows);
    let mut rows = 0;
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if rows == nrows {
            return Err(GridError::Parse {
                line: idx + 1,
                msg: format!("more than {nrows} data rows"),
            });
        }
        let before = values.len();
        for tok in line.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| GridError::Parse {
                line: idx + 1,
                msg: format!("non-numeric cell {tok:?}"),
            })?;
            if !v.is_finite() {
                return Err(GridError::Parse {
                    line: idx + 1,
                    msg: format!("non-finite cell {tok:?}"),
                });
            }
            values.push(v);
        }
        let got = values.len() - before;
        if got != ncols {
            return Err(GridError::Parse {
                line: idx + 1,
                msg: format!("expected {ncols} values, found {got}"),
            });
        }
        rows += 1;
    }
    if rows != nrows {
        return Err(GridError::Parse {
            line: text.lines().count(),
            msg: format!("expected {nrows} data rows, found {rows}"),
        });
    }
    Raster::new(ncols, nrows, header[2], header[3], header[4], header[5], values)
}

pub fn render_raster(r: &Raster) -> String {
    let mut out = String::with_capacity(r.values.len() * 12 + 128);
    out.push_str(&format!("NCOLS {}\n", r.ncols));
    out.push_str(&format!("NROWS {}\n", r.nrows));
    out.push_str(&format!("XLLCORNER {}\n", r.xll));
    out.push_str(&format!("YLLCORNER {}\n", r.yll));
    out.push_str(&format!("CELLSIZE {}\n", r.cellsize));
    let nodata = format_sig9(r.nodata);
    out.push_str(&format!("NODATA_VALUE {nodata}\n"));
    for row in r.values.chunks(r.ncols) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| if r.is_nodata(v) { nodata.clone() } else { format_sig9(v) })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn write_raster(r: &Raster, path: impl AsRef<Path>) -> Result<(), GridError> {
    r.validate()?;
    let path = path.as_ref();
    let io = |source| GridError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    w.write_all(render_raster(r).as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}
