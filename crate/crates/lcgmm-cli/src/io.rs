//! File formats: XYZ and ASCII-PLY clouds, homogeneous transform files and
//! the benchmark result CSV.
//!
//! Everything is ASCII. Readers reject malformed input instead of coercing
//! it; writers emit fixed precision so files are reproducible byte for byte.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use lcgmm::geometry::{GeometryError, PointCloud, RigidTransform};
use lcgmm::metrics::RmseConvention;
use lcgmm::nalgebra::{Matrix3, Matrix4, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}: unsupported format: {message}")]
    Unsupported { path: String, message: String },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("{path}: invalid transform: {source}")]
    InvalidTransform {
        path: String,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// XYZ
// ---------------------------------------------------------------------------

/// Reads an XYZ file: one point per line, three whitespace-separated decimal
/// numbers, `#` comment lines and blank lines ignored.
pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 coordinates, found {}", fields.len()),
            ));
        }
        let mut coords = [0.0; 3];
        for (slot, field) in coords.iter_mut().zip(&fields) {
            let value: f64 = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {field:?}")))?;
            if !value.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite value {field:?}")));
            }
            *slot = value;
        }
        points.push(Vector3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud::new(points)?)
}

/// Writes an XYZ file with 9 significant digits per coordinate.
pub fn write_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", p.x, p.y, p.z));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// PLY (ASCII)
// ---------------------------------------------------------------------------

/// Reads the vertex positions of an ASCII PLY file. The `vertex` element
/// must carry scalar `x`, `y`, `z` properties (float or double); every other
/// element and property is ignored. Binary PLY is rejected.
pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if magic.trim() != "ply" {
        return Err(parse_err(path, 1, "missing `ply` magic line"));
    }

    struct Element {
        name: String,
        count: usize,
        // Scalar property names in declaration order; list properties are None.
        properties: Vec<Option<String>>,
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut format_seen = false;
    let mut header_end = 0;

    for (idx, raw) in lines.by_ref() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with("comment") || line.starts_with("obj_info") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("format") {
            let rest = rest.trim();
            if !rest.starts_with("ascii") {
                return Err(IoError::Unsupported {
                    path: path.display().to_string(),
                    message: format!("only ascii PLY is supported, found `{rest}`"),
                });
            }
            format_seen = true;
        } else if let Some(rest) = line.strip_prefix("element") {
            let mut it = rest.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| parse_err(path, line_no, "element without a name"))?;
            let count: usize = it
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| parse_err(path, line_no, "element without a count"))?;
            elements.push(Element {
                name: name.to_string(),
                count,
                properties: Vec::new(),
            });
        } else if let Some(rest) = line.strip_prefix("property") {
            let element = elements
                .last_mut()
                .ok_or_else(|| parse_err(path, line_no, "property before any element"))?;
            let fields: Vec<&str> = rest.split_whitespace().collect();
            match fields.as_slice() {
                ["list", ..] => element.properties.push(None),
                [_ty, name] => element.properties.push(Some((*name).to_string())),
                _ => return Err(parse_err(path, line_no, "malformed property line")),
            }
        } else if line == "end_header" {
            header_end = line_no;
            break;
        } else {
            return Err(parse_err(
                path,
                line_no,
                format!("unexpected header line `{line}`"),
            ));
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, 1, "missing end_header"));
    }
    if !format_seen {
        return Err(parse_err(path, 1, "missing format line"));
    }

    let schema = |message: &str| IoError::Schema {
        path: path.display().to_string(),
        message: message.to_string(),
    };
    let vertex = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| schema("no vertex element"))?;
    if vertex.properties.iter().any(Option::is_none) {
        return Err(schema("list properties in the vertex element are unsupported"));
    }
    let column = |name: &str| -> Result<usize, IoError> {
        vertex
            .properties
            .iter()
            .position(|p| p.as_deref() == Some(name))
            .ok_or_else(|| schema(&format!("vertex element lacks a `{name}` property")))
    };
    let (cx, cy, cz) = (column("x")?, column("y")?, column("z")?);

    let mut points = Vec::with_capacity(vertex.count);
    for element in &elements {
        if element.name == "vertex" {
            for _ in 0..element.count {
                let (idx, raw) = lines
                    .next()
                    .ok_or_else(|| parse_err(path, header_end, "truncated vertex data"))?;
                let line_no = idx + 1;
                let fields: Vec<&str> = raw.split_whitespace().collect();
                if fields.len() != element.properties.len() {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!(
                            "expected {} vertex fields, found {}",
                            element.properties.len(),
                            fields.len()
                        ),
                    ));
                }
                let get = |c: usize| -> Result<f64, IoError> {
                    fields[c].parse().map_err(|_| {
                        parse_err(path, line_no, format!("invalid number {:?}", fields[c]))
                    })
                };
                points.push(Vector3::new(get(cx)?, get(cy)?, get(cz)?));
            }
        } else {
            // One line per row of any other element.
            for _ in 0..element.count {
                lines.next();
            }
        }
    }
    Ok(PointCloud::new(points)?)
}

// ---------------------------------------------------------------------------
// Transform files
// ---------------------------------------------------------------------------

/// Writes a rigid transform as the row-major homogeneous 4x4 matrix, four
/// numbers per line, 17 significant digits (exact f64 round-trip).
pub fn write_transform(t: &RigidTransform, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let r = t.rotation();
    let v = t.translation();
    let mut out = String::new();
    for row in 0..3 {
        out.push_str(&format!(
            "{:.16e} {:.16e} {:.16e} {:.16e}\n",
            r[(row, 0)],
            r[(row, 1)],
            r[(row, 2)],
            v[row]
        ));
    }
    out.push_str("0 0 0 1\n");
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Reads a homogeneous 4x4 transform file. The last row must be
/// `(0, 0, 0, 1)` within 1e-9. Rotations violating orthonormality or the
/// determinant by more than 1e-6 are rejected; smaller drift is projected
/// back onto the nearest rotation via SVD.
pub fn read_transform(path: impl AsRef<Path>) -> Result<RigidTransform, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut values = [[0.0f64; 4]; 4];
    let mut rows = 0;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if rows == 4 {
            return Err(parse_err(path, line_no, "more than 4 matrix rows"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 4 numbers, found {}", fields.len()),
            ));
        }
        for (col, field) in fields.iter().enumerate() {
            values[rows][col] = field
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {field:?}")))?;
        }
        rows += 1;
    }
    if rows != 4 {
        return Err(parse_err(
            path,
            rows,
            format!("expected 4 matrix rows, found {rows}"),
        ));
    }

    let h = Matrix4::from_fn(|r, c| values[r][c]);
    let bottom = Vector3::new(h[(3, 0)], h[(3, 1)], h[(3, 2)]);
    if bottom.norm() > 1e-9 || (h[(3, 3)] - 1.0).abs() > 1e-9 {
        return Err(IoError::Schema {
            path: path.display().to_string(),
            message: "last row is not (0, 0, 0, 1)".into(),
        });
    }
    let rotation = Matrix3::from_fn(|r, c| h[(r, c)]);
    let translation = Vector3::new(h[(0, 3)], h[(1, 3)], h[(2, 3)]);

    let ortho = (rotation.transpose() * rotation - Matrix3::identity()).norm();
    let det = rotation.determinant();
    if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
        return Err(IoError::InvalidTransform {
            path: path.display().to_string(),
            source: if (det - 1.0).abs() > 1e-6 {
                GeometryError::ImproperRotation { det }
            } else {
                GeometryError::NotOrthonormal {
                    deviation: ortho,
                    tol: 1e-6,
                }
            },
        });
    }
    // Inside the acceptance window: pass the matrix through when it already
    // satisfies the strict construction gate, otherwise project it onto the
    // nearest rotation.
    match RigidTransform::new(rotation, translation) {
        Ok(t) => Ok(t),
        Err(_) => {
            let svd = rotation.svd(true, true);
            let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
            let sign = (u * v_t).determinant().signum();
            let projected = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign)) * v_t;
            RigidTransform::new(projected, translation).map_err(|source| {
                IoError::InvalidTransform {
                    path: path.display().to_string(),
                    source,
                }
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Result CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Method {
    Lcgmm,
    Icp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Lcgmm => "lcgmm",
            Method::Icp => "icp",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lcgmm" => Ok(Method::Lcgmm),
            "icp" => Ok(Method::Icp),
            other => Err(format!("unknown method `{other}` (expected lcgmm or icp)")),
        }
    }
}

pub fn convention_name(c: RmseConvention) -> &'static str {
    match c {
        RmseConvention::MeanThenSqrt => "mean_then_sqrt",
        RmseConvention::SqrtThenDivide => "paper_literal",
    }
}

pub fn convention_from_name(s: &str) -> Result<RmseConvention, String> {
    match s {
        "mean_then_sqrt" => Ok(RmseConvention::MeanThenSqrt),
        "paper_literal" => Ok(RmseConvention::SqrtThenDivide),
        other => Err(format!(
            "unknown rmse convention `{other}` (expected mean_then_sqrt or paper_literal)"
        )),
    }
}

/// One benchmark result row. Error fields are `-1` when a trial failed (all
/// real errors are nonnegative); `status` is `ok` or the failure reason.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub trial_id: u64,
    pub method: Method,
    pub lambda: f64,
    pub outlier_ratio: f64,
    pub noise_sigma: f64,
    pub n_points: usize,
    pub k_neighbors: usize,
    pub omega: f64,
    pub rmse: f64,
    pub rot_error: f64,
    pub trans_error: f64,
    pub iterations: usize,
    pub wall_seconds: f64,
    pub rmse_convention: RmseConvention,
    pub status: String,
}

pub const RESULT_HEADER: &str = "trial_id,method,lambda,outlier_ratio,noise_sigma,n_points,\
k_neighbors,omega,rmse,rot_error,trans_error,iterations,wall_seconds,rmse_convention,status";

impl ResultRow {
    pub fn to_csv_line(&self) -> String {
        // Commas in free-text status would break the fixed schema.
        let status = self.status.replace(',', ";").replace('\n', " ");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.trial_id,
            self.method,
            self.lambda,
            self.outlier_ratio,
            self.noise_sigma,
            self.n_points,
            self.k_neighbors,
            self.omega,
            self.rmse,
            self.rot_error,
            self.trans_error,
            self.iterations,
            self.wall_seconds,
            convention_name(self.rmse_convention),
            status
        )
    }

    pub fn from_csv_line(line: &str, path: &Path, line_no: usize) -> Result<Self, IoError> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 15 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 15 fields, found {}", fields.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, IoError> {
            fields[i]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid number {:?}", fields[i])))
        };
        let int = |i: usize| -> Result<u64, IoError> {
            fields[i]
                .parse()
                .map_err(|_| parse_err(path, line_no, format!("invalid integer {:?}", fields[i])))
        };
        Ok(ResultRow {
            trial_id: int(0)?,
            method: fields[1]
                .parse()
                .map_err(|e: String| parse_err(path, line_no, e))?,
            lambda: num(2)?,
            outlier_ratio: num(3)?,
            noise_sigma: num(4)?,
            n_points: int(5)? as usize,
            k_neighbors: int(6)? as usize,
            omega: num(7)?,
            rmse: num(8)?,
            rot_error: num(9)?,
            trans_error: num(10)?,
            iterations: int(11)? as usize,
            wall_seconds: num(12)?,
            rmse_convention: convention_from_name(fields[13])
                .map_err(|e| parse_err(path, line_no, e))?,
            status: fields[14].to_string(),
        })
    }
}

/// Appends one result row, writing the header first when the file is new or
/// empty. Header plus row go out in a single write call each.
pub fn append_result(row: &ResultRow, path: impl AsRef<Path>) -> Result<(), IoError> {
    let path = path.as_ref();
    let needs_header = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    let mut payload = String::new();
    if needs_header {
        payload.push_str(RESULT_HEADER);
        payload.push('\n');
    }
    payload.push_str(&row.to_csv_line());
    payload.push('\n');
    file.write_all(payload.as_bytes())
        .map_err(|e| io_err(path, e))
}

/// Reads a result CSV written by [`append_result`], header included.
pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        if idx == 0 {
            if line != RESULT_HEADER {
                return Err(parse_err(path, 1, "unexpected CSV header"));
            }
            continue;
        }
        rows.push(ResultRow::from_csv_line(line, path, line_no)?);
    }
    Ok(rows)
}
