//! File plumbing: point-cloud readers (ASCII PLY, OFF, XYZ), an XYZ
//! writer, the binary parameter checkpoint, and JSON transform records.
//! All writers go through a temp-file-and-rename so readers never observe
//! a half-written file.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud, RigidTransform};
use crate::nn::ParamSet;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
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
    #[error("{path}: binary PLY is not supported; convert to ascii")]
    BinaryPly { path: String },
    #[error("checkpoint {path}: bad magic bytes")]
    BadMagic { path: String },
    #[error("checkpoint {path}: unsupported version {found} (expected {expected})")]
    BadVersion {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("checkpoint {path}: CRC mismatch, file is corrupt")]
    CrcMismatch { path: String },
    #[error("checkpoint {path}: truncated ({context})")]
    Truncated { path: String, context: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("record {path}: {message}")]
    BadRecord { path: String, message: String },
    #[error("{path}: cannot detect format; use an explicit format")]
    UnknownFormat { path: String },
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
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

/// Writes `bytes` to `path` atomically (temp file in the same directory,
/// then rename).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = match dir {
        Some(d) => tempfile::NamedTempFile::new_in(d),
        None => tempfile::NamedTempFile::new_in("."),
    }
    .map_err(|e| file_err(path, e))?;
    tmp.write_all(bytes).map_err(|e| file_err(path, e))?;
    tmp.persist(path).map_err(|e| file_err(path, e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    Off,
    Xyz,
    Auto,
}

impl std::str::FromStr for CloudFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "ply-ascii" | "ply" => Self::PlyAscii,
            "off" => Self::Off,
            "xyz" => Self::Xyz,
            "auto" => Self::Auto,
            other => return Err(format!("unknown cloud format: {other}")),
        })
    }
}

fn detect_format(path: &Path, text: &str) -> Result<CloudFormat, IoError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("ply") => return Ok(CloudFormat::PlyAscii),
        Some("off") => return Ok(CloudFormat::Off),
        Some("xyz") | Some("txt") => return Ok(CloudFormat::Xyz),
        _ => {}
    }
    let first = text.lines().next().unwrap_or("").trim();
    if first.eq_ignore_ascii_case("ply") {
        Ok(CloudFormat::PlyAscii)
    } else if first.eq_ignore_ascii_case("off") || first.starts_with("OFF") {
        Ok(CloudFormat::Off)
    } else if !first.is_empty() && first.split_whitespace().all(|t| t.parse::<f64>().is_ok()) {
        Ok(CloudFormat::Xyz)
    } else {
        Err(IoError::UnknownFormat {
            path: path.display().to_string(),
        })
    }
}

/// Reads a point cloud from disk. `Auto` detects by extension, then by
/// header sniffing.
pub fn read_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let format = match format {
        CloudFormat::Auto => detect_format(path, &text)?,
        f => f,
    };
    match format {
        CloudFormat::PlyAscii => parse_ply(path, &text),
        CloudFormat::Off => parse_off(path, &text),
        CloudFormat::Xyz => parse_xyz(path, &text),
        CloudFormat::Auto => unreachable!(),
    }
}

fn parse_float(path: &Path, line: usize, token: &str) -> Result<f64, IoError> {
    token
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a number, got {token:?}")))
}

fn parse_xyz(path: &Path, text: &str) -> Result<PointCloud, IoError> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected at least 3 coordinates, got {}", toks.len()),
            ));
        }
        points.push(Point3::new(
            parse_float(path, lineno, toks[0])?,
            parse_float(path, lineno, toks[1])?,
            parse_float(path, lineno, toks[2])?,
        ));
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "file contains no points"));
    }
    Ok(PointCloud::new(points)?)
}

fn parse_off(path: &Path, text: &str) -> Result<PointCloud, IoError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (lineno, mut header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty OFF file"))?;
    let mut count_line = (lineno, header);
    if header.eq_ignore_ascii_case("off") {
        count_line = lines
            .next()
            .ok_or_else(|| parse_err(path, lineno, "missing vertex count line"))?;
    } else if let Some(rest) = header.strip_prefix("OFF") {
        // counts allowed on the header line itself
        header = rest.trim();
        if !header.is_empty() {
            count_line = (lineno, header);
        }
    }
    let toks: Vec<&str> = count_line.1.split_whitespace().collect();
    if toks.is_empty() {
        return Err(parse_err(path, count_line.0, "missing vertex count"));
    }
    let nv: usize = toks[0]
        .parse()
        .map_err(|_| parse_err(path, count_line.0, format!("bad vertex count {:?}", toks[0])))?;
    let mut points = Vec::new();
    for _ in 0..nv {
        let (lineno, line) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                count_line.0,
                format!("expected {nv} vertices, file ends after {}", points.len()),
            )
        })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(parse_err(path, lineno, "vertex line needs 3 coordinates"));
        }
        points.push(Point3::new(
            parse_float(path, lineno, toks[0])?,
            parse_float(path, lineno, toks[1])?,
            parse_float(path, lineno, toks[2])?,
        ));
    }
    if points.is_empty() {
        return Err(parse_err(path, count_line.0, "OFF file has zero vertices"));
    }
    Ok(PointCloud::new(points)?)
}

fn parse_ply(path: &Path, text: &str) -> Result<PointCloud, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (lineno, magic) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty PLY file"))?;
    if !magic.eq_ignore_ascii_case("ply") {
        return Err(parse_err(path, lineno, "missing 'ply' magic line"));
    }
    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    // column index of x/y/z among the vertex properties
    let mut coord_cols: [Option<usize>; 3] = [None; 3];
    let mut vertex_props = 0usize;
    let mut header_end = 0usize;
    for (lineno, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(IoError::BinaryPly {
                        path: path.display().to_string(),
                    });
                }
            }
            Some("element") => {
                in_vertex_element = toks.get(1) == Some(&"vertex");
                if in_vertex_element {
                    let n = toks
                        .get(2)
                        .ok_or_else(|| parse_err(path, lineno, "element vertex missing count"))?;
                    vertex_count = Some(n.parse().map_err(|_| {
                        parse_err(path, lineno, format!("bad vertex count {n:?}"))
                    })?);
                }
            }
            Some("property") if in_vertex_element => {
                if toks.first() == Some(&"property") && toks.get(1) == Some(&"list") {
                    return Err(parse_err(path, lineno, "list property on vertex element"));
                }
                match toks.get(2).copied() {
                    Some("x") => coord_cols[0] = Some(vertex_props),
                    Some("y") => coord_cols[1] = Some(vertex_props),
                    Some("z") => coord_cols[2] = Some(vertex_props),
                    _ => {}
                }
                vertex_props += 1;
            }
            Some("end_header") => {
                header_end = lineno;
                break;
            }
            _ => {}
        }
    }
    if header_end == 0 {
        return Err(parse_err(path, lineno, "header never ends (no end_header)"));
    }
    let n = vertex_count
        .ok_or_else(|| parse_err(path, header_end, "header declares no vertex element"))?;
    let cols = match coord_cols {
        [Some(x), Some(y), Some(z)] => [x, y, z],
        _ => {
            return Err(parse_err(
                path,
                header_end,
                "vertex element lacks x/y/z properties",
            ))
        }
    };
    let mut points = Vec::new();
    for _ in 0..n {
        let (lineno, line) = lines.next().ok_or_else(|| {
            parse_err(
                path,
                header_end,
                format!("expected {n} vertices, file ends after {}", points.len()),
            )
        })?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < vertex_props {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {vertex_props} values, got {}", toks.len()),
            ));
        }
        points.push(Point3::new(
            parse_float(path, lineno, toks[cols[0]])?,
            parse_float(path, lineno, toks[cols[1]])?,
            parse_float(path, lineno, toks[cols[2]])?,
        ));
    }
    if points.is_empty() {
        return Err(parse_err(path, header_end, "PLY file has zero vertices"));
    }
    Ok(PointCloud::new(points)?)
}

/// Writes a cloud as whitespace-separated XYZ triples, one per line.
pub fn write_cloud_xyz(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    let mut out = String::with_capacity(cloud.len() * 48);
    for p in cloud.points() {
        out.push_str(&format!("{:.9} {:.9} {:.9}\n", p.x, p.y, p.z));
    }
    atomic_write(path, out.as_bytes())
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LOGD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters: magic, version, tensor count, then per tensor
/// name/rank/dims and the f32 little-endian payload, with a trailing
/// CRC-32 over everything before it.
pub fn write_checkpoint(path: &Path, params: &ParamSet) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensor.ndim() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    atomic_write(path, &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, context: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.bytes.len() {
            return Err(IoError::Truncated {
                path: self.path.clone(),
                context: context.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, context: &str) -> Result<u32, IoError> {
        let b = self.take(4, context)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint back into a parameter set. The CRC is verified
/// before any tensor is materialized, so truncated or corrupt files fail
/// before large allocations.
pub fn read_checkpoint(path: &Path) -> Result<ParamSet, IoError> {
    let bytes = fs::read(path).map_err(|e| file_err(path, e))?;
    let pathstr = path.display().to_string();
    if bytes.len() < 4 + 4 + 4 + 4 {
        return Err(IoError::Truncated {
            path: pathstr,
            context: "file shorter than fixed header".to_string(),
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored_crc = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored_crc {
        return Err(IoError::CrcMismatch { path: pathstr });
    }
    let mut cur = Cursor {
        bytes: body,
        pos: 0,
        path: pathstr.clone(),
    };
    if cur.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(IoError::BadMagic { path: pathstr });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::BadVersion {
            path: pathstr,
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = cur.u32("tensor count")? as usize;
    let mut params = ParamSet::new();
    for t in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_bytes = cur.take(name_len, "name")?;
        let name = std::str::from_utf8(name_bytes).map_err(|_| IoError::BadRecord {
            path: cur.path.clone(),
            message: format!("tensor {t} has a non-utf8 name"),
        })?;
        let rank = cur.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("dimension")? as usize);
        }
        let elements: usize = dims.iter().product();
        let payload = cur.take(elements * 4, "tensor payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor =
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data).map_err(|e| {
                IoError::BadRecord {
                    path: cur.path.clone(),
                    message: format!("tensor {name}: {e}"),
                }
            })?;
        params.insert(name, tensor).map_err(|e| IoError::BadRecord {
            path: cur.path.clone(),
            message: e.to_string(),
        })?;
    }
    if cur.pos != body.len() {
        return Err(IoError::BadRecord {
            path: pathstr,
            message: format!("{} trailing bytes after last tensor", body.len() - cur.pos),
        });
    }
    Ok(params)
}

/// Estimated transform plus provenance, written as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformRecord {
    /// 4x4 row-major homogeneous matrix mapping source onto target.
    pub matrix: [[f64; 4]; 4],
    pub estimator: String,
    pub metrics: serde_json::Value,
    pub seed: u64,
    pub config: serde_json::Value,
}

const RECORD_ROTATION_TOL: f64 = 1e-6;

impl TransformRecord {
    pub fn new(
        transform: &RigidTransform,
        estimator: &str,
        metrics: serde_json::Value,
        seed: u64,
        config: serde_json::Value,
    ) -> Self {
        Self {
            matrix: transform.to_homogeneous(),
            estimator: estimator.to_string(),
            metrics,
            seed,
            config,
        }
    }

    pub fn transform(&self) -> Result<RigidTransform, IoError> {
        let m = &self.matrix;
        let r = Matrix3::from_fn(|i, j| m[i][j]);
        let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
        if dev > RECORD_ROTATION_TOL || (r.determinant() - 1.0).abs() > RECORD_ROTATION_TOL {
            return Err(IoError::BadRecord {
                path: "<record>".to_string(),
                message: format!("matrix top-left 3x3 is not a rotation (deviation {dev:.3e})"),
            });
        }
        let t = nalgebra::Vector3::new(m[0][3], m[1][3], m[2][3]);
        // renormalize through the rigid constructor's tighter tolerance
        let svd = r.svd(true, true);
        let clean = svd.u.unwrap() * svd.v_t.unwrap();
        Ok(RigidTransform::new(clean, t)?)
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| IoError::BadRecord {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        atomic_write(path, format!("{json}\n").as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| IoError::BadRecord {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}
