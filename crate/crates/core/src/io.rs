//! File formats: calibration JSON, PLY point clouds and meshes, and raw
//! `f64` rasters with JSON sidecars.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Intrinsics, LengthUnit, RigidPose};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("JSON error in {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("malformed PLY: {0}")]
    Ply(String),
    #[error("malformed raster: {0}")]
    Raster(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Extrinsic block of a calibration document. The rotation is kept as
/// written; use [`Extrinsics::pose`] for a validated rigid transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrinsics {
    /// Row-major 3x3 rotation.
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(default = "default_unit")]
    pub unit: LengthUnit,
}

fn default_unit() -> LengthUnit {
    LengthUnit::Mm
}

impl Extrinsics {
    pub fn from_pose(pose: &RigidPose) -> Self {
        let r = pose.rotation();
        let t = pose.translation();
        Extrinsics {
            r: [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            t: [t.x, t.y, t.z],
            unit: LengthUnit::Mm,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.r)
    }

    /// Translation converted to millimetres.
    pub fn translation_mm(&self) -> Vector3<f64> {
        Vector3::from_iterator(self.t.iter().map(|v| self.unit.to_mm(*v)))
    }

    /// Raw `[R | t]` in millimetres, without any orthonormality check.
    pub fn matrix_mm(&self) -> Matrix3x4<f64> {
        let mut m = Matrix3x4::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation_mm());
        m
    }

    /// Strictly validated pose.
    pub fn pose(&self) -> Result<RigidPose, GeometryError> {
        RigidPose::new(self.rotation(), self.translation_mm())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceCalibration {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
    /// Accepted for compatibility; every coefficient must be zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distortion: Option<Vec<f64>>,
}

impl DeviceCalibration {
    pub fn new(intrinsics: Intrinsics, pose: &RigidPose) -> Self {
        DeviceCalibration { intrinsics, extrinsics: Extrinsics::from_pose(pose), distortion: None }
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if let Some(d) = &self.distortion {
            if d.iter().any(|c| *c != 0.0) {
                return Err(IoError::Calibration("non-zero lens distortion coefficients are not supported".into()));
            }
        }
        if !self.extrinsics.r.iter().chain(&self.extrinsics.t).all(|v| v.is_finite()) {
            return Err(IoError::Calibration("extrinsics must be finite".into()));
        }
        Ok(())
    }
}

pub const CALIBRATION_VERSION: u32 = 1;

/// Camera/projector calibration document. The camera frame is the world
/// frame, so the camera extrinsics are normally the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub version: u32,
    pub camera: DeviceCalibration,
    pub projector: DeviceCalibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stereo_reproj_rms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proj_reproj_rms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted_poses: Option<Vec<usize>>,
}

impl CalibrationFile {
    pub fn validate(&self) -> Result<(), IoError> {
        if self.version != CALIBRATION_VERSION {
            return Err(IoError::Calibration(format!("unsupported calibration version {}", self.version)));
        }
        self.camera.validate()?;
        self.projector.validate()
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let c: CalibrationFile = read_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        write_json(path, self)
    }
}

/// Loads a single device from either a full calibration document (the
/// projector block is used) or a bare `{"intrinsics", "extrinsics"}` one.
pub fn load_projector_calibration(path: &Path) -> Result<DeviceCalibration, IoError> {
    let value: serde_json::Value = read_json(path)?;
    let json_err = |source| IoError::Json { path: path.to_path_buf(), source };
    let dev: DeviceCalibration = if value.get("projector").is_some() {
        let file: CalibrationFile = serde_json::from_value(value).map_err(json_err)?;
        file.validate()?;
        file.projector
    } else {
        serde_json::from_value(value).map_err(json_err)?
    };
    dev.validate()?;
    Ok(dev)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    #[default]
    Ascii,
    BinaryLittleEndian,
}

/// Vertices, optional per-vertex `(u, v)` and optional faces read from a PLY file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlyData {
    pub points: Vec<Vector3<f64>>,
    pub uv: Option<Vec<[f64; 2]>>,
    pub faces: Vec<[u32; 3]>,
}

pub fn write_ply(path: &Path, data: &PlyData, format: PlyFormat) -> Result<(), IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_ply_to(BufWriter::new(file), data, format).map_err(io_err(path))
}

fn write_ply_to(mut w: impl Write, data: &PlyData, format: PlyFormat) -> std::io::Result<()> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    writeln!(w, "ply\nformat {fmt} 1.0\nelement vertex {}", data.points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    if data.uv.is_some() {
        writeln!(w, "property double u\nproperty double v")?;
    }
    if !data.faces.is_empty() {
        writeln!(w, "element face {}\nproperty list uchar uint vertex_indices", data.faces.len())?;
    }
    writeln!(w, "end_header")?;
    for (i, p) in data.points.iter().enumerate() {
        let uv = data.uv.as_ref().map(|uv| uv[i]);
        match format {
            PlyFormat::Ascii => {
                write!(w, "{} {} {}", p.x, p.y, p.z)?;
                if let Some([u, v]) = uv {
                    write!(w, " {u} {v}")?;
                }
                writeln!(w)?;
            }
            PlyFormat::BinaryLittleEndian => {
                for c in p.iter().copied().chain(uv.into_iter().flatten()) {
                    w.write_all(&c.to_le_bytes())?;
                }
            }
        }
    }
    for f in &data.faces {
        match format {
            PlyFormat::Ascii => writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?,
            PlyFormat::BinaryLittleEndian => {
                w.write_all(&[3u8])?;
                for i in f {
                    w.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Scalar, IoError> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(IoError::Ply(format!("unknown scalar type {other}"))),
        })
    }

    fn read_le(self, r: &mut impl Read) -> std::io::Result<f64> {
        macro_rules! rd {
            ($t:ty) => {{
                let mut b = [0u8; std::mem::size_of::<$t>()];
                r.read_exact(&mut b)?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8),
            Scalar::U8 => rd!(u8),
            Scalar::I16 => rd!(i16),
            Scalar::U16 => rd!(u16),
            Scalar::I32 => rd!(i32),
            Scalar::U32 => rd!(u32),
            Scalar::F32 => rd!(f32),
            Scalar::F64 => rd!(f64),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(String, Scalar),
    List(String, Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

pub fn read_ply(path: &Path) -> Result<PlyData, IoError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_ply_from(BufReader::new(file)).map_err(|e| match e {
        IoError::Io { source, .. } => IoError::Io { path: path.to_path_buf(), source },
        other => other,
    })
}

fn read_ply_from(mut r: impl BufRead) -> Result<PlyData, IoError> {
    let io = |source| IoError::Io { path: PathBuf::new(), source };
    let mut line = String::new();
    let mut next_line = |r: &mut dyn BufRead| -> Result<String, IoError> {
        line.clear();
        if r.read_line(&mut line).map_err(io)? == 0 {
            return Err(IoError::Ply("unexpected end of header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(IoError::Ply("missing 'ply' magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => binary = Some(false),
            ["format", "binary_little_endian", _] => binary = Some(true),
            ["format", other, _] => return Err(IoError::Ply(format!("unsupported format {other}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| IoError::Ply(format!("bad element count {count}")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, name] => elements
                .last_mut()
                .ok_or_else(|| IoError::Ply("property before element".into()))?
                .props
                .push(Property::List(name.to_string(), Scalar::parse(ct)?, Scalar::parse(it)?)),
            ["property", ty, name] => elements
                .last_mut()
                .ok_or_else(|| IoError::Ply("property before element".into()))?
                .props
                .push(Property::Scalar(name.to_string(), Scalar::parse(ty)?)),
            ["end_header"] => break,
            _ => return Err(IoError::Ply(format!("unrecognised header line '{l}'"))),
        }
    }
    let binary = binary.ok_or_else(|| IoError::Ply("missing format line".into()))?;

    let mut tokens: Box<dyn Iterator<Item = String>> = Box::new(std::iter::empty());
    if !binary {
        let mut rest = String::new();
        r.read_to_string(&mut rest).map_err(io)?;
        tokens = Box::new(rest.split_whitespace().map(str::to_string).collect::<Vec<_>>().into_iter());
    }
    let mut read_value = |ty: Scalar, r: &mut dyn BufRead| -> Result<f64, IoError> {
        if binary {
            let mut r = r;
            ty.read_le(&mut r).map_err(io)
        } else {
            let t = tokens.next().ok_or_else(|| IoError::Ply("unexpected end of data".into()))?;
            t.parse::<f64>().map_err(|_| IoError::Ply(format!("bad number '{t}'")))
        }
    };

    let mut data = PlyData::default();
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let is_face = el.name == "face";
        let names: Vec<&str> = el
            .props
            .iter()
            .map(|p| match p {
                Property::Scalar(n, _) | Property::List(n, _, _) => n.as_str(),
            })
            .collect();
        let has_uv = is_vertex && names.contains(&"u") && names.contains(&"v");
        if has_uv {
            data.uv = Some(Vec::with_capacity(el.count));
        }
        for _ in 0..el.count {
            let (mut xyz, mut uv) = ([f64::NAN; 3], [0.0; 2]);
            for p in &el.props {
                match p {
                    Property::Scalar(name, ty) => {
                        let v = read_value(*ty, &mut r)?;
                        if is_vertex {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                "u" => uv[0] = v,
                                "v" => uv[1] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(name, ct, it) => {
                        let n = read_value(*ct, &mut r)? as usize;
                        let idx: Vec<f64> = (0..n).map(|_| read_value(*it, &mut r)).collect::<Result<_, _>>()?;
                        if is_face && (name == "vertex_indices" || name == "vertex_index") {
                            // Fan-triangulate polygons.
                            for k in 1..n.saturating_sub(1) {
                                data.faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if is_vertex {
                if xyz.iter().any(|v| v.is_nan()) {
                    return Err(IoError::Ply("vertex element lacks x, y or z".into()));
                }
                data.points.push(Vector3::from(xyz));
                if let Some(u) = data.uv.as_mut() {
                    u.push(uv);
                }
            }
        }
    }
    Ok(data)
}

/// JSON sidecar describing a raw little-endian `f64` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterSidecar {
    pub width: u32,
    pub height: u32,
    pub field: String,
    pub units: String,
    pub dtype: String,
}

/// Writes `<stem>.f64` and `<stem>.json`.
pub fn write_f64_raster(stem: &Path, width: u32, height: u32, field: &str, units: &str, data: &[f64]) -> Result<(), IoError> {
    if data.len() != width as usize * height as usize {
        return Err(IoError::Raster(format!("{} samples for {width}x{height}", data.len())));
    }
    let bin = stem.with_extension("f64");
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let sidecar = RasterSidecar { width, height, field: field.into(), units: units.into(), dtype: "f64le".into() };
    write_json(&stem.with_extension("json"), &sidecar)
}

pub fn read_f64_raster(stem: &Path) -> Result<(RasterSidecar, Vec<f64>), IoError> {
    let sidecar: RasterSidecar = read_json(&stem.with_extension("json"))?;
    if sidecar.dtype != "f64le" {
        return Err(IoError::Raster(format!("unsupported dtype {}", sidecar.dtype)));
    }
    let bin = stem.with_extension("f64");
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let n = sidecar.width as usize * sidecar.height as usize;
    if bytes.len() != n * 8 {
        return Err(IoError::Raster(format!("{} bytes for {} samples", bytes.len(), n)));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((sidecar, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> PlyData {
        PlyData {
            points: vec![Vector3::new(1.5, -2.0, 3.25), Vector3::new(0.0, 1e-7, -4.0), Vector3::new(7.0, 8.0, 9.0)],
            uv: Some(vec![[10.0, 20.0], [11.0, 21.0], [12.5, 22.0]]),
            faces: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn ply_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let p = dir.path().join(format!("{fmt:?}.ply"));
            write_ply(&p, &sample(), fmt).unwrap();
            assert_eq!(read_ply(&p).unwrap(), sample());
        }
    }

    #[test]
    fn ply_reads_foreign_layouts() {
        let text = "ply\nformat ascii 1.0\ncomment made elsewhere\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty uchar red\nelement face 1\nproperty list uchar int vertex_index\nend_header\n0 0 0 255\n1 0 0 0\n1 1 0 0\n0 1 0 9\n4 0 1 2 3\n";
        let d = read_ply_from(text.as_bytes()).unwrap();
        assert_eq!(d.points.len(), 4);
        assert_eq!(d.faces, vec![[0, 1, 2], [0, 2, 3]]);
        assert!(d.uv.is_none());
        assert!(read_ply_from("ply\nformat binary_big_endian 1.0\nend_header\n".as_bytes()).is_err());
    }

    #[test]
    fn calibration_rejects_distortion_and_converts_units() {
        let json = r#"{"intrinsics":{"fx":1000,"fy":1000,"ox":455.5,"oy":569.5,"width":912,"height":1140},
            "extrinsics":{"r":[1,0,0,0,1,0,0,0,1],"t":[1,2,3],"unit":"cm"},"distortion":[0,0.1,0]}"#;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, json).unwrap();
        assert!(matches!(load_projector_calibration(&p), Err(IoError::Calibration(_))));
        fs::write(&p, json.replace("0.1", "0")).unwrap();
        let dev = load_projector_calibration(&p).unwrap();
        assert_eq!(dev.extrinsics.translation_mm(), Vector3::new(10.0, 20.0, 30.0));
    }

    #[test]
    fn calibration_file_round_trip() {
        let k = Intrinsics::new(1000.0, 1001.0, 400.0, 300.0, 800, 600).unwrap();
        let pose = RigidPose::from_axis_angle(Vector3::new(0.01, -0.02, 0.03), Vector3::new(-125.0, 100.0, 5.0));
        let file = CalibrationFile {
            version: 1,
            camera: DeviceCalibration::new(k, &RigidPose::identity()),
            projector: DeviceCalibration::new(k, &pose),
            stereo_reproj_rms: Some(0.05),
            proj_reproj_rms: Some(0.04),
            accepted_poses: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        file.save(&p).unwrap();
        let back = CalibrationFile::load(&p).unwrap();
        assert_eq!(back, file);
        assert!((back.projector.extrinsics.pose().unwrap().rotation() - pose.rotation()).abs().max() < 1e-15);
        assert_eq!(load_projector_calibration(&p).unwrap(), file.projector);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn raster_round_trip(w in 1u32..20, h in 1u32..20, seed in any::<u64>()) {
            let data: Vec<f64> = (0..w * h).map(|i| (seed as f64 + i as f64).sin() * 1e3).collect();
            let dir = tempfile::tempdir().unwrap();
            let stem = dir.path().join("phase");
            write_f64_raster(&stem, w, h, "unwrapped", "rad", &data).unwrap();
            let (side, back) = read_f64_raster(&stem).unwrap();
            prop_assert_eq!(side.width, w);
            prop_assert_eq!(back, data);
        }
    }
}
