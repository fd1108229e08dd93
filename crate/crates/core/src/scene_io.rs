//! Scene ingestion: PLY point clouds, PNG images/masks, the `cameras.json`
//! schema, and the pinhole projection math shared by every downstream module.
//!
//! `cameras.json` is an array of
//! `{id, width, height, fx, fy, cx, cy, R: 9 floats row-major, t: 3 floats,
//!   test?: bool, frames: [{t, image, mask?}]}` with paths relative to the
//! scene directory. Masks are only accepted at t = 0.

use crate::error::{Error, Result};
use nalgebra::{Matrix2x3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Depth below which a point counts as out of frustum.
pub const NEAR_PLANE: f64 = 0.01;

// ---------------------------------------------------------------------------
// images and masks

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    /// Row-major H*W*3, linear [0,1].
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn zeros(width: usize, height: usize) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Ok(ImageRgb {
            width: w,
            height: h,
            data,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_png_bytes(&bytes)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img =
            image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).expect("size");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Binary foreground mask, 1 = foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
            .map_err(|e| Error::Image(e.to_string()))?
            .to_luma8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.as_raw().iter().map(|&b| (b > 127) as u8).collect();
        Ok(Mask {
            width: w,
            height: h,
            data,
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.data.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
        let img =
            image::GrayImage::from_raw(self.width as u32, self.height as u32, buf).expect("size");
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Load a mask and check it against the declared camera resolution.
pub fn load_mask(path: &Path, cam_w: usize, cam_h: usize) -> Result<Mask> {
    let bytes = read_file(path)?;
    let mask = Mask::from_png_bytes(&bytes)?;
    if mask.width != cam_w || mask.height != cam_h {
        return Err(Error::MaskSize {
            mask_w: mask.width,
            mask_h: mask.height,
            cam_w,
            cam_h,
        });
    }
    Ok(mask)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// cameras

#[derive(Debug, Clone)]
pub struct Camera {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub in_frustum: bool,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Error::Camera {
            id: self.id.to_string(),
            message: m,
        };
        let resid = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let inf = resid.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if inf >= 1e-6 {
            return Err(err(format!("rotation not orthonormal (residual {inf:.2e})")));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(err("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(err(format!("cx {} outside [0,{})", self.cx, self.width)));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(err(format!("cy {} outside [0,{})", self.cy, self.height)));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn project_point(&self, x: &Vector3<f64>) -> Projected {
        let xc = self.world_to_camera(x);
        if xc.z <= NEAR_PLANE {
            return Projected {
                u: 0.0,
                v: 0.0,
                depth: xc.z,
                in_frustum: false,
            };
        }
        Projected {
            u: self.fx * xc.x / xc.z + self.cx,
            v: self.fy * xc.y / xc.z + self.cy,
            depth: xc.z,
            in_frustum: true,
        }
    }

    /// Jacobian of (u, v) w.r.t. camera-space position.
    pub fn projection_jacobian(&self, x_cam: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let z = x_cam.z;
        if z <= NEAR_PLANE {
            return Err(Error::Precondition(format!(
                "projection_jacobian requires z > {NEAR_PLANE}, got {z}"
            )));
        }
        Ok(Matrix2x3::new(
            self.fx / z,
            0.0,
            -self.fx * x_cam.x / (z * z),
            0.0,
            self.fy / z,
            -self.fy * x_cam.y / (z * z),
        ))
    }
}

// ---------------------------------------------------------------------------
// point clouds and PLY

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Vector3<f64>>,
    /// RGB in [0,1], same length as positions.
    pub colors: Vec<Vector3<f64>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud> {
    let bytes = read_file(path)?;
    parse_ply(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(ScalarType, String)>,
}

fn ply_err(location: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ply {
        location: location.into(),
        message: message.into(),
    }
}

/// Parse an ASCII or binary little-endian PLY point cloud from raw bytes.
///
/// Requires x/y/z vertex properties; red/green/blue (or r/g/b) are optional
/// and default to 0.5 gray. Integer colors are normalized by their type max.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    // --- header ---
    let mut pos = 0usize;
    let mut line_no = 0usize;
    let read_line = |pos: &mut usize, line_no: &mut usize| -> Result<String> {
        if *pos >= bytes.len() {
            return Err(ply_err(format!("byte {pos}", pos = *pos), "unexpected end of header"));
        }
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        let mut end = *pos;
        if *pos < bytes.len() {
            *pos += 1; // consume '\n'
        }
        if end > start && bytes[end - 1] == b'\r' {
            end -= 1;
        }
        *line_no += 1;
        String::from_utf8(bytes[start..end].to_vec())
            .map_err(|_| ply_err(format!("line {line_no}", line_no = *line_no), "header is not utf-8"))
    };

    let magic = read_line(&mut pos, &mut line_no)?;
    if magic.trim() != "ply" {
        return Err(ply_err("line 1", "missing 'ply' magic"));
    }
    let mut format = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    loop {
        let line = read_line(&mut pos, &mut line_no)?;
        let loc = format!("line {line_no}");
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                format = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLe,
                    other => {
                        return Err(ply_err(
                            loc,
                            format!("unsupported format {:?}", other.unwrap_or("")),
                        ))
                    }
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(ply_err(loc, "malformed element line"));
                }
                let count: usize = toks[2]
                    .parse()
                    .map_err(|_| ply_err(loc.clone(), "bad element count"))?;
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| ply_err(loc.clone(), "property before any element"))?;
                if toks.get(1) == Some(&"list") {
                    return Err(ply_err(loc, "list properties are not supported"));
                }
                if toks.len() != 3 {
                    return Err(ply_err(loc, "malformed property line"));
                }
                let ty = ScalarType::parse(toks[1])
                    .ok_or_else(|| ply_err(loc.clone(), format!("unknown type '{}'", toks[1])))?;
                elem.properties.push((ty, toks[2].to_string()));
            }
            Some("end_header") => break,
            Some(other) => return Err(ply_err(loc, format!("unknown header keyword '{other}'"))),
        }
    }
    let format = format.ok_or_else(|| ply_err(format!("line {line_no}"), "missing format line"))?;

    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| ply_err(format!("line {line_no}"), "no vertex element"))?;

    let find = |elem: &PlyElement, names: &[&str]| -> Option<usize> {
        elem.properties
            .iter()
            .position(|(_, n)| names.contains(&n.as_str()))
    };
    let v = &elements[vertex_idx];
    let ix = find(v, &["x"]).ok_or_else(|| ply_err("header", "vertex missing property x"))?;
    let iy = find(v, &["y"]).ok_or_else(|| ply_err("header", "vertex missing property y"))?;
    let iz = find(v, &["z"]).ok_or_else(|| ply_err("header", "vertex missing property z"))?;
    let ir = find(v, &["red", "r"]);
    let ig = find(v, &["green", "g"]);
    let ib = find(v, &["blue", "b"]);
    let has_color = ir.is_some() && ig.is_some() && ib.is_some();

    let mut positions = Vec::with_capacity(v.count);
    let mut colors = Vec::with_capacity(v.count);

    let color_value = |ty: ScalarType, raw: f64| -> f64 {
        match ty {
            ScalarType::U8 => raw / 255.0,
            ScalarType::I8 => raw / 127.0,
            ScalarType::U16 => raw / 65535.0,
            ScalarType::I16 => raw / 32767.0,
            ScalarType::U32 => raw / 4294967295.0,
            ScalarType::I32 => raw / 2147483647.0,
            ScalarType::F32 | ScalarType::F64 => raw,
        }
    };

    match format {
        PlyFormat::Ascii => {
            for (ei, elem) in elements.iter().enumerate() {
                if ei != vertex_idx {
                    for _ in 0..elem.count {
                        read_line(&mut pos, &mut line_no)?;
                    }
                    continue;
                }
                for _ in 0..elem.count {
                    let line = read_line(&mut pos, &mut line_no)?;
                    let loc = format!("line {line_no}");
                    let vals: Vec<f64> = line
                        .split_whitespace()
                        .map(|t| t.parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| ply_err(loc.clone(), format!("bad number: {e}")))?;
                    if vals.len() != elem.properties.len() {
                        return Err(ply_err(
                            loc,
                            format!(
                                "expected {} values, got {}",
                                elem.properties.len(),
                                vals.len()
                            ),
                        ));
                    }
                    let p = Vector3::new(vals[ix], vals[iy], vals[iz]);
                    if !p.iter().all(|c| c.is_finite()) {
                        return Err(ply_err(loc, "non-finite coordinate"));
                    }
                    positions.push(p);
                    colors.push(read_color(
                        &vals,
                        elem,
                        has_color,
                        ir,
                        ig,
                        ib,
                        color_value,
                    ));
                }
            }
        }
        PlyFormat::BinaryLe => {
            for (ei, elem) in elements.iter().enumerate() {
                let row_size: usize = elem.properties.iter().map(|(t, _)| t.size()).sum();
                if ei != vertex_idx {
                    let skip = row_size * elem.count;
                    if pos + skip > bytes.len() {
                        return Err(ply_err(
                            format!("byte {pos}"),
                            format!("truncated element '{}'", elem.name),
                        ));
                    }
                    pos += skip;
                    continue;
                }
                for _ in 0..elem.count {
                    if pos + row_size > bytes.len() {
                        return Err(ply_err(format!("byte {pos}"), "truncated vertex data"));
                    }
                    let mut vals = Vec::with_capacity(elem.properties.len());
                    for (ty, _) in &elem.properties {
                        vals.push(read_scalar_le(bytes, &mut pos, *ty));
                    }
                    let p = Vector3::new(vals[ix], vals[iy], vals[iz]);
                    if !p.iter().all(|c| c.is_finite()) {
                        return Err(ply_err(
                            format!("byte {pos}"),
                            "non-finite coordinate",
                        ));
                    }
                    positions.push(p);
                    colors.push(read_color(
                        &vals,
                        elem,
                        has_color,
                        ir,
                        ig,
                        ib,
                        color_value,
                    ));
                }
            }
        }
    }

    if positions.is_empty() {
        return Err(ply_err("header", "point cloud has no vertices"));
    }
    Ok(PointCloud { positions, colors })
}

fn read_color(
    vals: &[f64],
    elem: &PlyElement,
    has_color: bool,
    ir: Option<usize>,
    ig: Option<usize>,
    ib: Option<usize>,
    color_value: impl Fn(ScalarType, f64) -> f64,
) -> Vector3<f64> {
    if has_color {
        let (ir, ig, ib) = (ir.unwrap(), ig.unwrap(), ib.unwrap());
        Vector3::new(
            color_value(elem.properties[ir].0, vals[ir]).clamp(0.0, 1.0),
            color_value(elem.properties[ig].0, vals[ig]).clamp(0.0, 1.0),
            color_value(elem.properties[ib].0, vals[ib]).clamp(0.0, 1.0),
        )
    } else {
        Vector3::repeat(0.5)
    }
}

fn read_scalar_le(bytes: &[u8], pos: &mut usize, ty: ScalarType) -> f64 {
    let p = *pos;
    *pos += ty.size();
    match ty {
        ScalarType::I8 => bytes[p] as i8 as f64,
        ScalarType::U8 => bytes[p] as f64,
        ScalarType::I16 => i16::from_le_bytes([bytes[p], bytes[p + 1]]) as f64,
        ScalarType::U16 => u16::from_le_bytes([bytes[p], bytes[p + 1]]) as f64,
        ScalarType::I32 => {
            i32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]) as f64
        }
        ScalarType::U32 => {
            u32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]) as f64
        }
        ScalarType::F32 => {
            f32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]) as f64
        }
        ScalarType::F64 => f64::from_le_bytes([
            bytes[p],
            bytes[p + 1],
            bytes[p + 2],
            bytes[p + 3],
            bytes[p + 4],
            bytes[p + 5],
            bytes[p + 6],
            bytes[p + 7],
        ]),
    }
}

/// Write a binary little-endian PLY with float positions and uchar colors.
pub fn write_point_cloud(pc: &PointCloud, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {}\n", pc.len()).as_bytes());
    out.extend_from_slice(
        b"property float x\nproperty float y\nproperty float z\n\
          property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
    );
    for (p, c) in pc.positions.iter().zip(pc.colors.iter()) {
        for k in 0..3 {
            out.extend_from_slice(&(p[k] as f32).to_le_bytes());
        }
        for k in 0..3 {
            out.push((c[k].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// scene directory

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Row-major world-to-camera rotation.
    pub r: [f64; 9],
    pub t: [f64; 3],
    #[serde(default)]
    pub test: bool,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: f64,
    pub image: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl CameraRecord {
    pub fn to_camera(&self) -> Camera {
        Camera {
            id: self.id,
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.r),
            translation: Vector3::new(self.t[0], self.t[1], self.t[2]),
        }
    }
}

/// One frame of one camera, loaded into memory.
#[derive(Debug, Clone)]
pub struct Frame {
    pub t: f64,
    pub image: ImageRgb,
    pub mask: Option<Mask>,
}

/// A fully loaded scene: cameras, frame sequences, and t=0 masks.
#[derive(Debug, Clone)]
pub struct LoadedScene {
    pub cameras: Vec<Camera>,
    pub is_test: Vec<bool>,
    pub frames: Vec<Vec<Frame>>,
    pub root: PathBuf,
}

impl LoadedScene {
    pub fn load(dir: &Path) -> Result<Self> {
        let json_path = dir.join("cameras.json");
        let bytes = read_file(&json_path)?;
        let records = parse_cameras_json(&bytes)?;

        let mut cameras = Vec::new();
        let mut is_test = Vec::new();
        let mut frames = Vec::new();
        for rec in &records {
            let cam = rec.to_camera();
            cam.validate()?;
            let mut cam_frames = Vec::new();
            let mut prev_t = f64::NEG_INFINITY;
            for fr in &rec.frames {
                if fr.t <= prev_t {
                    return Err(Error::CameraJson(format!(
                        "camera {}: frame times must be strictly increasing",
                        rec.id
                    )));
                }
                prev_t = fr.t;
                if fr.mask.is_some() && fr.t != 0.0 {
                    return Err(Error::CameraJson(format!(
                        "camera {}: mask supplied at t={} (only t=0 allowed)",
                        rec.id, fr.t
                    )));
                }
                let image = ImageRgb::load_png(&dir.join(&fr.image))?;
                let mask = match &fr.mask {
                    Some(m) => Some(load_mask(&dir.join(m), cam.width, cam.height)?),
                    None => None,
                };
                cam_frames.push(Frame {
                    t: fr.t,
                    image,
                    mask,
                });
            }
            cameras.push(cam);
            is_test.push(rec.test);
            frames.push(cam_frames);
        }
        Ok(LoadedScene {
            cameras,
            is_test,
            frames,
            root: dir.to_path_buf(),
        })
    }

    pub fn train_camera_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| !self.is_test[i]).collect()
    }

    pub fn test_camera_indices(&self) -> Vec<usize> {
        (0..self.cameras.len()).filter(|&i| self.is_test[i]).collect()
    }

    pub fn camera_by_id(&self, id: usize) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }
}

/// Parse and validate the cameras.json schema from raw bytes.
pub fn parse_cameras_json(bytes: &[u8]) -> Result<Vec<CameraRecord>> {
    let records: Vec<CameraRecord> =
        serde_json::from_slice(bytes).map_err(|e| Error::CameraJson(e.to_string()))?;
    if records.is_empty() {
        return Err(Error::CameraJson("no cameras".into()));
    }
    for rec in &records {
        rec.to_camera().validate()?;
    }
    Ok(records)
}
