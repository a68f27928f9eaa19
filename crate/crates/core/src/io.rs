//! Small readers/writers for the interchange formats: PPM/PGM (8-bit), PFM
//! (float, 1 or 3 channels) and binary little-endian PLY.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, Grid, ImageRgb, ScalarMap};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(BufWriter::new(f))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    Ok(BufReader::new(f))
}

fn wrap(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads whitespace-separated header tokens of a netpbm/PFM file, skipping
/// `#` comments. Consumes exactly one whitespace byte after the last token.
fn header_tokens(r: &mut impl BufRead, n: usize, format: &'static str) -> Result<Vec<String>> {
    let mut tokens = Vec::with_capacity(n);
    let mut cur = String::new();
    let mut byte = [0u8; 1];
    while tokens.len() < n {
        if r.read(&mut byte).map_err(|e| Error::io(format, e))? == 0 {
            return Err(Error::format(format, "truncated header"));
        }
        let c = byte[0] as char;
        if c == '#' && cur.is_empty() {
            let mut skip = String::new();
            r.read_line(&mut skip).map_err(|e| Error::io(format, e))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(c);
        }
    }
    Ok(tokens)
}

pub fn write_ppm(path: &Path, image: &ImageRgb) -> Result<()> {
    let mut w = create(path)?;
    let err = wrap(path);
    write!(w, "P6\n{} {}\n255\n", image.width, image.height).map_err(&err)?;
    let bytes: Vec<u8> = image.data.iter().flat_map(|c| c.map(to_u8)).collect();
    w.write_all(&bytes).map_err(&err)?;
    w.flush().map_err(&err)
}

pub fn read_ppm(path: &Path) -> Result<ImageRgb> {
    let mut r = open(path)?;
    let t = header_tokens(&mut r, 4, "PPM")?;
    if t[0] != "P6" || t[3] != "255" {
        return Err(Error::format("PPM", format!("unsupported header {t:?}")));
    }
    let (w, h) = parse_dims(&t[1], &t[2], "PPM")?;
    let mut bytes = vec![0u8; w * h * 3];
    r.read_exact(&mut bytes).map_err(wrap(path))?;
    let data = bytes
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Grid::from_vec(w, h, data)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let mut w = create(path)?;
    let err = wrap(path);
    write!(w, "P5\n{width} {height}\n255\n").map_err(&err)?;
    w.write_all(values).map_err(&err)?;
    w.flush().map_err(&err)
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    let mut r = open(path)?;
    let t = header_tokens(&mut r, 4, "PGM")?;
    if t[0] != "P5" || t[3] != "255" {
        return Err(Error::format("PGM", format!("unsupported header {t:?}")));
    }
    let (w, h) = parse_dims(&t[1], &t[2], "PGM")?;
    let mut bytes = vec![0u8; w * h];
    r.read_exact(&mut bytes).map_err(wrap(path))?;
    Grid::from_vec(w, h, bytes)
}

fn parse_dims(w: &str, h: &str, format: &'static str) -> Result<(usize, usize)> {
    let w = w.parse().map_err(|_| Error::format(format, format!("bad width {w}")))?;
    let h = h
        .parse()
        .map_err(|_| Error::format(format, format!("bad height {h}")))?;
    Ok((w, h))
}

/// Float map with 1 or 3 channels, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn write_pfm(path: &Path, pfm: &Pfm) -> Result<()> {
    let magic = match pfm.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::format("PFM", format!("{c} channels"))),
    };
    let mut w = create(path)?;
    let err = wrap(path);
    write!(w, "{magic}\n{} {}\n-1.0\n", pfm.width, pfm.height).map_err(&err)?;
    let row = pfm.width * pfm.channels;
    // PFM stores the bottom row first
    for y in (0..pfm.height).rev() {
        for v in &pfm.data[y * row..(y + 1) * row] {
            w.write_f32::<LittleEndian>(*v).map_err(&err)?;
        }
    }
    w.flush().map_err(&err)
}

pub fn read_pfm(path: &Path) -> Result<Pfm> {
    let mut r = open(path)?;
    let t = header_tokens(&mut r, 4, "PFM")?;
    let channels = match t[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::format("PFM", format!("bad magic {m}"))),
    };
    let (width, height) = parse_dims(&t[1], &t[2], "PFM")?;
    let scale: f64 = t[3]
        .parse()
        .map_err(|_| Error::format("PFM", format!("bad scale {}", t[3])))?;
    let row = width * channels;
    let mut data = vec![0f32; row * height];
    for y in (0..height).rev() {
        for v in &mut data[y * row..(y + 1) * row] {
            *v = if scale < 0.0 {
                r.read_f32::<LittleEndian>()
            } else {
                r.read_f32::<byteorder::BigEndian>()
            }
            .map_err(wrap(path))?;
        }
    }
    Ok(Pfm {
        width,
        height,
        channels,
        data,
    })
}

pub fn scalar_to_pfm(map: &ScalarMap) -> Pfm {
    Pfm {
        width: map.width,
        height: map.height,
        channels: 1,
        data: map.data.iter().map(|&v| v as f32).collect(),
    }
}

pub fn rgb_to_pfm(image: &ImageRgb) -> Pfm {
    Pfm {
        width: image.width,
        height: image.height,
        channels: 3,
        data: image.data.iter().flat_map(|c| c.map(|v| v as f32)).collect(),
    }
}

/// Depth map as PFM; invalid pixels are written as 0.
pub fn depth_to_pfm(depth: &DepthMap) -> Pfm {
    Pfm {
        width: depth.width,
        height: depth.height,
        channels: 1,
        data: depth
            .values
            .iter()
            .zip(&depth.valid)
            .map(|(&v, &ok)| if ok { v as f32 } else { 0.0 })
            .collect(),
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_pfm(path, &depth_to_pfm(depth))
}

/// Reads a single-channel PFM as a depth map (non-positive or non-finite values are invalid).
pub fn read_depth(path: &Path) -> Result<DepthMap> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(Error::format("PFM", "expected a single-channel depth map"));
    }
    DepthMap::from_values(pfm.width, pfm.height, pfm.data.iter().map(|&v| v as f64).collect())
}

pub fn mask_to_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_pgm(path, width, height, &bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            PlyScalar::I8 => "char",
            PlyScalar::U8 => "uchar",
            PlyScalar::I16 => "short",
            PlyScalar::U16 => "ushort",
            PlyScalar::I32 => "int",
            PlyScalar::U32 => "uint",
            PlyScalar::F32 => "float",
            PlyScalar::F64 => "double",
        }
    }

    fn read(self, r: &mut impl Read) -> std::io::Result<f64> {
        Ok(match self {
            PlyScalar::I8 => r.read_i8()? as f64,
            PlyScalar::U8 => r.read_u8()? as f64,
            PlyScalar::I16 => r.read_i16::<LittleEndian>()? as f64,
            PlyScalar::U16 => r.read_u16::<LittleEndian>()? as f64,
            PlyScalar::I32 => r.read_i32::<LittleEndian>()? as f64,
            PlyScalar::U32 => r.read_u32::<LittleEndian>()? as f64,
            PlyScalar::F32 => r.read_f32::<LittleEndian>()? as f64,
            PlyScalar::F64 => r.read_f64::<LittleEndian>()?,
        })
    }

    fn write(self, w: &mut impl Write, v: f64) -> std::io::Result<()> {
        match self {
            PlyScalar::I8 => w.write_i8(v as i8),
            PlyScalar::U8 => w.write_u8(v as u8),
            PlyScalar::I16 => w.write_i16::<LittleEndian>(v as i16),
            PlyScalar::U16 => w.write_u16::<LittleEndian>(v as u16),
            PlyScalar::I32 => w.write_i32::<LittleEndian>(v as i32),
            PlyScalar::U32 => w.write_u32::<LittleEndian>(v as u32),
            PlyScalar::F32 => w.write_f32::<LittleEndian>(v as f32),
            PlyScalar::F64 => w.write_f64::<LittleEndian>(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlyProperty {
    Scalar(String, PlyScalar),
    List(String, PlyScalar, PlyScalar),
}

impl PlyProperty {
    pub fn name(&self) -> &str {
        match self {
            PlyProperty::Scalar(n, _) | PlyProperty::List(n, _, _) => n,
        }
    }
}

/// One PLY element with its rows. Scalar properties occupy one slot of a
/// row; list properties are stored in `lists` in property order.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyElement {
    pub name: String,
    pub properties: Vec<PlyProperty>,
    pub rows: Vec<Vec<f64>>,
    pub lists: Vec<Vec<Vec<f64>>>,
}

impl PlyElement {
    pub fn scalars(name: &str, props: &[(&str, PlyScalar)]) -> Self {
        PlyElement {
            name: name.into(),
            properties: props
                .iter()
                .map(|(n, t)| PlyProperty::Scalar((*n).into(), *t))
                .collect(),
            rows: Vec::new(),
            lists: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties
            .iter()
            .filter(|p| matches!(p, PlyProperty::Scalar(..)))
            .position(|p| p.name() == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len().max(self.lists.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn write_ply(path: &Path, elements: &[PlyElement]) -> Result<()> {
    let mut w = create(path)?;
    let err = wrap(path);
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    for e in elements {
        header.push_str(&format!("element {} {}\n", e.name, e.len()));
        for p in &e.properties {
            match p {
                PlyProperty::Scalar(n, t) => header.push_str(&format!("property {} {n}\n", t.name())),
                PlyProperty::List(n, c, t) => {
                    header.push_str(&format!("property list {} {} {n}\n", c.name(), t.name()))
                }
            }
        }
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes()).map_err(&err)?;
    for e in elements {
        for i in 0..e.len() {
            let (mut s, mut l) = (0, 0);
            for p in &e.properties {
                match p {
                    PlyProperty::Scalar(_, t) => {
                        t.write(&mut w, e.rows[i][s]).map_err(&err)?;
                        s += 1;
                    }
                    PlyProperty::List(_, c, t) => {
                        let list = &e.lists[i][l];
                        c.write(&mut w, list.len() as f64).map_err(&err)?;
                        for &v in list {
                            t.write(&mut w, v).map_err(&err)?;
                        }
                        l += 1;
                    }
                }
            }
        }
    }
    w.flush().map_err(&err)
}

pub fn read_ply(path: &Path) -> Result<Vec<PlyElement>> {
    let mut r = open(path)?;
    let err = wrap(path);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line).map_err(&err)? == 0 {
            return Err(Error::format("PLY", "truncated header"));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut r)? != "ply" {
        return Err(Error::format("PLY", "missing magic"));
    }
    let mut elements: Vec<(PlyElement, usize)> = Vec::new();
    loop {
        let l = next_line(&mut r)?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "binary_little_endian", _] => {}
            ["format", f, _] => return Err(Error::format("PLY", format!("unsupported format {f}"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::format("PLY", format!("bad count {count}")))?;
                elements.push((
                    PlyElement {
                        name: (*name).into(),
                        properties: Vec::new(),
                        rows: Vec::new(),
                        lists: Vec::new(),
                    },
                    count,
                ));
            }
            ["property", "list", c, t, name] => {
                let (c, t) = PlyScalar::parse(c)
                    .zip(PlyScalar::parse(t))
                    .ok_or_else(|| Error::format("PLY", format!("bad list types in {l}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format("PLY", "property before element"))?
                    .0
                    .properties
                    .push(PlyProperty::List((*name).into(), c, t));
            }
            ["property", t, name] => {
                let t = PlyScalar::parse(t).ok_or_else(|| Error::format("PLY", format!("bad type {t}")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| Error::format("PLY", "property before element"))?
                    .0
                    .properties
                    .push(PlyProperty::Scalar((*name).into(), t));
            }
            _ => return Err(Error::format("PLY", format!("unrecognized header line {l:?}"))),
        }
    }
    let err = wrap(path);
    let mut out = Vec::with_capacity(elements.len());
    for (mut e, count) in elements {
        let has_lists = e.properties.iter().any(|p| matches!(p, PlyProperty::List(..)));
        for _ in 0..count {
            let mut row = Vec::new();
            let mut lists = Vec::new();
            for p in &e.properties {
                match p {
                    PlyProperty::Scalar(_, t) => row.push(t.read(&mut r).map_err(&err)?),
                    PlyProperty::List(_, c, t) => {
                        let n = c.read(&mut r).map_err(&err)? as usize;
                        let mut list = Vec::with_capacity(n);
                        for _ in 0..n {
                            list.push(t.read(&mut r).map_err(&err)?);
                        }
                        lists.push(list);
                    }
                }
            }
            e.rows.push(row);
            if has_lists {
                e.lists.push(lists);
            }
        }
        out.push(e);
    }
    Ok(out)
}

/// Colored point cloud as `x y z` floats plus `red green blue` bytes.
pub fn write_point_cloud(path: &Path, positions: &[crate::geometry::Vec3], colors: &[[f64; 3]]) -> Result<()> {
    let mut e = PlyElement::scalars(
        "vertex",
        &[
            ("x", PlyScalar::F32),
            ("y", PlyScalar::F32),
            ("z", PlyScalar::F32),
            ("red", PlyScalar::U8),
            ("green", PlyScalar::U8),
            ("blue", PlyScalar::U8),
        ],
    );
    e.rows = positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = colors.get(i).copied().unwrap_or([0.5; 3]);
            vec![
                p.x,
                p.y,
                p.z,
                to_u8(c[0]) as f64,
                to_u8(c[1]) as f64,
                to_u8(c[2]) as f64,
            ]
        })
        .collect();
    write_ply(path, &[e])
}

/// Reads the `vertex` element's positions (and colors when present).
pub fn read_point_cloud(path: &Path) -> Result<(Vec<crate::geometry::Vec3>, Vec<[f64; 3]>)> {
    let elements = read_ply(path)?;
    let v = elements
        .iter()
        .find(|e| e.name == "vertex")
        .ok_or_else(|| Error::format("PLY", "no vertex element"))?;
    let col = |n: &str| v.column(n).ok_or_else(|| Error::format("PLY", format!("missing {n}")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let rgb = (v.column("red"), v.column("green"), v.column("blue"));
    let mut pos = Vec::with_capacity(v.rows.len());
    let mut colors = Vec::with_capacity(v.rows.len());
    for row in &v.rows {
        pos.push(crate::geometry::Vec3::new(row[x], row[y], row[z]));
        if let (Some(r), Some(g), Some(b)) = rgb {
            colors.push([row[r] / 255.0, row[g] / 255.0, row[b] / 255.0]);
        }
    }
    Ok((pos, colors))
}
