//! PLY reader and writer for the vertex element.
//!
//! Reads `ascii 1.0` and `binary_little_endian 1.0`. Elements other than
//! `vertex` are skipped, as are vertex properties other than positions and
//! colors.

use std::path::Path;

use super::PointCloud;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PlyError {
    #[error("not a PLY file")]
    BadMagic,
    #[error("header is not terminated by end_header")]
    UnterminatedHeader,
    #[error("header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("unsupported format `{0}`")]
    UnsupportedFormat(String),
    #[error("no format line in header")]
    MissingFormat,
    #[error("no vertex element in header")]
    MissingVertex,
    #[error("vertex property `{0}` missing")]
    MissingProperty(&'static str),
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("property `{name}` has unsupported type `{ty}`")]
    PropertyType { name: String, ty: String },
    #[error("file declares zero vertices")]
    ZeroVertices,
    #[error("payload truncated in element `{element}` at item {item}")]
    Truncated { element: String, item: usize },
    #[error("bad value in element `{element}` at item {item}: {msg}")]
    Value {
        element: String,
        item: usize,
        msg: String,
    },
}

type PResult<T> = std::result::Result<T, PlyError>;

const MAX_HEADER: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
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
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => f64::from(b[0] as i8),
            Scalar::U8 => f64::from(b[0]),
            Scalar::I16 => f64::from(i16::from_le_bytes([b[0], b[1]])),
            Scalar::U16 => f64::from(u16::from_le_bytes([b[0], b[1]])),
            Scalar::I32 => f64::from(i32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::U32 => f64::from(u32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F32 => f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])),
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body: usize,
}

fn header_err(line: usize, msg: impl Into<String>) -> PlyError {
    PlyError::Header {
        line,
        msg: msg.into(),
    }
}

fn parse_header(bytes: &[u8]) -> PResult<Header> {
    if !bytes.starts_with(b"ply\n") && !bytes.starts_with(b"ply\r\n") {
        return Err(PlyError::BadMagic);
    }
    let search = &bytes[..bytes.len().min(MAX_HEADER)];
    let marker = b"end_header";
    let end = search
        .windows(marker.len())
        .enumerate()
        .find(|&(i, w)| w == marker && (i == 0 || search[i - 1] == b'\n'))
        .map(|(i, _)| i)
        .ok_or(PlyError::UnterminatedHeader)?;
    let mut body = end + marker.len();
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(PlyError::UnterminatedHeader);
    }
    body += 1;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| header_err(0, "header is not UTF-8"))?;

    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for (ln, raw) in text.lines().enumerate().skip(1) {
        let line = ln + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", fmt, ver] => {
                if format.is_some() {
                    return Err(PlyError::Duplicate("format line".into()));
                }
                if *ver != "1.0" {
                    return Err(PlyError::UnsupportedFormat(format!("{fmt} {ver}")));
                }
                format = Some(match *fmt {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(PlyError::UnsupportedFormat(other.to_string())),
                });
            }
            ["element", name, count] => {
                if elements.iter().any(|e| e.name == *name) {
                    return Err(PlyError::Duplicate(format!("element `{name}`")));
                }
                let count = count
                    .parse()
                    .map_err(|_| header_err(line, format!("bad element count `{count}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line, "property before any element"))?;
                let bad = |t: &str| header_err(line, format!("unknown type `{t}`"));
                let count = Scalar::parse(count).ok_or_else(|| bad(count))?;
                let item = Scalar::parse(item).ok_or_else(|| bad(item))?;
                if count.is_float() {
                    return Err(header_err(line, "list count must be an integer type"));
                }
                if el.name == "vertex" && ["x", "y", "z", "red", "green", "blue"].contains(name) {
                    return Err(PlyError::PropertyType {
                        name: name.to_string(),
                        ty: "list".into(),
                    });
                }
                el.props.push(Property::List { count, item });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| header_err(line, "property before any element"))?;
                let ty = Scalar::parse(ty).ok_or_else(|| header_err(line, format!("unknown type `{ty}`")))?;
                if el
                    .props
                    .iter()
                    .any(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
                {
                    return Err(PlyError::Duplicate(format!("property `{name}` of `{}`", el.name)));
                }
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => return Err(header_err(line, format!("unrecognized `{raw}`"))),
        }
    }
    Ok(Header {
        format: format.ok_or(PlyError::MissingFormat)?,
        elements,
        body,
    })
}

/// Column positions of the properties we read from the vertex element.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

fn vertex_layout(el: &Element) -> PResult<VertexLayout> {
    let find = |key: &'static str| {
        el.props.iter().enumerate().find_map(|(i, p)| match p {
            Property::Scalar { name, ty } if name == key => Some((i, *ty)),
            _ => None,
        })
    };
    let mut xyz = [0; 3];
    for (k, key) in ["x", "y", "z"].into_iter().enumerate() {
        let (i, ty) = find(key).ok_or(PlyError::MissingProperty(key))?;
        if !ty.is_float() {
            return Err(PlyError::PropertyType {
                name: key.into(),
                ty: format!("{ty:?}").to_lowercase(),
            });
        }
        xyz[k] = i;
    }
    let channels: Vec<_> = ["red", "green", "blue"].into_iter().map(|k| (k, find(k))).collect();
    let rgb = if channels.iter().all(|(_, c)| c.is_none()) {
        None
    } else {
        let mut rgb = [0; 3];
        for (k, (key, c)) in channels.into_iter().enumerate() {
            let (i, ty) = c.ok_or(PlyError::MissingProperty(key))?;
            if ty != Scalar::U8 {
                return Err(PlyError::PropertyType {
                    name: key.into(),
                    ty: format!("{ty:?}").to_lowercase(),
                });
            }
            rgb[k] = i;
        }
        Some(rgb)
    };
    Ok(VertexLayout { xyz, rgb })
}

/// Values of one element item; list properties contribute NaN placeholders.
type Row = Vec<f64>;

struct Body<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: PlyFormat,
}

impl<'a> Body<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len())?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Some(s)
    }

    fn next_line(&mut self) -> Option<&'a [u8]> {
        // skip blank lines
        loop {
            if self.pos >= self.bytes.len() {
                return None;
            }
            let rest = &self.bytes[self.pos..];
            let len = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
            self.pos += (len + 1).min(rest.len());
            let line = &rest[..len];
            if line.iter().any(|b| !b.is_ascii_whitespace()) {
                return Some(line);
            }
        }
    }

    fn read_item(&mut self, el: &Element, item: usize, row: &mut Row) -> PResult<()> {
        row.clear();
        let truncated = || PlyError::Truncated {
            element: el.name.clone(),
            item,
        };
        let value_err = |msg: String| PlyError::Value {
            element: el.name.clone(),
            item,
            msg,
        };
        match self.format {
            PlyFormat::BinaryLittleEndian => {
                for p in &el.props {
                    match p {
                        Property::Scalar { ty, .. } => {
                            let b = self.take(ty.size()).ok_or_else(truncated)?;
                            row.push(ty.read_le(b));
                        }
                        Property::List { count, item: it } => {
                            let b = self.take(count.size()).ok_or_else(truncated)?;
                            let n = count.read_le(b);
                            if n < 0.0 {
                                return Err(value_err(format!("negative list length {n}")));
                            }
                            let skip = (n as usize).checked_mul(it.size()).ok_or_else(truncated)?;
                            self.take(skip).ok_or_else(truncated)?;
                            row.push(f64::NAN);
                        }
                    }
                }
            }
            PlyFormat::Ascii => {
                let line = self.next_line().ok_or_else(truncated)?;
                let line = std::str::from_utf8(line).map_err(|_| value_err("line is not UTF-8".into()))?;
                let mut toks = line.split_whitespace();
                let mut next = |what: &str| -> PResult<f64> {
                    let t = toks.next().ok_or_else(|| value_err(format!("missing {what}")))?;
                    t.parse::<f64>()
                        .map_err(|_| value_err(format!("`{t}` is not a number")))
                };
                for p in &el.props {
                    match p {
                        Property::Scalar { name, .. } => {
                            let v = next(name)?;
                            row.push(v);
                        }
                        Property::List { .. } => {
                            let n = next("list length")?;
                            if n < 0.0 || n.fract() != 0.0 || n > line.len() as f64 {
                                return Err(value_err(format!("bad list length {n}")));
                            }
                            for _ in 0..n as usize {
                                next("list entry")?;
                            }
                            row.push(f64::NAN);
                        }
                    }
                }
                if toks.next().is_some() {
                    return Err(value_err("trailing values".into()));
                }
            }
        }
        Ok(())
    }
}

/// Parses a PLY byte string. Never panics; malformed input maps to a
/// [`PlyError`].
pub fn parse_ply(bytes: &[u8]) -> PResult<PointCloud> {
    let header = parse_header(bytes)?;
    let vi = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or(PlyError::MissingVertex)?;
    let vertex = &header.elements[vi];
    let layout = vertex_layout(vertex)?;
    if vertex.count == 0 {
        return Err(PlyError::ZeroVertices);
    }
    for el in header.elements.iter().filter(|e| e.name != "vertex") {
        log::warn!("ignoring PLY element `{}` ({} items)", el.name, el.count);
    }

    let mut body = Body {
        bytes,
        pos: header.body,
        format: header.format,
    };
    let mut row = Row::new();
    for el in &header.elements[..vi] {
        for item in 0..el.count {
            body.read_item(el, item, &mut row)?;
        }
    }
    // every vertex occupies at least one byte, so this bounds the allocation
    let cap = vertex.count.min(bytes.len().saturating_sub(body.pos));
    let mut positions = Vec::with_capacity(cap);
    let mut colors = layout.rgb.map(|_| Vec::with_capacity(cap));
    for item in 0..vertex.count {
        body.read_item(vertex, item, &mut row)?;
        let p = layout.xyz.map(|i| row[i]);
        if p.iter().any(|v| !v.is_finite()) {
            return Err(PlyError::Value {
                element: "vertex".into(),
                item,
                msg: "non-finite position".into(),
            });
        }
        positions.push(p);
        if let (Some(rgb), Some(colors)) = (layout.rgb, colors.as_mut()) {
            let mut c = [0u8; 3];
            for (k, &i) in rgb.iter().enumerate() {
                let v = row[i];
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(PlyError::Value {
                        element: "vertex".into(),
                        item,
                        msg: format!("color value {v} outside 0..=255"),
                    });
                }
                c[k] = v as u8;
            }
            colors.push(c);
        }
    }
    Ok(PointCloud::new(positions, colors).expect("validated above"))
}

/// Serializes positions as `double` and colors as `uchar`.
pub fn write_ply(pc: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\n",
        pc.len()
    );
    if pc.colors().is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    let mut out = out.into_bytes();
    for (i, p) in pc.positions().iter().enumerate() {
        let c = pc.colors().map(|c| c[i]);
        match format {
            PlyFormat::Ascii => {
                // `{}` on f64 prints the shortest string that round-trips
                let mut line = format!("{} {} {}", p[0], p[1], p[2]);
                if let Some(c) = c {
                    line.push_str(&format!(" {} {} {}", c[0], c[1], c[2]));
                }
                line.push('\n');
                out.extend_from_slice(line.as_bytes());
            }
            PlyFormat::BinaryLittleEndian => {
                for v in p {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                if let Some(c) = c {
                    out.extend_from_slice(&c);
                }
            }
        }
    }
    out
}

pub fn read_ply(path: &Path) -> crate::Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(parse_ply(&bytes)?)
}

pub fn save_ply(path: &Path, pc: &PointCloud, format: PlyFormat) -> crate::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| crate::Error::io(parent, e))?;
    }
    std::fs::write(path, write_ply(pc, format)).map_err(|e| crate::Error::io(path, e))
}
