use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ply_rs::parser::Parser;
use ply_rs::ply::{
    Addable, DefaultElement, ElementDef, Encoding, Ply, Property, PropertyDef, PropertyType,
    ScalarType,
};
use ply_rs::writer::Writer;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f64; 3]>,
    /// RGB in [0, 1].
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn from_positions(positions: Vec<[f64; 3]>) -> Self {
        Self {
            positions,
            colors: None,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        match (&mut self.colors, &other.colors) {
            (Some(a), Some(b)) => a.extend_from_slice(b),
            (None, _) if self.positions.is_empty() => self.colors = other.colors.clone(),
            _ => self.colors = None,
        }
        self.positions.extend_from_slice(&other.positions);
    }
}

fn scalar(e: &DefaultElement, key: &str) -> Option<f64> {
    match e.get(key)? {
        Property::Float(v) => Some(*v as f64),
        Property::Double(v) => Some(*v),
        Property::UChar(v) => Some(*v as f64),
        Property::Char(v) => Some(*v as f64),
        Property::UShort(v) => Some(*v as f64),
        Property::Short(v) => Some(*v as f64),
        Property::UInt(v) => Some(*v as f64),
        Property::Int(v) => Some(*v as f64),
        _ => None,
    }
}

/// Reads the `vertex` element of an ASCII or binary PLY file: `x y z` and,
/// when present, `red green blue` (8-bit or float in [0, 1]).
pub fn read_ply(path: &Path) -> Result<PointCloud> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let ply = Parser::<DefaultElement>::new()
        .read_ply(&mut BufReader::new(file))
        .map_err(|e| Error::format(path, e.to_string()))?;
    let Some(vertices) = ply.payload.get("vertex") else {
        return Ok(PointCloud::default());
    };
    let byte_colors = ply
        .header
        .elements
        .get("vertex")
        .and_then(|d| d.properties.get("red"))
        .is_some_and(|p| p.data_type == PropertyType::Scalar(ScalarType::UChar));
    let mut cloud = PointCloud::default();
    let mut colors = Vec::new();
    for (i, v) in vertices.iter().enumerate() {
        let coord = |k: &str| {
            scalar(v, k)
                .ok_or_else(|| Error::format(path, format!("vertex {i} lacks property {k}")))
        };
        let p = [coord("x")?, coord("y")?, coord("z")?];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(Error::format(path, format!("vertex {i} is not finite")));
        }
        cloud.positions.push(p);
        if let (Some(r), Some(g), Some(b)) =
            (scalar(v, "red"), scalar(v, "green"), scalar(v, "blue"))
        {
            let s = if byte_colors { 1.0 / 255.0 } else { 1.0 };
            colors.push([r * s, g * s, b * s]);
        }
    }
    if !colors.is_empty() {
        if colors.len() != cloud.positions.len() {
            return Err(Error::format(path, "colour present on only some vertices"));
        }
        cloud.colors = Some(colors);
    }
    Ok(cloud)
}

/// Writes binary little-endian PLY with f32 coordinates and, if present,
/// 8-bit colours.
pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut ply = Ply::<DefaultElement>::new();
    ply.header.encoding = Encoding::BinaryLittleEndian;
    let mut vertex = ElementDef::new("vertex".into());
    for k in ["x", "y", "z"] {
        vertex.properties.add(PropertyDef::new(
            k.into(),
            PropertyType::Scalar(ScalarType::Float),
        ));
    }
    if cloud.colors.is_some() {
        for k in ["red", "green", "blue"] {
            vertex.properties.add(PropertyDef::new(
                k.into(),
                PropertyType::Scalar(ScalarType::UChar),
            ));
        }
    }
    ply.header.elements.add(vertex);
    let mut rows = Vec::with_capacity(cloud.len());
    for (i, p) in cloud.positions.iter().enumerate() {
        let mut e = DefaultElement::new();
        e.insert("x".into(), Property::Float(p[0] as f32));
        e.insert("y".into(), Property::Float(p[1] as f32));
        e.insert("z".into(), Property::Float(p[2] as f32));
        if let Some(c) = &cloud.colors {
            for (k, v) in ["red", "green", "blue"].iter().zip(c[i]) {
                e.insert(
                    (*k).into(),
                    Property::UChar((v.clamp(0.0, 1.0) * 255.0).round() as u8),
                );
            }
        }
        rows.push(e);
    }
    ply.payload.insert("vertex".into(), rows);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Writer::new()
        .write_ply(&mut BufWriter::new(file), &mut ply)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(())
}
