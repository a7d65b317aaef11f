//! Synthetic scene-text samples, annotation parsers, and dataset storage.

pub mod dataset;
pub mod font;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::geometry::{is_simple, Point};

pub use dataset::{load_dataset, write_dataset, AnnotationFormat, DatasetManifest, ManifestEntry};
pub use font::{render_glyph, Bitmap};
pub use synth::{synthesize_dataset, synthesize_sample, GenConfig};

/// Recognizable symbols, in class-index order.
pub const ALPHABET: &str = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";

/// Marker for illegible instances in annotation files.
pub const DO_NOT_CARE: &str = "###";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextInstanceGt {
    pub polygon: Vec<Point>,
    pub transcription: String,
    pub legible: bool,
}

impl TextInstanceGt {
    pub fn illegible(polygon: Vec<Point>) -> Self {
        Self {
            polygon,
            transcription: String::new(),
            legible: false,
        }
    }
}

/// An 8-bit RGB image held as reals in `[0, 1]`, row-major `height x width x 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Snaps every value to the nearest `k / 255`.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        Self {
            width,
            height,
            data: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub instances: Vec<TextInstanceGt>,
    pub sample_id: String,
}

fn parse_coords(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            f.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("non-numeric coordinate `{}`", f.trim()),
            })
        })
        .collect()
}

fn transcription_of(raw: &str, polygon: Vec<Point>) -> TextInstanceGt {
    let text = raw.trim();
    if text == DO_NOT_CARE {
        TextInstanceGt::illegible(polygon)
    } else {
        TextInstanceGt {
            polygon,
            transcription: text.to_string(),
            legible: true,
        }
    }
}

/// Parses `x1,y1,x2,y2,x3,y3,x4,y4,transcription`; the transcription may itself
/// contain commas.
pub fn parse_icdar_quad(line: &str, line_no: usize) -> Result<TextInstanceGt> {
    let line = line.trim_start_matches('\u{feff}').trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() < 9 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 8 coordinates and a transcription, found {} fields", fields.len()),
        });
    }
    let c = parse_coords(&fields[..8], line_no)?;
    let polygon = c.chunks(2).map(|p| [p[0], p[1]]).collect();
    Ok(transcription_of(&fields[8..].join(","), polygon))
}

/// Parses `x1,y1,...,xn,yn,transcription` with `n >= 4` and a simple polygon.
pub fn parse_polygon_annotation(line: &str, line_no: usize) -> Result<TextInstanceGt> {
    let line = line.trim_start_matches('\u{feff}').trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = line.split(',').collect();
    let err = |message: String| Error::Parse { line: line_no, message };
    let (text, coords) = fields.split_last().ok_or_else(|| err("empty line".into()))?;
    if coords.len() % 2 != 0 {
        return Err(err(format!("odd coordinate count {}", coords.len())));
    }
    if coords.len() < 8 {
        return Err(err(format!("polygon needs at least 4 points, found {}", coords.len() / 2)));
    }
    let c = parse_coords(coords, line_no)?;
    let polygon: Vec<Point> = c.chunks(2).map(|p| [p[0], p[1]]).collect();
    if !is_simple(&polygon) {
        return Err(err("polygon is self-intersecting or degenerate".into()));
    }
    Ok(transcription_of(text, polygon))
}

/// Parses a whole annotation file; blank lines are skipped, every other line
/// must parse.
pub fn parse_annotations(text: &str, format: AnnotationFormat) -> Result<Vec<TextInstanceGt>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match format {
            AnnotationFormat::Quad => parse_icdar_quad(l, i + 1),
            AnnotationFormat::Polygon => parse_polygon_annotation(l, i + 1),
        })
        .collect()
}

/// Formats instances in the given annotation format, one per line.
pub fn format_annotations(instances: &[TextInstanceGt], format: AnnotationFormat) -> Result<String> {
    let mut s = String::new();
    for (i, inst) in instances.iter().enumerate() {
        if format == AnnotationFormat::Quad && inst.polygon.len() != 4 {
            return Err(Error::InvalidInput(format!(
                "instance {i} has {} vertices; quad format needs 4",
                inst.polygon.len()
            )));
        }
        let coords: Vec<String> = inst.polygon.iter().flat_map(|[x, y]| [x.to_string(), y.to_string()]).collect();
        let text = if inst.legible { inst.transcription.as_str() } else { DO_NOT_CARE };
        s.push_str(&coords.join(","));
        s.push(',');
        s.push_str(text);
        s.push('\n');
    }
    Ok(s)
}
