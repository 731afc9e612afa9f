//! Proposal directories and binary PGM (`P5`) files.
//!
//! A proposal directory holds `manifest.json`, one PGM mask per proposal
//! (nonzero pixels are foreground) and three raw little-endian `f32` blobs
//! for the response map, background mask and density map.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ProposalSet, Ranked, ScoreWeights};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scenegen::io::{f32_from_le, f32_le_bytes};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalManifest {
    pub height: usize,
    pub width: usize,
    pub response: String,
    pub background: String,
    pub density: String,
    pub proposals: Vec<String>,
    #[serde(flatten)]
    pub weights: ScoreWeights,
}

/// Decoded `P5` image: row-major samples and the declared maxval.
#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn header_fields(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::format("pgm header", "truncated"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    Ok((fields, i + 1))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Pgm> {
    let (f, offset) = header_fields(bytes, 4)?;
    if f[0] != "P5" {
        return Err(Error::format("pgm magic", format!("expected P5, got {:?}", f[0])));
    }
    let num = |name: &str, s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::format(name, format!("{s:?}: {e}")))
    };
    let (width, height, maxval) = (
        num("pgm width", &f[1])?,
        num("pgm height", &f[2])?,
        num("pgm maxval", &f[3])?,
    );
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format("pgm maxval", format!("{maxval} outside 1..=65535")));
    }
    let wide = maxval > 255;
    let expected = width * height * if wide { 2 } else { 1 };
    let raster = bytes.get(offset..).unwrap_or(&[]);
    if raster.len() != expected {
        return Err(Error::format(
            "pgm raster",
            format!("expected {expected} bytes, found {}", raster.len()),
        ));
    }
    let pixels = if wide {
        raster
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(pixels.len() + 20);
    write!(buf, "P5\n{width} {height}\n255\n").expect("write to vec");
    buf.extend_from_slice(pixels);
    buf
}

/// Reads a PGM as a `{0, 1}` mask of shape `[H, W]`.
pub fn read_mask(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let pgm = parse_pgm(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(format!("{}: {field}", path.display()), detail),
        other => other,
    })?;
    let data = pgm.pixels.iter().map(|&p| if p > 0 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![pgm.height, pgm.width], data)
}

/// Writes a `[H, W]` map as an 8-bit PGM scaled from its own min/max range;
/// returns that range.
pub fn write_normalized_pgm(path: &Path, map: &Tensor) -> Result<(f32, f32)> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let min = map.data().iter().copied().fold(f32::INFINITY, f32::min);
    let max = map.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if max > min { max - min } else { 1.0 };
    let pixels: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (((v - min) / span) * 255.0).round() as u8)
        .collect();
    fs::write(path, encode_pgm(w, h, &pixels)).map_err(|e| Error::io(path, e))?;
    Ok((min, max))
}

/// Writes a `{0, 1}` mask as a PGM with foreground 255.
pub fn write_mask(path: &Path, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let pixels: Vec<u8> = mask.data().iter().map(|&v| if v != 0.0 { 255 } else { 0 }).collect();
    fs::write(path, encode_pgm(w, h, &pixels)).map_err(|e| Error::io(path, e))
}

fn read_blob(dir: &Path, name: &str, field: &str, h: usize, w: usize) -> Result<Tensor> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if bytes.len() != 4 * h * w {
        return Err(Error::format(
            field,
            format!(
                "{}: expected {} bytes, found {}",
                path.display(),
                4 * h * w,
                bytes.len()
            ),
        ));
    }
    Tensor::new(vec![h, w], f32_from_le(&bytes))
}

pub fn write_blob(path: &Path, map: &Tensor) -> Result<()> {
    fs::write(path, f32_le_bytes(map.data())).map_err(|e| Error::io(path, e))
}

pub fn load_proposal_set(dir: &Path) -> Result<(ProposalManifest, ProposalSet)> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: ProposalManifest = serde_json::from_slice(&text)?;
    let (h, w) = (m.height, m.width);
    let mut proposals = Vec::with_capacity(m.proposals.len());
    for name in &m.proposals {
        let mask = read_mask(&dir.join(name))?;
        if mask.shape() != [h, w] {
            return Err(Error::format(
                format!("proposals[{name}]"),
                format!("shape {:?}, manifest says [{h}, {w}]", mask.shape()),
            ));
        }
        proposals.push(mask);
    }
    let set = ProposalSet {
        proposals,
        response: read_blob(dir, &m.response, "response", h, w)?,
        background: read_blob(dir, &m.background, "background", h, w)?,
        density: read_blob(dir, &m.density, "density", h, w)?,
        weights: m.weights,
    };
    Ok((m, set))
}

/// `rank,proposal,file,score`, best first.
pub fn ranking_csv(ranked: &[Ranked], files: &[String]) -> String {
    let mut out = String::from("rank,proposal,file,score\n");
    for (rank, r) in ranked.iter().enumerate() {
        let file = files.get(r.index).map_or("", String::as_str);
        out += &format!("{},{},{},{:.9}\n", rank + 1, r.index, file, r.score);
    }
    out
}
