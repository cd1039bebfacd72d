use std::io::Write;
use std::path::Path;

use super::grid::OccupancyGrid;
use crate::error::Result;

/// Half-width of the probability band around 0.5 exported as unknown.
pub const UNKNOWN_BAND: f64 = 0.1;

pub const PGM_FREE: u8 = 255;
pub const PGM_OCCUPIED: u8 = 0;
pub const PGM_UNKNOWN: u8 = 127;

pub fn pgm_value(p: f64) -> u8 {
    if p > 0.5 + UNKNOWN_BAND {
        PGM_OCCUPIED
    } else if p < 0.5 - UNKNOWN_BAND {
        PGM_FREE
    } else {
        PGM_UNKNOWN
    }
}

/// Binary P5 image, one byte per cell, first row at maximum y.
pub fn encode_pgm(grid: &OccupancyGrid) -> Vec<u8> {
    let (w, h) = (grid.width(), grid.height());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(w * h);
    for j in (0..h).rev() {
        for i in 0..w {
            out.push(pgm_value(grid.cell_probability(i, j)));
        }
    }
    out
}

/// Sidecar text describing how image pixels map to world coordinates.
pub fn map_header(grid: &OccupancyGrid, image: &str) -> String {
    let o = grid.origin();
    format!(
        "image: {image}\nresolution: {}\norigin: [{}, {}, 0.0]\nwidth: {}\nheight: {}\noccupied_thresh: {}\nfree_thresh: {}\n",
        grid.resolution(),
        o.x,
        o.y,
        grid.width(),
        grid.height(),
        0.5 + UNKNOWN_BAND,
        0.5 - UNKNOWN_BAND
    )
}

/// Writes `<stem>.pgm` and `<stem>.yaml` into `dir`.
pub fn write_map(grid: &OccupancyGrid, dir: &Path, stem: &str) -> Result<()> {
    let image = format!("{stem}.pgm");
    std::fs::File::create(dir.join(&image))?.write_all(&encode_pgm(grid))?;
    std::fs::write(dir.join(format!("{stem}.yaml")), map_header(grid, &image))?;
    Ok(())
}

/// Parsed P5 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Reads back a P5 image written by [`encode_pgm`].
pub fn decode_pgm(bytes: &[u8]) -> Option<Pgm> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return None;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?.to_string());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return None;
    }
    let width: usize = fields[1].parse().ok()?;
    let height: usize = fields[2].parse().ok()?;
    let pixels = bytes.get(pos + 1..)?.to_vec();
    (pixels.len() == width * height).then_some(Pgm { width, height, pixels })
}
