//! Binary PGM (P5) emission for heatmaps, plus a reader for tests.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use cineseg_core::{Grid, Mask};

/// Quantize [0,1] to a byte with half-up rounding: round(0.5 * 255) = 128.
pub fn quantize(v: f64) -> u8 {
    let scaled = (v * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

/// Write a grid as a binary P5 PGM with maxval 255.
pub fn write_pgm(grid: &Grid, path: &Path) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", grid.width(), grid.height()).into_bytes();
    bytes.extend(grid.values().iter().map(|&v| quantize(v)));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Parse a binary P5 PGM written by [`write_pgm`].
#[cfg_attr(not(test), allow(dead_code))]
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .map(|(i, _)| i)
        .nth(2)
        .context("short PGM header")?;
    let header = std::str::from_utf8(&bytes[..header_end]).context("non-utf8 PGM header")?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        bail!("{} is not a binary PGM", path.display());
    }
    let dims: Vec<usize> = lines
        .next()
        .context("missing dimensions")?
        .split_whitespace()
        .map(|t| t.parse())
        .collect::<std::result::Result<_, _>>()
        .context("bad dimensions")?;
    let maxval: usize = lines.next().context("missing maxval")?.trim().parse()?;
    if dims.len() != 2 || maxval != 255 {
        bail!("unsupported PGM layout in {}", path.display());
    }
    let (w, h) = (dims[0], dims[1]);
    let data = bytes[header_end + 1..].to_vec();
    if data.len() != w * h {
        bail!("PGM payload is {} bytes, expected {}", data.len(), w * h);
    }
    Ok((h, w, data))
}

/// Boundary of a mask: pixels inside it with at least one 4-neighbour
/// outside (image borders count as outside).
pub fn region_outline(mask: &Mask) -> Grid {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Grid::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let boundary = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask.get(y - 1, x)
                || !mask.get(y + 1, x)
                || !mask.get(y, x - 1)
                || !mask.get(y, x + 1);
            if boundary {
                out.set(y, x, 1.0);
            }
        }
    }
    out
}
