//! Image, point-cloud and table formats.
//!
//! PFM files here are single-channel (`Pf`), little-endian (scale `-1.0`)
//! and store rows top to bottom. Background depth is written as `+inf`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use snerf_core::Vec3;

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Reads whitespace-separated header tokens, skipping `#` comments.
fn header_tokens(r: &mut impl BufRead, count: usize) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut byte = [0u8; 1];
    let mut tok = String::new();
    let mut comment = false;
    while out.len() < count {
        if r.read(&mut byte)? == 0 {
            bail!("truncated header");
        }
        let c = byte[0] as char;
        if comment {
            comment = c != '\n';
            continue;
        }
        if c == '#' && tok.is_empty() {
            comment = true;
        } else if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                out.push(std::mem::take(&mut tok));
            }
        } else {
            tok.push(c);
        }
    }
    Ok(out)
}

/// Grayscale float map; `None` entries become `+inf`.
pub fn write_pfm(path: &Path, width: usize, height: usize, values: &[Option<f64>]) -> Result<()> {
    if values.len() != width * height {
        bail!("{}: {} values for a {width}x{height} map", path.display(), values.len());
    }
    let mut w = create(path)?;
    write!(w, "Pf\n{width} {height}\n-1.0\n")?;
    for v in values {
        let x = v.map_or(f32::INFINITY, |d| d as f32);
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<Option<f64>>)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let h = header_tokens(&mut r, 4).with_context(|| format!("reading {}", path.display()))?;
    if h[0] != "Pf" {
        bail!("{}: not a single-channel PFM", path.display());
    }
    let width: usize = h[1].parse()?;
    let height: usize = h[2].parse()?;
    let scale: f64 = h[3].parse()?;
    if scale >= 0.0 {
        bail!("{}: big-endian PFM is not supported", path.display());
    }
    let mut buf = vec![0u8; width * height * 4];
    r.read_exact(&mut buf).with_context(|| format!("reading {}", path.display()))?;
    let values = buf
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            v.is_finite().then_some(v as f64)
        })
        .collect();
    Ok((width, height, values))
}

/// 8-bit binary PPM; channels are clamped to `[0, 1]` and rounded.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[Vec3]) -> Result<()> {
    if rgb.len() != width * height {
        bail!("{}: {} pixels for a {width}x{height} image", path.display(), rgb.len());
    }
    let mut w = create(path)?;
    write!(w, "P6\n{width} {height}\n255\n")?;
    for px in rgb {
        let bytes = px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<Vec3>)> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let h = header_tokens(&mut r, 4).with_context(|| format!("reading {}", path.display()))?;
    if h[0] != "P6" || h[3] != "255" {
        bail!("{}: expected an 8-bit P6 image", path.display());
    }
    let width: usize = h[1].parse()?;
    let height: usize = h[2].parse()?;
    let mut buf = vec![0u8; width * height * 3];
    r.read_exact(&mut buf).with_context(|| format!("reading {}", path.display()))?;
    let px = buf
        .chunks_exact(3)
        .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
        .collect();
    Ok((width, height, px))
}

/// ASCII PLY with float x/y/z vertices.
pub fn write_ply(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property float x\nproperty float y\nproperty float z\nend_header")?;
    for p in points {
        writeln!(w, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = Some(n.trim().parse::<usize>()?);
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.context("PLY without a vertex element")?;
    lines
        .take(count)
        .map(|l| {
            let v: Vec<f64> = l.split_whitespace().map(str::parse).collect::<Result<_, _>>()?;
            if v.len() < 3 {
                bail!("short vertex line");
            }
            Ok([v[0], v[1], v[2]])
        })
        .collect()
}

/// CSV writer with a fixed header.
pub fn csv_writer(path: &Path, header: &[&str]) -> Result<csv::Writer<BufWriter<File>>> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    Ok(w)
}

/// Formats an optional value for CSV (empty when absent).
pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Writes pretty JSON.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let v = vec![Some(1.5), None, Some(0.25), Some(2.0), None, Some(3.0)];
        write_pfm(&p, 3, 2, &v).unwrap();
        let (w, h, back) = read_pfm(&p).unwrap();
        assert_eq!((w, h, back), (3, 2, v));
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
    }

    #[test]
    fn ppm_and_ply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ppm");
        write_ppm(&p, 2, 1, &[[1.0, 0.0, 0.5], [2.0, -1.0, 0.2]]).unwrap();
        let (w, h, px) = read_ppm(&p).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(px[1][0], 1.0);
        assert!((px[0][2] - 128.0 / 255.0).abs() < 1e-12);

        let q = dir.path().join("p.ply");
        write_ply(&q, &[[0.0, 1.0, 2.0], [0.5, 0.25, -1.0]]).unwrap();
        assert_eq!(read_ply(&q).unwrap(), vec![[0.0, 1.0, 2.0], [0.5, 0.25, -1.0]]);
        let text = std::fs::read_to_string(&q).unwrap();
        assert!(text.contains("element vertex 2\nproperty float x"));
    }
}
