use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::train::{Checkpoint, Session};
use crate::error::{Error, Result};
use crate::fusion::{MaskPolicy, Topology};
use crate::synth::Dataset;

/// Binary P5 graymap with maxval 255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pgm> {
        let bad = |why: &str| Error::Format(format!("invalid PGM: {why}"));
        let mut fields = Vec::new();
        let mut i = 0;
        while fields.len() < 4 {
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not text"))?.to_string());
        }
        if fields[0] != "P5" {
            return Err(bad("magic is not P5"));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        let pixels = bytes.get(i + 1..).ok_or_else(|| bad("missing raster"))?.to_vec();
        if pixels.len() != width * height {
            return Err(bad("raster size does not match the header"));
        }
        Ok(Pgm { width, height, pixels })
    }
}

/// Token grid rendered cell by cell, each cell `scale × scale` pixels.
pub fn mask_image(substituted: &[bool], grid: usize, scale: usize) -> Pgm {
    let side = grid * scale;
    let pixels = (0..side * side)
        .map(|p| {
            let (y, x) = (p / side / scale, p % side / scale);
            if substituted[y * grid + x] {
                255
            } else {
                0
            }
        })
        .collect();
    Pgm { width: side, height: side, pixels }
}

#[derive(Serialize, Deserialize)]
struct PointMask {
    layer: usize,
    modality: usize,
    sample: usize,
    substituted: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportOptions {
    pub split: String,
    pub sample: usize,
    pub layers: Vec<usize>,
    /// Pixels per token cell.
    pub scale: usize,
    /// Overrides the checkpoint's mask policy, e.g. to force every token.
    pub policy: Option<MaskPolicy>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExportReport {
    pub files: Vec<PathBuf>,
    pub substituted: usize,
    /// Of those, tokens the generator hid from their modality.
    pub in_hidden: usize,
}

/// One `mask_m{m}_l{l}_s{sample}.pgm` per modality and requested layer
/// (white = substituted). Heterogeneous models write `.json` index lists.
pub fn export_masks(ckpt: &Checkpoint, dataset: Arc<Dataset>, opts: &ExportOptions, out: &Path) -> Result<ExportReport> {
    let session = Session::from_checkpoint(ckpt.clone(), dataset)?;
    let view = session.view(&opts.split)?;
    if opts.sample >= view.samples() {
        return Err(Error::Config(format!("sample {} outside the {} {} samples", opts.sample, view.samples(), opts.split)));
    }
    let depth = session.model.stacks.iter().map(|s| s.dims.layers).max().unwrap_or(0);
    if opts.layers.is_empty() || opts.layers.iter().any(|&l| l == 0 || l > depth) {
        return Err(Error::Config(format!("layers {:?} must lie in 1..={depth}", opts.layers)));
    }
    if opts.scale == 0 {
        return Err(Error::Config("scale must be positive".into()));
    }
    let batch = view.batch(&[opts.sample])?;
    let policy = opts.policy.clone().unwrap_or_else(|| session.cfg.policy());
    let ev = super::train::forward_loss(&session.model, &session.store, &batch, &policy, 0, &session.cfg.loss_config(), false)?;
    let hidden = view.hidden_rows(&[opts.sample]);
    fs::create_dir_all(out)?;
    let mut report = ExportReport { files: Vec::new(), substituted: 0, in_hidden: 0 };
    let hetero = session.model.spec.topology == Topology::Heterogeneous;
    for &l in &opts.layers {
        for mask in ev.out.masks.iter().filter(|m| m.layer == l) {
            let m = mask.modality;
            let n = session.model.spec.stacks[m].tokens;
            let applied = &mask.applied[..n];
            report.substituted += applied.iter().filter(|&&a| a).count();
            if let Some(h) = &hidden {
                report.in_hidden += applied.iter().zip(&h[m]).filter(|(&a, &hid)| a && hid).count();
            }
            let path = if hetero {
                let p = out.join(format!("mask_m{m}_l{l}_s{}.json", opts.sample));
                let rec = PointMask { layer: l, modality: m, sample: opts.sample, substituted: (0..n).filter(|&i| applied[i]).collect() };
                fs::write(&p, serde_json::to_string(&rec)? + "\n")?;
                p
            } else {
                let grid = (n as f64).sqrt().round() as usize;
                if grid * grid != n {
                    return Err(Error::Config(format!("{n} tokens do not form a square grid")));
                }
                let p = out.join(format!("mask_m{m}_l{l}_s{}.pgm", opts.sample));
                fs::write(&p, mask_image(applied, grid, opts.scale).encode())?;
                p
            };
            report.files.push(path);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_layout() {
        let img = mask_image(&[true, false, false, true], 2, 3);
        assert_eq!((img.width, img.height), (6, 6));
        assert_eq!(img.pixels[0], 255);
        assert_eq!(img.pixels[3], 0);
        assert_eq!(img.pixels[6 * 3 + 3], 255);
        let bytes = img.encode();
        assert!(bytes.starts_with(b"P5\n6 6\n255\n"));
        assert_eq!(Pgm::decode(&bytes).unwrap(), img);
        assert!(Pgm::decode(b"P2\n1 1\n255\n\0").is_err());
        assert!(Pgm::decode(b"P5\n2 2\n255\n\0").is_err());
        assert_eq!(Pgm::decode(b"P5\n# c\n1 1\n255\n\x07").unwrap().pixels, vec![7]);
    }
}
