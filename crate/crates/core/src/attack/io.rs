//! Patch files: an 8-bit PGM of the rounded values plus a sidecar text file
//! with the exact values, one per line in row-major order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{CurvePoint, Patch};
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::pnm;

pub fn encode_patch_values(patch: &Patch) -> String {
    let mut out = String::new();
    for v in patch.values() {
        // `{}` on f64 prints the shortest string that parses back exactly.
        writeln!(out, "{v}").expect("writing to a String");
    }
    out
}

pub fn decode_patch_values(text: &str) -> Result<Patch> {
    let values: Vec<f64> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse::<f64>().map_err(|_| Error::MalformedHeader(format!("bad patch value {l:?}"))))
        .collect::<Result<_>>()?;
    let n = (values.len() as f64).sqrt().round() as usize;
    if n * n != values.len() {
        return Err(Error::MalformedHeader(format!("{} values do not form a square patch", values.len())));
    }
    Patch::new(n, values)
}

pub fn save_patch(patch: &Patch, pgm: impl AsRef<Path>, sidecar: impl AsRef<Path>) -> Result<()> {
    let n = patch.size();
    let img = ImageF::new(n, n, 1, patch.values().to_vec())?.to_u8()?;
    pnm::save_image(&img, pgm)?;
    fs::write(sidecar, encode_patch_values(patch))?;
    Ok(())
}

/// Loads a patch from its sidecar file.
pub fn load_patch(sidecar: impl AsRef<Path>) -> Result<Patch> {
    decode_patch_values(&fs::read_to_string(sidecar)?)
}

/// `iteration,loss,mean_confidence` with a header row.
pub fn write_curve_csv(curve: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "loss", "mean_confidence"])?;
    for p in curve {
        w.write_record([p.iteration.to_string(), p.loss.to_string(), p.mean_confidence.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
