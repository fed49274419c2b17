use super::{apply_patch, make_mask, patch_gap, Patch, Placement};
use crate::detector::{scene_confidence, BoundingBox, DetectorParams};
use crate::error::{Error, Result};
use crate::image::{Image8, ImageF};

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapCell {
    /// Patch center `(row, col)` on the lattice.
    pub center: (usize, usize),
    /// Patch origin, `None` where the patch would leave the image.
    pub origin: Option<Placement>,
    /// Reported scene confidence with the patch centered here.
    pub confidence: Option<f64>,
    /// Within the offset limit of the object.
    pub in_offset_region: bool,
    /// Feasible, with a lattice neighbour that is not.
    pub edge: bool,
}

/// Scene confidence as a function of patch center.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub stride: usize,
    pub lattice_rows: usize,
    pub lattice_cols: usize,
    pub patch_size: usize,
    /// Row-major over the lattice.
    pub cells: Vec<HeatmapCell>,
}

impl Heatmap {
    pub fn cell(&self, lr: usize, lc: usize) -> &HeatmapCell {
        &self.cells[lr * self.lattice_cols + lc]
    }

    fn mean_where(&self, pred: impl Fn(&HeatmapCell) -> bool) -> Option<f64> {
        let vals: Vec<f64> = self.cells.iter().filter(|c| pred(c)).filter_map(|c| c.confidence).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean over feasible centres next to the infeasible border band.
    pub fn edge_mean(&self) -> Option<f64> {
        self.mean_where(|c| c.edge && !c.in_offset_region)
    }

    /// Mean over feasible centres within the offset limit of the object.
    pub fn offset_region_mean(&self) -> Option<f64> {
        self.mean_where(|c| c.in_offset_region)
    }

    /// Confidences inside the offset region.
    pub fn offset_region_values(&self) -> Vec<f64> {
        self.cells.iter().filter(|c| c.in_offset_region).filter_map(|c| c.confidence).collect()
    }

    /// Grayscale rendering, one `stride × stride` block per lattice point;
    /// infeasible centres are white.
    pub fn render(&self) -> Image8 {
        let (h, w) = (self.lattice_rows * self.stride, self.lattice_cols * self.stride);
        let mut img = Image8::filled(h, w, 1, 255);
        for (k, cell) in self.cells.iter().enumerate() {
            let v = cell.confidence.map_or(255, |c| (c.clamp(0.0, 1.0) * 255.0).round() as u8);
            let (lr, lc) = (k / self.lattice_cols, k % self.lattice_cols);
            for r in 0..self.stride {
                for c in 0..self.stride {
                    img.set(lr * self.stride + r, lc * self.stride + c, 0, v);
                }
            }
        }
        img
    }
}

/// Evaluates the reported scene confidence with `z` centred at every lattice
/// point `(k · stride, l · stride)`.
pub fn confidence_heatmap(
    params: &DetectorParams,
    image: &ImageF,
    z: &Patch,
    stride: usize,
    object: Option<&BoundingBox>,
    offset_limit: usize,
    class_id: usize,
) -> Result<Heatmap> {
    if stride == 0 {
        return Err(Error::Parameter("heatmap stride must be positive".into()));
    }
    let n = z.size();
    let (rows, cols) = (image.rows(), image.cols());
    if n > rows || n > cols {
        return Err(Error::Placement(format!("{n}x{n} patch does not fit a {rows}x{cols} image")));
    }
    let lattice_rows = rows.div_ceil(stride);
    let lattice_cols = cols.div_ceil(stride);
    let origin_of = |lr: usize, lc: usize| -> Option<Placement> {
        let (cr, cc) = (lr * stride, lc * stride);
        let (i, j) = (cr.checked_sub(n / 2)?, cc.checked_sub(n / 2)?);
        (i + n <= rows && j + n <= cols).then_some((i, j))
    };
    let mut cells = Vec::with_capacity(lattice_rows * lattice_cols);
    for lr in 0..lattice_rows {
        for lc in 0..lattice_cols {
            let origin = origin_of(lr, lc);
            let confidence = match origin {
                Some((i, j)) => {
                    let patched = apply_patch(image, z, &make_mask(i, j, n, rows, cols)?)?;
                    Some(scene_confidence(params, &patched, class_id)?)
                }
                None => None,
            };
            let feasible_at = |dr: isize, dc: isize| {
                let (r, c) = (lr as isize + dr, lc as isize + dc);
                r >= 0 && c >= 0 && (r as usize) < lattice_rows && (c as usize) < lattice_cols && origin_of(r as usize, c as usize).is_some()
            };
            let edge = origin.is_some() && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !feasible_at(dr, dc));
            let in_offset_region = match (origin, object) {
                (Some(o), Some(b)) => patch_gap(o, n, b) <= offset_limit as f64,
                _ => false,
            };
            cells.push(HeatmapCell { center: (lr * stride, lc * stride), origin, confidence, in_offset_region, edge });
        }
    }
    Ok(Heatmap { stride, lattice_rows, lattice_cols, patch_size: n, cells })
}
