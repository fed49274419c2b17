use rand::Rng;

use super::EotConfig;
use crate::detector::BoundingBox;
use crate::error::{Error, Result};

/// Top-left `(row, col)` of a patch.
pub type Placement = (usize, usize);

/// Binary mask of an `n × n` block at `(i, j)` in an `M × N` image, stored as
/// the two indicator vectors whose outer product it is.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacementMask {
    origin: Placement,
    size: usize,
    row_indicator: Vec<bool>,
    col_indicator: Vec<bool>,
}

impl PlacementMask {
    pub fn origin(&self) -> Placement {
        self.origin
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rows(&self) -> usize {
        self.row_indicator.len()
    }

    pub fn cols(&self) -> usize {
        self.col_indicator.len()
    }

    pub fn row_indicator(&self) -> &[bool] {
        &self.row_indicator
    }

    pub fn col_indicator(&self) -> &[bool] {
        &self.col_indicator
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.row_indicator[r] && self.col_indicator[c]
    }

    /// Dense `M × N` 0/1 matrix, row-major.
    pub fn to_dense(&self) -> Vec<u8> {
        self.row_indicator
            .iter()
            .flat_map(|&a| self.col_indicator.iter().map(move |&b| u8::from(a && b)))
            .collect()
    }
}

fn block_indicator(start: usize, n: usize, len: usize) -> Vec<bool> {
    (0..len).map(|k| k >= start && k < start + n).collect()
}

pub fn make_mask(i: usize, j: usize, n: usize, rows: usize, cols: usize) -> Result<PlacementMask> {
    if n == 0 || i + n > rows || j + n > cols {
        return Err(Error::Placement(format!("{n}x{n} patch at ({i}, {j}) does not fit a {rows}x{cols} image")));
    }
    Ok(PlacementMask {
        origin: (i, j),
        size: n,
        row_indicator: block_indicator(i, n, rows),
        col_indicator: block_indicator(j, n, cols),
    })
}

/// Gap between the patch square at `origin` and `object`: the larger of the
/// horizontal and vertical separations, 0 when they overlap or touch.
pub fn patch_gap(origin: Placement, n: usize, object: &BoundingBox) -> f64 {
    let (i, j) = (origin.0 as f64, origin.1 as f64);
    let n = n as f64;
    let dx = (object.left() - (j + n)).max(j - object.right()).max(0.0);
    let dy = (object.top() - (i + n)).max(i - object.bottom()).max(0.0);
    dx.max(dy)
}

/// Every origin where the patch lies inside the image and within
/// `offset_limit` pixels of the object.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet {
    origins: Vec<Placement>,
}

impl FeasibleSet {
    pub fn new(object: &BoundingBox, n: usize, rows: usize, cols: usize, offset_limit: usize) -> Result<Self> {
        if n == 0 || n > rows || n > cols {
            return Err(Error::Config(format!("{n}x{n} patch cannot fit a {rows}x{cols} image")));
        }
        let limit = offset_limit as f64;
        let mut origins = Vec::new();
        for i in 0..=rows - n {
            for j in 0..=cols - n {
                if patch_gap((i, j), n, object) <= limit {
                    origins.push((i, j));
                }
            }
        }
        if origins.is_empty() {
            return Err(Error::Config(format!("no placement of a {n}x{n} patch lies within {offset_limit} px of the object")));
        }
        Ok(Self { origins })
    }

    pub fn origins(&self) -> &[Placement] {
        &self.origins
    }

    pub fn contains(&self, p: Placement) -> bool {
        self.origins.binary_search(&p).is_ok()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Placement {
        self.origins[rng.random_range(0..self.origins.len())]
    }
}

/// `cfg.transforms_per_step` i.i.d. uniform draws from the feasible origins,
/// seeded by `cfg.seed`.
pub fn sample_placements(cfg: &EotConfig, object: &BoundingBox, n: usize, rows: usize, cols: usize) -> Result<Vec<Placement>> {
    cfg.validate()?;
    let set = FeasibleSet::new(object, n, rows, cols, cfg.offset_limit)?;
    let mut rng = crate::seed::rng(cfg.seed);
    Ok((0..cfg.transforms_per_step).map(|_| set.sample(&mut rng)).collect())
}
