//! Spatial grid stream: per-axis ranks of patch centers, folded into a binary
//! 3D grid whose eight cell types each carry a masking probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{MaskScores, Stream};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::rng::seeded;

/// `pos[i][d]` is the 0-based ascending rank of center `i` along axis `d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisRanks {
    pos: Vec<[usize; 3]>,
}

impl AxisRanks {
    pub fn len(&self) -> usize {
        self.pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos.is_empty()
    }

    pub fn as_slice(&self) -> &[[usize; 3]] {
        &self.pos
    }

    pub fn column(&self, axis: usize) -> Vec<usize> {
        self.pos.iter().map(|r| r[axis]).collect()
    }
}

/// Numeric order for finite values; `-0.0` and `0.0` compare equal.
fn cmp_finite(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// Ascending rank per axis; equal coordinates keep patch-index order.
pub fn rank_coordinates(centers: &[Point3]) -> Result<AxisRanks> {
    if centers.is_empty() {
        return Err(Error::argument("cannot rank an empty set of centers"));
    }
    let k = centers.len();
    let mut pos = vec![[0usize; 3]; k];
    let mut order: Vec<usize> = (0..k).collect();
    for d in 0..3 {
        order.sort_by(|&a, &b| cmp_finite(centers[a][d], centers[b][d]).then(a.cmp(&b)));
        for (rank, &i) in order.iter().enumerate() {
            pos[i][d] = rank;
        }
    }
    Ok(AxisRanks { pos })
}

/// Cells per axis before the binary coordinate flips (`G_d`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Granularity(pub [usize; 3]);

impl Default for Granularity {
    fn default() -> Self {
        Granularity([4, 4, 4])
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    /// Accepts `"4"` (all axes) or `"gx,gy,gz"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let parse = |p: &str| {
            p.parse::<usize>()
                .ok()
                .filter(|&g| g >= 1)
                .ok_or_else(|| Error::argument(format!("grid granularity must be a positive integer, got {p:?}")))
        };
        match parts.as_slice() {
            [g] => Ok(Granularity([parse(g)?; 3])),
            [x, y, z] => Ok(Granularity([parse(x)?, parse(y)?, parse(z)?])),
            _ => Err(Error::argument(format!("expected Gx,Gy,Gz, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAssignment {
    grid_coords: Vec<[u8; 3]>,
    grid_type: Vec<u8>,
    granularity: Granularity,
}

impl GridAssignment {
    pub fn grid_coords(&self) -> &[[u8; 3]] {
        &self.grid_coords
    }

    pub fn grid_type(&self) -> &[u8] {
        &self.grid_type
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn len(&self) -> usize {
        self.grid_type.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid_type.is_empty()
    }
}

#[inline]
pub fn grid_type_index(coords: [u8; 3]) -> u8 {
    coords[0] + 2 * coords[1] + 4 * coords[2]
}

/// `grid_d = floor(pos_d / G_d) mod 2`, and the cell type `x + 2y + 4z`.
pub fn grid_coordinates(ranks: &AxisRanks, granularity: Granularity) -> Result<GridAssignment> {
    if granularity.0.contains(&0) {
        return Err(Error::argument("grid granularity must be >= 1 on every axis"));
    }
    let g = granularity.0;
    let grid_coords: Vec<[u8; 3]> = ranks
        .pos
        .iter()
        .map(|p| std::array::from_fn(|d| ((p[d] / g[d]) % 2) as u8))
        .collect();
    let grid_type = grid_coords.iter().copied().map(grid_type_index).collect();
    Ok(GridAssignment {
        grid_coords,
        grid_type,
        granularity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellScheme {
    /// 0.9 for cell types with an even number of set bits, 0.1 for odd.
    #[default]
    Checkerboard,
    UniformRandom,
    Explicit,
}

impl std::str::FromStr for CellScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checkerboard" => Ok(CellScheme::Checkerboard),
            "uniform-random" | "random" => Ok(CellScheme::UniformRandom),
            "explicit" => Ok(CellScheme::Explicit),
            other => Err(Error::argument(format!("unknown cell scheme {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCellProbs {
    p: [f64; 8],
    scheme: CellScheme,
}

impl GridCellProbs {
    pub fn probs(&self) -> &[f64; 8] {
        &self.p
    }

    pub fn scheme(&self) -> CellScheme {
        self.scheme
    }
}

pub const CHECKERBOARD_HIGH: f64 = 0.9;
pub const CHECKERBOARD_LOW: f64 = 0.1;

pub fn make_cell_probs(
    scheme: CellScheme,
    seed: u64,
    explicit: Option<[f64; 8]>,
) -> Result<GridCellProbs> {
    let p = match (scheme, explicit) {
        (CellScheme::Explicit, Some(values)) => {
            if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::argument(format!("cell probability {v} outside [0, 1]")));
            }
            values
        }
        (CellScheme::Explicit, None) => {
            return Err(Error::argument("explicit cell scheme needs 8 probabilities"))
        }
        (_, Some(_)) => {
            return Err(Error::argument("explicit probabilities given for a non-explicit scheme"))
        }
        (CellScheme::Checkerboard, None) => std::array::from_fn(|t| {
            if (t as u32).count_ones().is_multiple_of(2) {
                CHECKERBOARD_HIGH
            } else {
                CHECKERBOARD_LOW
            }
        }),
        (CellScheme::UniformRandom, None) => {
            let mut rng = seeded(seed);
            std::array::from_fn(|_| rng.gen::<f64>())
        }
    };
    Ok(GridCellProbs { p, scheme })
}

/// Spatial stream output: each patch scores the probability of its cell type.
pub fn grid_scores(assignment: &GridAssignment, cell_probs: &GridCellProbs) -> MaskScores {
    let scores = assignment
        .grid_type
        .iter()
        .map(|&t| cell_probs.p[t as usize])
        .collect();
    MaskScores::new_unchecked(scores, Stream::Spatial)
}
