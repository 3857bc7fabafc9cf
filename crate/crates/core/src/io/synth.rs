//! Synthetic piecewise-smooth scenes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::domain::Scene;
use crate::error::{invalid, Result};

/// Reflectivity layout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Reflectivity {
    /// Constant 1 everywhere.
    #[default]
    Constant,
    /// Linear ramp from 0.5 on the first row to 1.0 on the last.
    Ramp,
}

/// Axis-aligned rectangle `[row0, row1) x [col0, col1)` at one depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub row0: usize,
    pub row1: usize,
    pub col0: usize,
    pub col1: usize,
    pub depth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SceneKind {
    /// `steps` equal-width vertical bands stepping from the near to the far
    /// depth.
    Staircase { steps: usize },
    /// Depth ramping linearly across columns.
    Wedge,
    /// Far background with rectangles in front; an empty list gives the
    /// default layout of two blocks.
    Blocks(Vec<Block>),
}

impl SceneKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "staircase" => Ok(Self::Staircase { steps: 4 }),
            "wedge" => Ok(Self::Wedge),
            "blocks" => Ok(Self::Blocks(Vec::new())),
            other => Err(invalid(
                "scene",
                format!("unknown kind {other:?} (staircase|wedge|blocks)"),
            )),
        }
    }
}

fn check_range(range: (f64, f64)) -> Result<()> {
    let (near, far) = range;
    if !(near.is_finite() && far.is_finite() && near > 0.0 && far >= near) {
        return Err(invalid(
            "depth range",
            format!("need 0 < near <= far, got {range:?}"),
        ));
    }
    Ok(())
}

fn reflectivity(kind: Reflectivity, rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols)
        .map(|p| match kind {
            Reflectivity::Constant => 1.0,
            Reflectivity::Ramp if rows > 1 => 0.5 + 0.5 * (p / cols) as f64 / (rows - 1) as f64,
            Reflectivity::Ramp => 1.0,
        })
        .collect()
}

/// Deterministic test scene with depths inside `range = (near, far)`.
pub fn synth_scene(
    kind: &SceneKind,
    rows: usize,
    cols: usize,
    range: (f64, f64),
    refl: Reflectivity,
) -> Result<Scene> {
    check_range(range)?;
    if rows == 0 || cols == 0 {
        return Err(invalid("scene size", format!("{rows}x{cols}")));
    }
    let (near, far) = range;
    let depth: Vec<f64> = match kind {
        SceneKind::Staircase { steps } => {
            let steps = *steps;
            if steps == 0 || steps > cols {
                return Err(invalid("steps", format!("need 1..={cols}, got {steps}")));
            }
            let dz = if steps > 1 {
                (far - near) / (steps - 1) as f64
            } else {
                0.0
            };
            (0..rows * cols)
                .map(|p| near + (p % cols * steps / cols) as f64 * dz)
                .collect()
        }
        SceneKind::Wedge => {
            let dz = if cols > 1 {
                (far - near) / (cols - 1) as f64
            } else {
                0.0
            };
            (0..rows * cols)
                .map(|p| near + (p % cols) as f64 * dz)
                .collect()
        }
        SceneKind::Blocks(blocks) => {
            let defaults;
            let blocks = if blocks.is_empty() {
                defaults = default_blocks(rows, cols, range);
                &defaults
            } else {
                blocks
            };
            let mut z = vec![far; rows * cols];
            for b in blocks {
                if b.row0 >= b.row1 || b.col0 >= b.col1 || b.row1 > rows || b.col1 > cols {
                    return Err(invalid("block", format!("{b:?} outside {rows}x{cols}")));
                }
                if !(b.depth >= near && b.depth <= far) {
                    return Err(invalid(
                        "block depth",
                        format!("{} outside {range:?}", b.depth),
                    ));
                }
                for i in b.row0..b.row1 {
                    z[i * cols + b.col0..i * cols + b.col1].fill(b.depth);
                }
            }
            z
        }
    };
    Scene::new(rows, cols, depth, reflectivity(refl, rows, cols))
}

fn default_blocks(rows: usize, cols: usize, (near, far): (f64, f64)) -> Vec<Block> {
    let (r4, c4) = (rows / 4, cols / 4);
    vec![
        Block {
            row0: r4,
            row1: (2 * r4).max(r4 + 1),
            col0: c4,
            col1: (2 * c4).max(c4 + 1),
            depth: near,
        },
        Block {
            row0: (rows * 5 / 8).min(rows - 1),
            row1: (rows * 7 / 8).clamp((rows * 5 / 8).min(rows - 1) + 1, rows),
            col0: (cols * 5 / 8).min(cols - 1),
            col1: cols,
            depth: 0.5 * (near + far),
        },
    ]
}

/// Random scene for training: a tilted background plane with up to three
/// fronto-parallel rectangles, reflectivity uniform in `[0.3, 1]` per
/// object.
pub fn random_scene(
    rows: usize,
    cols: usize,
    range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    check_range(range)?;
    if rows == 0 || cols == 0 {
        return Err(invalid("scene size", format!("{rows}x{cols}")));
    }
    let (near, far) = range;
    let span = far - near;
    let base = near + rng.random_range(0.0..=1.0) * span;
    let (gi, gj) = (
        rng.random_range(-1.0..=1.0) * 0.3 * span / rows as f64,
        rng.random_range(-1.0..=1.0) * 0.3 * span / cols as f64,
    );
    let a0 = rng.random_range(0.3..=1.0);
    let mut depth = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let z =
                base + gi * (i as f64 - rows as f64 / 2.0) + gj * (j as f64 - cols as f64 / 2.0);
            depth.push(z.clamp(near, far));
        }
    }
    let mut refl = vec![a0; rows * cols];
    for _ in 0..rng.random_range(0..=3) {
        let (r0, c0) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let (r1, c1) = (
            rng.random_range(r0 + 1..=rows),
            rng.random_range(c0 + 1..=cols),
        );
        let z = near + rng.random_range(0.0..=1.0) * span;
        let a = rng.random_range(0.3..=1.0);
        for i in r0..r1 {
            for j in c0..c1 {
                depth[i * cols + j] = z;
                refl[i * cols + j] = a;
            }
        }
    }
    Scene::new(rows, cols, depth, refl)
}
