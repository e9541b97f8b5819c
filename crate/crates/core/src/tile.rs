//! Quadtree tile arithmetic, the zoom-level scale table and cascade plans.
//!
//! Coordinates follow the slippy-map convention: at level `z` the world is a
//! 2^z × 2^z grid, col growing east and row growing south. Scene-local
//! addressing (a seed tile and its descendants) uses the same arithmetic;
//! dataset code converts to global coordinates only at the storage boundary.

use crate::error::{CoreError, Result};

/// Highest zoom level the tooling accepts. Deep enough for any street-level
/// source while keeping every bit shift comfortably inside u64.
pub const MAX_LEVEL: u8 = 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub level: u8,
    pub col: u64,
    pub row: u64,
}

impl std::fmt::Display for TileCoord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.level, self.col, self.row)
    }
}

impl TileCoord {
    pub fn new(level: u8, col: u64, row: u64) -> Result<TileCoord> {
        if level > MAX_LEVEL {
            return Err(CoreError::Tile {
                level,
                col,
                row,
                msg: format!("level exceeds maximum {MAX_LEVEL}"),
            });
        }
        let extent = 1u64 << level;
        if col >= extent || row >= extent {
            return Err(CoreError::Tile {
                level,
                col,
                row,
                msg: format!("coordinates outside the 2^{level} grid"),
            });
        }
        Ok(TileCoord { level, col, row })
    }

    /// The 4^n descendants `n` levels down, in row-major order (rows outer,
    /// columns inner).
    pub fn children(&self, n: u8) -> Result<Vec<TileCoord>> {
        if n == 0 {
            return Ok(vec![*self]);
        }
        if self.level + n > MAX_LEVEL {
            return Err(CoreError::Tile {
                level: self.level,
                col: self.col,
                row: self.row,
                msg: format!("children at depth {n} exceed level {MAX_LEVEL}"),
            });
        }
        let k = 1u64 << n;
        let mut out = Vec::with_capacity((k * k) as usize);
        for dy in 0..k {
            for dx in 0..k {
                out.push(TileCoord {
                    level: self.level + n,
                    col: self.col * k + dx,
                    row: self.row * k + dy,
                });
            }
        }
        Ok(out)
    }

    /// The ancestor `n` levels up.
    pub fn parent(&self, n: u8) -> Result<TileCoord> {
        if n > self.level {
            return Err(CoreError::Tile {
                level: self.level,
                col: self.col,
                row: self.row,
                msg: format!("no ancestor {n} levels above level {}", self.level),
            });
        }
        Ok(TileCoord {
            level: self.level - n,
            col: self.col >> n,
            row: self.row >> n,
        })
    }

    /// Position of this tile within its ancestor's 2^n × 2^n block of
    /// descendants: (dx, dy) with 0 ≤ dx, dy < 2^n.
    pub fn offset_within_ancestor(&self, n: u8) -> Result<(u64, u64)> {
        self.parent(n)?; // range check
        let mask = (1u64 << n) - 1;
        Ok((self.col & mask, self.row & mask))
    }

    /// True if `self` lies in `ancestor`'s subtree.
    pub fn descends_from(&self, ancestor: &TileCoord) -> bool {
        self.level >= ancestor.level && self.parent(self.level - ancestor.level).ok() == Some(*ancestor)
    }
}

// ── Scale table ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleRecord {
    pub level: u8,
    pub scale_denominator: f64,
    pub resolution_m_per_px: f64,
    pub feature_text: &'static str,
}

/// The calibrated rows: (level, 1:denominator, metres per pixel, what the
/// cartography resolves at that zoom).
const SCALE_TABLE: [(u8, f64, f64, &str); 5] = [
    (14, 35_000.0, 9.555, "village, or suburb"),
    (15, 15_000.0, 4.777, "small road"),
    (16, 8_000.0, 2.389, "street"),
    (17, 4_000.0, 1.194, "block, park, addresses"),
    (18, 2_000.0, 0.597, "some buildings, trees"),
];

/// Scale metadata for a zoom level. Levels outside the calibrated 14..=18
/// band extrapolate from the nearest edge row by exact doubling/halving,
/// reusing that row's feature description.
pub fn scale_record(level: u8) -> Result<ScaleRecord> {
    if level > MAX_LEVEL {
        return Err(CoreError::invalid("scale_record", format!("level {level} exceeds {MAX_LEVEL}")));
    }
    let (first, last) = (SCALE_TABLE[0], SCALE_TABLE[SCALE_TABLE.len() - 1]);
    let (denom, res, text) = if level < first.0 {
        let steps = (first.0 - level) as i32;
        (
            first.1 * 2f64.powi(steps),
            first.2 * 2f64.powi(steps),
            first.3,
        )
    } else if level > last.0 {
        let steps = (level - last.0) as i32;
        (
            last.1 / 2f64.powi(steps),
            last.2 / 2f64.powi(steps),
            last.3,
        )
    } else {
        let row = SCALE_TABLE[(level - first.0) as usize];
        (row.1, row.2, row.3)
    };
    Ok(ScaleRecord {
        level,
        scale_denominator: denom,
        resolution_m_per_px: res,
        feature_text: text,
    })
}

/// The canonical text prompt for a zoom level, fed to the text encoder.
pub fn scale_prompt(level: u8) -> Result<String> {
    let r = scale_record(level)?;
    Ok(format!(
        "level {}; scale 1:{}; resolution {:.3} m/pixel; features: {}",
        r.level, r.scale_denominator, r.resolution_m_per_px, r.feature_text
    ))
}

// ── Cascade planning ────────────────────────────────────────────────────

/// A multi-stage generation plan: starting from seed tiles at `base_level`,
/// each stage descends `step` levels, quadrupling the tile count `step`
/// times per stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub base_level: u8,
    /// Levels advanced per stage (1 → 2× edge scale, 2 → 4×).
    pub step: u8,
    /// Output levels, one per stage: base+step, base+2·step, ...
    pub levels: Vec<u8>,
}

impl StagePlan {
    pub fn new(base_level: u8, step: u8, stages: u8) -> Result<StagePlan> {
        if step == 0 {
            return Err(CoreError::invalid("stage_plan", "step must be at least 1"));
        }
        let deepest = base_level as u32 + step as u32 * stages as u32;
        if deepest > MAX_LEVEL as u32 {
            return Err(CoreError::invalid(
                "stage_plan",
                format!("plan bottoms out at level {deepest}, beyond {MAX_LEVEL}"),
            ));
        }
        let levels = (1..=stages).map(|j| base_level + step * j).collect();
        Ok(StagePlan {
            base_level,
            step,
            levels,
        })
    }

    pub fn stages(&self) -> usize {
        self.levels.len()
    }

    /// Tiles generated at stage `j` (0-based) per seed tile: 4^(step·(j+1)).
    pub fn tiles_at_stage(&self, stage: usize) -> u64 {
        1u64 << (2 * self.step as u64 * (stage as u64 + 1))
    }

    /// Total tiles across all stages per seed tile: Σ_j 4^(step·j).
    pub fn total_tiles(&self) -> u64 {
        (0..self.stages()).map(|j| self.tiles_at_stage(j)).sum()
    }

    /// Canvas extent in pixels at stage `j` for square tiles of `tile_px`,
    /// per seed tile: edge doubles `step` times per stage.
    pub fn canvas_extent(&self, stage: usize, tile_px: usize) -> (u64, u64) {
        let edge = 1u64 << (self.step as u64 * (stage as u64 + 1));
        (edge * tile_px as u64, edge * tile_px as u64)
    }
}

/// Pixel offset of `tile` inside the stitched canvas rooted at `seed`.
/// Errors when the tile is not a descendant of the seed.
pub fn mosaic_offset(seed: &TileCoord, tile: &TileCoord, tile_px: usize) -> Result<(u64, u64)> {
    if !tile.descends_from(seed) {
        return Err(CoreError::Tile {
            level: tile.level,
            col: tile.col,
            row: tile.row,
            msg: format!("not within the mosaic rooted at {seed}"),
        });
    }
    let depth = tile.level - seed.level;
    let x = (tile.col - (seed.col << depth)) * tile_px as u64;
    let y = (tile.row - (seed.row << depth)) * tile_px as u64;
    Ok((x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn children_row_major_order() {
        let t = TileCoord::new(14, 0, 0).unwrap();
        let kids = t.children(1).unwrap();
        let as_tuples: Vec<(u8, u64, u64)> = kids.iter().map(|c| (c.level, c.col, c.row)).collect();
        assert_eq!(as_tuples, vec![(15, 0, 0), (15, 1, 0), (15, 0, 1), (15, 1, 1)]);
    }

    #[test]
    fn children_then_parent_round_trips() {
        let t = TileCoord::new(10, 513, 212).unwrap();
        for n in 1..=3 {
            for c in t.children(n).unwrap() {
                assert_eq!(c.parent(n).unwrap(), t);
                assert!(c.descends_from(&t));
            }
        }
    }

    #[test]
    fn coordinates_outside_grid_rejected() {
        assert!(TileCoord::new(3, 8, 0).is_err());
        assert!(TileCoord::new(3, 0, 8).is_err());
        assert!(TileCoord::new(MAX_LEVEL + 1, 0, 0).is_err());
        assert!(TileCoord::new(3, 7, 7).is_ok());
    }

    #[test]
    fn parent_above_root_rejected() {
        let t = TileCoord::new(2, 1, 1).unwrap();
        assert!(t.parent(3).is_err());
    }

    #[test]
    fn offset_within_ancestor_indexes_the_block() {
        let t = TileCoord::new(16, 5, 6).unwrap();
        assert_eq!(t.offset_within_ancestor(1).unwrap(), (1, 0));
        assert_eq!(t.offset_within_ancestor(2).unwrap(), (1, 2));
    }

    #[test]
    fn table_rows_match_calibration() {
        let r = scale_record(16).unwrap();
        assert_eq!(r.scale_denominator, 8000.0);
        assert_eq!(r.resolution_m_per_px, 2.389);
        assert_eq!(r.feature_text, "street");
    }

    #[test]
    fn resolution_halves_per_level_within_a_tenth_percent() {
        for level in 14..18u8 {
            let hi = scale_record(level).unwrap().resolution_m_per_px;
            let lo = scale_record(level + 1).unwrap().resolution_m_per_px;
            let rel = (hi / 2.0 - lo).abs() / lo;
            assert!(rel < 1e-3, "level {level}: {rel}");
        }
        // Two levels apart: quarter resolution.
        let l14 = scale_record(14).unwrap().resolution_m_per_px;
        let l16 = scale_record(16).unwrap().resolution_m_per_px;
        assert!((l14 / 4.0 - l16).abs() / l16 < 1e-3);
    }

    #[test]
    fn scale_denominator_strictly_decreases() {
        let mut last = f64::INFINITY;
        for level in 0..=MAX_LEVEL {
            let d = scale_record(level).unwrap().scale_denominator;
            assert!(d < last, "level {level}");
            last = d;
        }
    }

    #[test]
    fn extrapolated_rows_double_from_the_edges() {
        assert_eq!(scale_record(13).unwrap().scale_denominator, 70_000.0);
        assert_eq!(scale_record(13).unwrap().resolution_m_per_px, 9.555 * 2.0);
        assert_eq!(scale_record(19).unwrap().scale_denominator, 1_000.0);
        assert_eq!(scale_record(20).unwrap().feature_text, "some buildings, trees");
    }

    #[test]
    fn prompt_format_is_canonical() {
        assert_eq!(
            scale_prompt(16).unwrap(),
            "level 16; scale 1:8000; resolution 2.389 m/pixel; features: street"
        );
        assert_eq!(
            scale_prompt(14).unwrap(),
            "level 14; scale 1:35000; resolution 9.555 m/pixel; features: village, or suburb"
        );
    }

    #[test]
    fn prompts_are_distinct_across_levels() {
        let mut seen = std::collections::HashSet::new();
        for level in 0..=MAX_LEVEL {
            assert!(seen.insert(scale_prompt(level).unwrap()), "duplicate at {level}");
        }
    }

    #[test]
    fn plan_counts_and_canvas_extents() {
        let plan = StagePlan::new(14, 1, 4).unwrap();
        assert_eq!(plan.levels, vec![15, 16, 17, 18]);
        assert_eq!(plan.tiles_at_stage(0), 4);
        assert_eq!(plan.tiles_at_stage(3), 256);
        assert_eq!(plan.total_tiles(), 340);
        assert_eq!(plan.canvas_extent(3, 256), (4096, 4096));

        let plan2 = StagePlan::new(14, 2, 2).unwrap();
        assert_eq!(plan2.levels, vec![16, 18]);
        assert_eq!(plan2.total_tiles(), 16 + 256);
    }

    #[test]
    fn plan_beyond_max_level_rejected() {
        assert!(StagePlan::new(20, 1, 4).is_err());
        assert!(StagePlan::new(14, 0, 2).is_err());
    }

    #[test]
    fn mosaic_offsets_tile_the_canvas() {
        let seed = TileCoord::new(14, 3, 5).unwrap();
        let kids = seed.children(1).unwrap();
        let offs: Vec<(u64, u64)> = kids.iter().map(|k| mosaic_offset(&seed, k, 256).unwrap()).collect();
        assert_eq!(offs, vec![(0, 0), (256, 0), (0, 256), (256, 256)]);

        let stranger = TileCoord::new(15, 0, 0).unwrap();
        assert!(mosaic_offset(&seed, &stranger, 256).is_err());
    }
}
