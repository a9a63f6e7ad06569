//! Geo-constrained triplet mining against a spatially indexed pose table.
//!
//! Positives live within `positive_radius` of the anchor, negatives within
//! the closed band `[negative_min, negative_max]`; both must stay inside
//! the heading window and, with `cross_trip` on, come from a different trip
//! than the anchor. Interval endpoints are inclusive.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geom::{geo_distance, heading_delta, Pose};
use crate::seeds::rng_for;
use crate::spatial::SpatialGrid;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MiningRules {
    pub positive_radius: f64,
    pub negative_min: f64,
    pub negative_max: f64,
    pub heading_window: f64,
    pub cross_trip: bool,
    /// Embedding-space margin m used by the losses.
    pub margin: f64,
}

impl Default for MiningRules {
    fn default() -> Self {
        MiningRules {
            positive_radius: 1.0,
            negative_min: 2.0,
            negative_max: 4.0,
            heading_window: 30.0,
            cross_trip: true,
            margin: 0.5,
        }
    }
}

impl MiningRules {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_radius > 0.0
            && self.positive_radius < self.negative_min
            && self.negative_min < self.negative_max)
        {
            return Err(Error::InvalidParameter(
                "mining radii must satisfy 0 < positive < negative_min < negative_max".into(),
            ));
        }
        if !(self.heading_window > 0.0 && self.heading_window <= 180.0) {
            return Err(Error::InvalidParameter(
                "heading window must be in (0, 180]".into(),
            ));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidParameter("margin must be positive".into()));
        }
        Ok(())
    }

    fn admits(&self, anchor: &Pose, other: &Pose) -> bool {
        if other.reading_id == anchor.reading_id {
            return false;
        }
        if self.cross_trip && other.trip_id == anchor.trip_id {
            return false;
        }
        heading_delta(anchor.heading, other.heading) <= self.heading_window
    }

    pub fn is_positive(&self, anchor: &Pose, other: &Pose) -> bool {
        self.admits(anchor, other) && geo_distance(anchor, other) <= self.positive_radius
    }

    pub fn is_negative(&self, anchor: &Pose, other: &Pose) -> bool {
        if !self.admits(anchor, other) {
            return false;
        }
        let d = geo_distance(anchor, other);
        d >= self.negative_min && d <= self.negative_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor_id: u64,
    pub positive_id: u64,
    pub negative_id: u64,
}

/// A pose table with a uniform spatial index over (x, y).
#[derive(Debug, Clone)]
pub struct PoseTable {
    poses: Vec<Pose>,
    grid: SpatialGrid,
}

impl PoseTable {
    pub fn new(poses: Vec<Pose>, cell_size: f64) -> PoseTable {
        let grid = SpatialGrid::build(cell_size, poses.iter().map(|p| (p.x, p.y)));
        PoseTable { poses, grid }
    }

    /// Cell size tuned to the mining band.
    pub fn for_rules(poses: Vec<Pose>, rules: &MiningRules) -> PoseTable {
        PoseTable::new(poses, rules.negative_max.max(1.0))
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Table indices of valid positives for the anchor, ascending.
    pub fn positive_candidates(&self, anchor: &Pose, rules: &MiningRules) -> Vec<usize> {
        self.grid
            .candidates_within(anchor.x, anchor.y, rules.positive_radius)
            .into_iter()
            .filter(|&i| rules.is_positive(anchor, &self.poses[i]))
            .collect()
    }

    /// Table indices of valid negatives for the anchor, ascending.
    pub fn negative_candidates(&self, anchor: &Pose, rules: &MiningRules) -> Vec<usize> {
        self.grid
            .candidates_within(anchor.x, anchor.y, rules.negative_max)
            .into_iter()
            .filter(|&i| rules.is_negative(anchor, &self.poses[i]))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub triplets: Vec<Triplet>,
    /// Anchors sampled but skipped for lack of a valid positive or negative.
    pub skipped: usize,
}

/// Sample `count` anchors and mine one triplet from each when possible.
/// Anchors without a valid positive or negative are skipped and counted.
pub fn mine_triplets(
    table: &PoseTable,
    rules: &MiningRules,
    count: usize,
    seed: u64,
) -> Result<MiningOutcome> {
    rules.validate()?;
    let mut rng = rng_for(seed, "mine-triplets", 0);
    let mut triplets = Vec::with_capacity(count);
    let mut skipped = 0usize;
    if table.is_empty() {
        return Ok(MiningOutcome {
            triplets,
            skipped: count,
        });
    }
    for _ in 0..count {
        let anchor_idx = rng.random_range(0..table.len());
        let anchor = &table.poses[anchor_idx];
        let positives = table.positive_candidates(anchor, rules);
        if positives.is_empty() {
            skipped += 1;
            continue;
        }
        let negatives = table.negative_candidates(anchor, rules);
        if negatives.is_empty() {
            skipped += 1;
            continue;
        }
        let p = positives[rng.random_range(0..positives.len())];
        let n = negatives[rng.random_range(0..negatives.len())];
        triplets.push(Triplet {
            anchor_id: anchor.reading_id,
            positive_id: table.poses[p].reading_id,
            negative_id: table.poses[n].reading_id,
        });
    }
    Ok(MiningOutcome { triplets, skipped })
}
