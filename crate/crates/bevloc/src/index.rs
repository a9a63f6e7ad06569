//! The retrieval database: vector-pose records, exact k-NN, GPS-restricted
//! search and persistence.
//!
//! Retrieval is an exact linear scan (the desk-scale databases here search
//! in milliseconds; an approximate index would confound evaluation). The
//! GPS-restricted path prunes candidates with a uniform spatial grid before
//! the exact distance filter, and both paths sort hits by ascending
//! embedding distance with ties broken by ascending reading id.
//!
//! File layout (`.pitd`): magic `PITD`, u32 version (=1), u32 descriptor
//! dimension, u64 record count, then per record the descriptor (dim f32,
//! little-endian), x, y, heading (f64), trip_id, reading_id (u64), and a
//! trailing u64 FNV-1a checksum over all preceding bytes. Timestamps and
//! metadata references are not persisted.

use std::io::{BufReader, Read};
use std::path::Path;

use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::geom::{planar_distance, GpsFix, Pose};
use crate::seeds::Fnv1a;
use crate::spatial::SpatialGrid;

pub const PITD_MAGIC: &[u8; 4] = b"PITD";
pub const PITD_VERSION: u32 = 1;
pub const DEFAULT_GRID_CELL_M: f64 = 25.0;

/// One database entry: descriptor, pose and an optional metadata link.
#[derive(Debug, Clone, PartialEq)]
pub struct LocRecord {
    pub descriptor: Descriptor,
    pub pose: Pose,
    pub metadata_ref: Option<u64>,
}

/// A hit returned by retrieval, in ranked order.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    /// Index into [`Database::records`].
    pub record_index: usize,
    pub reading_id: u64,
    pub embedding_distance: f64,
    pub predicted_pose: Pose,
}

#[derive(Debug, Clone)]
pub struct Database {
    records: Vec<LocRecord>,
    grid: SpatialGrid,
    descriptor_dim: usize,
}

impl Database {
    /// Assemble a database from records. Records are sorted by reading id,
    /// ids must be unique, and every valid descriptor must share one
    /// dimension.
    pub fn from_records(mut records: Vec<LocRecord>, grid_cell_m: f64) -> Result<Database> {
        records.sort_by_key(|r| r.pose.reading_id);
        for w in records.windows(2) {
            if w[0].pose.reading_id == w[1].pose.reading_id {
                return Err(Error::DuplicateReadingId(w[0].pose.reading_id));
            }
        }
        let dim = records.first().map(|r| r.descriptor.dim()).unwrap_or(0);
        for r in &records {
            if r.descriptor.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.descriptor.dim(),
                });
            }
        }
        let grid = SpatialGrid::build(
            grid_cell_m,
            records.iter().map(|r| (r.pose.x, r.pose.y)),
        );
        Ok(Database {
            records,
            grid,
            descriptor_dim: dim,
        })
    }

    pub fn records(&self) -> &[LocRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.descriptor_dim
    }

    /// Check that the spatial grid's membership matches the record set
    /// exactly (every record once, nothing else).
    pub fn audit_grid(&self) -> bool {
        let mut seen: Vec<usize> = self
            .grid
            .cells()
            .flat_map(|(_, members)| members.iter().copied())
            .collect();
        seen.sort_unstable();
        seen.len() == self.records.len() && seen.iter().enumerate().all(|(i, &m)| i == m)
    }

    fn check_query(&self, query: &Descriptor) -> Result<()> {
        if !self.records.is_empty() && query.dim() != self.descriptor_dim {
            return Err(Error::DimensionMismatch {
                expected: self.descriptor_dim,
                actual: query.dim(),
            });
        }
        Ok(())
    }

    /// Exact top-k by Euclidean embedding distance over all valid records.
    pub fn query_knn(&self, query: &Descriptor, k: usize) -> Result<Vec<RetrievalHit>> {
        self.check_query(query)?;
        let hits = self.rank((0..self.records.len()).collect(), query, k);
        Ok(hits)
    }

    /// Exact top-k restricted to records within `tau` metres of the GPS
    /// fix. An empty candidate set is reported as an error so callers can
    /// distinguish "nothing nearby" from "no match".
    pub fn query_gps(
        &self,
        query: &Descriptor,
        gps: &GpsFix,
        tau: f64,
        k: usize,
    ) -> Result<Vec<RetrievalHit>> {
        if !(tau > 0.0) {
            return Err(Error::InvalidParameter("tau must be positive".into()));
        }
        self.check_query(query)?;
        let candidates: Vec<usize> = self
            .grid
            .candidates_within(gps.x, gps.y, tau)
            .into_iter()
            .filter(|&i| {
                let p = &self.records[i].pose;
                planar_distance(p.x, p.y, gps.x, gps.y) <= tau
            })
            .collect();
        if candidates.is_empty() {
            return Err(Error::NoCandidatesWithinTau);
        }
        Ok(self.rank(candidates, query, k))
    }

    fn rank(&self, candidates: Vec<usize>, query: &Descriptor, k: usize) -> Vec<RetrievalHit> {
        let mut scored: Vec<(f64, u64, usize)> = candidates
            .into_iter()
            .filter(|&i| self.records[i].descriptor.is_valid())
            .map(|i| {
                let r = &self.records[i];
                (r.descriptor.distance(query), r.pose.reading_id, i)
            })
            .collect();
        let take = k.min(scored.len());
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        scored.truncate(take);
        scored
            .into_iter()
            .map(|(dist, reading_id, i)| RetrievalHit {
                record_index: i,
                reading_id,
                embedding_distance: dist,
                predicted_pose: self.records[i].pose,
            })
            .collect()
    }
}

/// Build a database by embedding readings. `embedder` must stay fixed for
/// the whole build; per-reading failures are recorded and the build
/// continues without those readings.
pub fn build_database<F>(
    readings: &[(Pose, F)],
    mut embedder: impl FnMut(&F) -> Result<Descriptor>,
    grid_cell_m: f64,
) -> Result<(Database, Vec<(u64, Error)>)>
where
    F: Sync,
{
    let mut failures = Vec::new();
    let mut records = Vec::with_capacity(readings.len());
    for (pose, payload) in readings {
        match embedder(payload) {
            Ok(descriptor) => records.push(LocRecord {
                descriptor,
                pose: *pose,
                metadata_ref: None,
            }),
            Err(e) => failures.push((pose.reading_id, e)),
        }
    }
    let db = Database::from_records(records, grid_cell_m)?;
    Ok((db, failures))
}

pub fn save_database(path: &Path, db: &Database) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(32 + db.len() * (db.descriptor_dim * 4 + 40));
    buf.extend_from_slice(PITD_MAGIC);
    buf.extend_from_slice(&PITD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(db.descriptor_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(db.len() as u64).to_le_bytes());
    for r in &db.records {
        for &v in r.descriptor.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&r.pose.x.to_le_bytes());
        buf.extend_from_slice(&r.pose.y.to_le_bytes());
        buf.extend_from_slice(&r.pose.heading.to_le_bytes());
        buf.extend_from_slice(&r.pose.trip_id.to_le_bytes());
        buf.extend_from_slice(&r.pose.reading_id.to_le_bytes());
    }
    let mut hasher = Fnv1a::new();
    hasher.update(&buf);
    buf.extend_from_slice(&hasher.finish().to_le_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_database(path: &Path) -> Result<Database> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::malformed(path, "file shorter than checksum"));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let mut hasher = Fnv1a::new();
    hasher.update(payload);
    if hasher.finish() != stored {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }

    let mut r = BufReader::new(payload);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != PITD_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "PITD",
        });
    }
    let version = crate::cloud::read_u32(&mut r, path)?;
    if version != PITD_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
            expected: PITD_VERSION,
        });
    }
    let dim = crate::cloud::read_u32(&mut r, path)? as usize;
    let count = crate::cloud::read_u64(&mut r, path)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        let mut values = Vec::with_capacity(dim);
        for _ in 0..dim {
            values.push(crate::cloud::read_f32(&mut r, path)?);
        }
        let x = crate::cloud::read_f64(&mut r, path)?;
        let y = crate::cloud::read_f64(&mut r, path)?;
        let heading = crate::cloud::read_f64(&mut r, path)?;
        let trip_id = crate::cloud::read_u64(&mut r, path)?;
        let reading_id = crate::cloud::read_u64(&mut r, path)?;
        records.push(LocRecord {
            descriptor: Descriptor::from_stored(values),
            pose: Pose::new(x, y, heading, trip_id, 0.0, reading_id),
        metadata_ref: None,
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::malformed(path, "trailing bytes after records"));
    }
    Database::from_records(records, DEFAULT_GRID_CELL_M)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pose(id: u64, x: f64, y: f64) -> Pose {
        Pose::new(x, y, 0.0, id / 100, 0.0, id)
    }

    fn random_db(n: usize, dim: usize, seed: u64) -> Database {
        let mut rng = crate::seeds::rng_for(seed, "index-test", 0);
        let records = (0..n)
            .map(|i| {
                let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                LocRecord {
                    descriptor: Descriptor::normalized(&raw),
                    pose: pose(i as u64, rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0)),
                    metadata_ref: None,
                }
            })
            .collect();
        Database::from_records(records, DEFAULT_GRID_CELL_M).unwrap()
    }

    /// Independent naive double-loop top-k used as the retrieval oracle.
    fn brute_force(
        db: &Database,
        query: &Descriptor,
        k: usize,
        filter: Option<(&GpsFix, f64)>,
    ) -> Vec<(f64, u64)> {
        let mut all: Vec<(f64, u64)> = Vec::new();
        for r in db.records() {
            if !r.descriptor.is_valid() {
                continue;
            }
            if let Some((gps, tau)) = filter {
                let d = planar_distance(r.pose.x, r.pose.y, gps.x, gps.y);
                if d > tau {
                    continue;
                }
            }
            let mut s = 0.0;
            for (a, b) in r.descriptor.values().iter().zip(query.values()) {
                let d = *a as f64 - *b as f64;
                s += d * d;
            }
            all.push((s.sqrt(), r.pose.reading_id));
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        all.truncate(k);
        all
    }

    #[test]
    fn empty_database_returns_no_hits() {
        let db = Database::from_records(vec![], DEFAULT_GRID_CELL_M).unwrap();
        let q = Descriptor::normalized(&[1.0, 0.0]);
        assert!(db.query_knn(&q, 5).unwrap().is_empty());
        assert!(db.audit_grid());
    }

    #[test]
    fn exact_match_is_rank_one_with_zero_distance() {
        let db = random_db(50, 16, 3);
        let q = db.records()[17].descriptor.clone();
        let hits = db.query_knn(&q, 3).unwrap();
        assert_eq!(hits[0].reading_id, db.records()[17].pose.reading_id);
        assert_eq!(hits[0].embedding_distance, 0.0);
    }

    #[test]
    fn k_larger_than_count_returns_all_sorted() {
        let db = random_db(7, 8, 4);
        let q = Descriptor::normalized(&vec![0.5; 8]);
        let hits = db.query_knn(&q, 100).unwrap();
        assert_eq!(hits.len(), 7);
        for w in hits.windows(2) {
            assert!(w[0].embedding_distance <= w[1].embedding_distance);
        }
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let db = random_db(500, 32, 5);
        let mut rng = crate::seeds::rng_for(6, "index-test-q", 0);
        for _ in 0..20 {
            let raw: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = Descriptor::normalized(&raw);
            let hits = db.query_knn(&q, 5).unwrap();
            let expected = brute_force(&db, &q, 5, None);
            assert_eq!(hits.len(), expected.len());
            for (h, (d, id)) in hits.iter().zip(&expected) {
                assert_eq!(h.reading_id, *id);
                assert!((h.embedding_distance - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gps_restriction_matches_filter_then_scan_oracle() {
        let db = random_db(500, 16, 7);
        let mut rng = crate::seeds::rng_for(8, "index-test-gps", 0);
        let mut nonempty = 0;
        for _ in 0..40 {
            let raw: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q = Descriptor::normalized(&raw);
            let gps = GpsFix {
                x: rng.random_range(-100.0..100.0),
                y: rng.random_range(-100.0..100.0),
            };
            let expected = brute_force(&db, &q, 5, Some((&gps, 20.0)));
            match db.query_gps(&q, &gps, 20.0, 5) {
                Ok(hits) => {
                    nonempty += 1;
                    assert_eq!(hits.len(), expected.len());
                    for (h, (d, id)) in hits.iter().zip(&expected) {
                        assert_eq!(h.reading_id, *id);
                        assert!((h.embedding_distance - d).abs() < 1e-12);
                    }
                    for h in &hits {
                        let p = h.predicted_pose;
                        assert!(planar_distance(p.x, p.y, gps.x, gps.y) <= 20.0);
                    }
                }
                Err(Error::NoCandidatesWithinTau) => assert!(expected.is_empty()),
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(nonempty > 0, "test world left every query empty");
    }

    #[test]
    fn huge_tau_equals_knn() {
        let db = random_db(100, 8, 9);
        let q = Descriptor::normalized(&vec![0.3; 8]);
        let gps = GpsFix { x: 0.0, y: 0.0 };
        let knn = db.query_knn(&q, 10).unwrap();
        let gpsr = db.query_gps(&q, &gps, 1e9, 10).unwrap();
        assert_eq!(knn, gpsr);
    }

    #[test]
    fn far_gps_fix_reports_no_candidates() {
        let db = random_db(100, 8, 10);
        let q = Descriptor::normalized(&vec![0.3; 8]);
        let gps = GpsFix { x: 1e6, y: 1e6 };
        assert!(matches!(
            db.query_gps(&q, &gps, 20.0, 5),
            Err(Error::NoCandidatesWithinTau)
        ));
    }

    #[test]
    fn duplicate_reading_id_rejected() {
        let d = Descriptor::normalized(&[1.0, 0.0]);
        let records = vec![
            LocRecord { descriptor: d.clone(), pose: pose(1, 0.0, 0.0), metadata_ref: None },
            LocRecord { descriptor: d, pose: pose(1, 5.0, 5.0), metadata_ref: None },
        ];
        assert!(matches!(
            Database::from_records(records, DEFAULT_GRID_CELL_M),
            Err(Error::DuplicateReadingId(1))
        ));
    }

    #[test]
    fn invalid_descriptors_excluded_from_search() {
        let records = vec![
            LocRecord {
                descriptor: Descriptor::invalid(4),
                pose: pose(0, 0.0, 0.0),
                metadata_ref: None,
            },
            LocRecord {
                descriptor: Descriptor::normalized(&[1.0, 0.0, 0.0, 0.0]),
                pose: pose(1, 1.0, 1.0),
                metadata_ref: None,
            },
        ];
        let db = Database::from_records(records, DEFAULT_GRID_CELL_M).unwrap();
        let q = Descriptor::invalid(4); // zero query: nearest by distance would be the zero record
        let hits = db.query_knn(&q, 2).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].reading_id, 1);
    }

    #[test]
    fn build_database_records_failures_and_continues() {
        let readings: Vec<(Pose, usize)> = (0..10).map(|i| (pose(i as u64, i as f64, 0.0), i)).collect();
        let (db, failures) = build_database(
            &readings,
            |&i| {
                if i == 3 {
                    Err(Error::EmptyDescriptor)
                } else {
                    Ok(Descriptor::normalized(&[i as f64 + 1.0, 1.0]))
                }
            },
            DEFAULT_GRID_CELL_M,
        )
        .unwrap();
        assert_eq!(db.len(), 9);
        assert_eq!(failures.len(), 1);
        assert_eq!(failures[0].0, 3);
        assert!(db.audit_grid());
    }

    #[test]
    fn save_load_round_trip_and_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.pitd");
        let db = random_db(25, 8, 11);
        save_database(&path, &db).unwrap();
        let loaded = load_database(&path).unwrap();
        assert_eq!(loaded.len(), db.len());
        for (a, b) in loaded.records().iter().zip(db.records()) {
            assert_eq!(a.descriptor, b.descriptor);
            assert_eq!(a.pose.x, b.pose.x);
            assert_eq!(a.pose.y, b.pose.y);
            assert_eq!(a.pose.heading, b.pose.heading);
            assert_eq!(a.pose.trip_id, b.pose.trip_id);
            assert_eq!(a.pose.reading_id, b.pose.reading_id);
        }

        // Saving the loaded database reproduces the file byte for byte.
        let path2 = dir.path().join("db2.pitd");
        save_database(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());

        // A single flipped payload byte fails the checksum.
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_database(&path),
            Err(Error::ChecksumMismatch { .. })
        ));
    }

    #[test]
    fn empty_database_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.pitd");
        let db = Database::from_records(vec![], DEFAULT_GRID_CELL_M).unwrap();
        save_database(&path, &db).unwrap();
        assert!(load_database(&path).unwrap().is_empty());
    }
}
