//! Adaptive geo-cell partitioning.
//!
//! Each of the six cube faces is the root of a quadtree. A cell holding more
//! than `max_images` training points is split into its four quadrants until
//! every leaf fits (or `max_depth` is reached); leaves with fewer than
//! `min_images` points are discarded. The retained leaves, sorted by token,
//! are the classes of one resolution level.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::geom::{self, chordal_mean, project_to_face, FaceUV, GeoCoord, MeanError};
use crate::{Error, Result};

/// Depth of the implicit leaf grid used for point keys.
pub const MAX_LEVEL: u8 = 30;

pub const CELLS_HEADER: &str = "TLOC-CELLS v1";

/// A quadtree cell: a face plus a path of quadrant digits.
///
/// Digit `d` at each level encodes `d = (u ≥ ½) + 2·(v ≥ ½)` relative to the parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CellToken {
    face: u8,
    depth: u8,
    i: u32,
    j: u32,
}

impl CellToken {
    pub fn root(face: u8) -> Self {
        assert!(face < 6);
        Self {
            face,
            depth: 0,
            i: 0,
            j: 0,
        }
    }

    pub fn face(&self) -> u8 {
        self.face
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    /// Quadrant digit at level `l` (1-based).
    fn digit(&self, l: u8) -> u8 {
        let shift = self.depth - l;
        (((self.i >> shift) & 1) | (((self.j >> shift) & 1) << 1)) as u8
    }

    pub fn path(&self) -> String {
        (1..=self.depth)
            .map(|l| char::from(b'0' + self.digit(l)))
            .collect()
    }

    pub fn child(&self, digit: u8) -> Self {
        assert!(digit < 4 && self.depth < MAX_LEVEL);
        Self {
            face: self.face,
            depth: self.depth + 1,
            i: (self.i << 1) | u32::from(digit & 1),
            j: (self.j << 1) | u32::from(digit >> 1),
        }
    }

    /// Smallest cell at `depth` containing the face position.
    pub fn containing(p: FaceUV, depth: u8) -> Self {
        assert!(depth <= MAX_LEVEL);
        let scale = (1u64 << depth) as f64;
        Self {
            face: p.face,
            depth,
            i: (p.u * scale) as u32,
            j: (p.v * scale) as u32,
        }
    }

    /// True iff `self` is a strict prefix of `other`.
    pub fn is_ancestor_of(&self, other: &CellToken) -> bool {
        if self.face != other.face || self.depth >= other.depth {
            return false;
        }
        let shift = other.depth - self.depth;
        other.i >> shift == self.i && other.j >> shift == self.j
    }

    /// Whether the face position lies in this cell's half-open `[lo, hi)` rectangle.
    pub fn contains(&self, p: FaceUV) -> bool {
        let scale = (1u64 << self.depth) as f64;
        let (lo_u, lo_v) = (self.i as f64 / scale, self.j as f64 / scale);
        let (hi_u, hi_v) = ((self.i + 1) as f64 / scale, (self.j + 1) as f64 / scale);
        p.face == self.face && p.u >= lo_u && p.u < hi_u && p.v >= lo_v && p.v < hi_v
    }

    pub fn center(&self) -> GeoCoord {
        geom::face_center(self.face, self.depth, self.i, self.j)
    }

    /// Range of leaf keys (see [`leaf_key`]) covered by this cell.
    fn key_range(&self) -> (u64, u64) {
        let shift = 2 * u32::from(MAX_LEVEL - self.depth);
        let base = (u64::from(self.face) << 60) | (interleave(self.i, self.j) << shift);
        (base, base + (1u64 << shift))
    }
}

impl PartialOrd for CellToken {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Lexicographic on `(face, path)`; a prefix sorts before its extensions.
impl Ord for CellToken {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.face.cmp(&other.face).then_with(|| {
            let common = self.depth.min(other.depth);
            for l in 1..=common {
                match self.digit(l).cmp(&other.digit(l)) {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            self.depth.cmp(&other.depth)
        })
    }
}

impl fmt::Display for CellToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.face, self.path())
    }
}

impl FromStr for CellToken {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (face, path) = s
            .split_once('/')
            .ok_or_else(|| format!("bad cell token {s:?}"))?;
        let face: u8 = face.parse().map_err(|_| format!("bad face in {s:?}"))?;
        if face > 5 || path.len() > MAX_LEVEL as usize {
            return Err(format!("bad cell token {s:?}"));
        }
        let mut tok = CellToken::root(face);
        for ch in path.bytes() {
            match ch {
                b'0'..=b'3' => tok = tok.child(ch - b'0'),
                _ => return Err(format!("bad digit in {s:?}")),
            }
        }
        Ok(tok)
    }
}

/// Interleaves bits: `i` on even positions, `j` on odd ones.
fn interleave(i: u32, j: u32) -> u64 {
    fn spread(x: u32) -> u64 {
        let mut x = u64::from(x);
        x = (x | (x << 16)) & 0x0000_FFFF_0000_FFFF;
        x = (x | (x << 8)) & 0x00FF_00FF_00FF_00FF;
        x = (x | (x << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
        x = (x | (x << 2)) & 0x3333_3333_3333_3333;
        x = (x | (x << 1)) & 0x5555_5555_5555_5555;
        x
    }
    spread(i) | (spread(j) << 1)
}

/// Sort key of a point: face in the top bits, then the Morton code of its
/// depth-30 leaf. Keys of a cell's points form one contiguous range.
fn leaf_key(p: FaceUV) -> u64 {
    let leaf = CellToken::containing(p, MAX_LEVEL);
    (u64::from(p.face) << 60) | interleave(leaf.i, leaf.j)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Level {
    Coarse,
    Middle,
    Fine,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Coarse, Level::Middle, Level::Fine];

    pub fn name(&self) -> &'static str {
        match self {
            Level::Coarse => "coarse",
            Level::Middle => "middle",
            Level::Fine => "fine",
        }
    }
}

impl FromStr for Level {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "coarse" => Ok(Level::Coarse),
            "middle" => Ok(Level::Middle),
            "fine" => Ok(Level::Fine),
            _ => Err(format!("unknown level {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub token: CellToken,
    pub train_count: usize,
    pub mean_gps: GeoCoord,
}

/// Retained cells of one level, in class-id order.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub level: Level,
    cells: Vec<Cell>,
    ranges: Vec<(u64, u64)>,
    /// `(min_images, max_images)` the partition was built with; unknown when read from a file.
    pub limits: Option<(usize, usize)>,
}

impl Partition {
    fn from_cells(level: Level, cells: Vec<Cell>, limits: Option<(usize, usize)>) -> Self {
        let ranges = cells.iter().map(|c| c.token.key_range()).collect();
        Self {
            level,
            cells,
            ranges,
            limits,
        }
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Class id of the retained cell containing `c`, if any.
    pub fn locate(&self, c: GeoCoord) -> Option<usize> {
        let key = leaf_key(project_to_face(c));
        let idx = self.ranges.partition_point(|r| r.0 <= key);
        (idx > 0 && key < self.ranges[idx - 1].1).then(|| idx - 1)
    }

    pub fn class_to_gps(&self, id: usize) -> Result<GeoCoord> {
        self.cells
            .get(id)
            .map(|c| c.mean_gps)
            .ok_or(Error::ClassOutOfRange {
                level: self.level.name(),
                id,
                count: self.cells.len(),
            })
    }
}

/// Outcome of [`build_partition`].
#[derive(Clone, Debug)]
pub struct PartitionBuild {
    pub partition: Partition,
    /// Points that fell in leaves below `min_images`.
    pub dropped: usize,
    /// Leaves still above `max_images` at `max_depth`; kept, not dropped.
    pub oversize: Vec<CellToken>,
}

struct Splitter<'a> {
    keys: &'a [u64],
    coords: &'a [GeoCoord],
    min_images: usize,
    max_images: usize,
    max_depth: u8,
    cells: Vec<Cell>,
    dropped: usize,
    oversize: Vec<CellToken>,
}

impl Splitter<'_> {
    fn visit(&mut self, cell: CellToken, lo: usize, hi: usize) {
        let count = hi - lo;
        if count > self.max_images && cell.depth < self.max_depth {
            let mut start = lo;
            for digit in 0..4 {
                let child = cell.child(digit);
                let (_, end_key) = child.key_range();
                let end = lo + self.keys[lo..hi].partition_point(|&k| k < end_key);
                self.visit(child, start, end);
                start = end;
            }
            return;
        }
        if count == 0 {
            return;
        }
        if count < self.min_images {
            self.dropped += count;
            return;
        }
        if count > self.max_images {
            log::warn!(
                "cell {cell} keeps {count} points above the maximum of {} at depth {}",
                self.max_images,
                cell.depth
            );
            self.oversize.push(cell);
        }
        let mean_gps = match chordal_mean(&self.coords[lo..hi]) {
            Ok(m) => m,
            Err(MeanError::Degenerate) => cell.center(),
            Err(MeanError::EmptyPointSet) => unreachable!("count > 0"),
        };
        self.cells.push(Cell {
            token: cell,
            train_count: count,
            mean_gps,
        });
    }
}

/// Adaptive quadtree partition of `points` for one level.
pub fn build_partition(
    level: Level,
    points: &[GeoCoord],
    min_images: usize,
    max_images: usize,
    max_depth: u8,
) -> Result<PartitionBuild> {
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    if min_images == 0 || max_images < min_images || max_depth == 0 || max_depth > MAX_LEVEL {
        return Err(Error::Validation(format!(
            "invalid partition limits: min {min_images}, max {max_images}, depth {max_depth}"
        )));
    }
    let mut keyed: Vec<(u64, GeoCoord)> = points
        .iter()
        .map(|&c| (leaf_key(project_to_face(c)), c))
        .collect();
    // stable: equal keys keep input order, so the means are order-deterministic
    keyed.sort_by_key(|(k, _)| *k);
    let keys: Vec<u64> = keyed.iter().map(|(k, _)| *k).collect();
    let coords: Vec<GeoCoord> = keyed.iter().map(|(_, c)| *c).collect();

    let mut s = Splitter {
        keys: &keys,
        coords: &coords,
        min_images,
        max_images,
        max_depth,
        cells: Vec::new(),
        dropped: 0,
        oversize: Vec::new(),
    };
    let mut start = 0;
    for face in 0..6u8 {
        let root = CellToken::root(face);
        let end = keys.partition_point(|&k| k < root.key_range().1);
        s.visit(root, start, end);
        start = end;
    }
    let Splitter {
        cells,
        dropped,
        oversize,
        ..
    } = s;
    Ok(PartitionBuild {
        partition: Partition::from_cells(level, cells, Some((min_images, max_images))),
        dropped,
        oversize,
    })
}

/// Per-level limits. All three levels share `min_images`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellsConfig {
    pub min_images: usize,
    pub max_coarse: usize,
    pub max_middle: usize,
    pub max_fine: usize,
    pub max_depth: u8,
}

impl CellsConfig {
    pub fn max_for(&self, level: Level) -> usize {
        match level {
            Level::Coarse => self.max_coarse,
            Level::Middle => self.max_middle,
            Level::Fine => self.max_fine,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_images == 0 {
            return Err(Error::Validation(
                "cells.min_images must be at least 1".into(),
            ));
        }
        if !(self.max_coarse >= self.max_middle && self.max_middle >= self.max_fine) {
            return Err(Error::Validation(
                "cell maxima must not increase from coarse to fine".into(),
            ));
        }
        if self.max_fine < self.min_images {
            return Err(Error::Validation(
                "cells.max_fine must be at least cells.min_images".into(),
            ));
        }
        if self.max_depth == 0 || self.max_depth > MAX_LEVEL {
            return Err(Error::Validation(format!(
                "cells.max_depth must be in 1..={MAX_LEVEL}"
            )));
        }
        Ok(())
    }
}

/// The three partitions used for labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CellIndex {
    pub coarse: Partition,
    pub middle: Partition,
    pub fine: Partition,
}

#[derive(Clone, Debug)]
pub struct IndexBuild {
    pub index: CellIndex,
    /// Dropped point counts per level (coarse, middle, fine).
    pub dropped: [usize; 3],
    pub oversize: Vec<(Level, CellToken)>,
}

pub fn build_index(points: &[GeoCoord], config: &CellsConfig) -> Result<IndexBuild> {
    config.validate()?;
    let mut parts = Vec::with_capacity(3);
    let mut dropped = [0; 3];
    let mut oversize = Vec::new();
    for (k, level) in Level::ALL.into_iter().enumerate() {
        let b = build_partition(
            level,
            points,
            config.min_images,
            config.max_for(level),
            config.max_depth,
        )?;
        if b.partition.is_empty() {
            return Err(Error::NoRetainableCells(level.name()));
        }
        dropped[k] = b.dropped;
        oversize.extend(b.oversize.into_iter().map(|t| (level, t)));
        parts.push(b.partition);
    }
    let fine = parts.pop().unwrap();
    let middle = parts.pop().unwrap();
    let coarse = parts.pop().unwrap();
    Ok(IndexBuild {
        index: CellIndex {
            coarse,
            middle,
            fine,
        },
        dropped,
        oversize,
    })
}

impl CellIndex {
    pub fn level(&self, level: Level) -> &Partition {
        match level {
            Level::Coarse => &self.coarse,
            Level::Middle => &self.middle,
            Level::Fine => &self.fine,
        }
    }

    pub fn locate(&self, c: GeoCoord, level: Level) -> Option<usize> {
        self.level(level).locate(c)
    }

    /// Class ids at all three levels, or `None` if any level leaves `c` unassigned.
    pub fn locate_all(&self, c: GeoCoord) -> Option<[usize; 3]> {
        Some([
            self.coarse.locate(c)?,
            self.middle.locate(c)?,
            self.fine.locate(c)?,
        ])
    }

    pub fn class_to_gps(&self, level: Level, id: usize) -> Result<GeoCoord> {
        self.level(level).class_to_gps(id)
    }

    pub fn class_counts(&self) -> [usize; 3] {
        [self.coarse.len(), self.middle.len(), self.fine.len()]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CELLS_HEADER}")?;
        for level in Level::ALL {
            for c in self.level(level).cells() {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{:.9}\t{:.9}",
                    level.name(),
                    c.token,
                    c.train_count,
                    c.mean_gps.lat(),
                    c.mean_gps.lon()
                )?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("cell index text is ASCII")
    }

    /// Parses the text form; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CELLS_HEADER) {
            return Err(Error::format(
                origin,
                format!("missing {CELLS_HEADER:?} header"),
            ));
        }
        let mut per_level: [Vec<Cell>; 3] = Default::default();
        let mut last_level = Level::Coarse;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let bad = |msg: &str| Error::format(origin, format!("line {lineno}: {msg}"));
            let fields: Vec<&str> = line.split('\t').collect();
            let [level, token, count, lat, lon] = fields[..] else {
                return Err(bad("expected 5 tab-separated fields"));
            };
            let level: Level = level.parse().map_err(|e: String| bad(&e))?;
            if level < last_level {
                return Err(bad("levels out of order"));
            }
            last_level = level;
            let token: CellToken = token.parse().map_err(|e: String| bad(&e))?;
            let train_count: usize = count.parse().map_err(|_| bad("bad count"))?;
            let lat: f64 = lat.parse().map_err(|_| bad("bad latitude"))?;
            let lon: f64 = lon.parse().map_err(|_| bad("bad longitude"))?;
            let mean_gps = GeoCoord::new(lat, lon).map_err(|e| bad(&e.to_string()))?;
            let cells = &mut per_level[level as usize];
            if let Some(prev) = cells.last() {
                if prev.token >= token || prev.token.is_ancestor_of(&token) {
                    return Err(bad(
                        "cells not in strictly increasing, non-overlapping order",
                    ));
                }
            }
            cells.push(Cell {
                token,
                train_count,
                mean_gps,
            });
        }
        let [coarse, middle, fine] = per_level;
        for (cells, level) in [
            (&coarse, Level::Coarse),
            (&middle, Level::Middle),
            (&fine, Level::Fine),
        ] {
            if cells.is_empty() {
                return Err(Error::format(origin, format!("no {} cells", level.name())));
            }
        }
        Ok(CellIndex {
            coarse: Partition::from_cells(Level::Coarse, coarse, None),
            middle: Partition::from_cells(Level::Middle, middle, None),
            fine: Partition::from_cells(Level::Fine, fine, None),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(lat: f64, lon: f64) -> GeoCoord {
        GeoCoord::new(lat, lon).unwrap()
    }

    fn quadrant_centres() -> Vec<GeoCoord> {
        let root = CellToken::root(0);
        (0..4).map(|d| root.child(d).center()).collect()
    }

    #[test]
    fn token_text_round_trip_and_order() {
        let t: CellToken = "3/0213".parse().unwrap();
        assert_eq!(t.to_string(), "3/0213");
        assert_eq!(t.depth(), 4);
        assert_eq!("2/".parse::<CellToken>().unwrap(), CellToken::root(2));
        assert!("6/0".parse::<CellToken>().is_err());
        assert!("1/04".parse::<CellToken>().is_err());
        let a: CellToken = "1/03".parse().unwrap();
        let b: CellToken = "1/1".parse().unwrap();
        let p: CellToken = "1/0".parse().unwrap();
        assert!(a < b && p < a);
        assert!(p.is_ancestor_of(&a) && !a.is_ancestor_of(&p) && !p.is_ancestor_of(&p));
    }

    #[test]
    fn child_digits_follow_quadrant_order() {
        let root = CellToken::root(0);
        let probes = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
        for (d, (u, v)) in probes.into_iter().enumerate() {
            let p = FaceUV { face: 0, u, v };
            assert!(root.child(d as u8).contains(p));
            assert_eq!(CellToken::containing(p, 1), root.child(d as u8));
        }
    }

    #[test]
    fn four_quadrant_clusters_split_once() {
        let mut pts = Vec::new();
        for centre in quadrant_centres() {
            pts.extend(std::iter::repeat_n(centre, 8));
        }
        let b = build_partition(Level::Fine, &pts, 5, 10, 20).unwrap();
        let counts: Vec<usize> = b.partition.cells().iter().map(|c| c.train_count).collect();
        assert_eq!(counts, vec![8, 8, 8, 8]);
        assert_eq!(b.dropped, 0);
        let paths: Vec<String> = b
            .partition
            .cells()
            .iter()
            .map(|c| c.token.to_string())
            .collect();
        assert_eq!(paths, vec!["0/0", "0/1", "0/2", "0/3"]);
    }

    #[test]
    fn sparse_face_is_dropped() {
        let pts = vec![c(1.0, 1.0), c(2.0, 2.0), c(3.0, 3.0)];
        let b = build_partition(Level::Coarse, &pts, 5, 10, 20).unwrap();
        assert!(b.partition.is_empty());
        assert_eq!(b.dropped, 3);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(
            build_partition(Level::Coarse, &[], 1, 2, 3),
            Err(Error::EmptyPointSet)
        ));
    }

    #[test]
    fn oversize_leaf_at_max_depth_is_kept() {
        let pts = vec![c(10.0, 10.0); 30];
        let b = build_partition(Level::Fine, &pts, 5, 10, 4).unwrap();
        assert_eq!(b.partition.len(), 1);
        assert_eq!(b.partition.cells()[0].token.depth(), 4);
        assert_eq!(b.oversize.len(), 1);
    }

    #[test]
    fn locate_and_class_to_gps() {
        let paris = c(48.86, 2.29);
        let mut pts = vec![paris];
        pts.extend([c(-30.0, 120.0); 3]);
        let b = build_partition(Level::Fine, &pts, 1, 1, 20).unwrap();
        let id = b.partition.locate(paris).unwrap();
        let g = b.partition.class_to_gps(id).unwrap();
        assert!((g.lat() - 48.86).abs() < 1e-9 && (g.lon() - 2.29).abs() < 1e-9);
        assert_eq!(b.partition.locate(c(0.0, -100.0)), None);
        let k = b.partition.len();
        assert!(matches!(
            b.partition.class_to_gps(k),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn cell_mean_is_chordal() {
        let pts = vec![c(0.0, 10.0), c(0.0, -10.0)];
        let b = build_partition(Level::Coarse, &pts, 1, 10, 20).unwrap();
        let g = b.partition.class_to_gps(0).unwrap();
        assert!(g.lat().abs() < 1e-12 && g.lon().abs() < 1e-12);
    }

    #[test]
    fn face_edge_point_goes_to_lower_face_cell() {
        // lat 0, lon 45 is on the edge shared by faces 0 and 1
        let edge = c(0.0, 45.0);
        let pts = vec![c(0.0, 44.0), c(0.0, 46.0), edge];
        let b = build_partition(Level::Fine, &pts, 1, 1, 20).unwrap();
        let id = b.partition.locate(edge).unwrap();
        assert_eq!(b.partition.cells()[id].token.face(), 0);
    }

    #[test]
    fn index_text_round_trip() {
        let pts: Vec<GeoCoord> = (0..200)
            .map(|k| c((k % 17) as f64 * 3.0 - 20.0, (k % 23) as f64 * 7.0 - 80.0))
            .collect();
        let cfg = CellsConfig {
            min_images: 2,
            max_coarse: 40,
            max_middle: 20,
            max_fine: 10,
            max_depth: 20,
        };
        let idx = build_index(&pts, &cfg).unwrap().index;
        let text = idx.to_text();
        assert!(text.starts_with("TLOC-CELLS v1\n"));
        let back = CellIndex::parse(&text, "mem").unwrap();
        assert_eq!(back.class_counts(), idx.class_counts());
        assert_eq!(back.to_text(), text);
        assert!(CellIndex::parse("nope\n", "mem").is_err());
    }

    #[test]
    fn too_high_minimum_has_no_retainable_cells() {
        let pts = vec![c(1.0, 1.0); 5];
        let cfg = CellsConfig {
            min_images: 10,
            max_coarse: 40,
            max_middle: 20,
            max_fine: 10,
            max_depth: 20,
        };
        let err = build_index(&pts, &cfg).unwrap_err();
        assert!(err.to_string().contains("no retainable cells"));
    }
}
