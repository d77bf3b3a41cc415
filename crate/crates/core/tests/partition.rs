use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use translocator::cells::{build_index, build_partition, CellsConfig, Level};
use translocator::geom::{project_to_face, GeoCoord};

/// Uniform on the sphere plus a few dense clusters, so that both shallow and
/// deep cells occur.
fn points(n: usize, seed: u64) -> Vec<GeoCoord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hubs = [(48.8, 2.3), (40.7, -74.0), (-33.9, 151.2), (35.7, 139.7)];
    (0..n)
        .map(|k| {
            if k % 2 == 0 {
                let z: f64 = rng.random_range(-1.0..1.0);
                let lon: f64 = rng.random_range(-180.0..180.0);
                GeoCoord::new(z.asin().to_degrees(), lon).unwrap()
            } else {
                let (lat, lon) = hubs[k % hubs.len()];
                let d: f64 = rng.random_range(0.0..400.0);
                let b: f64 = rng.random_range(0.0..360.0);
                GeoCoord::new(lat, lon).unwrap().destination(b, d)
            }
        })
        .collect()
}

#[test]
fn counts_bounds_and_conservation_against_brute_force() {
    let pts = points(10_000, 7);
    let faces: Vec<_> = pts.iter().map(|&p| project_to_face(p)).collect();
    for (min, max) in [(50, 500), (10, 80), (1, 1000)] {
        let b = build_partition(Level::Fine, &pts, min, max, 20).unwrap();
        let cells = b.partition.cells();
        assert!(b.oversize.is_empty());
        let mut retained = 0;
        for c in cells {
            let brute = faces.iter().filter(|f| c.token.contains(**f)).count();
            assert_eq!(brute, c.train_count, "cell {}", c.token);
            assert!(c.train_count >= min && c.train_count <= max);
            retained += c.train_count;
        }
        assert_eq!(retained + b.dropped, pts.len());
        for w in cells.windows(2) {
            assert!(w[0].token < w[1].token && !w[0].token.is_ancestor_of(&w[1].token));
        }
        // locate agrees with the geometric containment test
        for (p, f) in pts.iter().zip(&faces).step_by(7) {
            let brute = cells.iter().position(|c| c.token.contains(*f));
            assert_eq!(b.partition.locate(*p), brute);
        }
    }
}

#[test]
fn levels_nest() {
    let pts = points(10_000, 8);
    let cfg = CellsConfig {
        min_images: 50,
        max_coarse: 500,
        max_middle: 250,
        max_fine: 100,
        max_depth: 20,
    };
    let idx = build_index(&pts, &cfg).unwrap().index;
    for (finer, coarser) in [(&idx.fine, &idx.middle), (&idx.middle, &idx.coarse)] {
        for c in finer.cells() {
            let parents = coarser
                .cells()
                .iter()
                .filter(|p| p.token == c.token || p.token.is_ancestor_of(&c.token))
                .count();
            assert_eq!(parents, 1, "cell {} has {parents} enclosing cells", c.token);
        }
    }
}

#[test]
fn rebuild_is_identical() {
    let pts = points(3000, 9);
    let cfg = CellsConfig {
        min_images: 20,
        max_coarse: 300,
        max_middle: 150,
        max_fine: 60,
        max_depth: 20,
    };
    let a = build_index(&pts, &cfg).unwrap().index.to_text();
    let b = build_index(&pts, &cfg).unwrap().index.to_text();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn partition_invariants(seed in 0u64..1000, n in 1usize..600, min in 1usize..20, extra in 0usize..60) {
        let pts = points(n, seed);
        let max = min + extra;
        let b = build_partition(Level::Middle, &pts, min, max, 20).unwrap();
        let total: usize = b.partition.cells().iter().map(|c| c.train_count).sum();
        prop_assert_eq!(total + b.dropped, n);
        for c in b.partition.cells() {
            prop_assert!(c.train_count >= min);
            prop_assert!(c.train_count <= max || c.token.depth() == 20);
        }
    }
}

fn cfg(min: usize, maxes: [usize; 3]) -> CellsConfig {
    CellsConfig {
        min_images: min,
        max_coarse: maxes[0],
        max_middle: maxes[1],
        max_fine: maxes[2],
        max_depth: 20,
    }
}

#[test]
fn toy_limits_refine_with_level() {
    let pts = points(2000, 31);
    let [c, m, f] = build_index(&pts, &cfg(10, [200, 100, 50]))
        .unwrap()
        .index
        .class_counts();
    assert!(f >= m && m >= c && c >= 1, "{c} {m} {f}");
}

#[test]
fn single_cluster_keeps_a_coarse_cell_and_splits_deeper() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let hub = GeoCoord::new(12.0, 34.0).unwrap();
    let pts: Vec<GeoCoord> = (0..60)
        .map(|_| hub.destination(rng.random_range(0.0..360.0), rng.random_range(0.0..30.0)))
        .collect();
    let built = build_index(&pts, &cfg(10, [50, 25, 12])).unwrap();
    let [c, m, f] = built.index.class_counts();
    assert!(c >= 1);
    assert!(m > c, "{c} {m} {f}");
    let depth = |l: Level| {
        built
            .index
            .level(l)
            .cells()
            .iter()
            .map(|c| c.token.depth())
            .max()
            .unwrap()
    };
    assert!(depth(Level::Middle) > depth(Level::Coarse));
    assert!(depth(Level::Fine) > depth(Level::Middle));
    // every fine cell sits strictly below the middle cell it refines
    for fc in built.index.fine.cells() {
        let parent = built
            .index
            .middle
            .cells()
            .iter()
            .find(|mc| mc.token == fc.token || mc.token.is_ancestor_of(&fc.token));
        if let Some(parent) = parent {
            assert!(fc.token.depth() > parent.token.depth() || parent.train_count <= 12);
        }
    }
}

#[test]
fn min_above_data_size_has_no_cells() {
    let pts = points(30, 33);
    assert!(build_index(&pts, &cfg(31, [100, 50, 40])).is_err());
}

#[test]
fn locate_hits_at_most_one_cell() {
    let pts = points(3000, 34);
    let b = build_partition(Level::Fine, &pts, 5, 60, 20).unwrap();
    let cells = b.partition.cells();
    for p in points(10_000, 35) {
        let f = project_to_face(p);
        let hits: Vec<usize> = (0..cells.len())
            .filter(|&i| cells[i].token.contains(f))
            .collect();
        assert!(hits.len() <= 1);
        assert_eq!(b.partition.locate(p), hits.first().copied());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn finer_max_never_has_fewer_cells_without_a_floor(seed in 0u64..500, n in 50usize..800, max in 10usize..200, shrink in 1usize..10) {
        let pts = points(n, seed);
        let coarse = build_partition(Level::Fine, &pts, 1, max, 20).unwrap().partition.len();
        let fine = build_partition(Level::Fine, &pts, 1, max / shrink, 20).unwrap().partition.len();
        prop_assert!(fine >= coarse, "{fine} < {coarse}");
    }
}

#[test]
fn a_minimum_can_make_finer_max_retain_fewer_cells() {
    // splitting a retained cell can leave every child below the minimum
    let pts = points(50, 0);
    let loose = build_partition(Level::Fine, &pts, 3, 10, 20)
        .unwrap()
        .partition
        .len();
    let tight = build_partition(Level::Fine, &pts, 3, 3, 20)
        .unwrap()
        .partition
        .len();
    assert!(tight < loose, "{tight} vs {loose}");
}
