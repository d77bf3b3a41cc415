//! Synthetic world: clustered locations, each with a fixed block-mosaic
//! semantic layout and colour palette. Samples of a location share the exact
//! segmentation map; only their RGB rendering varies.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::cells::CellToken;
use crate::geom::{gcd_km, project_to_face, GeoCoord};
use crate::rngs::{stream, Stream};
use crate::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"TLOCDS1\0";

/// Layouts are `LAYOUT_BLOCKS × LAYOUT_BLOCKS` mosaics.
pub const LAYOUT_BLOCKS: usize = 4;

/// Locations are snapped to the centre of their cell at this depth, so GPS
/// noise never straddles a split line above it.
const SNAP_DEPTH: u8 = 12;
const MIN_CLUSTER_SEPARATION_KM: f64 = 3000.0;
const MIN_LOCATION_SEPARATION_KM: f64 = 30.0;
const MIN_LOCATION_OFFSET_KM: f64 = 30.0;
const GPS_NOISE_KM: f64 = 0.05;
const PIXEL_NOISE: f64 = 0.02;
const MAX_ATTEMPTS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_locations: usize,
    pub n_clusters: usize,
    pub samples_per_location: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub image_size: usize,
    pub n_seg_classes: usize,
    pub n_scene_classes: usize,
    pub cluster_radius_km: f64,
    /// Half-width of the per-sample additive brightness jitter.
    pub jitter_brightness: f64,
    /// Half-width of the per-sample contrast factor jitter around 1.
    pub jitter_contrast: f64,
    /// Strength used for the shifted test split.
    pub shift_strength: f64,
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.n_locations == 0 {
            return fail("world.n_locations must be at least 1".into());
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_locations {
            return fail("world.n_clusters must be in 1..=world.n_locations".into());
        }
        if self.samples_per_location == 0 {
            return fail("world.samples_per_location must be at least 1".into());
        }
        if self.val_count + self.test_count >= self.total_samples() {
            return fail("world.val_count + world.test_count leaves no training samples".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(LAYOUT_BLOCKS) {
            return fail(format!(
                "world.image_size must be a positive multiple of {LAYOUT_BLOCKS}"
            ));
        }
        if !(2..=256).contains(&self.n_seg_classes) {
            return fail("world.n_seg_classes must be in 2..=256".into());
        }
        if !(1..=65536).contains(&self.n_scene_classes) {
            return fail("world.n_scene_classes must be in 1..=65536".into());
        }
        if !(self.cluster_radius_km > MIN_LOCATION_OFFSET_KM) {
            return fail(format!(
                "world.cluster_radius_km must exceed {MIN_LOCATION_OFFSET_KM}"
            ));
        }
        for (name, v) in [
            ("world.jitter_brightness", self.jitter_brightness),
            ("world.jitter_contrast", self.jitter_contrast),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{name} must be in [0, 1)"));
            }
        }
        if !(-1.0..=1.0).contains(&self.shift_strength) {
            return fail("world.shift_strength must be in [-1, 1]".into());
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        self.n_locations * self.samples_per_location
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Channel-major `3 × H × W`, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Row-major `H × W` class ids.
    pub seg: Vec<u8>,
    pub coord: GeoCoord,
    pub scene: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub n_seg_classes: usize,
    pub n_scene_classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn coords(&self) -> Vec<GeoCoord> {
        self.samples.iter().map(|s| s.coord).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = Vec::with_capacity(28 + self.len() * (12 * h * w + h * w + 18));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [self.len(), h, w, self.n_seg_classes, self.n_scene_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in &self.samples {
            for v in &s.rgb {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.seg);
            out.extend_from_slice(&s.coord.lat().to_le_bytes());
            out.extend_from_slice(&s.coord.lon().to_le_bytes());
            out.extend_from_slice(&s.scene.to_le_bytes());
        }
        out
    }

    /// Parses the binary form; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != DATASET_MAGIC {
            return Err(bad("not a dataset file (bad magic)"));
        }
        let mut header = [0usize; 5];
        for h in &mut header {
            *h = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        }
        let [count, height, width, n_seg, n_scene] = header;
        if height == 0 || width == 0 || n_seg == 0 || n_seg > 256 || n_scene == 0 || n_scene > 65536
        {
            return Err(bad("invalid header values"));
        }
        let px = height * width;
        let record = 12 * px + px + 18;
        if (bytes.len() - r.pos) != count * record {
            return Err(bad(&format!(
                "expected {count} records of {record} bytes, found {} payload bytes",
                bytes.len() - r.pos
            )));
        }
        let mut samples = Vec::with_capacity(count);
        for k in 0..count {
            let rgb: Vec<f32> = r
                .take(12 * px)
                .unwrap()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad(&format!("record {k}: rgb value outside [0, 1]")));
            }
            let seg = r.take(px).unwrap().to_vec();
            if seg.iter().any(|&c| usize::from(c) >= n_seg) {
                return Err(bad(&format!("record {k}: segmentation class out of range")));
            }
            let lat = r.f64().unwrap();
            let lon = r.f64().unwrap();
            let coord = GeoCoord::new(lat, lon).map_err(|e| bad(&format!("record {k}: {e}")))?;
            let scene = r.u16().unwrap();
            if usize::from(scene) >= n_scene {
                return Err(bad(&format!("record {k}: scene class out of range")));
            }
            samples.push(Sample {
                rgb,
                seg,
                coord,
                scene,
            });
        }
        Ok(Dataset {
            height,
            width,
            n_seg_classes: n_seg,
            n_scene_classes: n_scene,
            samples,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Option<&'b [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f64(&mut self) -> Option<f64> {
        self.take(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// A place in the world with its fixed appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct Location {
    pub coord: GeoCoord,
    pub cluster: usize,
    /// `LAYOUT_BLOCKS²` seg classes, row-major.
    pub layout: Vec<u8>,
    /// RGB colour per seg class.
    pub palette: Vec<[f64; 3]>,
    pub scene: u16,
}

impl Location {
    /// The per-pixel segmentation map.
    pub fn seg_map(&self, size: usize) -> Vec<u8> {
        let block = size / LAYOUT_BLOCKS;
        (0..size * size)
            .map(|p| self.layout[(p / size / block) * LAYOUT_BLOCKS + (p % size) / block])
            .collect()
    }
}

pub struct World {
    pub locations: Vec<Location>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn random_on_sphere(rng: &mut ChaCha8Rng) -> GeoCoord {
    let z: f64 = rng.random_range(-1.0..1.0);
    let lon: f64 = rng.random_range(-180.0..180.0);
    GeoCoord::new(z.asin().to_degrees(), lon).expect("asin yields a valid latitude")
}

fn place_locations(spec: &WorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<(GeoCoord, usize)>> {
    let mut centres: Vec<GeoCoord> = Vec::with_capacity(spec.n_clusters);
    let mut attempts = 0;
    while centres.len() < spec.n_clusters {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Validation(format!(
                "cannot place {} clusters at least {MIN_CLUSTER_SEPARATION_KM} km apart",
                spec.n_clusters
            )));
        }
        let c = random_on_sphere(rng);
        if centres
            .iter()
            .all(|o| gcd_km(*o, c) >= MIN_CLUSTER_SEPARATION_KM)
        {
            centres.push(c);
        }
    }
    let mut placed: Vec<(GeoCoord, usize)> = Vec::with_capacity(spec.n_locations);
    for k in 0..spec.n_locations {
        let cluster = k % spec.n_clusters;
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::Validation(format!(
                    "cannot place {} locations within {} km cluster radius",
                    spec.n_locations, spec.cluster_radius_km
                )));
            }
            let bearing = rng.random_range(0.0..360.0);
            let dist = rng.random_range(MIN_LOCATION_OFFSET_KM..spec.cluster_radius_km);
            let raw = centres[cluster].destination(bearing, dist);
            let c = CellToken::containing(project_to_face(raw), SNAP_DEPTH).center();
            if placed
                .iter()
                .all(|(o, _)| gcd_km(*o, c) >= MIN_LOCATION_SEPARATION_KM)
            {
                placed.push((c, cluster));
                break;
            }
        }
    }
    Ok(placed)
}

/// The scene of a location is a function of its layout: the most common
/// seg class (lowest id on ties), folded into the scene label space.
fn scene_of(layout: &[u8], n_seg: usize, n_scene: usize) -> u16 {
    let mut counts = vec![0usize; n_seg];
    for &c in layout {
        counts[usize::from(c)] += 1;
    }
    let top = (0..n_seg).rev().max_by_key(|&c| counts[c]).unwrap();
    (top % n_scene) as u16
}

fn make_location(
    spec: &WorldSpec,
    coord: GeoCoord,
    cluster: usize,
    rng: &mut ChaCha8Rng,
    taken: &[Location],
) -> Location {
    let layout = loop {
        let l: Vec<u8> = (0..LAYOUT_BLOCKS * LAYOUT_BLOCKS)
            .map(|_| rng.random_range(0..spec.n_seg_classes) as u8)
            .collect();
        if taken.iter().all(|t| t.layout != l) {
            break l;
        }
    };
    let palette = (0..spec.n_seg_classes)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.2..0.8)))
        .collect();
    let scene = scene_of(&layout, spec.n_seg_classes, spec.n_scene_classes);
    Location {
        coord,
        cluster,
        layout,
        palette,
        scene,
    }
}

/// `μ + (x − μ)·contrast + offset` per channel, clamped to `[0, 1]`, where μ is the channel mean.
fn adjust_channels(rgb: &mut [f64], contrast: f64, offset: f64) {
    let plane = rgb.len() / 3;
    for ch in rgb.chunks_exact_mut(plane) {
        let mu = ch.iter().sum::<f64>() / plane as f64;
        for x in ch.iter_mut() {
            *x = (mu + (*x - mu) * contrast + offset).clamp(0.0, 1.0);
        }
    }
}

fn render(spec: &WorldSpec, loc: &Location, seg: &[u8], rng: &mut ChaCha8Rng) -> Vec<f32> {
    let plane = seg.len();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid std");
    let mut rgb = vec![0.0f64; 3 * plane];
    for ch in 0..3 {
        for (p, &c) in seg.iter().enumerate() {
            rgb[ch * plane + p] = loc.palette[usize::from(c)][ch] + noise.sample(rng);
        }
    }
    let b = spec.jitter_brightness;
    let c = spec.jitter_contrast;
    let brightness = if b > 0.0 {
        rng.random_range(-b..b)
    } else {
        0.0
    };
    let contrast = if c > 0.0 {
        rng.random_range(1.0 - c..1.0 + c)
    } else {
        1.0
    };
    adjust_channels(&mut rgb, contrast, brightness);
    rgb.into_iter().map(|v| v as f32).collect()
}

fn empty_like(spec: &WorldSpec) -> Dataset {
    Dataset {
        height: spec.image_size,
        width: spec.image_size,
        n_seg_classes: spec.n_seg_classes,
        n_scene_classes: spec.n_scene_classes,
        samples: Vec::new(),
    }
}

/// Builds the world and its shuffled val / test / train splits.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = stream(spec.seed, Stream::World);
    let placed = place_locations(spec, &mut rng)?;
    let mut locations: Vec<Location> = Vec::with_capacity(placed.len());
    for (coord, cluster) in placed {
        let loc = make_location(spec, coord, cluster, &mut rng, &locations);
        locations.push(loc);
    }

    let size = spec.image_size;
    let mut all = Vec::with_capacity(spec.total_samples());
    for loc in &locations {
        let seg = loc.seg_map(size);
        for _ in 0..spec.samples_per_location {
            let rgb = render(spec, loc, &seg, &mut rng);
            let coord = loc.coord.destination(
                rng.random_range(0.0..360.0),
                rng.random_range(0.0..GPS_NOISE_KM),
            );
            all.push(Sample {
                rgb,
                seg: seg.clone(),
                coord,
                scene: loc.scene,
            });
        }
    }
    all.shuffle(&mut rng);

    let mut val = empty_like(spec);
    let mut test = empty_like(spec);
    let mut train = empty_like(spec);
    let mut rest = all.into_iter();
    val.samples.extend(rest.by_ref().take(spec.val_count));
    test.samples.extend(rest.by_ref().take(spec.test_count));
    train.samples.extend(rest);
    Ok(World {
        locations,
        train,
        val,
        test,
    })
}

/// Global appearance shift of the RGB channels: contrast scaled by `1 − |s|`
/// around the channel mean, then offset by `s`. Everything else is untouched.
pub fn shift_appearance(data: &Dataset, strength: f64) -> Dataset {
    let mut out = data.clone();
    if strength == 0.0 {
        return out;
    }
    for s in &mut out.samples {
        let mut rgb: Vec<f64> = s.rgb.iter().map(|&v| f64::from(v)).collect();
        adjust_channels(&mut rgb, 1.0 - strength.abs(), strength);
        s.rgb = rgb.into_iter().map(|v| v as f32).collect();
    }
    out
}
