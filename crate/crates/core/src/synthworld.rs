//! Procedural geo-tagged panoramic world with known view semantics.
//!
//! Every place owns `A` anchor observations (unit-norm `T×D_in` token
//! matrices) pinned to compass headings. A view rendered at some heading is
//! a raised-cosine weighted blend of the anchors inside its angular window,
//! optionally overwritten in a contiguous band of token rows by one of a
//! small pool of occluders shared across the whole world, plus Gaussian
//! noise. Heading ground truth is stored on every image but only baselines
//! and analysis read it.
//!
//! Manifests use one `id@east@north@heading@tokens_offset` record per line,
//! with token blocks in a little-endian `f32` sidecar next to the manifest.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::tensor::dot;
use crate::diffcore::Tensor2;
use crate::error::{Error, Result};
use crate::geogrid::{grid_cell, CellId, UtmPoint};

/// Number of occluder signatures shared by the whole world.
pub const OCCLUDER_POOL: usize = 4;

/// Sidecar magic.
pub const TOKENS_MAGIC: &[u8; 8] = b"MVPRTOK1";

/// Largest pairwise |cosine| allowed between anchors of one place.
const MAX_ANCHOR_COSINE: f64 = 0.2;

const ANCHOR_RETRIES: usize = 1000;

/// Grid origin of generated worlds, roughly downtown San Francisco in UTM 10N.
const ORIGIN: UtmPoint = UtmPoint {
    east: 550_000.0,
    north: 4_180_000.0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageId(pub u64);

impl std::fmt::Display for ImageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub num_cells: usize,
    pub places_per_cell: usize,
    /// Anchors (semantic view groups) per place.
    pub groups: usize,
    pub d_in: usize,
    pub tokens: usize,
    pub cell_size: f64,
    /// Spacing of occupied cells, in cells. A stride of 4 with `M = 10`
    /// keeps places of different cells more than 25 m apart.
    pub cell_stride: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_cells: 100,
            places_per_cell: 1,
            groups: 3,
            d_in: 32,
            tokens: 8,
            cell_size: 10.0,
            cell_stride: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Place {
    pub position: UtmPoint,
    pub cell: CellId,
    /// Unit-Frobenius-norm `T×D_in` anchors, aligned with `anchor_headings`.
    pub anchors: Vec<Tensor2>,
    /// Ascending, in `[0, 360)`.
    pub anchor_headings: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub places: Vec<Place>,
    /// Row vectors of width `D_in`, on the same scale as rendered tokens.
    pub occluders: Vec<Vec<f64>>,
}

/// One view observation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoImage {
    pub id: ImageId,
    pub position: UtmPoint,
    /// Degrees in `[0, 360)`.
    pub heading: f64,
    pub tokens: Tensor2,
    /// Index of the dominant anchor, unknown for ingested data.
    pub true_group: Option<usize>,
    pub occluded: bool,
    /// Generating place, unknown for ingested data.
    pub place: Option<usize>,
}

/// Occlusion applied while rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcclusionSpec {
    /// Fraction of token rows replaced by the occluder.
    pub fraction: f64,
}

impl OcclusionSpec {
    pub const NONE: OcclusionSpec = OcclusionSpec { fraction: 0.0 };

    pub fn new(fraction: f64) -> Self {
        Self { fraction }
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a path of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base, 0x51ed), |acc, &t| mix(acc, t))
}

/// Signed angular difference `b - a` folded into `(-180, 180]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let mut d = (b - a).rem_euclid(360.0);
    if d > 180.0 {
        d -= 360.0;
    }
    d
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    let c = config;
    if c.num_cells == 0 || c.places_per_cell == 0 || c.groups == 0 || c.tokens == 0 {
        return Err(Error::Parameter(format!("world counts must be >= 1: {c:?}")));
    }
    if c.d_in < 4 {
        return Err(Error::Parameter(format!("d_in must be >= 4, got {}", c.d_in)));
    }
    if !(c.cell_size > 0.0) || c.cell_stride == 0 {
        return Err(Error::Parameter("cell size and stride must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, &[1]));
    let side = (c.num_cells as f64).sqrt().ceil() as usize;
    let dim = c.tokens * c.d_in;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let amplitude = (c.d_in as f64).sqrt();

    let occluders = (0..OCCLUDER_POOL)
        .map(|_| {
            let v: Vec<f64> = (0..c.d_in).map(|_| normal.sample(&mut rng)).collect();
            let n = dot(&v, &v).sqrt();
            v.into_iter().map(|x| x * amplitude / n).collect()
        })
        .collect();

    let mut places = Vec::with_capacity(c.num_cells * c.places_per_cell);
    for cell_index in 0..c.num_cells {
        let (col, row) = (cell_index % side, cell_index / side);
        let base_e = ORIGIN.east + (col * c.cell_stride) as f64 * c.cell_size;
        let base_n = ORIGIN.north + (row * c.cell_stride) as f64 * c.cell_size;
        for _ in 0..c.places_per_cell {
            let position = UtmPoint::new(
                base_e + rng.random_range(0.1..0.9) * c.cell_size,
                base_n + rng.random_range(0.1..0.9) * c.cell_size,
            );
            let cell = grid_cell(position, c.cell_size)?;
            let anchors = sample_anchors(&mut rng, c.groups, c.tokens, c.d_in, dim)?;
            let spacing = 360.0 / c.groups as f64;
            let offset = rng.random_range(0.0..360.0);
            let mut headings: Vec<f64> = (0..c.groups)
                .map(|k| {
                    let jitter = rng.random_range(-0.15..0.15) * spacing;
                    (offset + k as f64 * spacing + jitter).rem_euclid(360.0)
                })
                .collect();
            headings.sort_by(f64::total_cmp);
            places.push(Place {
                position,
                cell,
                anchors,
                anchor_headings: headings,
            });
        }
    }
    Ok(World {
        config: c.clone(),
        places,
        occluders,
    })
}

fn sample_anchors(
    rng: &mut ChaCha8Rng,
    count: usize,
    rows: usize,
    cols: usize,
    dim: usize,
) -> Result<Vec<Tensor2>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        if tries > ANCHOR_RETRIES {
            return Err(Error::Generation(format!(
                "could not place {count} anchors with |cos| < {MAX_ANCHOR_COSINE} in {dim} dims"
            )));
        }
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n = dot(&v, &v).sqrt();
        let v: Vec<f64> = v.into_iter().map(|x| x / n).collect();
        if out.iter().all(|u| dot(u, &v).abs() < MAX_ANCHOR_COSINE) {
            out.push(v);
        }
    }
    out.into_iter()
        .map(|v| Tensor2::from_vec(rows, cols, v))
        .collect()
}

/// Headings `a, a + step, …, a + 360 - step` for every start angle `a`,
/// folded into `[0, 360)`, deduplicated and sorted.
pub fn crop_schedule(start_angles: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 360.0) {
        return Err(Error::Parameter(format!("crop step must lie in (0, 360], got {step}")));
    }
    let per = 360.0 / step;
    if (per - per.round()).abs() > 1e-9 {
        return Err(Error::Parameter(format!("crop step {step} does not divide 360")));
    }
    let per = per.round() as usize;
    let mut out: Vec<f64> = start_angles
        .iter()
        .flat_map(|&a| (0..per).map(move |i| (a + i as f64 * step).rem_euclid(360.0)))
        .collect();
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    Ok(out)
}

/// Raised-cosine anchor weights for a view at `heading` with window `fov`.
/// Falls back to the nearest anchor when none is inside the window.
pub fn anchor_weights(headings: &[f64], heading: f64, fov: f64) -> Vec<f64> {
    let half = fov / 2.0;
    let mut w: Vec<f64> = headings
        .iter()
        .map(|&a| {
            let d = angle_diff(a, heading).abs();
            if d < half {
                0.5 * (1.0 + (std::f64::consts::PI * d / half).cos())
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        w.iter_mut().for_each(|x| *x /= total);
    } else {
        let nearest = headings
            .iter()
            .enumerate()
            .min_by(|a, b| {
                angle_diff(*a.1, heading).abs().total_cmp(&angle_diff(*b.1, heading).abs())
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        w[nearest] = 1.0;
    }
    w
}

/// Renders a view of `place_index` at `heading`.
#[allow(clippy::too_many_arguments)]
pub fn render_view(
    world: &World,
    place_index: usize,
    heading: f64,
    fov: f64,
    noise_sigma: f64,
    occlusion: OcclusionSpec,
    seed: u64,
    id: ImageId,
) -> Result<GeoImage> {
    let place = world.places.get(place_index).ok_or(Error::OutOfRange {
        index: place_index,
        len: world.places.len(),
    })?;
    if !(fov > 0.0 && fov <= 360.0) {
        return Err(Error::Parameter(format!("fov must lie in (0, 360], got {fov}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    if !(0.0..=1.0).contains(&occlusion.fraction) {
        return Err(Error::Parameter(format!(
            "occlusion fraction must lie in [0, 1], got {}",
            occlusion.fraction
        )));
    }
    let heading = heading.rem_euclid(360.0);
    let weights = anchor_weights(&place.anchor_headings, heading, fov);
    let true_group = weights
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &w)| if w > best.1 { (i, w) } else { best })
        .0;
    let (rows, cols) = (world.config.tokens, world.config.d_in);
    let amplitude = ((rows * cols) as f64).sqrt();
    let mut tokens = Tensor2::zeros(rows, cols);
    for (w, anchor) in weights.iter().zip(&place.anchors) {
        if *w == 0.0 {
            continue;
        }
        for (t, a) in tokens.data_mut().iter_mut().zip(anchor.data()) {
            *t += w * a;
        }
    }
    tokens.data_mut().iter_mut().for_each(|t| *t *= amplitude);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("finite sigma");
        tokens.data_mut().iter_mut().for_each(|t| *t += normal.sample(&mut rng));
    }
    let occluded_rows = (occlusion.fraction * rows as f64).round() as usize;
    if occluded_rows > 0 {
        let which = rng.random_range(0..world.occluders.len());
        let start = rng.random_range(0..=rows - occluded_rows);
        for r in start..start + occluded_rows {
            tokens.row_mut(r).copy_from_slice(&world.occluders[which]);
        }
    }
    Ok(GeoImage {
        id,
        position: place.position,
        heading,
        tokens,
        true_group: Some(true_group),
        occluded: occluded_rows > 0,
        place: Some(place_index),
    })
}

/// How training views and queries are rendered from a world.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub start_angles: Vec<f64>,
    pub crop_step: f64,
    pub fov: f64,
    pub noise_sigma: f64,
    /// Probability that a training view is occluded.
    pub occlusion_prob: f64,
    pub occlusion_fraction: f64,
    pub queries_per_place: usize,
    /// Probability that a query is occluded.
    pub query_occlusion_prob: f64,
    pub query_occlusion_fraction: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            start_angles: vec![0.0, 30.0],
            crop_step: 60.0,
            fov: 330.0,
            noise_sigma: 0.1,
            occlusion_prob: 0.3,
            occlusion_fraction: 0.3,
            queries_per_place: 1,
            query_occlusion_prob: 1.0,
            query_occlusion_fraction: 0.3,
        }
    }
}

/// Database id range starts at 0, query ids at this offset.
pub const QUERY_ID_OFFSET: u64 = 1 << 40;

/// Crops every place at the scheduled headings. Ids are
/// `place * 1000 + crop`.
pub fn render_database(world: &World, rc: &RenderConfig) -> Result<Vec<GeoImage>> {
    let headings = crop_schedule(&rc.start_angles, rc.crop_step)?;
    let mut out = Vec::with_capacity(world.places.len() * headings.len());
    for p in 0..world.places.len() {
        for (v, &h) in headings.iter().enumerate() {
            let seed = derive_seed(world.config.seed, &[2, p as u64, v as u64]);
            let mut draw = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
            let occ = if draw.random_bool(rc.occlusion_prob.clamp(0.0, 1.0)) {
                OcclusionSpec::new(rc.occlusion_fraction)
            } else {
                OcclusionSpec::NONE
            };
            let id = ImageId(p as u64 * 1000 + v as u64);
            out.push(render_view(world, p, h, rc.fov, rc.noise_sigma, occ, seed, id)?);
        }
    }
    Ok(out)
}

/// Queries at uniformly random headings.
pub fn render_queries(world: &World, rc: &RenderConfig) -> Result<Vec<GeoImage>> {
    let mut out = Vec::with_capacity(world.places.len() * rc.queries_per_place);
    for p in 0..world.places.len() {
        for q in 0..rc.queries_per_place {
            let seed = derive_seed(world.config.seed, &[3, p as u64, q as u64]);
            let mut draw = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
            let heading = draw.random_range(0.0..360.0);
            let occ = if draw.random_bool(rc.query_occlusion_prob.clamp(0.0, 1.0)) {
                OcclusionSpec::new(rc.query_occlusion_fraction)
            } else {
                OcclusionSpec::NONE
            };
            let id = ImageId(QUERY_ID_OFFSET + p as u64 * 1000 + q as u64);
            out.push(render_view(world, p, heading, rc.fov, rc.noise_sigma, occ, seed, id)?);
        }
    }
    Ok(out)
}

// ------------------------------------------------------------- manifests

/// Sidecar path for a manifest: same stem, `.tokens` extension.
pub fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("tokens")
}

/// Writes `images` as a manifest plus its token sidecar. All images must
/// share one token shape.
pub fn write_manifest(path: &Path, images: &[GeoImage]) -> Result<()> {
    let (rows, cols) = images.first().map(|i| i.tokens.shape()).unwrap_or((0, 0));
    let sidecar = sidecar_path(path);
    let mut tok = BufWriter::new(
        fs::File::create(&sidecar).map_err(|e| Error::io(format!("create {}", sidecar.display()), e))?,
    );
    let mut man = BufWriter::new(
        fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?,
    );
    let io_err = |e| Error::io(format!("write {}", path.display()), e);
    tok.write_all(TOKENS_MAGIC).map_err(io_err)?;
    tok.write_all(&(rows as u32).to_le_bytes()).map_err(io_err)?;
    tok.write_all(&(cols as u32).to_le_bytes()).map_err(io_err)?;
    let block = (rows * cols * 4) as u64;
    for (i, img) in images.iter().enumerate() {
        if img.tokens.shape() != (rows, cols) {
            return Err(Error::Contract(format!(
                "image {} has tokens {:?}, manifest uses {:?}",
                img.id,
                img.tokens.shape(),
                (rows, cols)
            )));
        }
        let offset = 16 + i as u64 * block;
        writeln!(
            man,
            "{}@{}@{}@{}@{}",
            img.id, img.position.east, img.position.north, img.heading, offset
        )
        .map_err(io_err)?;
        for v in img.tokens.data() {
            tok.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    man.flush().map_err(io_err)?;
    tok.flush().map_err(io_err)?;
    Ok(())
}

struct Record {
    id: ImageId,
    position: UtmPoint,
    heading: f64,
    offset: u64,
}

fn parse_record(line: &str, lineno: usize) -> Result<Record> {
    let fields: Vec<&str> = line.split('@').collect();
    if fields.len() != 5 {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected 5 '@'-separated fields, got {}", fields.len()),
        });
    }
    let bad = |name: &str, v: &str| Error::Parse {
        line: lineno,
        message: format!("invalid {name} {v:?}"),
    };
    let num = |name: &str, v: &str| -> Result<f64> {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(name, v))
    };
    let id = fields[0].trim().parse::<u64>().map_err(|_| bad("id", fields[0]))?;
    let heading = num("heading", fields[3])?;
    if !(0.0..360.0).contains(&heading) {
        return Err(bad("heading", fields[3]));
    }
    Ok(Record {
        id: ImageId(id),
        position: UtmPoint::new(num("east", fields[1])?, num("north", fields[2])?),
        heading,
        offset: fields[4].trim().parse::<u64>().map_err(|_| bad("tokens_offset", fields[4]))?,
    })
}

/// Loads a manifest and its sidecar. Ground-truth fields come back unknown.
pub fn load_manifest(path: &Path) -> Result<Vec<GeoImage>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(line, i + 1)?);
    }
    if records.is_empty() {
        return Ok(Vec::new());
    }
    let sidecar = sidecar_path(path);
    let bytes = fs::read(&sidecar).map_err(|e| Error::io(format!("read {}", sidecar.display()), e))?;
    let format_err = |message: String| Error::Format {
        path: sidecar.clone(),
        message,
    };
    if bytes.len() < 16 || &bytes[..8] != TOKENS_MAGIC {
        return Err(format_err("missing MVPRTOK1 header".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let block = rows * cols * 4;
    records
        .into_iter()
        .map(|r| {
            let start = r.offset as usize;
            let chunk = bytes
                .get(start..start + block)
                .ok_or_else(|| format_err(format!("image {} offset {} past end", r.id, r.offset)))?;
            let data: Vec<f64> = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let tokens = Tensor2::from_vec(rows, cols, data)?;
            if !tokens.is_finite() {
                return Err(format_err(format!("image {} has non-finite tokens", r.id)));
            }
            Ok(GeoImage {
                id: r.id,
                position: r.position,
                heading: r.heading,
                tokens,
                true_group: None,
                occluded: false,
                place: None,
            })
        })
        .collect()
}

/// Ground truth kept next to synthetic manifests: `id@true_group@occluded@place`.
pub fn write_truth(path: &Path, images: &[GeoImage]) -> Result<()> {
    let mut out = String::new();
    for img in images {
        let group = img.true_group.map_or("-".to_string(), |g| g.to_string());
        let place = img.place.map_or("-".to_string(), |g| g.to_string());
        out.push_str(&format!("{}@{}@{}@{}\n", img.id, group, u8::from(img.occluded), place));
    }
    fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Ground truth of one image as stored in a truth file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Truth {
    pub group: Option<usize>,
    pub occluded: bool,
    pub place: Option<usize>,
}

pub fn load_truth(path: &Path) -> Result<HashMap<ImageId, Truth>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut table = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('@').collect();
        let bad = || Error::Parse {
            line: i + 1,
            message: format!("malformed truth record {line:?}"),
        };
        let opt = |s: &str| -> Result<Option<usize>> {
            if s == "-" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        if f.len() != 4 || !matches!(f[2], "0" | "1") {
            return Err(bad());
        }
        let id = ImageId(f[0].parse::<u64>().map_err(|_| bad())?);
        table.insert(id, Truth { group: opt(f[1])?, occluded: f[2] == "1", place: opt(f[3])? });
    }
    Ok(table)
}

/// Fills `true_group`, `occluded` and `place` from a truth file. Ids not in
/// the file stay unknown.
pub fn apply_truth(path: &Path, images: &mut [GeoImage]) -> Result<()> {
    let table = load_truth(path)?;
    for img in images.iter_mut() {
        if let Some(t) = table.get(&img.id) {
            img.true_group = t.group;
            img.occluded = t.occluded;
            img.place = t.place;
        }
    }
    Ok(())
}
