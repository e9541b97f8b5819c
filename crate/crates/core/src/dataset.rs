//! Corpus construction: paired RS/map tile stores, cascade reference
//! images, region-disjoint train/test splits, and a persistent manifest.
//!
//! Tiles live under store/{rs|map}/{z}/{x}/{y}.png as 8-bit RGB PNG and
//! are normalized to [-1, 1] when loaded for training. References built
//! for the cascade are stored alongside under ref2x/ or ref4x/ so that
//! regeneration can be checked bit-for-bit against the stored files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::error::{CoreError, Result};
use crate::image::ImageBuf;
use crate::rng::rng_from_seed;
use crate::tile::{scale_record, TileCoord};

pub const MANIFEST_VERSION: u32 = 1;

// ── Store layout ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Rs,
    Map,
}

impl Layer {
    pub fn dir(&self) -> &'static str {
        match self {
            Layer::Rs => "rs",
            Layer::Map => "map",
        }
    }
}

/// On-disk tile store rooted at one directory.
#[derive(Debug, Clone)]
pub struct TileStore {
    root: PathBuf,
    tile_px: usize,
}

impl TileStore {
    pub fn new(root: impl Into<PathBuf>, tile_px: usize) -> Result<TileStore> {
        if tile_px == 0 {
            return Err(CoreError::invalid("TileStore::new", "tile_px must be positive"));
        }
        Ok(TileStore { root: root.into(), tile_px })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn tile_px(&self) -> usize {
        self.tile_px
    }

    /// Store-relative path of a tile image.
    pub fn rel_tile_path(layer: Layer, coord: TileCoord) -> String {
        format!("{}/{}/{}/{}.png", layer.dir(), coord.level, coord.col, coord.row)
    }

    /// Store-relative path of a cascade reference image.
    pub fn rel_ref_path(factor: CascadeFactor, coord: TileCoord) -> String {
        format!("ref{}x/{}/{}/{}.png", factor.scale(), coord.level, coord.col, coord.row)
    }

    pub fn tile_path(&self, layer: Layer, coord: TileCoord) -> PathBuf {
        self.root.join(Self::rel_tile_path(layer, coord))
    }

    pub fn ref_path(&self, factor: CascadeFactor, coord: TileCoord) -> PathBuf {
        self.root.join(Self::rel_ref_path(factor, coord))
    }

    pub fn has_tile(&self, layer: Layer, coord: TileCoord) -> bool {
        self.tile_path(layer, coord).is_file()
    }

    /// Load a tile and check its advertised geometry.
    pub fn load_tile(&self, layer: Layer, coord: TileCoord) -> Result<ImageBuf> {
        let img = ImageBuf::load_png(&self.tile_path(layer, coord))?;
        if img.width() != self.tile_px || img.height() != self.tile_px {
            return Err(CoreError::Tile {
                level: coord.level,
                col: coord.col,
                row: coord.row,
                msg: format!(
                    "stored {} tile is {}x{}, expected {}x{}",
                    layer.dir(),
                    img.width(),
                    img.height(),
                    self.tile_px,
                    self.tile_px
                ),
            });
        }
        Ok(img)
    }
}

// ── Tile sources ────────────────────────────────────────────────────────

/// Where raw tile bytes come from during ingestion.
pub trait TileSource {
    fn fetch(&mut self, layer: Layer, coord: TileCoord) -> Result<Vec<u8>>;
}

/// A directory that already follows the store layout.
pub struct LocalDirSource {
    pub root: PathBuf,
}

impl TileSource for LocalDirSource {
    fn fetch(&mut self, layer: Layer, coord: TileCoord) -> Result<Vec<u8>> {
        let path = self.root.join(TileStore::rel_tile_path(layer, coord));
        std::fs::read(&path).map_err(|e| CoreError::io(path, e))
    }
}

/// XYZ web endpoint with one URL template per layer. Templates contain
/// {z}, {x} and {y} placeholders. An API key can be passed through from
/// an environment variable; it is appended as a `key` query parameter.
pub struct HttpSource {
    pub rs_template: String,
    pub map_template: String,
    /// Upper bound on request rate, in requests per second.
    pub rate_limit_per_sec: f64,
    /// Additional attempts after a transport error or 5xx response.
    pub max_retries: u32,
    /// Name of the environment variable holding the API key, if any.
    pub api_key_env: Option<String>,
    last_request: Option<Instant>,
}

impl HttpSource {
    pub fn new(rs_template: String, map_template: String) -> HttpSource {
        HttpSource {
            rs_template,
            map_template,
            rate_limit_per_sec: 2.0,
            max_retries: 2,
            api_key_env: None,
            last_request: None,
        }
    }

    fn url_for(&self, layer: Layer, coord: TileCoord) -> Result<String> {
        let template = match layer {
            Layer::Rs => &self.rs_template,
            Layer::Map => &self.map_template,
        };
        if !(template.contains("{z}") && template.contains("{x}") && template.contains("{y}")) {
            return Err(CoreError::invalid(
                "HttpSource",
                format!("URL template missing {{z}}/{{x}}/{{y}} placeholders: {template}"),
            ));
        }
        let mut url = template
            .replace("{z}", &coord.level.to_string())
            .replace("{x}", &coord.col.to_string())
            .replace("{y}", &coord.row.to_string());
        if let Some(var) = &self.api_key_env {
            if let Ok(key) = std::env::var(var) {
                url.push(if url.contains('?') { '&' } else { '?' });
                url.push_str("key=");
                url.push_str(&key);
            }
        }
        Ok(url)
    }

    fn throttle(&mut self) {
        if self.rate_limit_per_sec <= 0.0 {
            return;
        }
        let min_gap = Duration::from_secs_f64(1.0 / self.rate_limit_per_sec);
        if let Some(last) = self.last_request {
            let elapsed = last.elapsed();
            if elapsed < min_gap {
                std::thread::sleep(min_gap - elapsed);
            }
        }
        self.last_request = Some(Instant::now());
    }

    fn get_once(url: &str) -> std::result::Result<Vec<u8>, (bool, String)> {
        // Returns Err((retryable, message)) on failure.
        match ureq::get(url).call() {
            Ok(mut resp) => resp
                .body_mut()
                .read_to_vec()
                .map_err(|e| (true, format!("body read failed: {e}"))),
            Err(ureq::Error::StatusCode(code)) => {
                Err((code >= 500, format!("HTTP status {code}")))
            }
            Err(e) => Err((true, format!("transport error: {e}"))),
        }
    }
}

impl TileSource for HttpSource {
    fn fetch(&mut self, layer: Layer, coord: TileCoord) -> Result<Vec<u8>> {
        let url = self.url_for(layer, coord)?;
        let mut last_msg = String::new();
        for _attempt in 0..=self.max_retries {
            self.throttle();
            match Self::get_once(&url) {
                Ok(bytes) => return Ok(bytes),
                Err((retryable, msg)) => {
                    last_msg = msg;
                    if !retryable {
                        break;
                    }
                }
            }
        }
        Err(CoreError::Fetch { url, msg: last_msg })
    }
}

// ── Ingestion ───────────────────────────────────────────────────────────

#[derive(Debug, Default)]
pub struct IngestReport {
    pub fetched: usize,
    pub skipped: usize,
    /// Coordinates that failed after retries, with the failure message.
    pub failed: Vec<(Layer, TileCoord, String)>,
    /// Files that arrived but did not decode as expected tiles.
    pub quarantined: Vec<PathBuf>,
}

/// Fetch every requested coordinate for both layers into the store.
/// Present files are skipped, fetch failures are recorded and the run
/// continues, and bytes that do not decode to the expected tile geometry
/// are quarantined next to their target path.
pub fn ingest_tiles(
    store: &TileStore,
    source: &mut dyn TileSource,
    coords: &[TileCoord],
) -> Result<IngestReport> {
    let mut report = IngestReport::default();
    for &coord in coords {
        for layer in [Layer::Rs, Layer::Map] {
            let path = store.tile_path(layer, coord);
            if path.is_file() {
                report.skipped += 1;
                continue;
            }
            let bytes = match source.fetch(layer, coord) {
                Ok(b) => b,
                Err(e) => {
                    report.failed.push((layer, coord, e.to_string()));
                    continue;
                }
            };
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
            }
            match decode_check(&bytes, store.tile_px) {
                Ok(()) => {
                    std::fs::write(&path, &bytes).map_err(|e| CoreError::io(&path, e))?;
                    report.fetched += 1;
                }
                Err(msg) => {
                    let mut quarantine = path.clone().into_os_string();
                    quarantine.push(".quarantine");
                    let quarantine = PathBuf::from(quarantine);
                    std::fs::write(&quarantine, &bytes).map_err(|e| CoreError::io(&quarantine, e))?;
                    report.failed.push((layer, coord, msg));
                    report.quarantined.push(quarantine);
                }
            }
        }
    }
    Ok(report)
}

fn decode_check(bytes: &[u8], tile_px: usize) -> std::result::Result<(), String> {
    match image::load_from_memory(bytes) {
        Ok(img) => {
            if img.width() as usize != tile_px || img.height() as usize != tile_px {
                Err(format!(
                    "decoded to {}x{}, expected {}x{}",
                    img.width(),
                    img.height(),
                    tile_px,
                    tile_px
                ))
            } else {
                Ok(())
            }
        }
        Err(e) => Err(format!("decode failed: {e}")),
    }
}

// ── Cascade references ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CascadeFactor {
    X2,
    X4,
}

impl CascadeFactor {
    /// Upsampling factor between ancestor and target resolution.
    pub fn scale(&self) -> usize {
        match self {
            CascadeFactor::X2 => 2,
            CascadeFactor::X4 => 4,
        }
    }

    /// Levels between the target tile and its reference ancestor.
    pub fn depth(&self) -> u8 {
        match self {
            CascadeFactor::X2 => 1,
            CascadeFactor::X4 => 2,
        }
    }

    pub fn parse(s: &str) -> Result<CascadeFactor> {
        match s {
            "2" => Ok(CascadeFactor::X2),
            "4" => Ok(CascadeFactor::X4),
            other => Err(CoreError::invalid(
                "CascadeFactor::parse",
                format!("unknown factor {other:?}, expected 2 or 4"),
            )),
        }
    }
}

impl fmt::Display for CascadeFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.scale())
    }
}

/// Quadrant descent from an ancestor `n` levels up to the given tile,
/// coarsest quadrant first. Each entry is (dx, dy) in {0, 1}.
pub fn quadrant_path(coord: TileCoord, n: u8) -> Result<Vec<(u8, u8)>> {
    if n == 0 || coord.level < n {
        return Err(CoreError::invalid(
            "quadrant_path",
            format!("no ancestor {n} levels above level {}", coord.level),
        ));
    }
    Ok((0..n)
        .map(|i| {
            let shift = n - 1 - i;
            (((coord.col >> shift) & 1) as u8, ((coord.row >> shift) & 1) as u8)
        })
        .collect())
}

/// Crop the sub-region of the ancestor named by the quadrant path (half
/// the extent per step) and bicubic-upsample it back to the ancestor's
/// resolution. Path length 1 builds a 2X reference, length 2 a 4X one.
pub fn build_cascade_ref(ancestor: &ImageBuf, path: &[(u8, u8)]) -> Result<ImageBuf> {
    if path.is_empty() || path.len() > 2 {
        return Err(CoreError::invalid(
            "build_cascade_ref",
            format!("quadrant path length {} not in 1..=2", path.len()),
        ));
    }
    let px = ancestor.width();
    if ancestor.height() != px || px % (1 << path.len()) != 0 {
        return Err(CoreError::invalid(
            "build_cascade_ref",
            "ancestor must be square with extent divisible by the crop factor",
        ));
    }
    let mut crop = ancestor.clone();
    for &(dx, dy) in path {
        if dx > 1 || dy > 1 {
            return Err(CoreError::invalid("build_cascade_ref", "quadrant entries must be 0 or 1"));
        }
        let half = crop.width() / 2;
        crop = crop.crop(dx as usize * half, dy as usize * half, half, half)?;
    }
    crop.resize_bicubic(px, px)
}

// ── Splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(CoreError::Manifest(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Assign whole base-level families to train or test. Because every
/// descendant follows its root, no test tile footprint can intersect a
/// train tile footprint. A zero fraction keeps everything in train;
/// otherwise both sides must end up non-empty.
pub fn split_regions(
    roots: &[TileCoord],
    test_fraction: f64,
    seed: u64,
) -> Result<BTreeMap<TileCoord, Split>> {
    if roots.is_empty() {
        return Err(CoreError::invalid("split_regions", "no base-level roots"));
    }
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(CoreError::invalid("split_regions", "test_fraction outside [0, 1]"));
    }
    let mut assignment: BTreeMap<TileCoord, Split> =
        roots.iter().map(|&r| (r, Split::Train)).collect();
    if assignment.len() != roots.len() {
        return Err(CoreError::invalid("split_regions", "duplicate roots"));
    }
    if test_fraction == 0.0 {
        return Ok(assignment);
    }
    let n_test = (test_fraction * roots.len() as f64).round() as usize;
    if n_test == 0 || n_test == roots.len() {
        return Err(CoreError::Contract(format!(
            "test_fraction {test_fraction} with {} roots leaves one split empty",
            roots.len()
        )));
    }
    let mut shuffled: Vec<TileCoord> = {
        let mut sorted: Vec<TileCoord> = assignment.keys().copied().collect();
        let mut rng = rng_from_seed(seed);
        sorted.shuffle(&mut rng);
        sorted
    };
    for root in shuffled.drain(..n_test) {
        assignment.insert(root, Split::Test);
    }
    Ok(assignment)
}

// ── Manifest ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub coord: TileCoord,
    pub split: Split,
    pub factor: CascadeFactor,
    pub rs_path: String,
    pub map_path: String,
    pub ref_path: String,
    pub scale_denominator: f64,
    pub resolution_m_per_px: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub tile_px: usize,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Record counts keyed by level.
    pub fn level_counts(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.coord.level).or_insert(0) += 1;
        }
        counts
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!(
            "# tilegen-manifest v{}\n# tile_px {}\n# fields: z x y split factor rs_path map_path ref_path scale_denominator resolution_m_per_px\n",
            self.version, self.tile_px
        );
        for r in &self.records {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                r.coord.level,
                r.coord.col,
                r.coord.row,
                r.split,
                r.factor,
                r.rs_path,
                r.map_path,
                r.ref_path,
                r.scale_denominator,
                r.resolution_m_per_px
            ));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CoreError::io(parent, e))?;
        }
        std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| CoreError::Manifest("empty manifest".into()))?;
        let version: u32 = header
            .strip_prefix("# tilegen-manifest v")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CoreError::Manifest(format!("bad header line: {header:?}")))?;
        if version != MANIFEST_VERSION {
            return Err(CoreError::Manifest(format!(
                "manifest version {version} unsupported (expected {MANIFEST_VERSION})"
            )));
        }
        let px_line = lines
            .next()
            .ok_or_else(|| CoreError::Manifest("missing tile_px line".into()))?;
        let tile_px: usize = px_line
            .strip_prefix("# tile_px ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CoreError::Manifest(format!("bad tile_px line: {px_line:?}")))?;
        let mut records = Vec::new();
        for line in lines {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            records.push(Self::parse_record(line)?);
        }
        Ok(DatasetManifest { version, tile_px, records })
    }

    fn parse_record(line: &str) -> Result<SampleRecord> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 10 {
            return Err(CoreError::Manifest(format!(
                "expected 10 tab-separated fields, got {}: {line:?}",
                fields.len()
            )));
        }
        let bad = |what: &str| CoreError::Manifest(format!("bad {what} in line: {line:?}"));
        let level: u8 = fields[0].parse().map_err(|_| bad("level"))?;
        let col: u64 = fields[1].parse().map_err(|_| bad("col"))?;
        let row: u64 = fields[2].parse().map_err(|_| bad("row"))?;
        Ok(SampleRecord {
            coord: TileCoord::new(level, col, row)?,
            split: Split::parse(fields[3])?,
            factor: CascadeFactor::parse(fields[4])?,
            rs_path: fields[5].to_string(),
            map_path: fields[6].to_string(),
            ref_path: fields[7].to_string(),
            scale_denominator: fields[8].parse().map_err(|_| bad("scale_denominator"))?,
            resolution_m_per_px: fields[9].parse().map_err(|_| bad("resolution"))?,
        })
    }
}

/// Enumerate a root and all of its descendants down to `depth` levels.
pub fn family_coords(root: TileCoord, depth: u8) -> Result<Vec<TileCoord>> {
    let mut coords = vec![root];
    let mut frontier = vec![root];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(frontier.len() * 4);
        for c in &frontier {
            next.extend(c.children(1)?);
        }
        coords.extend(next.iter().copied());
        frontier = next;
    }
    Ok(coords)
}

/// Build the manifest over complete families: one record per tile at
/// levels above the base whose reference ancestor and all tiles of its
/// sibling group are present in both layers. References are rendered to
/// the store on first use and reused byte-for-byte afterwards.
pub fn build_manifest(
    store: &TileStore,
    roots: &[TileCoord],
    depth: u8,
    factor: CascadeFactor,
    split: &BTreeMap<TileCoord, Split>,
) -> Result<DatasetManifest> {
    if roots.is_empty() {
        return Err(CoreError::invalid("build_manifest", "no roots"));
    }
    let base = roots[0].level;
    if roots.iter().any(|r| r.level != base) {
        return Err(CoreError::invalid("build_manifest", "roots span multiple levels"));
    }
    let mut records = Vec::new();
    for root in roots {
        let root_split = *split.get(root).ok_or_else(|| {
            CoreError::Manifest(format!("no split assignment for root {root}"))
        })?;
        for coord in family_coords(*root, depth)? {
            if coord.level == base || coord.level < base + factor.depth() {
                continue;
            }
            let ancestor = coord.parent(factor.depth())?;
            // A family is the ancestor plus the whole sibling group of
            // this tile under it; skip silently unless every member is
            // stored in both layers.
            let mut members = ancestor.children(factor.depth())?;
            members.push(ancestor);
            let complete = members
                .iter()
                .all(|m| store.has_tile(Layer::Rs, *m) && store.has_tile(Layer::Map, *m));
            if !complete {
                continue;
            }
            let ref_path = store.ref_path(factor, coord);
            if !ref_path.is_file() {
                let ancestor_map = store.load_tile(Layer::Map, ancestor).map_err(|e| {
                    CoreError::Manifest(format!("inconsistent store at {ancestor}: {e}"))
                })?;
                let reference =
                    build_cascade_ref(&ancestor_map, &quadrant_path(coord, factor.depth())?)?;
                reference.save_png(&ref_path)?;
            }
            let scale = scale_record(coord.level)?;
            records.push(SampleRecord {
                coord,
                split: root_split,
                factor,
                rs_path: TileStore::rel_tile_path(Layer::Rs, coord),
                map_path: TileStore::rel_tile_path(Layer::Map, coord),
                ref_path: TileStore::rel_ref_path(factor, coord),
                scale_denominator: scale.scale_denominator,
                resolution_m_per_px: scale.resolution_m_per_px,
            });
        }
    }
    Ok(DatasetManifest { version: MANIFEST_VERSION, tile_px: store.tile_px, records })
}

/// A training triple loaded back from the store.
pub struct LoadedSample {
    pub rs: ImageBuf,
    pub map: ImageBuf,
    pub reference: ImageBuf,
    pub prompt: String,
}

pub fn load_sample(store: &TileStore, record: &SampleRecord) -> Result<LoadedSample> {
    let rs = store.load_tile(Layer::Rs, record.coord)?;
    let map = store.load_tile(Layer::Map, record.coord)?;
    let reference = ImageBuf::load_png(&store.root().join(&record.ref_path))?;
    Ok(LoadedSample {
        rs,
        map,
        reference,
        prompt: crate::tile::scale_prompt(record.coord.level)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read as _, Write as _};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    const PX: usize = 16;

    fn tile_bytes(seed: u8) -> Vec<u8> {
        let mut img = ImageBuf::new(PX, PX).unwrap();
        for y in 0..PX {
            for x in 0..PX {
                let v = ((x * 7 + y * 13 + seed as usize) % 255) as f64 / 127.5 - 1.0;
                img.set_pixel(x, y, [v, -v * 0.5, v * 0.25]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        img.save_png(&path).unwrap();
        std::fs::read(&path).unwrap()
    }

    fn fixture_source(dir: &Path, root: TileCoord, depth: u8) -> LocalDirSource {
        let mut seed = 0u8;
        for coord in family_coords(root, depth).unwrap() {
            for layer in [Layer::Rs, Layer::Map] {
                let path = dir.join(TileStore::rel_tile_path(layer, coord));
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                std::fs::write(&path, tile_bytes(seed)).unwrap();
                seed = seed.wrapping_add(1);
            }
        }
        LocalDirSource { root: dir.to_path_buf() }
    }

    // ── Ingestion ───────────────────────────────────────────────────

    #[test]
    fn local_ingest_builds_the_store_and_reruns_skip() {
        let src_dir = tempfile::tempdir().unwrap();
        let store_dir = tempfile::tempdir().unwrap();
        let root = TileCoord::new(14, 2, 3).unwrap();
        let mut source = fixture_source(src_dir.path(), root, 2);
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = family_coords(root, 2).unwrap();
        assert_eq!(coords.len(), 21);

        let first = ingest_tiles(&store, &mut source, &coords).unwrap();
        assert_eq!(first.fetched, 42);
        assert_eq!(first.skipped, 0);
        assert!(first.failed.is_empty());

        let second = ingest_tiles(&store, &mut source, &coords).unwrap();
        assert_eq!(second.fetched, 0);
        assert_eq!(second.skipped, 42);
    }

    #[test]
    fn undecodable_bytes_are_quarantined_not_stored() {
        struct BadSource;
        impl TileSource for BadSource {
            fn fetch(&mut self, _layer: Layer, _coord: TileCoord) -> Result<Vec<u8>> {
                Ok(vec![1, 2, 3, 4])
            }
        }
        let store_dir = tempfile::tempdir().unwrap();
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = vec![TileCoord::new(14, 0, 0).unwrap()];
        let report = ingest_tiles(&store, &mut BadSource, &coords).unwrap();
        assert_eq!(report.fetched, 0);
        assert_eq!(report.quarantined.len(), 2);
        assert!(!store.has_tile(Layer::Rs, coords[0]));
        assert!(report.quarantined[0].exists());
    }

    #[test]
    fn fetch_failures_are_recorded_and_the_run_continues() {
        struct FlakySource {
            src: LocalDirSource,
        }
        impl TileSource for FlakySource {
            fn fetch(&mut self, layer: Layer, coord: TileCoord) -> Result<Vec<u8>> {
                if coord.col % 2 == 1 {
                    return Err(CoreError::Fetch { url: coord.to_string(), msg: "down".into() });
                }
                self.src.fetch(layer, coord)
            }
        }
        let src_dir = tempfile::tempdir().unwrap();
        let store_dir = tempfile::tempdir().unwrap();
        let root = TileCoord::new(14, 0, 0).unwrap();
        let source = fixture_source(src_dir.path(), root, 1);
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = family_coords(root, 1).unwrap();
        let report =
            ingest_tiles(&store, &mut FlakySource { src: source }, &coords).unwrap();
        assert_eq!(report.failed.len(), 4);
        assert_eq!(report.fetched, 6);
    }

    // ── HTTP source ─────────────────────────────────────────────────

    /// Minimal single-threaded HTTP fixture server. Responds per-path
    /// with a configured status and body, counting hits.
    struct TestServer {
        addr: std::net::SocketAddr,
        hits: Arc<AtomicUsize>,
        handle: Option<std::thread::JoinHandle<()>>,
    }

    impl TestServer {
        fn start(
            responder: impl Fn(&str, usize) -> (u16, Vec<u8>) + Send + 'static,
        ) -> TestServer {
            let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap();
            let hits = Arc::new(AtomicUsize::new(0));
            let hits2 = hits.clone();
            let handle = std::thread::spawn(move || {
                for stream in listener.incoming() {
                    let mut stream = match stream {
                        Ok(s) => s,
                        Err(_) => break,
                    };
                    let mut buf = [0u8; 2048];
                    let mut req = Vec::new();
                    loop {
                        match stream.read(&mut buf) {
                            Ok(0) => break,
                            Ok(n) => {
                                req.extend_from_slice(&buf[..n]);
                                if req.windows(4).any(|w| w == b"\r\n\r\n") {
                                    break;
                                }
                            }
                            Err(_) => break,
                        }
                    }
                    let text = String::from_utf8_lossy(&req);
                    let path = text.split_whitespace().nth(1).unwrap_or("/").to_string();
                    if path == "/shutdown" {
                        let _ = stream.write_all(b"HTTP/1.1 200 OK\r\ncontent-length: 0\r\n\r\n");
                        break;
                    }
                    let n = hits2.fetch_add(1, Ordering::SeqCst);
                    let (status, body) = responder(&path, n);
                    let head = format!(
                        "HTTP/1.1 {status} X\r\ncontent-length: {}\r\nconnection: close\r\n\r\n",
                        body.len()
                    );
                    let _ = stream.write_all(head.as_bytes());
                    let _ = stream.write_all(&body);
                }
            });
            TestServer { addr, hits, handle: Some(handle) }
        }

        fn url(&self, template: &str) -> String {
            format!("http://{}{template}", self.addr)
        }
    }

    impl Drop for TestServer {
        fn drop(&mut self) {
            let _ = std::net::TcpStream::connect(self.addr)
                .and_then(|mut s| s.write_all(b"GET /shutdown HTTP/1.1\r\n\r\n"));
            if let Some(h) = self.handle.take() {
                let _ = h.join();
            }
        }
    }

    #[test]
    fn http_source_fetches_and_is_idempotent_on_reingest() {
        let png = tile_bytes(9);
        let server = TestServer::start(move |_path, _n| (200, png.clone()));
        let mut source = HttpSource::new(
            server.url("/rs/{z}/{x}/{y}.png"),
            server.url("/map/{z}/{x}/{y}.png"),
        );
        source.rate_limit_per_sec = 10_000.0;
        let store_dir = tempfile::tempdir().unwrap();
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = vec![TileCoord::new(15, 4, 5).unwrap()];

        let report = ingest_tiles(&store, &mut source, &coords).unwrap();
        assert_eq!(report.fetched, 2);
        assert_eq!(server.hits.load(Ordering::SeqCst), 2);

        let again = ingest_tiles(&store, &mut source, &coords).unwrap();
        assert_eq!(again.skipped, 2);
        assert_eq!(server.hits.load(Ordering::SeqCst), 2, "re-ingest must not re-download");
    }

    #[test]
    fn http_source_retries_server_errors_until_success() {
        let png = tile_bytes(3);
        let server = TestServer::start(move |_path, n| {
            if n < 2 {
                (500, Vec::new())
            } else {
                (200, png.clone())
            }
        });
        let mut source =
            HttpSource::new(server.url("/t/{z}/{x}/{y}"), server.url("/m/{z}/{x}/{y}"));
        source.rate_limit_per_sec = 10_000.0;
        source.max_retries = 3;
        let bytes = source.fetch(Layer::Rs, TileCoord::new(14, 1, 1).unwrap()).unwrap();
        assert!(!bytes.is_empty());
        assert_eq!(server.hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn http_source_gives_up_after_retry_budget() {
        let server = TestServer::start(|_path, _n| (500, Vec::new()));
        let mut source =
            HttpSource::new(server.url("/t/{z}/{x}/{y}"), server.url("/m/{z}/{x}/{y}"));
        source.rate_limit_per_sec = 10_000.0;
        source.max_retries = 1;
        let err = source.fetch(Layer::Rs, TileCoord::new(14, 1, 1).unwrap()).unwrap_err();
        assert!(err.to_string().contains("500"), "{err}");
        assert_eq!(server.hits.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn api_key_from_env_is_appended_to_requests() {
        let paths = Arc::new(std::sync::Mutex::new(Vec::<String>::new()));
        let paths2 = paths.clone();
        let png = tile_bytes(1);
        let server = TestServer::start(move |path, _n| {
            paths2.lock().unwrap().push(path.to_string());
            (200, png.clone())
        });
        // Env var name unique to this test to avoid cross-test races.
        let var = "TILEGEN_TEST_API_KEY_7331";
        std::env::set_var(var, "sekrit");
        let mut source =
            HttpSource::new(server.url("/t/{z}/{x}/{y}"), server.url("/m/{z}/{x}/{y}"));
        source.rate_limit_per_sec = 10_000.0;
        source.api_key_env = Some(var.to_string());
        source.fetch(Layer::Map, TileCoord::new(14, 8, 9).unwrap()).unwrap();
        std::env::remove_var(var);
        let seen = paths.lock().unwrap();
        assert_eq!(seen.as_slice(), ["/m/14/8/9?key=sekrit"]);
    }

    // ── Cascade refs ────────────────────────────────────────────────

    #[test]
    fn two_x_reference_is_the_upscaled_quadrant() {
        let src = tempfile::tempdir().unwrap();
        let _ = fixture_source(src.path(), TileCoord::new(14, 0, 0).unwrap(), 0);
        let parent = ImageBuf::load_png(
            &src.path().join(TileStore::rel_tile_path(Layer::Rs, TileCoord::new(14, 0, 0).unwrap())),
        )
        .unwrap();
        let reference = build_cascade_ref(&parent, &[(0, 0)]).unwrap();
        let manual = parent.crop(0, 0, PX / 2, PX / 2).unwrap().resize_bicubic(PX, PX).unwrap();
        assert_eq!(reference, manual);
    }

    #[test]
    fn four_x_reference_descends_two_quadrants() {
        let mut img = ImageBuf::new(PX, PX).unwrap();
        for y in 0..PX {
            for x in 0..PX {
                img.set_pixel(x, y, [x as f64 / PX as f64, y as f64 / PX as f64, 0.0]);
            }
        }
        let reference = build_cascade_ref(&img, &[(1, 1), (0, 0)]).unwrap();
        let q = PX / 4;
        let manual = img.crop(2 * q, 2 * q, q, q).unwrap().resize_bicubic(PX, PX).unwrap();
        assert_eq!(reference, manual);
    }

    #[test]
    fn constant_ancestor_gives_constant_reference() {
        let img = ImageBuf::from_planar(vec![-0.125; 3 * PX * PX], PX, PX).unwrap();
        let reference = build_cascade_ref(&img, &[(1, 0)]).unwrap();
        for v in reference.data() {
            assert!((v + 0.125).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrant_paths_match_ancestor_offsets() {
        let c = TileCoord::new(16, 0b1101, 0b0110).unwrap();
        assert_eq!(quadrant_path(c, 1).unwrap(), vec![(1, 0)]);
        assert_eq!(quadrant_path(c, 2).unwrap(), vec![(0, 1), (1, 0)]);
        // Composing path offsets reproduces offset_within_ancestor.
        let (dx, dy) = c.offset_within_ancestor(2).unwrap();
        let path = quadrant_path(c, 2).unwrap();
        let col = (path[0].0 as u64) << 1 | path[1].0 as u64;
        let row = (path[0].1 as u64) << 1 | path[1].1 as u64;
        assert_eq!((col, row), (dx, dy));
    }

    // ── Splits ──────────────────────────────────────────────────────

    #[test]
    fn splits_are_deterministic_and_sized() {
        let roots: Vec<TileCoord> =
            (0..10).map(|i| TileCoord::new(14, i, 0).unwrap()).collect();
        let a = split_regions(&roots, 0.2, 99).unwrap();
        let b = split_regions(&roots, 0.2, 99).unwrap();
        assert_eq!(a, b);
        let tests = a.values().filter(|s| **s == Split::Test).count();
        assert_eq!(tests, 2);
    }

    #[test]
    fn split_footprints_never_intersect_across_sides() {
        let roots: Vec<TileCoord> =
            (0..8).map(|i| TileCoord::new(14, i, i).unwrap()).collect();
        let split = split_regions(&roots, 0.25, 3).unwrap();
        // Exhaustive pairwise check two levels down: descendants of train
        // roots never coincide with descendants of test roots.
        let mut seen: BTreeMap<TileCoord, Split> = BTreeMap::new();
        for (&root, &side) in &split {
            for c in family_coords(root, 2).unwrap() {
                if let Some(prev) = seen.insert(c, side) {
                    assert_eq!(prev, side, "footprint overlap at {c}");
                }
            }
        }
    }

    #[test]
    fn zero_fraction_keeps_everything_in_train() {
        let roots = vec![TileCoord::new(14, 0, 0).unwrap()];
        let split = split_regions(&roots, 0.0, 1).unwrap();
        assert!(split.values().all(|s| *s == Split::Train));
    }

    #[test]
    fn empty_side_is_a_contract_violation() {
        let roots: Vec<TileCoord> =
            (0..3).map(|i| TileCoord::new(14, i, 0).unwrap()).collect();
        assert!(split_regions(&roots, 0.01, 1).is_err());
        assert!(split_regions(&roots, 0.99, 1).is_err());
    }

    // ── Manifest ────────────────────────────────────────────────────

    fn built_fixture(factor: CascadeFactor) -> (tempfile::TempDir, TileStore, DatasetManifest) {
        let src_dir = tempfile::tempdir().unwrap();
        let store_dir = tempfile::tempdir().unwrap();
        let root = TileCoord::new(14, 1, 1).unwrap();
        let mut source = fixture_source(src_dir.path(), root, 2);
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = family_coords(root, 2).unwrap();
        ingest_tiles(&store, &mut source, &coords).unwrap();
        let split = split_regions(&[root], 0.0, 7).unwrap();
        let manifest = build_manifest(&store, &[root], 2, factor, &split).unwrap();
        (store_dir, store, manifest)
    }

    #[test]
    fn fixture_counts_match_the_quadtree() {
        let (_dir, _store, manifest) = built_fixture(CascadeFactor::X2);
        let counts = manifest.level_counts();
        assert_eq!(counts.get(&15), Some(&4));
        assert_eq!(counts.get(&16), Some(&16));
        assert_eq!(counts.get(&14), None, "base level is seed-only");
    }

    #[test]
    fn four_x_records_reference_the_level_14_ancestor() {
        let (_dir, store, manifest) = built_fixture(CascadeFactor::X4);
        let counts = manifest.level_counts();
        assert_eq!(counts.get(&15), None, "level 15 has no grandparent in store");
        assert_eq!(counts.get(&16), Some(&16));
        for r in &manifest.records {
            assert!(r.ref_path.starts_with("ref4x/16/"));
            assert!(store.root().join(&r.ref_path).is_file());
        }
    }

    #[test]
    fn stored_refs_regenerate_bit_identically() {
        let (_dir, store, manifest) = built_fixture(CascadeFactor::X2);
        for r in &manifest.records {
            let ancestor = r.coord.parent(1).unwrap();
            let ancestor_map = store.load_tile(Layer::Map, ancestor).unwrap();
            let rebuilt =
                build_cascade_ref(&ancestor_map, &quadrant_path(r.coord, 1).unwrap()).unwrap();
            let stored = ImageBuf::load_png(&store.root().join(&r.ref_path)).unwrap();
            assert_eq!(rebuilt.to_rgb8(), stored.to_rgb8(), "ref mismatch at {}", r.coord);
        }
    }

    #[test]
    fn manifest_round_trips_through_disk() {
        let (dir, _store, manifest) = built_fixture(CascadeFactor::X2);
        let path = dir.path().join("manifest.tsv");
        manifest.save(&path).unwrap();
        let loaded = DatasetManifest::load(&path).unwrap();
        assert_eq!(manifest, loaded);
    }

    #[test]
    fn incomplete_families_are_excluded() {
        let src_dir = tempfile::tempdir().unwrap();
        let store_dir = tempfile::tempdir().unwrap();
        let root = TileCoord::new(14, 0, 0).unwrap();
        let mut source = fixture_source(src_dir.path(), root, 1);
        let store = TileStore::new(store_dir.path(), PX).unwrap();
        let coords = family_coords(root, 1).unwrap();
        ingest_tiles(&store, &mut source, &coords).unwrap();
        // Drop one stored child from the map layer: the whole sibling
        // group loses its family.
        let victim = TileCoord::new(15, 1, 0).unwrap();
        std::fs::remove_file(store.tile_path(Layer::Map, victim)).unwrap();
        let split = split_regions(&[root], 0.0, 1).unwrap();
        let manifest = build_manifest(&store, &[root], 1, CascadeFactor::X2, &split).unwrap();
        assert!(manifest.records.is_empty());
    }

    #[test]
    fn loaded_samples_carry_scale_prompts() {
        let (_dir, store, manifest) = built_fixture(CascadeFactor::X2);
        let record = manifest.records.iter().find(|r| r.coord.level == 15).unwrap();
        let sample = load_sample(&store, record).unwrap();
        assert_eq!(sample.rs.width(), PX);
        assert!(sample.prompt.starts_with("level 15; scale 1:15000;"));
        assert_eq!(record.scale_denominator, 15000.0);
    }
}
