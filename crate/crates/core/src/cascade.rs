//! Self-cascading multi-stage tile generation.
//!
//! Each stage takes the tiles of the previous level, prepares a reference
//! image per child (the parent upsampled by the stage factor, cropped to
//! the child's quadrant), and runs the reverse diffusion loop per child
//! under the full condition. All randomness derives from a per-tile seed,
//! so outputs are independent of worker count and execution order. Workers
//! rebuild their model from a state dict because computation graphs are
//! thread-confined.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use crate::codec::{Codec, ExactCodec};
use crate::denoiser::{ConditionalDenoiser, ModelConfig};
use crate::diffusion::{ddim_timesteps, sample_ddim, sample_ddpm, NoiseSchedule, NoiseSource};
use crate::error::{CoreError, Result};
use crate::image::ImageBuf;
use crate::nn::StateDict;
use crate::rng::splitmix64;
use crate::tensor::Tensor;
use crate::tile::{scale_prompt, StagePlan, TileCoord};

// ── Per-tile seeding ────────────────────────────────────────────────────

/// Stable per-tile seed: mixes the global seed with the coordinate so that
/// distinct tiles never share RNG state and a different global seed changes
/// every tile.
pub fn tile_seed(global_seed: u64, coord: TileCoord) -> u64 {
    let mut h = splitmix64(global_seed ^ 0x9e37_79b9_7f4a_7c15);
    h = splitmix64(h ^ (coord.level as u64).wrapping_mul(0xff51_afd7_ed55_8ccd));
    h = splitmix64(h ^ coord.col.wrapping_mul(0xc4ce_b9fe_1a85_ec53));
    h = splitmix64(h ^ coord.row.wrapping_add(0x9e37_79b9_7f4a_7c15));
    h
}

// ── Sampler choice ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampler {
    /// Full ancestral loop over every schedule step.
    Ddpm,
    /// Deterministic skipped sampler with the given step count.
    Ddim { steps: usize },
}

impl Sampler {
    pub fn name(&self) -> &'static str {
        match self {
            Sampler::Ddpm => "ddpm",
            Sampler::Ddim { .. } => "ddim",
        }
    }

    pub fn steps(&self, schedule: &NoiseSchedule) -> usize {
        match self {
            Sampler::Ddpm => schedule.steps(),
            Sampler::Ddim { steps } => *steps,
        }
    }
}

// ── Predictors ──────────────────────────────────────────────────────────

/// Everything a noise prediction may condition on for one tile.
pub struct TileContext {
    pub coord: TileCoord,
    pub prompt: String,
    /// Prepared parent reference, [1, 3, px, px].
    pub reference: Tensor,
    /// Remote-sensing condition tile, [1, 3, px, px].
    pub rs: Tensor,
}

pub trait NoisePredictor {
    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        schedule: &NoiseSchedule,
        ctx: &TileContext,
    ) -> Result<Tensor>;
}

/// Builds a per-worker predictor and codec. Implementations carry only
/// plain data (configs, state dicts) so they can be shared across threads.
pub trait WorkerFactory: Sync {
    fn build(&self) -> Result<StageWorker>;
}

pub struct StageWorker {
    pub predictor: Box<dyn NoisePredictor>,
    pub codec: Box<dyn Codec>,
}

/// Mock denoiser for geometry and continuity tests: it always points the
/// reverse process straight at the encoded reference image, so a generated
/// tile equals its prepared parent reference exactly.
pub struct MockParentDenoiser {
    codec: ExactCodec,
    cache: std::cell::RefCell<Option<(TileCoord, Tensor)>>,
}

impl MockParentDenoiser {
    pub fn new(factor: usize, codec_seed: u64) -> Result<MockParentDenoiser> {
        Ok(MockParentDenoiser {
            codec: ExactCodec::new(factor, codec_seed)?,
            cache: std::cell::RefCell::new(None),
        })
    }

    fn target_latent(&self, ctx: &TileContext) -> Result<Tensor> {
        let mut cache = self.cache.borrow_mut();
        if let Some((coord, z0)) = cache.as_ref() {
            if *coord == ctx.coord {
                return Ok(z0.clone());
            }
        }
        let z0 = self.codec.encode(&ctx.reference)?;
        *cache = Some((ctx.coord, z0.clone()));
        Ok(z0)
    }
}

impl NoisePredictor for MockParentDenoiser {
    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        schedule: &NoiseSchedule,
        ctx: &TileContext,
    ) -> Result<Tensor> {
        let z0 = self.target_latent(ctx)?;
        let ab = schedule.alpha_bar(t);
        // The noise that would have produced z_t from the target:
        // (z_t - sqrt(ab) z0) / sqrt(1 - ab).
        z_t.sub(&z0.mul_scalar(ab.sqrt())?)?
            .mul_scalar(1.0 / (1.0 - ab).sqrt())
    }
}

/// Factory for the mock: plain data, cheap per-worker builds.
pub struct MockFactory {
    pub factor: usize,
    pub codec_seed: u64,
}

impl WorkerFactory for MockFactory {
    fn build(&self) -> Result<StageWorker> {
        Ok(StageWorker {
            predictor: Box::new(MockParentDenoiser::new(self.factor, self.codec_seed)?),
            codec: Box::new(ExactCodec::new(self.factor, self.codec_seed)?),
        })
    }
}

/// Trained-model predictor: full conditioning per step.
pub struct ModelPredictor {
    model: ConditionalDenoiser,
}

impl NoisePredictor for ModelPredictor {
    fn predict(
        &self,
        z_t: &Tensor,
        t: usize,
        _schedule: &NoiseSchedule,
        ctx: &TileContext,
    ) -> Result<Tensor> {
        self.model
            .predict(z_t, &[t], std::slice::from_ref(&ctx.prompt), &ctx.rs, &ctx.reference)
    }
}

/// Factory rebuilding the conditional model from a state dict per worker.
pub struct ModelFactory {
    pub cfg: ModelConfig,
    pub state: StateDict,
    pub model_seed: u64,
    pub codec_seed: u64,
}

impl WorkerFactory for ModelFactory {
    fn build(&self) -> Result<StageWorker> {
        let model = ConditionalDenoiser::new(self.cfg.clone(), self.model_seed)?;
        model.load_state_dict(&self.state)?;
        Ok(StageWorker {
            predictor: Box::new(ModelPredictor { model }),
            codec: Box::new(ExactCodec::new(self.cfg.latent_factor, self.codec_seed)?),
        })
    }
}

// ── Single-tile generation ──────────────────────────────────────────────

/// Upsample the parent by 2^n and crop the child's quadrant, yielding the
/// reference image at tile resolution. Working on the globally upsampled
/// parent keeps sibling references consistent across their shared borders.
pub fn prepare_reference(parent: &ImageBuf, child: TileCoord, n: u8) -> Result<ImageBuf> {
    let px = parent.width();
    if parent.height() != px {
        return Err(CoreError::invalid("prepare_reference", "parent tile not square"));
    }
    let k = 1usize << n;
    let (dx, dy) = child.offset_within_ancestor(n)?;
    let up = parent.resize_bicubic(px * k, px * k)?;
    up.crop(dx as usize * px, dy as usize * px, px, px)
}

fn image_as_batch(img: &ImageBuf) -> Result<Tensor> {
    img.to_tensor().reshape(&[1, 3, img.height(), img.width()])
}

/// Run the reverse loop for one tile and decode to pixels.
pub fn generate_tile(
    worker: &StageWorker,
    ctx: &TileContext,
    sampler: Sampler,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<ImageBuf> {
    let tile_err = |e: CoreError| CoreError::Tile {
        level: ctx.coord.level,
        col: ctx.coord.col,
        row: ctx.coord.row,
        msg: e.to_string(),
    };
    let spec = worker.codec.spec();
    let px = ctx.reference.shape()[3];
    if px % spec.factor != 0 {
        return Err(tile_err(CoreError::invalid(
            "generate_tile",
            format!("tile extent {px} not divisible by latent factor {}", spec.factor),
        )));
    }
    let shape = [1, spec.channels, px / spec.factor, px / spec.factor];
    let mut source = NoiseSource::from_seed(seed);
    let predict = |y: &Tensor, t: usize| worker.predictor.predict(y, t, schedule, ctx);
    let z0 = match sampler {
        Sampler::Ddpm => sample_ddpm(predict, &shape, schedule, &mut source),
        Sampler::Ddim { steps } => {
            let ts = ddim_timesteps(schedule, steps)?;
            sample_ddim(predict, &shape, schedule, &ts, &mut source)
        }
    }
    .map_err(tile_err)?;
    let pixels = worker.codec.decode(&z0).map_err(tile_err)?;
    ImageBuf::from_tensor(&pixels).map_err(tile_err)
}

// ── Stage and cascade loops ─────────────────────────────────────────────

/// Per-tile generation record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileRecord {
    pub coord: TileCoord,
    pub parent: TileCoord,
    pub seed: u64,
    pub prompt: String,
    pub sampler: &'static str,
    pub steps: usize,
}

pub struct CascadeJob {
    pub seeds: BTreeMap<TileCoord, ImageBuf>,
    pub plan: StagePlan,
    pub sampler: Sampler,
    pub global_seed: u64,
    pub workers: usize,
}

pub struct PyramidResult {
    /// Generated tiles, keyed by level then coordinate (seeds excluded).
    pub levels: BTreeMap<u8, BTreeMap<TileCoord, ImageBuf>>,
    /// One stitched canvas per generated level.
    pub canvases: BTreeMap<u8, ImageBuf>,
    pub provenance: Vec<TileRecord>,
}

impl PyramidResult {
    pub fn tile_count(&self) -> usize {
        self.levels.values().map(|m| m.len()).sum()
    }
}

struct GenJob {
    coord: TileCoord,
    parent: TileCoord,
    prompt: String,
    reference: ImageBuf,
    rs: ImageBuf,
    seed: u64,
}

fn parallel_generate(
    jobs: Vec<GenJob>,
    factory: &dyn WorkerFactory,
    sampler: Sampler,
    schedule: &NoiseSchedule,
    workers: usize,
) -> Result<Vec<(GenJob, ImageBuf)>> {
    let n = jobs.len();
    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..n).collect());
    let slots: Vec<Mutex<Option<Result<ImageBuf>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let threads = workers.clamp(1, n.max(1));

    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| {
                let worker = match factory.build() {
                    Ok(w) => w,
                    Err(e) => {
                        // Park the build error in the first unclaimed slot.
                        if let Some(i) = queue.lock().unwrap().pop_front() {
                            *slots[i].lock().unwrap() = Some(Err(e));
                        }
                        return;
                    }
                };
                loop {
                    let i = match queue.lock().unwrap().pop_front() {
                        Some(i) => i,
                        None => break,
                    };
                    let job = &jobs[i];
                    let result = (|| {
                        let ctx = TileContext {
                            coord: job.coord,
                            prompt: job.prompt.clone(),
                            reference: image_as_batch(&job.reference)?,
                            rs: image_as_batch(&job.rs)?,
                        };
                        generate_tile(&worker, &ctx, sampler, schedule, job.seed)
                    })();
                    *slots[i].lock().unwrap() = Some(result);
                }
            });
        }
    });

    let mut out = Vec::with_capacity(n);
    for (job, slot) in jobs.into_iter().zip(slots) {
        match slot.into_inner().unwrap() {
            Some(Ok(img)) => out.push((job, img)),
            Some(Err(e)) => return Err(e),
            None => {
                return Err(CoreError::Tile {
                    level: job.coord.level,
                    col: job.coord.col,
                    row: job.coord.row,
                    msg: "tile never generated (worker startup failure)".into(),
                })
            }
        }
    }
    Ok(out)
}

/// One cascade stage: every parent produces its 4^n children. The RS
/// provider is probed for every child before any generation starts;
/// missing conditions abort the stage up front.
#[allow(clippy::too_many_arguments)]
pub fn run_stage(
    parents: &BTreeMap<TileCoord, ImageBuf>,
    step: u8,
    factory: &dyn WorkerFactory,
    rs_provider: &dyn Fn(TileCoord) -> Result<ImageBuf>,
    sampler: Sampler,
    schedule: &NoiseSchedule,
    global_seed: u64,
    workers: usize,
) -> Result<(BTreeMap<TileCoord, ImageBuf>, Vec<TileRecord>)> {
    if parents.is_empty() {
        return Err(CoreError::invalid("run_stage", "no parent tiles"));
    }
    // Probe conditions first so failures name every absent coordinate.
    let mut jobs = Vec::new();
    let mut missing = Vec::new();
    for (parent_coord, parent_img) in parents {
        for child in parent_coord.children(step)? {
            match rs_provider(child) {
                Ok(rs) => {
                    let reference = prepare_reference(parent_img, child, step)?;
                    jobs.push(GenJob {
                        coord: child,
                        parent: *parent_coord,
                        prompt: scale_prompt(child.level)?,
                        reference,
                        rs,
                        seed: tile_seed(global_seed, child),
                    });
                }
                Err(_) => missing.push(child),
            }
        }
    }
    if !missing.is_empty() {
        return Err(CoreError::MissingTiles {
            level: missing[0].level,
            count: missing.len(),
            first_missing: missing[0].to_string(),
        });
    }

    let steps = sampler.steps(schedule);
    let results = parallel_generate(jobs, factory, sampler, schedule, workers)?;
    let mut tiles = BTreeMap::new();
    let mut records = Vec::with_capacity(results.len());
    for (job, img) in results {
        records.push(TileRecord {
            coord: job.coord,
            parent: job.parent,
            seed: job.seed,
            prompt: job.prompt,
            sampler: sampler.name(),
            steps,
        });
        tiles.insert(job.coord, img);
    }
    Ok((tiles, records))
}

/// Run every stage of the plan, stitch each generated level, and collect
/// provenance. Stage j of the result holds 4^(step·j) tiles per seed.
pub fn run_cascade(
    job: &CascadeJob,
    factory: &dyn WorkerFactory,
    rs_provider: &dyn Fn(TileCoord) -> Result<ImageBuf>,
    schedule: &NoiseSchedule,
) -> Result<PyramidResult> {
    if job.seeds.is_empty() {
        return Err(CoreError::invalid("run_cascade", "no seed tiles"));
    }
    for coord in job.seeds.keys() {
        if coord.level != job.plan.base_level {
            return Err(CoreError::Tile {
                level: coord.level,
                col: coord.col,
                row: coord.row,
                msg: format!("seed not at plan base level {}", job.plan.base_level),
            });
        }
    }
    let mut result = PyramidResult {
        levels: BTreeMap::new(),
        canvases: BTreeMap::new(),
        provenance: Vec::new(),
    };
    let mut current = job.seeds.clone();
    for (stage, &level) in job.plan.levels.clone().iter().enumerate() {
        let (tiles, records) = run_stage(
            &current,
            job.plan.step,
            factory,
            rs_provider,
            job.sampler,
            schedule,
            job.global_seed,
            job.workers,
        )
        .map_err(|e| CoreError::Contract(format!("stage {stage} (level {level}): {e}")))?;
        result.canvases.insert(level, stitch(&tiles)?);
        result.provenance.extend(records);
        result.levels.insert(level, tiles.clone());
        current = tiles;
    }
    Ok(result)
}

// ── Stitching and seam scoring ──────────────────────────────────────────

/// Place a complete rectangular tile set into one canvas. Placement only,
/// no blending; any gap in the bounding rectangle is an error.
pub fn stitch(tiles: &BTreeMap<TileCoord, ImageBuf>) -> Result<ImageBuf> {
    let first = tiles
        .keys()
        .next()
        .ok_or_else(|| CoreError::invalid("stitch", "no tiles"))?;
    let level = first.level;
    let px = tiles[first].width();
    let (mut min_c, mut max_c, mut min_r, mut max_r) = (u64::MAX, 0u64, u64::MAX, 0u64);
    for (coord, img) in tiles {
        if coord.level != level {
            return Err(CoreError::invalid("stitch", "tiles span multiple levels"));
        }
        if img.width() != px || img.height() != px {
            return Err(CoreError::invalid("stitch", "tiles differ in pixel size"));
        }
        min_c = min_c.min(coord.col);
        max_c = max_c.max(coord.col);
        min_r = min_r.min(coord.row);
        max_r = max_r.max(coord.row);
    }
    let (w_tiles, h_tiles) = ((max_c - min_c + 1) as usize, (max_r - min_r + 1) as usize);
    let mut gaps = Vec::new();
    for r in min_r..=max_r {
        for c in min_c..=max_c {
            let coord = TileCoord { level, col: c, row: r };
            if !tiles.contains_key(&coord) {
                gaps.push(coord.to_string());
            }
        }
    }
    if !gaps.is_empty() {
        let shown = gaps.iter().take(8).cloned().collect::<Vec<_>>().join(", ");
        return Err(CoreError::Contract(format!(
            "stitch found {} gaps in the tile rectangle: {shown}{}",
            gaps.len(),
            if gaps.len() > 8 { ", ..." } else { "" }
        )));
    }
    let mut canvas = ImageBuf::new(w_tiles * px, h_tiles * px)?;
    for (coord, img) in tiles {
        let (x, y) = ((coord.col - min_c) as usize * px, (coord.row - min_r) as usize * px);
        canvas.place(img, x, y)?;
    }
    Ok(canvas)
}

/// Pixels this close to the outer canvas border are ignored: resampling
/// clamps its taps there, which perturbs gradients for reasons unrelated
/// to tile seams.
const SEAM_MARGIN: usize = 8;

/// Mean absolute cross-tile-boundary gradient minus mean interior
/// gradient, averaged over channels. Zero for globally smooth canvases,
/// strictly positive when tiles disagree at their borders.
pub fn seam_score(canvas: &ImageBuf, tile_px: usize) -> Result<f64> {
    let (w, h) = (canvas.width(), canvas.height());
    if tile_px == 0 || w % tile_px != 0 || h % tile_px != 0 {
        return Err(CoreError::invalid(
            "seam_score",
            format!("canvas {w}x{h} is not a multiple of tile size {tile_px}"),
        ));
    }
    let margin = if w > 2 * SEAM_MARGIN && h > 2 * SEAM_MARGIN { SEAM_MARGIN } else { 0 };
    let mut cross_sum = 0.0;
    let mut cross_n = 0u64;
    let mut interior_sum = 0.0;
    let mut interior_n = 0u64;
    let mut visit = |a: [f64; 3], b: [f64; 3], crosses: bool| {
        let d = (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs();
        if crosses {
            cross_sum += d / 3.0;
            cross_n += 1;
        } else {
            interior_sum += d / 3.0;
            interior_n += 1;
        }
    };
    for y in margin..h - margin {
        for x in margin..w - margin - 1 {
            let crosses = (x + 1) % tile_px == 0;
            visit(canvas.pixel(x, y), canvas.pixel(x + 1, y), crosses);
        }
    }
    for y in margin..h - margin - 1 {
        for x in margin..w - margin {
            let crosses = (y + 1) % tile_px == 0;
            visit(canvas.pixel(x, y), canvas.pixel(x, y + 1), crosses);
        }
    }
    if cross_n == 0 {
        return Ok(0.0);
    }
    let interior_mean = if interior_n == 0 { 0.0 } else { interior_sum / interior_n as f64 };
    Ok(cross_sum / cross_n as f64 - interior_mean)
}

// ── Disk output ─────────────────────────────────────────────────────────

/// Write tiles as out_dir/{level}/{col}_{row}.png, canvases as
/// out_dir/canvas_{level}.png, and provenance as one tab-separated line
/// per tile: level, col, row, parent, seed, prompt, sampler, steps.
pub fn write_pyramid(result: &PyramidResult, out_dir: &Path) -> Result<()> {
    for (level, tiles) in &result.levels {
        for (coord, img) in tiles {
            let path = out_dir.join(level.to_string()).join(format!("{}_{}.png", coord.col, coord.row));
            img.save_png(&path)?;
        }
    }
    for (level, canvas) in &result.canvases {
        canvas.save_png(&out_dir.join(format!("canvas_{level}.png")))?;
    }
    let mut lines = String::new();
    for r in &result.provenance {
        lines.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.coord.level, r.coord.col, r.coord.row, r.parent, r.seed, r.prompt, r.sampler, r.steps
        ));
    }
    std::fs::write(out_dir.join("provenance.txt"), lines)
        .map_err(|e| CoreError::io(out_dir.join("provenance.txt"), e))
}
