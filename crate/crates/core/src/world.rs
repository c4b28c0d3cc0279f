//! Synthetic moving-shapes episodes with known ground truth.
//!
//! Each episode is a short clip on a small cell grid. Every object occupies
//! one cell, has a color and a shape, and performs one action (a one-cell step
//! per frame in a fixed direction) over a contiguous span of frames, staying
//! still otherwise. The query names the target's color, shape and action.
//! Distractors either share one attribute with the target and act differently,
//! or share its action (and span) with different color and shape.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{QuerySplit, VideoFeatures};
use crate::eval::BBox;
use crate::scalar::Real;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::MoveLeft, Action::MoveRight, Action::MoveUp, Action::MoveDown];

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Action::MoveLeft => &["moves", "left"],
            Action::MoveRight => &["moves", "right"],
            Action::MoveUp => &["rises"],
            Action::MoveDown => &["falls"],
        }
    }

    /// Cell step `(dx, dy)`; rows grow downwards.
    pub fn step(self) -> (i64, i64) {
        match self {
            Action::MoveLeft => (-1, 0),
            Action::MoveRight => (1, 0),
            Action::MoveUp => (0, -1),
            Action::MoveDown => (0, 1),
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }
}

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["square", "circle", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistractorKind {
    /// Same color or same shape (not both), different action, own span.
    SharesAttribute,
    /// Same action over the same span, different color and shape.
    SharesAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub frames: usize,
    /// `(rows, cols)`
    pub grid: (usize, usize),
    pub feature_dim: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_span: usize,
    pub max_span: usize,
    pub actions: Vec<Action>,
    pub noise_std: f64,
    /// Norm of the motion component added to a moving object's cell.
    pub motion_scale: f64,
    /// Seed of the fixed visual and text embedding tables.
    pub table_seed: u64,
    /// Attribute and direction words share the vectors of what they name,
    /// as a jointly trained vision-text encoder would provide.
    pub aligned_words: bool,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            grid: (4, 4),
            feature_dim: 32,
            min_objects: 2,
            max_objects: 3,
            min_span: 2,
            max_span: 3,
            actions: Action::ALL.to_vec(),
            noise_std: 0.05,
            motion_scale: 1.5,
            table_seed: 7,
            aligned_words: true,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TensorError::invalid("WorldConfig", msg));
        let (h, w) = self.grid;
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects {
            return bad(format!(
                "object count range {}..={} must start at 2 or more",
                self.min_objects, self.max_objects
            ));
        }
        if self.max_objects > h * w {
            return bad(format!("{} objects do not fit a {h}x{w} grid", self.max_objects));
        }
        if self.min_span == 0 || self.max_span < self.min_span || self.max_span >= self.frames {
            return bad(format!(
                "span range {}..={} must be positive and leave a still frame before it in {} frames",
                self.min_span, self.max_span, self.frames
            ));
        }
        if self.actions.len() < 2 {
            return bad("need at least two actions so attribute-sharing distractors can differ".into());
        }
        for a in &self.actions {
            let room = if a.step().0 != 0 { w } else { h };
            if self.max_span >= room {
                return bad(format!("{a:?} over {} frames leaves the {h}x{w} grid", self.max_span));
            }
        }
        if self.feature_dim == 0 || !(self.noise_std >= 0.0) || !(self.motion_scale >= 0.0) {
            return bad("feature_dim must be positive and noise/motion scales nonnegative".into());
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Fixed random unit vectors for every visual and textual symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub colors: Vec<Vec<f64>>,
    pub shapes: Vec<Vec<f64>>,
    pub motions: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub words: BTreeMap<String, Vec<f64>>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..d).map(|_| n.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl EmbeddingTables {
    /// With `aligned`, color and shape words reuse the attribute vectors and
    /// each action's last word reuses its motion vector; every other word
    /// gets an independent vector.
    pub fn new(feature_dim: usize, seed: u64, aligned: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = feature_dim;
        let colors: Vec<Vec<f64>> = COLORS.iter().map(|_| unit_vector(&mut rng, d)).collect();
        let shapes: Vec<Vec<f64>> = SHAPES.iter().map(|_| unit_vector(&mut rng, d)).collect();
        let motions: Vec<Vec<f64>> = Action::ALL.iter().map(|_| unit_vector(&mut rng, d)).collect();
        let background = unit_vector(&mut rng, d);
        let mut vocab: Vec<&str> = COLORS.iter().chain(SHAPES.iter()).copied().collect();
        for a in Action::ALL {
            for w in a.words() {
                if !vocab.contains(w) {
                    vocab.push(w);
                }
            }
        }
        let mut words: BTreeMap<String, Vec<f64>> =
            vocab.into_iter().map(|w| (w.to_string(), unit_vector(&mut rng, d))).collect();
        if aligned {
            for (name, v) in COLORS.iter().zip(&colors).chain(SHAPES.iter().zip(&shapes)) {
                words.insert(name.to_string(), v.clone());
            }
            for (a, v) in Action::ALL.iter().zip(&motions) {
                let last = a.words().last().expect("every action has words");
                words.insert(last.to_string(), v.clone());
            }
        }
        Self {
            colors,
            shapes,
            motions,
            background,
            words,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldObject {
    pub color: usize,
    pub shape: usize,
    pub action: Action,
    /// Frames on which the object takes a step, 0-based inclusive.
    pub span: (usize, usize),
    /// `(col, row)` cell per frame.
    pub path: Vec<(usize, usize)>,
}

impl WorldObject {
    pub fn moves_on(&self, frame: usize) -> bool {
        (self.span.0..=self.span.1).contains(&frame)
    }

    /// Frames where the cell differs from the previous frame.
    pub fn moved_frames(&self) -> Vec<usize> {
        (1..self.path.len()).filter(|&t| self.path[t] != self.path[t - 1]).collect()
    }

    pub fn cell_box(&self, frame: usize, grid: (usize, usize)) -> BBox {
        let (x, y) = self.path[frame];
        let (h, w) = (grid.0 as f64, grid.1 as f64);
        BBox {
            cx: (x as f64 + 0.5) / w,
            cy: (y as f64 + 0.5) / h,
            w: 1.0 / w,
            h: 1.0 / h,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    /// Frames where the described action happens, 0-based inclusive.
    pub consistent_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub objects: Vec<WorldObject>,
    pub target: usize,
    pub distractor: DistractorKind,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode<R: Real> {
    pub video: VideoFeatures<R>,
    pub query: QuerySplit<R>,
    pub gt: GroundTruth,
    pub meta: EpisodeMeta,
}

fn sample_span(cfg: &WorldConfig, rng: &mut impl Rng) -> (usize, usize) {
    let len = rng.random_range(cfg.min_span..=cfg.max_span);
    let start = rng.random_range(1..=cfg.frames - len);
    (start, start + len - 1)
}

fn build_path(start: (usize, usize), action: Action, span: (usize, usize), frames: usize) -> Vec<(usize, usize)> {
    let (dx, dy) = action.step();
    (0..frames)
        .map(|t| {
            let steps = if t < span.0 { 0 } else { (t.min(span.1) - span.0 + 1) as i64 };
            ((start.0 as i64 + dx * steps) as usize, (start.1 as i64 + dy * steps) as usize)
        })
        .collect()
}

/// Places an object whose whole path stays on the grid and off every other path.
fn place(
    cfg: &WorldConfig,
    rng: &mut impl Rng,
    action: Action,
    span: (usize, usize),
    others: &[WorldObject],
) -> Option<Vec<(usize, usize)>> {
    let (h, w) = cfg.grid;
    let len = (span.1 - span.0 + 1) as i64;
    let (dx, dy) = action.step();
    let mut starts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let (ex, ey) = (x + dx * len, y + dy * len);
            if ex >= 0 && ex < w as i64 && ey >= 0 && ey < h as i64 {
                starts.push((x as usize, y as usize));
            }
        }
    }
    for _ in 0..64 {
        let &s = starts.choose(rng)?;
        let path = build_path(s, action, span, cfg.frames);
        let clash = others.iter().any(|o| o.path.iter().zip(&path).any(|(a, b)| a == b));
        if !clash {
            return Some(path);
        }
    }
    None
}

fn pick_other<T: Copy + PartialEq>(rng: &mut impl Rng, pool: &[T], not: T) -> T {
    let rest: Vec<T> = pool.iter().copied().filter(|&x| x != not).collect();
    *rest.choose(rng).expect("pool has an alternative")
}

fn sample_objects(cfg: &WorldConfig, rng: &mut impl Rng) -> Option<(Vec<WorldObject>, DistractorKind)> {
    let colors: Vec<usize> = (0..COLORS.len()).collect();
    let shapes: Vec<usize> = (0..SHAPES.len()).collect();
    let action = *cfg.actions.choose(rng)?;
    let span = sample_span(cfg, rng);
    let target_color = rng.random_range(0..COLORS.len());
    let target_shape = rng.random_range(0..SHAPES.len());
    let kind = if rng.random_bool(0.5) {
        DistractorKind::SharesAttribute
    } else {
        DistractorKind::SharesAction
    };
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut objects = vec![WorldObject {
        color: target_color,
        shape: target_shape,
        action,
        span,
        path: place(cfg, rng, action, span, &[])?,
    }];
    while objects.len() < n {
        let (color, shape, act, sp) = match kind {
            DistractorKind::SharesAttribute => {
                let (c, s) = if rng.random_bool(0.5) {
                    (target_color, pick_other(rng, &shapes, target_shape))
                } else {
                    (pick_other(rng, &colors, target_color), target_shape)
                };
                (c, s, pick_other(rng, &cfg.actions, action), sample_span(cfg, rng))
            }
            DistractorKind::SharesAction => (
                pick_other(rng, &colors, target_color),
                pick_other(rng, &shapes, target_shape),
                action,
                span,
            ),
        };
        if objects.iter().any(|o| o.color == color && o.shape == shape) {
            continue;
        }
        let path = place(cfg, rng, act, sp, &objects)?;
        objects.push(WorldObject {
            color,
            shape,
            action: act,
            span: sp,
            path,
        });
    }
    Some((objects, kind))
}

/// Cell features for every frame: object cells carry color, shape and (while
/// moving) motion components, empty cells the background; noise is added per
/// coordinate and each frame token is the mean of its cells.
pub fn encode_features<R: Real>(
    objects: &[WorldObject],
    cfg: &WorldConfig,
    tables: &EmbeddingTables,
    rng: &mut impl Rng,
) -> Result<VideoFeatures<R>> {
    let (h, w) = cfg.grid;
    let (j, d) = (h * w, cfg.feature_dim);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| TensorError::invalid("encode_features", e.to_string()))?;
    let mut data = Vec::with_capacity(cfg.frames * (j + 1) * d);
    for t in 0..cfg.frames {
        let mut cells = vec![tables.background.clone(); j];
        for o in objects {
            let (x, y) = o.path[t];
            let cell = &mut cells[y * w + x];
            for k in 0..d {
                let motion = if o.moves_on(t) {
                    cfg.motion_scale * tables.motions[o.action.index()][k]
                } else {
                    0.0
                };
                cell[k] = tables.colors[o.color][k] + tables.shapes[o.shape][k] + motion;
            }
        }
        if cfg.noise_std > 0.0 {
            for c in cells.iter_mut() {
                c.iter_mut().for_each(|x| *x += noise.sample(rng));
            }
        }
        let mut token = vec![0.0; d];
        for c in &cells {
            token.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
        data.extend(token.iter().map(|x| R::lit(x / j as f64)));
        for c in &cells {
            data.extend(c.iter().map(|&x| R::lit(x)));
        }
    }
    VideoFeatures::new(cfg.grid, Tensor::new([cfg.frames, j + 1, d], data)?)
}

/// Word embeddings for `[color, shape, action words..]`.
pub fn encode_query<R: Real>(words: &[String], tables: &EmbeddingTables) -> Result<QuerySplit<R>> {
    if words.len() < 3 {
        return Err(TensorError::invalid(
            "encode_query",
            format!("expected color, shape and action words, got {words:?}"),
        ));
    }
    let mut rows = Vec::with_capacity(words.len());
    for w in words {
        let v = tables
            .words
            .get(w)
            .ok_or_else(|| TensorError::invalid("encode_query", format!("unknown word {w:?}")))?;
        rows.push(v.iter().map(|&x| R::lit(x)).collect::<Vec<R>>());
    }
    QuerySplit::new(Tensor::from_rows(&rows)?, vec![0, 1], (2..words.len()).collect())
}

pub fn query_words(color: usize, shape: usize, action: Action) -> Vec<String> {
    let mut w = vec![COLORS[color].to_string(), SHAPES[shape].to_string()];
    w.extend(action.words().iter().map(|s| s.to_string()));
    w
}

/// Draws one episode; deterministic in the state of `rng`.
pub fn generate_episode<R: Real>(cfg: &WorldConfig, tables: &EmbeddingTables, rng: &mut impl Rng) -> Result<Episode<R>> {
    cfg.validate()?;
    for _ in 0..256 {
        let Some((objects, kind)) = sample_objects(cfg, rng) else {
            continue;
        };
        let t = &objects[0];
        let words = query_words(t.color, t.shape, t.action);
        let video = encode_features(&objects, cfg, tables, rng)?;
        let query = encode_query(&words, tables)?;
        let gt = GroundTruth {
            boxes: (0..cfg.frames).map(|f| t.cell_box(f, cfg.grid)).collect(),
            consistent_span: t.span,
        };
        return Ok(Episode {
            video,
            query,
            gt,
            meta: EpisodeMeta {
                objects,
                target: 0,
                distractor: kind,
                words,
            },
        });
    }
    Err(TensorError::invalid("generate_episode", "could not place objects without collisions"))
}

/// `count` episodes from a single stream seeded with `seed`.
pub fn generate_set<R: Real>(cfg: &WorldConfig, count: usize, seed: u64) -> Result<Vec<Episode<R>>> {
    let tables = EmbeddingTables::new(cfg.feature_dim, cfg.table_seed, cfg.aligned_words);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| generate_episode(cfg, &tables, &mut rng)).collect()
}

/// Objects whose color, shape and action all match the query words.
pub fn matching_objects(meta: &EpisodeMeta) -> Vec<usize> {
    meta.objects
        .iter()
        .enumerate()
        .filter(|(_, o)| query_words(o.color, o.shape, o.action) == meta.words)
        .map(|(i, _)| i)
        .collect()
}

const DUMP_FORMAT: &str = "hero-episodes";
const DUMP_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    meta: EpisodeMeta,
    gt: GroundTruth,
    video_shape: Vec<usize>,
    video_offset: usize,
    query_shape: Vec<usize>,
    query_offset: usize,
    attr_idx: Vec<usize>,
    act_idx: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    world: WorldConfig,
    /// Number of f64 values in `features.bin`.
    values: usize,
    episodes: Vec<ManifestEntry>,
}

fn io_err(op: &'static str, e: impl std::fmt::Display) -> TensorError {
    TensorError::invalid(op, e.to_string())
}

/// Writes `manifest.json` and `features.bin` (little-endian f64) into `dir`.
pub fn save_episodes<R: Real>(dir: &Path, cfg: &WorldConfig, episodes: &[Episode<R>]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err("save_episodes", e))?;
    let mut values: Vec<f64> = Vec::new();
    let mut entries = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let video_offset = values.len();
        values.extend(ep.video.tokens.to_f64_vec());
        let query_offset = values.len();
        values.extend(ep.query.tokens.to_f64_vec());
        entries.push(ManifestEntry {
            meta: ep.meta.clone(),
            gt: ep.gt.clone(),
            video_shape: ep.video.tokens.shape().to_vec(),
            video_offset,
            query_shape: ep.query.tokens.shape().to_vec(),
            query_offset,
            attr_idx: ep.query.attr_idx.clone(),
            act_idx: ep.query.act_idx.clone(),
        });
    }
    let manifest = Manifest {
        format: DUMP_FORMAT.into(),
        version: DUMP_VERSION,
        world: cfg.clone(),
        values: values.len(),
        episodes: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| io_err("save_episodes", e))?;
    fs::write(dir.join("manifest.json"), json).map_err(|e| io_err("save_episodes", e))?;
    let mut f = fs::File::create(dir.join("features.bin")).map_err(|e| io_err("save_episodes", e))?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| io_err("save_episodes", e))
}

/// Reads a dump written by [`save_episodes`].
pub fn load_episodes<R: Real>(dir: &Path) -> Result<(WorldConfig, Vec<Episode<R>>)> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(|e| io_err("load_episodes", e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| io_err("load_episodes", e))?;
    if manifest.format != DUMP_FORMAT || manifest.version != DUMP_VERSION {
        return Err(TensorError::invalid(
            "load_episodes",
            format!("unsupported dump {} v{}", manifest.format, manifest.version),
        ));
    }
    let mut bytes = Vec::new();
    fs::File::open(dir.join("features.bin"))
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err("load_episodes", e))?;
    if bytes.len() != manifest.values * 8 {
        return Err(TensorError::invalid(
            "load_episodes",
            format!("features.bin holds {} bytes, manifest expects {}", bytes.len(), manifest.values * 8),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let block = |offset: usize, shape: &[usize]| -> Result<Tensor<R>> {
        let n: usize = shape.iter().product();
        let slice = values
            .get(offset..offset + n)
            .ok_or_else(|| TensorError::invalid("load_episodes", "feature block outside features.bin"))?;
        Tensor::from_f64(shape.to_vec(), slice)
    };
    let grid = manifest.world.grid;
    let episodes = manifest
        .episodes
        .into_iter()
        .map(|e| {
            Ok(Episode {
                video: VideoFeatures::new(grid, block(e.video_offset, &e.video_shape)?)?,
                query: QuerySplit::new(block(e.query_offset, &e.query_shape)?, e.attr_idx, e.act_idx)?,
                gt: e.gt,
                meta: e.meta,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest.world, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::iou;

    fn tables(cfg: &WorldConfig) -> EmbeddingTables {
        EmbeddingTables::new(cfg.feature_dim, cfg.table_seed, cfg.aligned_words)
    }

    #[test]
    fn move_right_over_frames_three_to_five() {
        let cfg = WorldConfig::default();
        let path = build_path((0, 1), Action::MoveRight, (2, 4), cfg.frames);
        let o = WorldObject {
            color: 0,
            shape: 0,
            action: Action::MoveRight,
            span: (2, 4),
            path,
        };
        // 1-based frames 3..=5 are 0-based 2..=4
        assert_eq!(o.moved_frames(), vec![2, 3, 4]);
        for t in 2..=4 {
            assert!(o.path[t].0 > o.path[t - 1].0);
        }
        assert_eq!(o.path[7], (3, 1));
    }

    #[test]
    fn same_seed_same_episode() {
        let cfg = WorldConfig::default();
        let a = generate_set::<f64>(&cfg, 5, 42).unwrap();
        let b = generate_set::<f64>(&cfg, 5, 42).unwrap();
        assert_eq!(a, b);
        let c = generate_set::<f64>(&cfg, 5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thousand_episodes_satisfy_world_invariants() {
        let cfg = WorldConfig::default();
        let eps = generate_set::<f64>(&cfg, 1000, 1).unwrap();
        let mut per_action = BTreeMap::new();
        for ep in &eps {
            let m = &ep.meta;
            assert_eq!(matching_objects(m), vec![m.target]);
            let t = &m.objects[m.target];
            let (s, e) = ep.gt.consistent_span;
            assert_eq!(t.moved_frames(), (s..=e).collect::<Vec<_>>());
            assert!(s >= 1 && e < cfg.frames);
            for f in 0..cfg.frames {
                assert_eq!(iou(&ep.gt.boxes[f], &t.cell_box(f, cfg.grid)), 1.0);
                let cells: Vec<_> = m.objects.iter().map(|o| o.path[f]).collect();
                for i in 0..cells.len() {
                    assert!(!cells[i + 1..].contains(&cells[i]), "collision in frame {f}");
                }
            }
            assert!((cfg.min_objects..=cfg.max_objects).contains(&m.objects.len()));
            for d in &m.objects[1..] {
                let same_attr = (d.color == t.color) as u8 + (d.shape == t.shape) as u8;
                match m.distractor {
                    DistractorKind::SharesAttribute => {
                        assert_eq!(same_attr, 1);
                        assert_ne!(d.action, t.action);
                    }
                    DistractorKind::SharesAction => {
                        assert_eq!(same_attr, 0);
                        assert_eq!((d.action, d.span), (t.action, t.span));
                    }
                }
            }
            *per_action.entry(t.action).or_insert(0usize) += 1;
        }
        for a in Action::ALL {
            let n = per_action[&a] as f64;
            assert!((n - 250.0).abs() <= 50.0, "{a:?} appeared {n} times");
        }
    }

    #[test]
    fn feature_encoding_cases() {
        let mut cfg = WorldConfig::default();
        cfg.noise_std = 0.0;
        let t = tables(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obj = WorldObject {
            color: 1,
            shape: 2,
            action: Action::MoveDown,
            span: (1, 2),
            path: build_path((2, 0), Action::MoveDown, (1, 2), cfg.frames),
        };
        let v = encode_features::<f64>(&[obj], &cfg, &t, &mut rng).unwrap();
        let (j, d) = (cfg.patches(), cfg.feature_dim);
        let row = |f: usize, k: usize| &v.tokens.data()[(f * (j + 1) + k) * d..(f * (j + 1) + k + 1) * d];
        // empty cell is exactly the background
        assert_eq!(row(0, 1), &t.background[..]);
        let occupied = row(0, 1 + 2);
        for k in 0..d {
            assert_eq!(occupied[k], t.colors[1][k] + t.shapes[2][k]);
        }
        let moving = row(1, 1 + 4 + 2);
        for k in 0..d {
            assert_eq!(moving[k], t.colors[1][k] + t.shapes[2][k] + cfg.motion_scale * t.motions[3][k]);
        }

        cfg.noise_std = 0.1;
        let ep = generate_set::<f64>(&cfg, 3, 9).unwrap();
        assert_eq!(ep, generate_set::<f64>(&cfg, 3, 9).unwrap());
        for e in &ep {
            for f in 0..cfg.frames {
                for k in 0..d {
                    let mean: f64 = (1..=j).map(|p| e.video.tokens.data()[(f * (j + 1) + p) * d + k]).sum::<f64>() / j as f64;
                    assert!((e.video.tokens.data()[f * (j + 1) * d + k] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn query_templates() {
        let cfg = WorldConfig::default();
        let t = tables(&cfg);
        let words = query_words(0, 0, Action::MoveRight);
        assert_eq!(words, ["red", "square", "moves", "right"]);
        let q = encode_query::<f64>(&words, &t).unwrap();
        assert_eq!(q.attr_idx, vec![0, 1]);
        assert_eq!(q.act_idx, vec![2, 3]);
        assert_eq!(q.tokens.row(3), &t.words["right"][..]);
        let q1 = encode_query::<f64>(&query_words(2, 1, Action::MoveUp), &t).unwrap();
        assert_eq!(q1.act_idx.len(), 1);
        assert_eq!(q, encode_query::<f64>(&words, &t).unwrap());
        assert!(encode_query::<f64>(&["red".into(), "square".into(), "dances".into()], &t).is_err());
    }

    #[test]
    fn unsatisfiable_configs_rejected() {
        let cfg = WorldConfig {
            min_objects: 1,
            max_objects: 1,
            ..WorldConfig::default()
        };
        assert!(generate_set::<f64>(&cfg, 1, 0).is_err());
        let cfg = WorldConfig {
            max_span: 4,
            ..WorldConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = WorldConfig {
            frames: 1,
            ..WorldConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let cfg = WorldConfig::default();
        let eps = generate_set::<f64>(&cfg, 4, 5).unwrap();
        let dir = std::env::temp_dir().join(format!("hero-dump-{}", std::process::id()));
        save_episodes(&dir, &cfg, &eps).unwrap();
        let (cfg2, back) = load_episodes::<f64>(&dir).unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(back, eps);
        fs::write(dir.join("features.bin"), [0u8; 8]).unwrap();
        assert!(load_episodes::<f64>(&dir).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
