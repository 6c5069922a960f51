//! Procedural multi-subject sprite videos with exact per-subject masks.

use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: f64 = 0.5;
pub const SPRITE_SIZE: usize = 4;
pub const REF_SIZE: usize = 8;
pub const MAX_SUBJECTS: usize = 3;
pub const DATASET_VERSION: u32 = 1;

pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether local pixel (row, col) of a `size`-box belongs to the shape.
    pub fn covers(self, r: usize, c: usize, size: usize) -> bool {
        match self {
            Shape::Square => true,
            Shape::Disc => {
                let m = (size as f64 - 1.0) / 2.0;
                let (dr, dc) = (r as f64 - m, c as f64 - m);
                dr * dr + dc * dc <= (size * size) as f64 / 6.4
            }
            Shape::Triangle => c <= r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 16,
            width: 16,
        }
    }
}

impl Dims {
    pub fn video_shape(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, 3]
    }

    pub fn max_x(&self) -> i32 {
        (self.width - SPRITE_SIZE) as i32
    }

    pub fn max_y(&self) -> i32 {
        (self.height - SPRITE_SIZE) as i32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub shape: Shape,
    /// Palette index.
    pub color: usize,
    pub size: usize,
    /// Top-left corner at frame 0.
    pub start: (i32, i32),
    /// Displacement per frame.
    pub velocity: (i32, i32),
}

impl SpriteSpec {
    pub fn position(&self, frame: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * frame as i32,
            self.start.1 + self.velocity.1 * frame as i32,
        )
    }

    pub fn in_frame(&self, dims: &Dims) -> bool {
        (0..dims.frames).all(|f| {
            let (x, y) = self.position(f);
            x >= 0
                && y >= 0
                && x + self.size as i32 <= dims.width as i32
                && y + self.size as i32 <= dims.height as i32
        })
    }

    pub fn symbol(&self) -> PromptSymbol {
        PromptSymbol {
            shape: self.shape,
            color: self.color,
            x0: self.start.0 as usize,
            y0: self.start.1 as usize,
            dx: self.velocity.0,
            dy: self.velocity.1,
        }
    }
}

/// One prompt symbol: a sprite's shape, color, starting cell, and motion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSymbol {
    pub shape: Shape,
    pub color: usize,
    pub x0: usize,
    pub y0: usize,
    pub dx: i32,
    pub dy: i32,
}

impl PromptSymbol {
    pub fn spec(&self) -> SpriteSpec {
        SpriteSpec {
            shape: self.shape,
            color: self.color,
            size: SPRITE_SIZE,
            start: (self.x0 as i32, self.y0 as i32),
            velocity: (self.dx, self.dy),
        }
    }
}

/// The closed prompt vocabulary: sizes of every symbol factor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocabulary {
    pub shapes: Vec<Shape>,
    pub colors: Vec<String>,
    pub x_positions: usize,
    pub y_positions: usize,
    pub velocities: Vec<i32>,
}

impl Vocabulary {
    pub fn for_dims(dims: &Dims) -> Self {
        Self {
            shapes: Shape::ALL.to_vec(),
            colors: PALETTE.iter().map(|(n, _)| n.to_string()).collect(),
            x_positions: dims.max_x() as usize + 1,
            y_positions: dims.max_y() as usize + 1,
            velocities: vec![-1, 0, 1],
        }
    }

    /// Factor indices (shape, color, x0, y0, dx, dy) of a symbol.
    pub fn encode(&self, s: &PromptSymbol) -> Result<[usize; 6]> {
        let bad = |what: &str| Error::Vocabulary(format!("{what} in {s:?}"));
        let shape = self
            .shapes
            .iter()
            .position(|&x| x == s.shape)
            .ok_or_else(|| bad("shape"))?;
        if s.color >= self.colors.len() {
            return Err(bad("color index out of palette"));
        }
        if s.x0 >= self.x_positions || s.y0 >= self.y_positions {
            return Err(bad("start position out of grid"));
        }
        let vel = |d: i32| self.velocities.iter().position(|&v| v == d);
        let dx = vel(s.dx).ok_or_else(|| bad("dx"))?;
        let dy = vel(s.dy).ok_or_else(|| bad("dy"))?;
        Ok([shape, s.color, s.x0, s.y0, dx, dy])
    }

    pub fn factor_sizes(&self) -> [usize; 6] {
        [
            self.shapes.len(),
            self.colors.len(),
            self.x_positions,
            self.y_positions,
            self.velocities.len(),
            self.velocities.len(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub specs: Vec<SpriteSpec>,
    /// `[8, 8, 3]` per subject.
    pub references: Vec<Tensor>,
    pub prompt: Vec<PromptSymbol>,
    /// `[f, h, w, 3]` in [0, 1].
    pub video: Tensor,
    /// `[f, N, h, w]`, 1.0 where the pixel shows subject k.
    pub masks: Tensor,
}

impl SceneSample {
    pub fn n_subjects(&self) -> usize {
        self.specs.len()
    }
}

/// Rasterises sprites in draw order over a gray background.
pub fn render_video(specs: &[SpriteSpec], dims: &Dims) -> Result<(Tensor, Tensor)> {
    if let Some(s) = specs.iter().find(|s| !s.in_frame(dims)) {
        return Err(Error::Domain(format!("sprite leaves the frame: {s:?}")));
    }
    if let Some(s) = specs.iter().find(|s| s.color >= PALETTE.len()) {
        return Err(Error::Domain(format!("color outside palette: {s:?}")));
    }
    let (f, h, w, n) = (dims.frames, dims.height, dims.width, specs.len());
    let mut video = vec![BACKGROUND; f * h * w * 3];
    // Owner of each pixel (draw order resolves occlusion).
    let mut owner = vec![usize::MAX; f * h * w];
    for fr in 0..f {
        for (k, s) in specs.iter().enumerate() {
            let (x, y) = s.position(fr);
            for r in 0..s.size {
                for c in 0..s.size {
                    if s.shape.covers(r, c, s.size) {
                        let (py, px) = (y as usize + r, x as usize + c);
                        owner[(fr * h + py) * w + px] = k;
                    }
                }
            }
        }
    }
    let mut masks = vec![0.0; f * n.max(1) * h * w];
    for fr in 0..f {
        for p in 0..h * w {
            let k = owner[fr * h * w + p];
            if k == usize::MAX {
                continue;
            }
            let rgb = PALETTE[specs[k].color].1;
            video[(fr * h * w + p) * 3..(fr * h * w + p) * 3 + 3].copy_from_slice(&rgb);
            masks[(fr * n + k) * h * w + p] = 1.0;
        }
    }
    let video = Tensor::new(dims.video_shape().to_vec(), video)?;
    let masks = Tensor::new(vec![f, n.max(1), h, w], masks)?;
    Ok((video, masks))
}

/// Sprite centred on an 8×8 gray canvas.
pub fn render_reference(spec: &SpriteSpec) -> Tensor {
    let mut img = vec![BACKGROUND; REF_SIZE * REF_SIZE * 3];
    let off = (REF_SIZE - spec.size) / 2;
    let rgb = PALETTE[spec.color].1;
    for r in 0..spec.size {
        for c in 0..spec.size {
            if spec.shape.covers(r, c, spec.size) {
                let p = (r + off) * REF_SIZE + c + off;
                img[p * 3..p * 3 + 3].copy_from_slice(&rgb);
            }
        }
    }
    Tensor::new(vec![REF_SIZE, REF_SIZE, 3], img).expect("finite by construction")
}

fn pixel_count(spec: &SpriteSpec) -> usize {
    (0..spec.size)
        .flat_map(|r| (0..spec.size).map(move |c| (r, c)))
        .filter(|&(r, c)| spec.shape.covers(r, c, spec.size))
        .count()
}

/// Minimum fraction of each sprite visible in every frame.
const MIN_VISIBLE: f64 = 0.5;
const MAX_ATTEMPTS: usize = 10_000;

pub fn gen_scene(seed: u64, n_subjects: usize, dims: &Dims) -> Result<SceneSample> {
    if !(1..=MAX_SUBJECTS).contains(&n_subjects) {
        return Err(Error::Domain(format!(
            "scenes hold 1..={MAX_SUBJECTS} subjects, asked for {n_subjects}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let span = (dims.frames - 1) as i32;
    for _ in 0..MAX_ATTEMPTS {
        let colors = sample_indices(&mut rng, PALETTE.len(), n_subjects);
        let specs: Vec<SpriteSpec> = colors
            .iter()
            .map(|color| {
                let shape = Shape::ALL[rng.random_range(0..3)];
                let vx = rng.random_range(-1..=1);
                let vy = rng.random_range(-1..=1);
                // Start range that keeps the whole path inside the frame.
                let range = |v: i32, max: i32| {
                    let lo = if v < 0 { -v * span } else { 0 };
                    let hi = if v > 0 { max - v * span } else { max };
                    (lo, hi)
                };
                let (xl, xh) = range(vx, dims.max_x());
                let (yl, yh) = range(vy, dims.max_y());
                SpriteSpec {
                    shape,
                    color,
                    size: SPRITE_SIZE,
                    start: (rng.random_range(xl..=xh), rng.random_range(yl..=yh)),
                    velocity: (vx, vy),
                }
            })
            .collect();
        let (video, masks) = render_video(&specs, dims)?;
        let hw = dims.height * dims.width;
        let visible = (0..dims.frames).all(|fr| {
            specs.iter().enumerate().all(|(k, s)| {
                let m = &masks.data()[(fr * n_subjects + k) * hw..(fr * n_subjects + k + 1) * hw];
                m.iter().sum::<f64>() >= MIN_VISIBLE * pixel_count(s) as f64
            })
        });
        if !visible {
            continue;
        }
        return Ok(SceneSample {
            seed,
            references: specs.iter().map(render_reference).collect(),
            prompt: specs.iter().map(SpriteSpec::symbol).collect(),
            specs,
            video,
            masks,
        });
    }
    Err(Error::Numeric(format!("no valid scene for seed {seed} after {MAX_ATTEMPTS} attempts")))
}

/// Per-sample seed and subject count derived from a dataset seed.
pub fn sample_plan(dataset_seed: u64, index: usize) -> (u64, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(dataset_seed);
    rng.set_stream(index as u64 + 1);
    let seed = rng.random::<u64>();
    let n = rng.random_range(1..=MAX_SUBJECTS);
    (seed, n)
}

pub fn gen_dataset(count: usize, dataset_seed: u64, dims: &Dims) -> Result<Vec<SceneSample>> {
    (0..count)
        .map(|i| {
            let (seed, n) = sample_plan(dataset_seed, i);
            gen_scene(seed, n, dims)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub seed: u64,
    pub n_subjects: usize,
    pub prompt: Vec<PromptSymbol>,
    pub tensors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub vocabulary: Vocabulary,
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_range: [usize; 2],
    pub container: String,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn dims(&self) -> Dims {
        Dims {
            frames: self.frames,
            height: self.height,
            width: self.width,
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.idcr";

fn spec_row(s: &SpriteSpec) -> [f64; 7] {
    [
        s.shape.index() as f64,
        s.color as f64,
        s.size as f64,
        s.start.0 as f64,
        s.start.1 as f64,
        s.velocity.0 as f64,
        s.velocity.1 as f64,
    ]
}

fn spec_from_row(r: &[f64]) -> Result<SpriteSpec> {
    let int = |v: f64| -> Result<i64> {
        if v.fract() == 0.0 && v.abs() < 1e6 {
            Ok(v as i64)
        } else {
            Err(Error::Corrupt(format!("non-integral sprite field {v}")))
        }
    };
    let shape = *Shape::ALL
        .get(int(r[0])? as usize)
        .ok_or_else(|| Error::Corrupt("bad shape index".into()))?;
    Ok(SpriteSpec {
        shape,
        color: int(r[1])? as usize,
        size: int(r[2])? as usize,
        start: (int(r[3])? as i32, int(r[4])? as i32),
        velocity: (int(r[5])? as i32, int(r[6])? as i32),
    })
}

pub fn write_dataset(samples: &[SceneSample], dims: &Dims, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut c = Container::new(json!({"kind": "sprite-dataset"}));
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let base = format!("s{i}");
        let n = s.n_subjects();
        let specs: Vec<f64> = s.specs.iter().flat_map(spec_row).collect();
        let mut names = vec![format!("{base}/video"), format!("{base}/masks"), format!("{base}/specs")];
        c.push(&names[0], s.video.clone());
        c.push(&names[1], s.masks.clone());
        c.push(&names[2], Tensor::new(vec![n, 7], specs)?);
        for (k, r) in s.references.iter().enumerate() {
            let name = format!("{base}/ref{k}");
            c.push(&name, r.clone());
            names.push(name);
        }
        entries.push(ManifestEntry {
            seed: s.seed,
            n_subjects: n,
            prompt: s.prompt.clone(),
            tensors: names,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        vocabulary: Vocabulary::for_dims(dims),
        count: samples.len(),
        frames: dims.frames,
        height: dims.height,
        width: dims.width,
        n_range: [1, MAX_SUBJECTS],
        container: DATA_FILE.into(),
        samples: entries,
    };
    c.save(&dir.join(DATA_FILE))?;
    let mpath = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, text + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Missing(mpath));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt(format!("manifest: {e}")))?;
    if m.version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            found: m.version,
            expected: DATASET_VERSION,
        });
    }
    if m.count != m.samples.len() {
        return Err(Error::Corrupt(format!(
            "manifest count {} but {} sample entries",
            m.count,
            m.samples.len()
        )));
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SceneSample>)> {
    let m = read_manifest(dir)?;
    let c = Container::load(&dir.join(&m.container))?;
    let expected: usize = m.samples.iter().map(|e| e.tensors.len()).sum();
    if expected != c.tensors.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {expected} tensors, container holds {}",
            c.tensors.len()
        )));
    }
    let dims = m.dims();
    let mut out = Vec::with_capacity(m.count);
    for e in &m.samples {
        let get = |name: &String| c.require(name).cloned();
        if e.tensors.len() != 3 + e.n_subjects {
            return Err(Error::Corrupt(format!("sample {} lists wrong tensor count", e.seed)));
        }
        let video = get(&e.tensors[0])?;
        let masks = get(&e.tensors[1])?;
        let spec_t = get(&e.tensors[2])?;
        if video.shape() != dims.video_shape()
            || masks.shape() != [dims.frames, e.n_subjects, dims.height, dims.width]
            || spec_t.shape() != [e.n_subjects, 7]
        {
            return Err(Error::Corrupt(format!("sample {} has inconsistent shapes", e.seed)));
        }
        let specs = spec_t
            .data()
            .chunks(7)
            .map(spec_from_row)
            .collect::<Result<Vec<_>>>()?;
        for (s, p) in specs.iter().zip(&e.prompt) {
            if s.symbol() != *p {
                return Err(Error::Corrupt(format!("sample {} prompt disagrees with specs", e.seed)));
            }
            m.vocabulary.encode(p)?;
        }
        let references = e.tensors[3..].iter().map(get).collect::<Result<Vec<_>>>()?;
        out.push(SceneSample {
            seed: e.seed,
            specs,
            references,
            prompt: e.prompt.clone(),
            video,
            masks,
        });
    }
    Ok((m, out))
}
