//! Deterministic synthetic fundus images with planted, logged lesions.
//!
//! Every image draws from its own substream `indexed(seed, domain, i)`, so
//! image `i` does not depend on how many images precede it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    DataError, Dataset, DatasetKind, DatasetStatistics, FundusSample, LesionFlags, LesionKind, Mask, RgbImage,
    NUM_DISEASES,
};
use crate::rng::{indexed, Rng};

pub const PLANTING_LOG_FILE: &str = "planting_log.tsv";

/// Total planted lesion count at which an image becomes grade 2.
pub const GRADE2_MIN_TOTAL: usize = 5;
/// Total planted lesion count at which an image becomes grade 3.
pub const GRADE3_MIN_TOTAL: usize = 12;

/// Grade of an image from its planted lesion counts (indexed by
/// [`LesionKind::index`]).
///
/// | condition (first match wins)        | grade |
/// |-------------------------------------|-------|
/// | any NV                              | 4     |
/// | any IRMA, or total ≥ 12             | 3     |
/// | total ≥ 5                           | 2     |
/// | total ≥ 1                           | 1     |
/// | no lesions                          | 0     |
pub fn grade_from_counts(counts: &[usize; 6]) -> u8 {
    let total: usize = counts.iter().sum();
    if counts[LesionKind::NV.index()] > 0 {
        4
    } else if counts[LesionKind::IRMA.index()] > 0 || total >= GRADE3_MIN_TOTAL {
        3
    } else if total >= GRADE2_MIN_TOTAL {
        2
    } else if total >= 1 {
        1
    } else {
        0
    }
}

/// Count and size range for one lesion kind. For blobs the radius is the
/// disk radius; for curves (IRMA, NV) it is half the main stroke length.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LesionDensity {
    pub min_count: usize,
    pub max_count: usize,
    pub min_radius: f64,
    pub max_radius: f64,
}

impl LesionDensity {
    pub fn new(min_count: usize, max_count: usize, min_radius: f64, max_radius: f64) -> Self {
        Self {
            min_count,
            max_count,
            min_radius,
            max_radius,
        }
    }

    pub fn fixed(count: usize, radius: f64) -> Self {
        Self::new(count, count, radius, radius)
    }

    fn validate(&self, kind: LesionKind) -> Result<(), DataError> {
        if self.min_count > self.max_count {
            return Err(DataError::InvalidSpec(format!(
                "{kind}: min_count {} > max_count {}",
                self.min_count, self.max_count
            )));
        }
        if !(self.min_radius >= 1.0 && self.min_radius <= self.max_radius) {
            return Err(DataError::InvalidSpec(format!(
                "{kind}: radii must satisfy 1 <= min ({}) <= max ({})",
                self.min_radius, self.max_radius
            )));
        }
        Ok(())
    }

    fn sample_radius(&self, rng: &mut Rng) -> f64 {
        if self.max_radius > self.min_radius {
            rng.gen_range(self.min_radius..=self.max_radius)
        } else {
            self.min_radius
        }
    }
}

/// How phantom grades are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradeMode {
    /// Counts drawn from the density ranges; grade follows from the rule.
    #[default]
    FromCounts,
    /// Image `i` targets grade `i % 5`; counts are drawn to satisfy the rule
    /// and the density ranges only contribute radii and the set of enabled
    /// kinds (those with `max_count > 0`).
    Balanced,
}

fn default_max_attempts() -> usize {
    200
}
fn default_noise() -> f64 {
    0.01
}
fn default_prefix() -> String {
    "ph".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub densities: BTreeMap<LesionKind, LesionDensity>,
    pub seed: u64,
    /// Fraction of a new lesion's pixels allowed to touch (8-neighbourhood)
    /// already planted lesions. 0 keeps every lesion a separate component.
    #[serde(default)]
    pub overlap_budget: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    #[serde(default)]
    pub grade_mode: GradeMode,
    #[serde(default)]
    pub lm_probability: f64,
    #[serde(default)]
    pub pm_probability: f64,
    #[serde(default = "default_noise")]
    pub noise_sigma: f64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

impl PhantomSpec {
    /// Spec with no lesions planted.
    pub fn empty(num_images: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_images,
            image_size,
            densities: BTreeMap::new(),
            seed,
            overlap_budget: 0.0,
            max_attempts: default_max_attempts(),
            grade_mode: GradeMode::FromCounts,
            lm_probability: 0.0,
            pm_probability: 0.0,
            noise_sigma: default_noise(),
            id_prefix: default_prefix(),
        }
    }

    /// Mixed-lesion spec with sizes scaled to `image_size` (tuned at 128 px).
    pub fn standard(num_images: usize, image_size: usize, seed: u64) -> Self {
        let s = image_size as f64 / 128.0;
        let r = |a: f64, b: f64| ((a * s).max(1.0), (b * s).max(1.0));
        let mut densities = BTreeMap::new();
        for (kind, lo, hi, (r0, r1)) in [
            (LesionKind::MA, 0, 6, r(2.0, 3.0)),
            (LesionKind::HE, 0, 4, r(3.0, 5.0)),
            (LesionKind::EX, 0, 5, r(3.0, 5.0)),
            (LesionKind::SE, 0, 2, r(4.0, 6.0)),
            (LesionKind::IRMA, 0, 1, r(6.0, 9.0)),
            (LesionKind::NV, 0, 1, r(8.0, 11.0)),
        ] {
            densities.insert(kind, LesionDensity::new(lo, hi, r0, r1));
        }
        Self {
            densities,
            ..Self::empty(num_images, image_size, seed)
        }
    }

    pub fn with(mut self, kind: LesionKind, density: LesionDensity) -> Self {
        self.densities.insert(kind, density);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_images == 0 {
            return Err(DataError::InvalidSpec("num_images must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(DataError::InvalidSpec(format!(
                "image_size {} is below the 16 px minimum",
                self.image_size
            )));
        }
        for (kind, d) in &self.densities {
            d.validate(*kind)?;
        }
        for (name, p) in [
            ("overlap_budget", self.overlap_budget),
            ("lm_probability", self.lm_probability),
            ("pm_probability", self.pm_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DataError::InvalidSpec(format!("{name} {p} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DataError::InvalidSpec("noise_sigma must be finite and >= 0".into()));
        }
        if self.max_attempts == 0 {
            return Err(DataError::InvalidSpec("max_attempts must be positive".into()));
        }
        if self.grade_mode == GradeMode::Balanced {
            let enabled = |k: LesionKind| self.densities.get(&k).is_some_and(|d| d.max_count > 0);
            if !BLOB_KINDS.iter().any(|&k| enabled(k)) {
                return Err(DataError::InvalidSpec(
                    "balanced grades need at least one of MA/HE/EX/SE enabled".into(),
                ));
            }
            if !enabled(LesionKind::NV) {
                return Err(DataError::InvalidSpec("balanced grades need NV enabled".into()));
            }
        }
        Ok(())
    }

    fn density(&self, kind: LesionKind) -> Option<&LesionDensity> {
        self.densities.get(&kind)
    }
}

const BLOB_KINDS: [LesionKind; 4] = [LesionKind::MA, LesionKind::HE, LesionKind::EX, LesionKind::SE];

/// What the generator planted in one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantingRecord {
    pub id: String,
    /// Planted lesions per kind, indexed by [`LesionKind::index`].
    pub counts: [usize; 6],
    pub grade: Option<u8>,
    pub lm: bool,
    pub pm: bool,
    /// Bounding box `[x0, y0, x1, y1]` (inclusive) of the PM texture.
    pub pm_region: Option<[usize; 4]>,
    pub diseases: Option<[bool; NUM_DISEASES]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlantingLog {
    pub records: Vec<PlantingRecord>,
}

const LOG_HEADER: &str = "id\tgrade\tMA\tHE\tEX\tSE\tIRMA\tNV\tLM\tPM\tpm_region\tdiseases";

impl PlantingLog {
    /// Statistics implied by the log alone (presence = planted count > 0).
    pub fn statistics(&self) -> Result<DatasetStatistics, DataError> {
        if self.records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut rows = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let grade = r.grade.ok_or_else(|| DataError::MissingGrades { id: r.id.clone() })?;
            rows.push((grade, r.counts.map(|c| c > 0)));
        }
        Ok(DatasetStatistics::from_presence(rows))
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.records {
            let grade = r.grade.map_or("-".to_string(), |g| g.to_string());
            let counts: Vec<String> = r.counts.iter().map(|c| c.to_string()).collect();
            let region = r
                .pm_region
                .map_or("-".to_string(), |b| format!("{},{},{},{}", b[0], b[1], b[2], b[3]));
            let diseases = r.diseases.map_or("-".to_string(), |d| {
                d.iter().map(|&b| if b { '1' } else { '0' }).collect()
            });
            s.push_str(&format!(
                "{}\t{grade}\t{}\t{}\t{}\t{region}\t{diseases}\n",
                r.id,
                counts.join("\t"),
                u8::from(r.lm),
                u8::from(r.pm)
            ));
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self, DataError> {
        let bad = |line: usize, message: String| DataError::Manifest { line, message };
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 12 {
                return Err(bad(lineno, format!("expected 12 columns, found {}", cols.len())));
            }
            let num = |s: &str| -> Result<usize, DataError> {
                s.parse().map_err(|_| bad(lineno, format!("not a count: {s:?}")))
            };
            let grade = match cols[1] {
                "-" => None,
                g => Some(num(g)? as u8),
            };
            let mut counts = [0; 6];
            for (k, c) in counts.iter_mut().enumerate() {
                *c = num(cols[2 + k])?;
            }
            let pm_region = match cols[10] {
                "-" => None,
                s => {
                    let v = s.split(',').map(num).collect::<Result<Vec<_>, _>>()?;
                    let b: [usize; 4] = v
                        .try_into()
                        .map_err(|_| bad(lineno, "pm_region needs 4 values".into()))?;
                    Some(b)
                }
            };
            let diseases = match cols[11] {
                "-" => None,
                s if s.len() == NUM_DISEASES => {
                    let mut d = [false; NUM_DISEASES];
                    for (slot, ch) in d.iter_mut().zip(s.chars()) {
                        *slot = ch == '1';
                    }
                    Some(d)
                }
                s => return Err(bad(lineno, format!("bad disease bits {s:?}"))),
            };
            records.push(PlantingRecord {
                id: cols[0].to_string(),
                counts,
                grade,
                lm: cols[8] == "1",
                pm: cols[9] == "1",
                pm_region,
                diseases,
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, root: &Path) -> Result<(), DataError> {
        let path = root.join(PLANTING_LOG_FILE);
        fs::write(&path, self.to_tsv()).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn read(root: &Path) -> Result<Self, DataError> {
        let path = root.join(PLANTING_LOG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_tsv(&text)
    }
}

// ---------------------------------------------------------------------------
// Rendering primitives

/// Retina field geometry of one image.
struct Field {
    size: usize,
    cx: f64,
    cy: f64,
    radius: f64,
    disc: (f64, f64, f64),
}

impl Field {
    fn inside(&self, x: f64, y: f64, margin: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (dx * dx + dy * dy).sqrt() <= self.radius - margin
    }

    fn random_point(&self, rng: &mut Rng, margin: f64) -> (f64, f64) {
        let r = (self.radius - margin).max(1.0);
        loop {
            let x = rng.gen_range(-r..=r);
            let y = rng.gen_range(-r..=r);
            if x * x + y * y <= r * r {
                return ((self.cx + x).round(), (self.cy + y).round());
            }
        }
    }
}

/// Pixels covered by a disk of radius `r` centred at `(cx, cy)`.
fn disk(field: &Field, cx: f64, cy: f64, r: f64, out: &mut Vec<usize>) {
    let n = field.size as i64;
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    for y in y0.max(0)..=y1.min(n - 1) {
        for x in x0.max(0)..=x1.min(n - 1) {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy <= r * r {
                out.push(y as usize * field.size + x as usize);
            }
        }
    }
}

/// A meandering stroke of `length` px from `(x, y)` heading `angle`.
/// Returns the visited sample points.
fn stroke(rng: &mut Rng, x: f64, y: f64, angle: f64, length: f64) -> Vec<(f64, f64)> {
    let steps = (length / 0.7).ceil() as usize;
    let mut pts = Vec::with_capacity(steps + 1);
    let (mut px, mut py, mut a) = (x, y, angle);
    pts.push((px, py));
    for _ in 0..steps {
        a += rng.gen_range(-0.25..=0.25);
        px += 0.7 * a.cos();
        py += 0.7 * a.sin();
        pts.push((px, py));
    }
    pts
}

/// Branching curve footprint: one main stroke plus one or two side branches.
fn branching_curve(field: &Field, rng: &mut Rng, x: f64, y: f64, radius: f64, out: &mut Vec<usize>) -> bool {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pts = stroke(rng, x, y, angle, 2.0 * radius);
    let branches = rng.gen_range(1..=2);
    for _ in 0..branches {
        let at = pts[rng.gen_range(pts.len() / 4..=3 * pts.len() / 4)];
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let turn = angle + side * rng.gen_range(0.6..1.2);
        let length = radius * rng.gen_range(0.6..1.0);
        let extra = stroke(rng, at.0, at.1, turn, length);
        pts.extend(extra);
    }
    for &(px, py) in &pts {
        if !field.inside(px, py, 2.0) {
            return false;
        }
        disk(field, px.round(), py.round(), 1.0, out);
    }
    true
}

fn dedup(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

/// Occupancy bookkeeping for lesion placement.
struct Occupancy {
    size: usize,
    lesion: Vec<bool>,
    excluded: Vec<bool>,
    budget: f64,
}

impl Occupancy {
    fn new(field: &Field, budget: f64) -> Self {
        let n = field.size;
        let mut excluded = vec![false; n * n];
        let mut d = Vec::new();
        let (dx, dy, dr) = field.disc;
        disk(field, dx, dy, dr + 2.0, &mut d);
        for i in d {
            excluded[i] = true;
        }
        Self {
            size: n,
            lesion: vec![false; n * n],
            excluded,
            budget,
        }
    }

    fn touches(&self, i: usize) -> bool {
        let n = self.size as i64;
        let (x, y) = ((i % self.size) as i64, (i / self.size) as i64);
        for yy in (y - 1).max(0)..=(y + 1).min(n - 1) {
            for xx in (x - 1).max(0)..=(x + 1).min(n - 1) {
                if self.lesion[(yy * n + xx) as usize] {
                    return true;
                }
            }
        }
        false
    }

    /// Accept `pixels` when they avoid the disc and their dilated overlap
    /// with planted lesions stays within the budget.
    fn try_claim(&mut self, pixels: &[usize]) -> bool {
        if pixels.is_empty() || pixels.iter().any(|&i| self.excluded[i]) {
            return false;
        }
        let touching = pixels.iter().filter(|&&i| self.touches(i)).count();
        if touching as f64 > self.budget * pixels.len() as f64 {
            return false;
        }
        for &i in pixels {
            self.lesion[i] = true;
        }
        true
    }
}

/// Where a lesion may be centred.
#[derive(Clone, Copy)]
enum Anchor {
    Anywhere,
    NearDisc,
    NearMacula,
}

fn lesion_color(kind: LesionKind) -> [f32; 3] {
    match kind {
        LesionKind::MA => [0.62, 0.04, 0.04],
        LesionKind::HE => [0.42, 0.05, 0.03],
        LesionKind::EX => [0.97, 0.92, 0.52],
        LesionKind::SE => [0.82, 0.80, 0.74],
        LesionKind::IRMA => [0.58, 0.10, 0.08],
        LesionKind::NV => [0.66, 0.06, 0.10],
    }
}

/// Proposed footprint of one lesion (not yet checked for overlap).
fn propose(field: &Field, rng: &mut Rng, kind: LesionKind, radius: f64, anchor: Anchor) -> Option<Vec<usize>> {
    let margin = radius + 3.0;
    let (x, y) = match anchor {
        Anchor::Anywhere => field.random_point(rng, margin),
        Anchor::NearDisc => {
            let (dx, dy, dr) = field.disc;
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = dr + 3.0 + rng.gen_range(0.0..=field.radius * 0.15);
            ((dx + d * a.cos()).round(), (dy + d * a.sin()).round())
        }
        Anchor::NearMacula => {
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let d = rng.gen_range(0.0..=field.radius * 0.35);
            ((field.cx + d * a.cos()).round(), (field.cy + d * a.sin()).round())
        }
    };
    let mut px = Vec::new();
    match kind {
        LesionKind::MA | LesionKind::SE => {
            if !field.inside(x, y, margin) {
                return None;
            }
            disk(field, x, y, radius, &mut px);
        }
        LesionKind::HE | LesionKind::EX => {
            if !field.inside(x, y, 2.0 * radius + 3.0) {
                return None;
            }
            disk(field, x, y, radius, &mut px);
            let satellites = if kind == LesionKind::HE {
                rng.gen_range(1..=3)
            } else {
                rng.gen_range(0..=2)
            };
            for _ in 0..satellites {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                let d = radius * rng.gen_range(0.4..0.9);
                let r = (radius * rng.gen_range(0.5..0.8)).max(1.0);
                disk(field, (x + d * a.cos()).round(), (y + d * a.sin()).round(), r, &mut px);
            }
        }
        LesionKind::IRMA | LesionKind::NV => {
            if !branching_curve(field, rng, x, y, radius, &mut px) {
                return None;
            }
        }
    }
    Some(dedup(px))
}

/// Paint a planted lesion into the image. SE blends softly towards its rim.
fn paint_lesion(img: &mut RgbImage, field: &Field, rng: &mut Rng, kind: LesionKind, pixels: &[usize]) {
    let jitter: f32 = rng.gen_range(0.93..1.04);
    let color = lesion_color(kind).map(|c| (c * jitter).min(1.0));
    let n = field.size;
    if kind == LesionKind::SE {
        let (mut sx, mut sy) = (0.0, 0.0);
        for &i in pixels {
            sx += (i % n) as f64;
            sy += (i / n) as f64;
        }
        let (cx, cy) = (sx / pixels.len() as f64, sy / pixels.len() as f64);
        let rmax = pixels
            .iter()
            .map(|&i| ((i % n) as f64 - cx).hypot((i / n) as f64 - cy))
            .fold(1.0, f64::max);
        for &i in pixels {
            let d = ((i % n) as f64 - cx).hypot((i / n) as f64 - cy) / rmax;
            let alpha = (1.0 - 0.45 * d * d) as f32;
            blend(img, i % n, i / n, color, alpha);
        }
    } else {
        for &i in pixels {
            img.set(i % n, i / n, color);
        }
    }
}

fn blend(img: &mut RgbImage, x: usize, y: usize, color: [f32; 3], alpha: f32) {
    let old = img.get(x, y);
    let mut new = [0.0; 3];
    for c in 0..3 {
        new[c] = old[c] * (1.0 - alpha) + color[c] * alpha;
    }
    img.set(x, y, new);
}

/// Black background, shaded orange retina, optic disc and faint vessels.
fn render_base(rng: &mut Rng, size: usize) -> (RgbImage, Field) {
    let c = (size as f64 - 1.0) / 2.0;
    let radius = 0.46 * size as f64;
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let disc_r = (0.075 * size as f64).max(2.0);
    let disc = (c + side * 0.5 * radius, c + rng.gen_range(-0.08..0.08) * radius, disc_r);
    let field = Field {
        size,
        cx: c,
        cy: c,
        radius,
        disc,
    };
    let tint: [f32; 3] = [
        rng.gen_range(0.72..0.82),
        rng.gen_range(0.33..0.40),
        rng.gen_range(0.16..0.22),
    ];
    let (f1, f2): (f64, f64) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - c, y as f64 - c);
            let d = (dx * dx + dy * dy).sqrt() / radius;
            if d > 1.0 {
                continue;
            }
            let shade = (1.0 - 0.35 * d * d) as f32;
            let wave = 0.025 * ((x as f64 * 0.09 + f1).sin() * (y as f64 * 0.07 + f2).cos()) as f32;
            img.set(x, y, tint.map(|t| (t * shade + wave).clamp(0.0, 1.0)));
        }
    }
    // faint vessels leaving the disc
    let vessel = [0.55, 0.14, 0.09];
    for v in 0..4 {
        let base = if side > 0.0 { std::f64::consts::PI } else { 0.0 };
        let angle = base + (v as f64 - 1.5) * 0.55 + rng.gen_range(-0.15..0.15);
        for (px, py) in stroke(rng, disc.0, disc.1, angle, radius * 0.9) {
            let (xi, yi) = (px.round(), py.round());
            if field.inside(xi, yi, 1.0) {
                blend(&mut img, xi as usize, yi as usize, vessel, 0.35);
            }
        }
    }
    let mut d = Vec::new();
    disk(&field, disc.0, disc.1, disc_r, &mut d);
    for i in d {
        let (x, y) = (i % size, i / size);
        let r = (x as f64 - disc.0).hypot(y as f64 - disc.1) / disc_r;
        blend(&mut img, x, y, [0.98, 0.88, 0.62], (1.0 - 0.4 * r * r) as f32);
    }
    (img, field)
}

/// Laser-mark scars: rings of pale spots with dark rims in the periphery.
fn paint_laser_marks(img: &mut RgbImage, field: &Field, rng: &mut Rng) {
    let spots = rng.gen_range(8..=14);
    let r = (field.size as f64 / 48.0).max(1.5);
    for _ in 0..spots {
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let d = field.radius * rng.gen_range(0.62..0.88);
        let (x, y) = ((field.cx + d * a.cos()).round(), (field.cy + d * a.sin()).round());
        let mut px = Vec::new();
        disk(field, x, y, r, &mut px);
        for i in px {
            let (ix, iy) = (i % field.size, i / field.size);
            let dist = (ix as f64 - x).hypot(iy as f64 - y);
            let color = if dist < 0.5 * r {
                [0.86, 0.76, 0.46]
            } else {
                [0.36, 0.24, 0.10]
            };
            img.set(ix, iy, color);
        }
    }
}

/// Proliferative membrane: translucent streaked grey-white ellipse.
/// Returns its inclusive bounding box.
fn paint_membrane(img: &mut RgbImage, field: &Field, rng: &mut Rng) -> [usize; 4] {
    let size = field.size as f64;
    let a = size * rng.gen_range(0.12..0.18);
    let b = a * rng.gen_range(0.6..0.9);
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let (dx, dy, dr) = field.disc;
    let (cx, cy) = loop {
        let (x, y) = field.random_point(rng, a + 2.0);
        if (x - dx).hypot(y - dy) > dr + a {
            break (x, y);
        }
    };
    let (st, ct) = theta.sin_cos();
    let freq = rng.gen_range(0.6..1.0);
    let mut bbox = [usize::MAX, usize::MAX, 0, 0];
    for y in 0..field.size {
        for x in 0..field.size {
            let (px, py) = (x as f64 - cx, y as f64 - cy);
            let u = px * ct + py * st;
            let v = -px * st + py * ct;
            if (u / a).powi(2) + (v / b).powi(2) > 1.0 || !field.inside(x as f64, y as f64, 0.0) {
                continue;
            }
            let streak = 0.5 + 0.5 * (u * freq).sin();
            let alpha = (0.45 + 0.25 * streak) as f32;
            blend(img, x, y, [0.86, 0.86, 0.80], alpha);
            bbox = [bbox[0].min(x), bbox[1].min(y), bbox[2].max(x), bbox[3].max(y)];
        }
    }
    bbox
}

fn add_noise(img: &mut RgbImage, field: &Field, rng: &mut Rng, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    for y in 0..field.size {
        for x in 0..field.size {
            if !field.inside(x as f64, y as f64, 0.0) {
                continue;
            }
            let p = img.get(x, y);
            let q = p.map(|v| (v + normal.sample(rng) as f32).clamp(0.0, 1.0));
            img.set(x, y, q);
        }
    }
}

/// Plant `count` lesions of `kind` and return how many were planted (always
/// `count`, or an overflow error).
#[allow(clippy::too_many_arguments)]
fn plant(
    id: &str,
    img: &mut RgbImage,
    mask: &mut Mask,
    occ: &mut Occupancy,
    field: &Field,
    rng: &mut Rng,
    kind: LesionKind,
    count: usize,
    density: &LesionDensity,
    anchor: Anchor,
    max_attempts: usize,
) -> Result<(), DataError> {
    for index in 0..count {
        let mut placed = false;
        for _ in 0..max_attempts {
            let radius = density.sample_radius(rng);
            let Some(px) = propose(field, rng, kind, radius, anchor) else {
                continue;
            };
            if occ.try_claim(&px) {
                paint_lesion(img, field, rng, kind, &px);
                for &i in &px {
                    mask.data[i] = true;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(DataError::LesionOverflow {
                id: id.to_string(),
                kind: kind.name().to_string(),
                index,
            });
        }
    }
    Ok(())
}

fn empty_masks(size: usize) -> BTreeMap<LesionKind, Mask> {
    LesionKind::ALL.iter().map(|&k| (k, Mask::new(size, size))).collect()
}

/// Lesion counts for image `i` under `spec`.
fn draw_counts(spec: &PhantomSpec, i: usize, rng: &mut Rng) -> [usize; 6] {
    let mut counts = [0usize; 6];
    match spec.grade_mode {
        GradeMode::FromCounts => {
            for kind in LesionKind::ALL {
                if let Some(d) = spec.density(kind) {
                    counts[kind.index()] = rng.gen_range(d.min_count..=d.max_count);
                }
            }
        }
        GradeMode::Balanced => {
            let enabled = |k: LesionKind| spec.density(k).is_some_and(|d| d.max_count > 0);
            let blobs: Vec<LesionKind> = BLOB_KINDS.into_iter().filter(|&k| enabled(k)).collect();
            let target = (i % 5) as u8;
            let (total, curve) = match target {
                0 => (0, None),
                1 => (rng.gen_range(1..GRADE2_MIN_TOTAL), None),
                2 => (rng.gen_range(GRADE2_MIN_TOTAL..GRADE3_MIN_TOTAL), None),
                3 if enabled(LesionKind::IRMA) && rng.gen_bool(0.5) => {
                    (rng.gen_range(0..GRADE3_MIN_TOTAL - 1), Some(LesionKind::IRMA))
                }
                3 => (rng.gen_range(GRADE3_MIN_TOTAL..=GRADE3_MIN_TOTAL + 4), None),
                _ => (rng.gen_range(0..GRADE3_MIN_TOTAL - 1), Some(LesionKind::NV)),
            };
            for _ in 0..total {
                counts[blobs[rng.gen_range(0..blobs.len())].index()] += 1;
            }
            if let Some(k) = curve {
                counts[k.index()] = 1;
            }
            debug_assert_eq!(grade_from_counts(&counts), target);
        }
    }
    counts
}

/// Generate the phantom dataset described by `spec` and the log of what
/// was planted. Pure function of `spec`.
pub fn synthesize_phantom(spec: &PhantomSpec) -> Result<(Dataset, PlantingLog), DataError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.num_images);
    let mut log = PlantingLog::default();
    for i in 0..spec.num_images {
        let id = format!("{}{i:04}", spec.id_prefix);
        let mut rng = indexed(spec.seed, "phantom", i as u64);
        let counts = draw_counts(spec, i, &mut rng);
        let (mut img, field) = render_base(&mut rng, spec.image_size);
        let lm = spec.lm_probability > 0.0 && rng.gen_bool(spec.lm_probability);
        let pm = spec.pm_probability > 0.0 && rng.gen_bool(spec.pm_probability);
        if lm {
            paint_laser_marks(&mut img, &field, &mut rng);
        }
        let pm_region = pm.then(|| paint_membrane(&mut img, &field, &mut rng));
        let mut masks = empty_masks(spec.image_size);
        let mut occ = Occupancy::new(&field, spec.overlap_budget);
        // curves first: they are the hardest to fit
        for kind in [
            LesionKind::NV,
            LesionKind::IRMA,
            LesionKind::SE,
            LesionKind::HE,
            LesionKind::EX,
            LesionKind::MA,
        ] {
            let count = counts[kind.index()];
            if count == 0 {
                continue;
            }
            let density = spec.density(kind).expect("counts only drawn for specified kinds");
            let anchor = if kind == LesionKind::NV {
                Anchor::NearDisc
            } else {
                Anchor::Anywhere
            };
            let mask = masks.get_mut(&kind).expect("all kinds present");
            plant(
                &id,
                &mut img,
                mask,
                &mut occ,
                &field,
                &mut rng,
                kind,
                count,
                density,
                anchor,
                spec.max_attempts,
            )?;
        }
        add_noise(&mut img, &field, &mut rng, spec.noise_sigma);
        img.quantize();
        let grade = grade_from_counts(&counts);
        log.records.push(PlantingRecord {
            id: id.clone(),
            counts,
            grade: Some(grade),
            lm,
            pm,
            pm_region,
            diseases: None,
        });
        samples.push(FundusSample {
            id,
            image: img,
            lesion_masks: Some(masks),
            lesion_flags: Some(LesionFlags { lm, pm }),
            grade: Some(grade),
            disease_labels: None,
        });
    }
    let dataset = Dataset {
        name: format!("phantom-{}", spec.seed),
        kind: DatasetKind::Phantom,
        samples,
    };
    Ok((dataset, log))
}

// ---------------------------------------------------------------------------
// Multi-disease target domain

fn default_prevalence() -> f64 {
    0.3
}
fn default_cast() -> [f32; 3] {
    [0.06, -0.03, 0.07]
}
fn default_target_noise() -> f64 {
    0.03
}
fn default_lesion_scale() -> f64 {
    1.0
}

/// Target-domain phantom: each image carries a multi-hot disease vector and
/// each disease paints a characteristic composite.
///
/// | disease      | appearance                                  |
/// |--------------|---------------------------------------------|
/// | normal       | set when no other disease is present         |
/// | diabetes     | MA dots, HE blobs and EX deposits            |
/// | glaucoma     | enlarged pale cup in the optic disc          |
/// | cataract     | global haze                                  |
/// | AMD          | NV curves and HE blobs near the macula       |
/// | hypertension | EX deposits and HE blobs                     |
/// | myopia       | pale crescent beside the disc, tessellation  |
/// | other        | SE patches and IRMA curves                   |
///
/// All images then receive a colour cast and stronger noise than the
/// source phantoms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseasePhantomSpec {
    pub num_images: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Independent probability of each non-normal disease.
    #[serde(default = "default_prevalence")]
    pub prevalence: f64,
    #[serde(default = "default_cast")]
    pub color_cast: [f32; 3],
    #[serde(default = "default_target_noise")]
    pub noise_sigma: f64,
    /// Multiplier on the lesion sizes (tuned at 128 px).
    #[serde(default = "default_lesion_scale")]
    pub lesion_scale: f64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: usize,
    #[serde(default = "default_target_prefix")]
    pub id_prefix: String,
}

fn default_target_prefix() -> String {
    "md".into()
}

impl DiseasePhantomSpec {
    pub fn new(num_images: usize, image_size: usize, seed: u64) -> Self {
        Self {
            num_images,
            image_size,
            seed,
            prevalence: default_prevalence(),
            color_cast: default_cast(),
            noise_sigma: default_target_noise(),
            lesion_scale: image_size as f64 / 128.0,
            max_attempts: default_max_attempts(),
            id_prefix: default_target_prefix(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_images == 0 || self.image_size < 16 {
            return Err(DataError::InvalidSpec(
                "need num_images >= 1 and image_size >= 16".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.prevalence) {
            return Err(DataError::InvalidSpec(format!(
                "prevalence {} outside [0, 1]",
                self.prevalence
            )));
        }
        if !(self.lesion_scale > 0.0 && self.noise_sigma >= 0.0 && self.max_attempts > 0) {
            return Err(DataError::InvalidSpec(
                "lesion_scale must be positive, noise_sigma >= 0, max_attempts >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Indices into the disease vector.
mod disease {
    pub const NORMAL: usize = 0;
    pub const DIABETES: usize = 1;
    pub const GLAUCOMA: usize = 2;
    pub const CATARACT: usize = 3;
    pub const AMD: usize = 4;
    pub const HYPERTENSION: usize = 5;
    pub const MYOPIA: usize = 6;
    pub const OTHER: usize = 7;
}

/// `(kind, min, max, radius range at 128 px, anchor)` planted per disease.
fn composite(d: usize) -> &'static [(LesionKind, usize, usize, f64, f64, bool)] {
    use LesionKind::*;
    match d {
        disease::DIABETES => &[
            (MA, 3, 5, 2.0, 3.0, false),
            (HE, 1, 2, 3.0, 4.5, false),
            (EX, 1, 2, 3.0, 4.5, false),
        ],
        disease::AMD => &[(NV, 1, 1, 8.0, 11.0, true), (HE, 1, 2, 3.5, 5.0, true)],
        disease::HYPERTENSION => &[(EX, 2, 3, 3.0, 5.0, false), (HE, 1, 2, 3.0, 4.5, false)],
        disease::OTHER => &[(SE, 1, 2, 4.0, 6.0, false), (IRMA, 1, 1, 6.0, 9.0, false)],
        _ => &[],
    }
}

fn paint_cup(img: &mut RgbImage, field: &Field) {
    let (dx, dy, dr) = field.disc;
    let mut px = Vec::new();
    disk(field, dx, dy, dr * 0.75, &mut px);
    for i in px {
        blend(img, i % field.size, i / field.size, [1.0, 0.97, 0.88], 0.8);
    }
}

fn paint_myopia(img: &mut RgbImage, field: &Field, rng: &mut Rng) {
    let (dx, dy, dr) = field.disc;
    let toward_center = if field.cx > dx { 1.0 } else { -1.0 };
    let (cx, cy) = (dx + toward_center * dr * 0.6, dy);
    let mut px = Vec::new();
    disk(field, cx, cy, dr * 1.5, &mut px);
    for i in px {
        let (x, y) = (i % field.size, i / field.size);
        if (x as f64 - dx).hypot(y as f64 - dy) > dr {
            blend(img, x, y, [0.93, 0.82, 0.66], 0.7);
        }
    }
    let phase: f64 = rng.gen_range(0.0..6.3);
    for y in 0..field.size {
        for x in 0..field.size {
            if field.inside(x as f64, y as f64, 1.0) {
                let t = ((x as f64 + y as f64) * 0.5 + phase).sin();
                if t > 0.6 {
                    blend(img, x, y, [0.45, 0.18, 0.10], 0.25);
                }
            }
        }
    }
}

fn apply_haze(img: &mut RgbImage, field: &Field) {
    for y in 0..field.size {
        for x in 0..field.size {
            if field.inside(x as f64, y as f64, 0.0) {
                blend(img, x, y, [0.72, 0.68, 0.62], 0.35);
            }
        }
    }
}

/// Generate the multi-disease target phantom. Lesions are logged but not
/// exposed as masks: the dataset carries disease labels only.
pub fn synthesize_multidisease(spec: &DiseasePhantomSpec) -> Result<(Dataset, PlantingLog), DataError> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.num_images);
    let mut log = PlantingLog::default();
    for i in 0..spec.num_images {
        let id = format!("{}{i:04}", spec.id_prefix);
        let mut rng = indexed(spec.seed, "multidisease", i as u64);
        let mut labels = [false; NUM_DISEASES];
        for slot in labels.iter_mut().skip(1) {
            *slot = rng.gen_bool(spec.prevalence);
        }
        labels[disease::NORMAL] = !labels.iter().any(|&b| b);
        let (mut img, field) = render_base(&mut rng, spec.image_size);
        if labels[disease::GLAUCOMA] {
            paint_cup(&mut img, &field);
        }
        if labels[disease::MYOPIA] {
            paint_myopia(&mut img, &field, &mut rng);
        }
        let mut occ = Occupancy::new(&field, 0.0);
        let mut masks = empty_masks(spec.image_size);
        let mut counts = [0usize; 6];
        for d in [disease::AMD, disease::OTHER, disease::DIABETES, disease::HYPERTENSION] {
            if !labels[d] {
                continue;
            }
            for &(kind, lo, hi, r0, r1, near) in composite(d) {
                let count = rng.gen_range(lo..=hi);
                let density = LesionDensity::new(
                    count,
                    count,
                    (r0 * spec.lesion_scale).max(1.0),
                    (r1 * spec.lesion_scale).max(1.0),
                );
                let anchor = match (kind, near) {
                    (LesionKind::NV, _) => Anchor::NearDisc,
                    (_, true) => Anchor::NearMacula,
                    _ => Anchor::Anywhere,
                };
                let mask = masks.get_mut(&kind).expect("all kinds present");
                plant(
                    &id,
                    &mut img,
                    mask,
                    &mut occ,
                    &field,
                    &mut rng,
                    kind,
                    count,
                    &density,
                    anchor,
                    spec.max_attempts,
                )?;
                counts[kind.index()] += count;
            }
        }
        if labels[disease::CATARACT] {
            apply_haze(&mut img, &field);
        }
        for y in 0..field.size {
            for x in 0..field.size {
                if field.inside(x as f64, y as f64, 0.0) {
                    let p = img.get(x, y);
                    let mut q = [0.0; 3];
                    for c in 0..3 {
                        q[c] = (p[c] + spec.color_cast[c]).clamp(0.0, 1.0);
                    }
                    img.set(x, y, q);
                }
            }
        }
        add_noise(&mut img, &field, &mut rng, spec.noise_sigma);
        img.quantize();
        log.records.push(PlantingRecord {
            id: id.clone(),
            counts,
            grade: None,
            lm: false,
            pm: false,
            pm_region: None,
            diseases: Some(labels),
        });
        samples.push(FundusSample {
            id,
            image: img,
            lesion_masks: None,
            lesion_flags: None,
            grade: None,
            disease_labels: Some(labels),
        });
    }
    let dataset = Dataset {
        name: format!("multidisease-{}", spec.seed),
        kind: DatasetKind::MultiDisease,
        samples,
    };
    Ok((dataset, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::compute_statistics;

    /// 4-connected component count by flood fill.
    fn components(m: &Mask) -> usize {
        let mut seen = vec![false; m.data.len()];
        let mut count = 0;
        for start in 0..m.data.len() {
            if !m.data[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(i) = stack.pop() {
                let (x, y) = (i % m.width, i / m.width);
                let mut nb = Vec::new();
                if x > 0 {
                    nb.push(i - 1);
                }
                if x + 1 < m.width {
                    nb.push(i + 1);
                }
                if y > 0 {
                    nb.push(i - m.width);
                }
                if y + 1 < m.height {
                    nb.push(i + m.width);
                }
                for j in nb {
                    if m.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        count
    }

    #[test]
    fn zero_density_gives_empty_masks_and_grade_zero() {
        let spec = PhantomSpec::empty(3, 32, 1).with(LesionKind::MA, LesionDensity::fixed(0, 2.0));
        let (ds, log) = synthesize_phantom(&spec).unwrap();
        assert_eq!(ds.len(), 3);
        for s in &ds.samples {
            assert_eq!(s.grade, Some(0));
            assert!(s.lesion_masks.as_ref().unwrap().values().all(|m| !m.any()));
        }
        assert!(log.records.iter().all(|r| r.counts == [0; 6]));
    }

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::standard(4, 64, 11);
        let a = synthesize_phantom(&spec).unwrap();
        let b = synthesize_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let other = synthesize_phantom(&PhantomSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn five_ma_dots() {
        let spec = PhantomSpec::empty(1, 128, 5).with(LesionKind::MA, LesionDensity::fixed(5, 2.0));
        let (ds, _) = synthesize_phantom(&spec).unwrap();
        let m = ds.samples[0].mask(LesionKind::MA);
        let area = m.count() as f64;
        let pi = std::f64::consts::PI;
        assert!(area >= 5.0 * pi * 1.5 * 1.5 && area <= 5.0 * pi * 2.5 * 2.5, "{area}");
        assert_eq!(components(&m), 5);
    }

    #[test]
    fn statistics_match_log() {
        let spec = PhantomSpec::standard(10, 64, 3);
        let (ds, log) = synthesize_phantom(&spec).unwrap();
        assert_eq!(compute_statistics(&ds).unwrap(), log.statistics().unwrap());
        for (s, r) in ds.samples.iter().zip(&log.records) {
            for k in LesionKind::ALL {
                assert_eq!(s.mask(k).any(), r.counts[k.index()] > 0);
            }
        }
    }

    #[test]
    fn balanced_grades_cycle() {
        let mut spec = PhantomSpec::standard(10, 64, 2);
        spec.grade_mode = GradeMode::Balanced;
        let (ds, _) = synthesize_phantom(&spec).unwrap();
        let grades: Vec<u8> = ds.samples.iter().map(|s| s.grade.unwrap()).collect();
        assert_eq!(grades, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
    }

    #[test]
    fn grade_rule_table() {
        let mut c = [0usize; 6];
        assert_eq!(grade_from_counts(&c), 0);
        c[LesionKind::MA.index()] = 4;
        assert_eq!(grade_from_counts(&c), 1);
        c[LesionKind::EX.index()] = 1;
        assert_eq!(grade_from_counts(&c), 2);
        c[LesionKind::HE.index()] = 7;
        assert_eq!(grade_from_counts(&c), 3);
        let mut irma = [0usize; 6];
        irma[LesionKind::IRMA.index()] = 1;
        assert_eq!(grade_from_counts(&irma), 3);
        c[LesionKind::NV.index()] = 1;
        assert_eq!(grade_from_counts(&c), 4);
    }

    #[test]
    fn overflow_is_reported() {
        let spec = PhantomSpec {
            max_attempts: 20,
            ..PhantomSpec::empty(1, 32, 0).with(LesionKind::EX, LesionDensity::fixed(60, 5.0))
        };
        assert!(matches!(
            synthesize_phantom(&spec),
            Err(DataError::LesionOverflow { .. })
        ));
    }

    #[test]
    fn invalid_specs() {
        let bad = PhantomSpec::empty(1, 64, 0).with(LesionKind::MA, LesionDensity::new(3, 2, 1.0, 2.0));
        assert!(matches!(synthesize_phantom(&bad), Err(DataError::InvalidSpec(_))));
        let bad = PhantomSpec::empty(1, 64, 0).with(LesionKind::MA, LesionDensity::new(0, 2, 0.5, 2.0));
        assert!(synthesize_phantom(&bad).is_err());
    }

    #[test]
    fn membrane_and_marks_are_logged() {
        let mut spec = PhantomSpec::empty(4, 64, 9);
        spec.pm_probability = 1.0;
        spec.lm_probability = 1.0;
        let (ds, log) = synthesize_phantom(&spec).unwrap();
        for (s, r) in ds.samples.iter().zip(&log.records) {
            assert_eq!(s.lesion_flags, Some(LesionFlags { lm: true, pm: true }));
            let b = r.pm_region.unwrap();
            assert!(b[0] <= b[2] && b[1] <= b[3] && b[2] < 64 && b[3] < 64);
        }
    }

    #[test]
    fn log_round_trip() {
        let (_, log) = synthesize_phantom(&PhantomSpec {
            pm_probability: 0.5,
            ..PhantomSpec::standard(6, 64, 4)
        })
        .unwrap();
        assert_eq!(PlantingLog::from_tsv(&log.to_tsv()).unwrap(), log);
        let (_, md) = synthesize_multidisease(&DiseasePhantomSpec::new(5, 64, 1)).unwrap();
        assert_eq!(PlantingLog::from_tsv(&md.to_tsv()).unwrap(), md);
    }

    #[test]
    fn multidisease_labels() {
        let spec = DiseasePhantomSpec::new(20, 64, 7);
        let (ds, log) = synthesize_multidisease(&spec).unwrap();
        ds.validate().unwrap();
        for (s, r) in ds.samples.iter().zip(&log.records) {
            let l = s.disease_labels.unwrap();
            assert!(l.iter().any(|&b| b));
            assert_eq!(l[0], !l[1..].iter().any(|&b| b));
            assert_eq!(r.counts[LesionKind::NV.index()] > 0, l[disease::AMD]);
        }
    }

    #[test]
    fn spec_deserializes_from_toml() {
        let text = r#"
            num_images = 2
            image_size = 32
            seed = 4
            grade_mode = "balanced"
            [densities.MA]
            min_count = 1
            max_count = 2
            min_radius = 1.0
            max_radius = 2.0
        "#;
        let spec: PhantomSpec = toml::from_str(text).unwrap();
        assert_eq!(spec.densities[&LesionKind::MA].max_count, 2);
        assert_eq!(spec.grade_mode, GradeMode::Balanced);
        assert_eq!(spec.max_attempts, 200);
    }
}
