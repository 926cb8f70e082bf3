//! Synthetic image-text pairs with the four-way manipulation label schema,
//! plus the JSON-lines dataset format.
//!
//! Images are pre-patchified feature grids. Every pair draws a latent topic
//! shared by its patches and tokens. Face swap (FS) adds a strong offset along
//! a fixed signature direction inside the forged box; face attribute (FA) adds
//! a weaker offset along another direction plus a multiplicative pattern. Text
//! swap (TS) replaces a span with common words of another topic; text
//! attribute (TA) replaces a span with the topic's own attribute words, which
//! genuine text never uses.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Array;

pub const SCHEMA_VERSION: u32 = 1;

/// Fraction of each pair class. The defaults follow the reference corpus
/// counts: 77,426 genuine of 230,000 pairs, 123,133 fake images, 62,134 fake
/// texts and 32,693 pairs with both forged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMix {
    pub genuine: f64,
    pub image_only: f64,
    pub text_only: f64,
    pub mixed: f64,
}

impl Default for ClassMix {
    fn default() -> Self {
        const TOTAL: f64 = 230_000.0;
        Self {
            genuine: 77_426.0 / TOTAL,
            image_only: (123_133.0 - 32_693.0) / TOTAL,
            text_only: (62_134.0 - 32_693.0) / TOTAL,
            mixed: 32_693.0 / TOTAL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_samples: usize,
    /// patches per side (G)
    pub grid: usize,
    /// tokens per text (L)
    pub seq_len: usize,
    /// raw feature width of a patch
    pub patch_dim: usize,
    /// vocabulary size (W); split evenly into topics
    pub vocab: usize,
    pub topics: usize,
    pub mix: ClassMix,
    /// P(FS | fake image)
    pub fs_ratio: f64,
    /// P(TS | fake text)
    pub ts_ratio: f64,
    /// forgery signature strength
    pub signal: f64,
    /// forged box side range, in patch units
    pub box_min: f64,
    pub box_max: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            grid: 8,
            seq_len: 16,
            patch_dim: 8,
            vocab: 64,
            topics: 4,
            mix: ClassMix::default(),
            fs_ratio: 0.54,
            ts_ratio: 0.70,
            signal: 1.0,
            box_min: 2.0,
            box_max: 5.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.mix;
        let parts = [m.genuine, m.image_only, m.text_only, m.mixed];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config(format!(
                "class mix entries must be in [0, 1]: {m:?}"
            )));
        }
        let total: f64 = parts.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class mix sums to {total}, not 1")));
        }
        for (name, r) in [("fs_ratio", self.fs_ratio), ("ts_ratio", self.ts_ratio)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0, 1), got {r}")));
            }
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return Err(Error::Config(format!(
                "signal must be positive, got {}",
                self.signal
            )));
        }
        if self.grid == 0 || self.seq_len < 4 || self.patch_dim < 4 {
            return Err(Error::Config(
                "need grid >= 1, seq_len >= 4 and patch_dim >= 4".into(),
            ));
        }
        if self.topics < 2
            || !self.vocab.is_multiple_of(self.topics)
            || self.vocab / self.topics < 4
        {
            return Err(Error::Config(format!(
                "vocab {} must split into {} topics of at least 4 words",
                self.vocab, self.topics
            )));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max && self.box_min <= self.grid as f64)
        {
            return Err(Error::Config(format!(
                "forged box range [{}, {}] cannot fit a {}x{} grid",
                self.box_min, self.box_max, self.grid, self.grid
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    fn words_per_topic(&self) -> usize {
        self.vocab / self.topics
    }

    /// Words `[0, common)` of a topic appear in genuine text; the rest are
    /// attribute words used only by TA edits.
    fn common_words(&self) -> usize {
        let w = self.words_per_topic();
        w - (w / 4).max(1)
    }
}

/// Axis-aligned box `(x0, y0, x1, y1)` in patch-grid units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox(pub [f64; 4]);

impl BBox {
    pub fn x0(&self) -> f64 {
        self.0[0]
    }
    pub fn y0(&self) -> f64 {
        self.0[1]
    }
    pub fn x1(&self) -> f64 {
        self.0[2]
    }
    pub fn y1(&self) -> f64 {
        self.0[3]
    }
    pub fn area(&self) -> f64 {
        (self.x1() - self.x0()).max(0.0) * (self.y1() - self.y0()).max(0.0)
    }

    /// The unit cell of patch `index` in a `grid`-wide raster.
    pub fn cell(index: usize, grid: usize) -> BBox {
        let (r, c) = ((index / grid) as f64, (index % grid) as f64);
        BBox([c, r, c + 1.0, r + 1.0])
    }
}

/// Area of `bbox ∩ cell`; zero when disjoint.
pub fn patch_intersection_area(bbox: &BBox, cell: &BBox) -> f64 {
    let w = bbox.x1().min(cell.x1()) - bbox.x0().max(cell.x0());
    let h = bbox.y1().min(cell.y1()) - bbox.y0().max(cell.y0());
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Per-pair labels. Flags are stored as 0/1 integers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSet {
    pub y_v_bin: u8,
    pub y_t_bin: u8,
    /// `[FS, FA, TS, TA]`
    pub y_multi: [u8; 4],
    pub bbox: Option<BBox>,
    pub y_pat: Vec<u8>,
    pub y_tok: Vec<u8>,
    /// 1 = FS, 0 = FA
    pub y_v_m: Option<u8>,
    /// 1 = TS, 0 = TA
    pub y_t_m: Option<u8>,
}

impl LabelSet {
    pub fn image_fake(&self) -> bool {
        self.y_v_bin == 1
    }

    pub fn text_fake(&self) -> bool {
        self.y_t_bin == 1
    }

    /// Pair-level label: fake when either modality is.
    pub fn pair_fake(&self) -> bool {
        self.image_fake() || self.text_fake()
    }

    /// Check every label-schema invariant against a `grid`×`grid`, `seq_len` layout.
    pub fn validate(&self, grid: usize, seq_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::LabelInvariant(m));
        let binary = |v: u8| v <= 1;
        if !binary(self.y_v_bin) || !binary(self.y_t_bin) {
            return bad("binary labels must be 0 or 1".into());
        }
        if !self.y_multi.iter().all(|&v| binary(v))
            || !self.y_pat.iter().all(|&v| binary(v))
            || !self.y_tok.iter().all(|&v| binary(v))
        {
            return bad("multi-label, patch and token flags must be 0 or 1".into());
        }
        if self.y_pat.len() != grid * grid {
            return bad(format!(
                "y_pat has {} entries, expected {}",
                self.y_pat.len(),
                grid * grid
            ));
        }
        if self.y_tok.len() != seq_len {
            return bad(format!(
                "y_tok has {} entries, expected {seq_len}",
                self.y_tok.len()
            ));
        }
        let [fs, fa, ts, ta] = self.y_multi;
        let fake_img = self.y_v_bin == 1;
        if fake_img != self.bbox.is_some() {
            return bad(format!(
                "y_v_bin={} but bbox present={}",
                self.y_v_bin,
                self.bbox.is_some()
            ));
        }
        if fake_img != self.y_pat.contains(&1) {
            return bad(format!("y_v_bin={} disagrees with y_pat", self.y_v_bin));
        }
        if fake_img != (fs + fa == 1) || fs + fa > 1 {
            return bad(format!(
                "y_v_bin={} needs exactly one of FS/FA set",
                self.y_v_bin
            ));
        }
        if fake_img != self.y_v_m.is_some() {
            return bad(format!(
                "y_v_bin={} but y_v_m present={}",
                self.y_v_bin,
                self.y_v_m.is_some()
            ));
        }
        if let Some(m) = self.y_v_m {
            if m > 1 || m != fs {
                return bad(format!("y_v_m={m} disagrees with FS flag {fs}"));
            }
        }
        let fake_txt = self.y_t_bin == 1;
        if fake_txt != self.y_tok.contains(&1) {
            return bad(format!("y_t_bin={} disagrees with y_tok", self.y_t_bin));
        }
        if fake_txt != (ts + ta == 1) || ts + ta > 1 {
            return bad(format!(
                "y_t_bin={} needs exactly one of TS/TA set",
                self.y_t_bin
            ));
        }
        if fake_txt != self.y_t_m.is_some() {
            return bad(format!(
                "y_t_bin={} but y_t_m present={}",
                self.y_t_bin,
                self.y_t_m.is_some()
            ));
        }
        if let Some(m) = self.y_t_m {
            if m > 1 || m != ts {
                return bad(format!("y_t_m={m} disagrees with TS flag {ts}"));
            }
        }
        if let Some(b) = &self.bbox {
            if !(b.x1() > b.x0() && b.y1() > b.y0()) || b.0.iter().any(|v| !v.is_finite()) {
                return bad(format!("degenerate bbox {:?}", b.0));
            }
            for (i, &flag) in self.y_pat.iter().enumerate() {
                let hit = patch_intersection_area(b, &BBox::cell(i, grid)) > 0.0;
                if hit != (flag == 1) {
                    return bad(format!("patch {i} flag {flag} disagrees with bbox overlap"));
                }
            }
        }
        Ok(())
    }
}

/// One synthetic image-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[G², patch_dim]`, row-major over the grid
    pub patches: Array,
    pub tokens: Vec<usize>,
    pub labels: LabelSet,
    pub seed: u64,
}

impl Sample {
    pub fn validate(&self, cfg: &DatasetConfig) -> Result<()> {
        if self.patches.shape() != [cfg.num_patches(), cfg.patch_dim] {
            return Err(Error::shape(
                "sample patches",
                self.patches.shape(),
                &[cfg.num_patches(), cfg.patch_dim],
            ));
        }
        if !self.patches.is_finite() {
            return Err(Error::NonFinite("sample patches".into()));
        }
        if self.tokens.len() != cfg.seq_len || self.tokens.iter().any(|&t| t >= cfg.vocab) {
            return Err(Error::invalid("token sequence length or id out of range"));
        }
        self.labels.validate(cfg.grid, cfg.seq_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairClass {
    Genuine,
    ImageOnly,
    TextOnly,
    Mixed,
}

/// Fixed signature directions, independent of any dataset seed so train and
/// eval corpora share them.
struct Signatures {
    fs: Vec<f64>,
    fa: Vec<f64>,
    fa_mult: Vec<f64>,
    topics: Vec<Vec<f64>>,
}

impl Signatures {
    fn new(dim: usize, topics: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5167_4e41_7475_7265);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut basis: Vec<Vec<f64>> = Vec::new();
        // Gram-Schmidt so forgery directions are orthogonal to topic content
        // wherever the dimension allows.
        let want = 2 + topics;
        while basis.len() < want {
            let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            if basis.len() < dim {
                for b in &basis {
                    let p: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                    v.iter_mut().zip(b).for_each(|(a, c)| *a -= p * c);
                }
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        let fa_mult = (0..dim)
            .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Self {
            fs: basis[0].clone(),
            fa: basis[1].clone(),
            fa_mult,
            topics: basis[2..].to_vec(),
        }
    }
}

const PATCH_NOISE: f64 = 0.35;
const TOPIC_SCALE: f64 = 0.8;
const FS_STRENGTH: f64 = 2.0;
const FA_STRENGTH: f64 = 1.6;
const FA_MULT: f64 = 0.3;

fn record_seed(master: u64, index: usize) -> u64 {
    // splitmix64 over (master, index)
    let mut z = master ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn draw_class<R: Rng>(mix: &ClassMix, rng: &mut R) -> PairClass {
    let u: f64 = rng.random();
    if u < mix.genuine {
        PairClass::Genuine
    } else if u < mix.genuine + mix.image_only {
        PairClass::ImageOnly
    } else if u < mix.genuine + mix.image_only + mix.text_only {
        PairClass::TextOnly
    } else {
        PairClass::Mixed
    }
}

/// Deterministic sample `index` of the corpus described by `cfg`.
pub fn generate_sample(cfg: &DatasetConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    if index >= cfg.num_samples {
        return Err(Error::invalid(format!(
            "sample index {index} out of range for {} samples",
            cfg.num_samples
        )));
    }
    let sigs = Signatures::new(cfg.patch_dim, cfg.topics);
    generate_with(cfg, &sigs, index)
}

fn generate_with(cfg: &DatasetConfig, sigs: &Signatures, index: usize) -> Result<Sample> {
    let seed = record_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = draw_class(&cfg.mix, &mut rng);
    let image_fake = matches!(class, PairClass::ImageOnly | PairClass::Mixed);
    let text_fake = matches!(class, PairClass::TextOnly | PairClass::Mixed);
    let topic = rng.random_range(0..cfg.topics);

    let (g, p, d) = (cfg.grid, cfg.num_patches(), cfg.patch_dim);
    let noise = Normal::new(0.0, PATCH_NOISE).unwrap();
    let mut patches = vec![0.0; p * d];
    for i in 0..p {
        for k in 0..d {
            patches[i * d + k] = TOPIC_SCALE * sigs.topics[topic][k] + noise.sample(&mut rng);
        }
    }

    let mut y_pat = vec![0u8; p];
    let mut bbox = None;
    let mut y_v_m = None;
    if image_fake {
        let w = rng.random_range(cfg.box_min..=cfg.box_max.min(g as f64));
        let h = rng.random_range(cfg.box_min..=cfg.box_max.min(g as f64));
        let x0 = rng.random_range(0.0..=(g as f64 - w));
        let y0 = rng.random_range(0.0..=(g as f64 - h));
        let b = BBox([x0, y0, x0 + w, y0 + h]);
        let face_swap = rng.random_bool(cfg.fs_ratio);
        for (i, flag) in y_pat.iter_mut().enumerate() {
            let ratio = patch_intersection_area(&b, &BBox::cell(i, g));
            if ratio <= 0.0 {
                continue;
            }
            *flag = 1;
            let amp = cfg.signal * (0.5 + 0.5 * ratio);
            let row = &mut patches[i * d..(i + 1) * d];
            if face_swap {
                for (x, s) in row.iter_mut().zip(&sigs.fs) {
                    *x += FS_STRENGTH * amp * s;
                }
            } else {
                for ((x, m), a) in row.iter_mut().zip(&sigs.fa_mult).zip(&sigs.fa) {
                    *x = *x * (1.0 + FA_MULT * cfg.signal * ratio * m) + FA_STRENGTH * amp * a;
                }
            }
        }
        bbox = Some(b);
        y_v_m = Some(face_swap as u8);
    }

    let per_topic = cfg.words_per_topic();
    let common = cfg.common_words();
    let mut tokens: Vec<usize> = (0..cfg.seq_len)
        .map(|_| topic * per_topic + rng.random_range(0..common))
        .collect();
    let mut y_tok = vec![0u8; cfg.seq_len];
    let mut y_t_m = None;
    if text_fake {
        let text_swap = rng.random_bool(cfg.ts_ratio);
        let max_span = (cfg.seq_len / 4).max(2);
        let span = rng.random_range(2..=max_span);
        let start = rng.random_range(0..=cfg.seq_len - span);
        let other = (topic + rng.random_range(1..cfg.topics)) % cfg.topics;
        for j in start..start + span {
            tokens[j] = if text_swap {
                other * per_topic + rng.random_range(0..common)
            } else {
                topic * per_topic + rng.random_range(common..per_topic)
            };
            y_tok[j] = 1;
        }
        y_t_m = Some(text_swap as u8);
    }

    let fs = y_v_m == Some(1);
    let fa = y_v_m == Some(0);
    let ts = y_t_m == Some(1);
    let ta = y_t_m == Some(0);
    let labels = LabelSet {
        y_v_bin: image_fake as u8,
        y_t_bin: text_fake as u8,
        y_multi: [fs as u8, fa as u8, ts as u8, ta as u8],
        bbox,
        y_pat,
        y_tok,
        y_v_m,
        y_t_m,
    };
    Ok(Sample {
        patches: Array::new(vec![p, d], patches)?,
        tokens,
        labels,
        seed,
    })
}

/// All samples of the corpus, in index order.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let sigs = Signatures::new(cfg.patch_dim, cfg.topics);
    (0..cfg.num_samples)
        .map(|i| generate_with(cfg, &sigs, i))
        .collect()
}

/// A loaded corpus: its generating config and samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn generate(config: DatasetConfig) -> Result<Self> {
        let samples = generate_dataset(&config)?;
        Ok(Self { config, samples })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema_version: u32,
    config: DatasetConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    seed: u64,
    /// `[G][G][patch_dim]`
    patch_grid: Vec<Vec<Vec<f64>>>,
    tokens: Vec<usize>,
    labels: LabelSet,
}

impl SampleRecord {
    fn from_sample(s: &Sample, grid: usize) -> Self {
        let patch_grid = (0..grid)
            .map(|r| {
                (0..grid)
                    .map(|c| s.patches.row_slice(r * grid + c).to_vec())
                    .collect()
            })
            .collect();
        Self {
            seed: s.seed,
            patch_grid,
            tokens: s.tokens.clone(),
            labels: s.labels.clone(),
        }
    }

    fn into_sample(self, cfg: &DatasetConfig) -> Result<Sample> {
        let (g, d) = (cfg.grid, cfg.patch_dim);
        if self.patch_grid.len() != g || self.patch_grid.iter().any(|r| r.len() != g) {
            return Err(Error::invalid(format!("patch_grid must be {g}x{g}")));
        }
        let mut data = Vec::with_capacity(g * g * d);
        for cell in self.patch_grid.iter().flatten() {
            if cell.len() != d {
                return Err(Error::invalid(format!(
                    "patch has {} values, expected {d}",
                    cell.len()
                )));
            }
            data.extend_from_slice(cell);
        }
        let sample = Sample {
            patches: Array::new(vec![g * g, d], data)?,
            tokens: self.tokens,
            labels: self.labels,
            seed: self.seed,
        };
        sample.validate(cfg)?;
        Ok(sample)
    }
}

/// Serialize to the line-delimited format: a header line, then one record per sample.
pub fn write_dataset_to<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = Header {
        schema_version: SCHEMA_VERSION,
        config: ds.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in &ds.samples {
        serde_json::to_writer(&mut out, &SampleRecord::from_sample(s, ds.config.grid))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset_to(ds, BufWriter::new(File::create(path)?))
}

/// Parse and validate a dataset; errors carry the 1-based line number.
pub fn read_dataset_from<R: BufRead>(input: R, path: &Path) -> Result<Dataset> {
    let at = |line: usize, msg: String| Error::Record {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = input.lines();
    let first = lines
        .next()
        .ok_or_else(|| at(1, "missing header record".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| at(1, e.to_string()))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            expected: SCHEMA_VERSION,
            found: header.schema_version,
        });
    }
    header.config.validate().map_err(|e| at(1, e.to_string()))?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord =
            serde_json::from_str(&line).map_err(|e| at(lineno, e.to_string()))?;
        samples.push(
            rec.into_sample(&header.config)
                .map_err(|e| at(lineno, e.to_string()))?,
        );
    }
    Ok(Dataset {
        config: header.config,
        samples,
    })
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(BufReader::new(File::open(path)?), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DatasetConfig {
        DatasetConfig {
            num_samples: n,
            ..Default::default()
        }
    }

    #[test]
    fn default_mix_matches_corpus_counts() {
        let m = ClassMix::default();
        assert!((m.genuine - 0.336_63).abs() < 1e-4);
        assert!((m.genuine + m.image_only + m.text_only + m.mixed - 1.0).abs() < 1e-12);
        // mixed pairs are about 21% of manipulated pairs
        assert!((m.mixed / (1.0 - m.genuine) - 0.21).abs() < 0.005);
    }

    #[test]
    fn intersection_area_cases() {
        let cell = BBox([2.0, 3.0, 3.0, 4.0]);
        assert_eq!(
            patch_intersection_area(&BBox([5.0, 5.0, 6.0, 6.0]), &cell),
            0.0
        );
        assert_eq!(
            patch_intersection_area(&BBox([0.0, 0.0, 8.0, 8.0]), &cell),
            1.0
        );
        let left60 = BBox([0.0, 0.0, 2.6, 8.0]);
        assert!((patch_intersection_area(&left60, &cell) - 0.6).abs() < 1e-12);
        // touching edges do not overlap
        assert_eq!(
            patch_intersection_area(&BBox([0.0, 0.0, 2.0, 8.0]), &cell),
            0.0
        );
    }

    #[test]
    fn all_genuine_mix() {
        let cfg = DatasetConfig {
            num_samples: 200,
            mix: ClassMix {
                genuine: 1.0,
                image_only: 0.0,
                text_only: 0.0,
                mixed: 0.0,
            },
            ..Default::default()
        };
        for s in generate_dataset(&cfg).unwrap() {
            assert_eq!(s.labels.y_v_bin, 0);
            assert_eq!(s.labels.y_t_bin, 0);
            assert!(s.labels.bbox.is_none());
        }
    }

    #[test]
    fn generation_is_deterministic_per_index() {
        let cfg = small(20);
        let a = generate_sample(&cfg, 7).unwrap();
        let b = generate_sample(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_dataset(&cfg).unwrap()[7], a);
        assert!(generate_sample(&cfg, 20).is_err());
    }

    #[test]
    fn box_that_cannot_fit_is_rejected() {
        let cfg = DatasetConfig {
            grid: 2,
            box_min: 3.0,
            box_max: 4.0,
            ..small(4)
        };
        assert!(matches!(generate_sample(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn labels_validate_on_generated_samples() {
        let cfg = small(300);
        for s in generate_dataset(&cfg).unwrap() {
            s.validate(&cfg).unwrap();
        }
    }

    #[test]
    fn validator_rejects_fake_image_without_box() {
        let cfg = small(50);
        let mut s = generate_dataset(&cfg)
            .unwrap()
            .into_iter()
            .find(|s| s.labels.image_fake())
            .unwrap();
        s.labels.bbox = None;
        let err = s.validate(&cfg).unwrap_err();
        assert!(err.to_string().contains("bbox"), "{err}");
    }

    #[test]
    fn empty_dataset_round_trip() {
        let ds = Dataset {
            config: small(0),
            samples: vec![],
        };
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 1);
        let back = read_dataset_from(&buf[..], Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn round_trip_and_byte_stability() {
        let ds = Dataset::generate(small(100)).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset_to(&ds, &mut a).unwrap();
        write_dataset_to(&ds, &mut b).unwrap();
        assert_eq!(a, b);
        let back = read_dataset_from(&a[..], Path::new("mem")).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_record_reports_line() {
        let ds = Dataset::generate(small(3)).unwrap();
        let mut buf = Vec::new();
        write_dataset_to(&ds, &mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text.push_str("{not json}\n");
        let err = read_dataset_from(text.as_bytes(), Path::new("mem")).unwrap_err();
        match err {
            Error::Record { line, .. } => assert_eq!(line, 5),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn hand_written_record_without_box_is_rejected() {
        let cfg = DatasetConfig {
            num_samples: 1,
            grid: 2,
            seq_len: 4,
            patch_dim: 4,
            vocab: 16,
            topics: 2,
            box_min: 1.0,
            box_max: 2.0,
            ..Default::default()
        };
        let header = serde_json::to_string(&Header {
            schema_version: SCHEMA_VERSION,
            config: cfg,
        })
        .unwrap();
        let rec = r#"{"seed":1,"patch_grid":[[[0,0,0,0],[0,0,0,0]],[[0,0,0,0],[0,0,0,0]]],"tokens":[0,1,2,3],"labels":{"y_v_bin":1,"y_t_bin":0,"y_multi":[1,0,0,0],"bbox":null,"y_pat":[1,0,0,0],"y_tok":[0,0,0,0],"y_v_m":1,"y_t_m":null}}"#;
        let text = format!("{header}\n{rec}\n");
        let err = read_dataset_from(text.as_bytes(), Path::new("fixture.jsonl")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("fixture.jsonl:2"), "{msg}");
        assert!(
            msg.contains("label invariant") && msg.contains("bbox"),
            "{msg}"
        );
    }

    #[test]
    fn schema_version_is_checked() {
        let text = format!(
            "{}\n",
            serde_json::json!({"schema_version": 99, "config": small(0)})
        );
        assert!(matches!(
            read_dataset_from(text.as_bytes(), Path::new("mem")),
            Err(Error::SchemaVersion { found: 99, .. })
        ));
    }
}
