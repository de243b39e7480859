//! Score-record filtering, multi-label assignment and imbalance-aware
//! resampling of a clip pool.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const NUM_PRIMITIVES: usize = 17;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Dynamic,
    Thermodynamic,
    Optic,
}

pub const PRIMITIVES: [(&str, Domain); NUM_PRIMITIVES] = [
    ("rigid body motion", Domain::Dynamic),
    ("collision", Domain::Dynamic),
    ("liquid motion", Domain::Dynamic),
    ("gas motion", Domain::Dynamic),
    ("elastic motion", Domain::Dynamic),
    ("deformation", Domain::Dynamic),
    ("melting", Domain::Thermodynamic),
    ("solidification", Domain::Thermodynamic),
    ("vaporization", Domain::Thermodynamic),
    ("liquefaction", Domain::Thermodynamic),
    ("combustion", Domain::Thermodynamic),
    ("explosion", Domain::Thermodynamic),
    ("reflection", Domain::Optic),
    ("refraction", Domain::Optic),
    ("scattering", Domain::Optic),
    ("interference and diffraction", Domain::Optic),
    ("unnatural light source", Domain::Optic),
];

pub fn primitive_index(name: &str) -> Option<usize> {
    PRIMITIVES.iter().position(|(n, _)| *n == name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub video_id: String,
    pub vqa: f64,
    pub reality: u8,
    /// Richness per primitive, in `PRIMITIVES` order.
    pub scores: Vec<f64>,
    #[serde(default)]
    pub subject_phrases: Vec<String>,
}

impl ScoreRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scores.len() != NUM_PRIMITIVES {
            return bad(alloc::format!(
                "{}: expected {} scores, got {}",
                self.video_id,
                NUM_PRIMITIVES,
                self.scores.len()
            ));
        }
        if !(1.0..=5.0).contains(&self.vqa) || !(1..=5).contains(&self.reality) {
            return bad(alloc::format!(
                "{}: vqa or reality outside [1, 5]",
                self.video_id
            ));
        }
        if self.scores.iter().any(|s| !(1.0..=5.0).contains(s)) {
            return bad(alloc::format!(
                "{}: richness score outside [1, 5]",
                self.video_id
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub vqa_min: f64,
    pub reality_min: u8,
    pub richness_min: f64,
    pub tau: f64,
    pub n_out: Option<usize>,
    pub with_replacement: bool,
    pub seed: u64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            vqa_min: 3.0,
            reality_min: 4,
            richness_min: 2.0,
            tau: 4.0,
            n_out: None,
            with_replacement: false,
            seed: 0,
        }
    }
}

/// Keeps records with `vqa >= vqa_min` and `reality >= reality_min`, in order.
pub fn filter_pool(records: &[ScoreRecord], vqa_min: f64, reality_min: u8) -> Vec<ScoreRecord> {
    records
        .iter()
        .filter(|r| r.vqa >= vqa_min && r.reality >= reality_min)
        .cloned()
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Richness {
    pub dynamic: f64,
    pub thermodynamic: f64,
    pub optic: f64,
    pub total: f64,
}

pub fn richness_aggregate(s: &[f64]) -> Richness {
    assert_eq!(s.len(), NUM_PRIMITIVES, "richness vector length");
    let mean = |d: Domain| {
        let (sum, n) = PRIMITIVES
            .iter()
            .zip(s)
            .filter(|((_, dom), _)| *dom == d)
            .fold((0.0, 0), |(a, n), (_, v)| (a + v, n + 1));
        sum / n as f64
    };
    let (dynamic, thermodynamic, optic) = (
        mean(Domain::Dynamic),
        mean(Domain::Thermodynamic),
        mean(Domain::Optic),
    );
    Richness {
        dynamic,
        thermodynamic,
        optic,
        total: (dynamic + thermodynamic + optic) / 3.0,
    }
}

pub fn filter_richness(records: &[ScoreRecord], min_total: f64) -> Vec<ScoreRecord> {
    records
        .iter()
        .filter(|r| richness_aggregate(&r.scores).total >= min_total)
        .cloned()
        .collect()
}

/// Binary primitive labels, one row per clip.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMatrix {
    pub rows: Vec<Vec<bool>>,
    pub tau: f64,
}

impl LabelMatrix {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn m(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn counts(&self) -> Vec<usize> {
        column_counts(&self.rows, self.m(), 0..self.n())
    }
}

fn column_counts(
    rows: &[Vec<bool>],
    m: usize,
    pick: impl IntoIterator<Item = usize>,
) -> Vec<usize> {
    let mut c = alloc::vec![0; m];
    for i in pick {
        for (j, &y) in rows[i].iter().enumerate() {
            c[j] += y as usize;
        }
    }
    c
}

/// Thresholds each score row at `tau`; an all-zero row gets its argmax
/// (lowest index on ties) set instead.
pub fn label_rows(scores: &[Vec<f64>], tau: f64) -> LabelMatrix {
    let rows = scores
        .iter()
        .map(|s| {
            let mut y: Vec<bool> = s.iter().map(|&v| v >= tau).collect();
            if !y.iter().any(|&b| b) && !s.is_empty() {
                let mut best = 0;
                for (j, &v) in s.iter().enumerate() {
                    if v > s[best] {
                        best = j;
                    }
                }
                y[best] = true;
            }
            y
        })
        .collect();
    LabelMatrix { rows, tau }
}

pub fn assign_labels(records: &[ScoreRecord], tau: f64) -> LabelMatrix {
    let scores: Vec<Vec<f64>> = records.iter().map(|r| r.scores.clone()).collect();
    label_rows(&scores, tau)
}

/// Per-primitive imbalance ratios. Primitives with zero count are excluded
/// and carry `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Irbl {
    pub counts: Vec<usize>,
    pub ratios: Vec<Option<f64>>,
}

impl Irbl {
    pub fn excluded(&self) -> Vec<usize> {
        self.ratios
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(j, _)| j)
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.ratios.iter().flatten().sum()
    }
}

pub fn irbl_weights(y: &LabelMatrix) -> Result<Irbl> {
    let counts = y.counts();
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::NoLabels);
    }
    let ratios = counts
        .iter()
        .map(|&c| (c > 0).then(|| max as f64 / c as f64))
        .collect();
    Ok(Irbl { counts, ratios })
}

/// Unnormalised per-clip weights `Σ_j y_ij·IRBL_j / Σ_j IRBL_j`.
pub fn clip_weights(y: &LabelMatrix, irbl: &Irbl) -> Vec<f64> {
    let total = irbl.total();
    y.rows
        .iter()
        .map(|row| {
            row.iter()
                .zip(&irbl.ratios)
                .filter(|(&b, _)| b)
                .map(|(_, r)| r.unwrap_or(0.0))
                .sum::<f64>()
                / total
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    /// Pool indices in draw order.
    pub indices: Vec<usize>,
    /// Selection probabilities before any draw.
    pub probabilities: Vec<f64>,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

/// Draws `n_out` clips by sequential weighted draws, one uniform number per
/// draw from a seeded ChaCha8 stream. Without replacement, drawn clips leave
/// the pool and the remaining weights are renormalised.
pub fn resample(
    y: &LabelMatrix,
    irbl: &Irbl,
    n_out: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<Resampled> {
    let n = y.n();
    if !with_replacement && n_out > n {
        return Err(Error::Config(alloc::format!(
            "cannot draw {} of {} clips without replacement",
            n_out,
            n
        )));
    }
    let w = clip_weights(y, irbl);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeights);
    }
    let probabilities: Vec<f64> = w.iter().map(|v| v / total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live = probabilities.clone();
    let mut taken = alloc::vec![false; n];
    let mut indices = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        let u: f64 = rng.random();
        let i = weighted_pick(&live, &taken, u);
        indices.push(i);
        if !with_replacement {
            taken[i] = true;
            live[i] = 0.0;
        }
    }
    let m = y.m();
    Ok(Resampled {
        before: column_counts(&y.rows, m, 0..n),
        after: column_counts(&y.rows, m, indices.iter().copied()),
        indices,
        probabilities,
    })
}

/// Inverse-CDF pick over the live weights. Once every positive weight is
/// gone, the remaining clips are picked uniformly.
fn weighted_pick(live: &[f64], taken: &[bool], u: f64) -> usize {
    let total: f64 = live.iter().sum();
    if total > 0.0 {
        let target = u * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in live.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if target < acc {
                    return i;
                }
            }
        }
        return last;
    }
    let free: Vec<usize> = (0..live.len()).filter(|&i| !taken[i]).collect();
    free[((u * free.len() as f64) as usize).min(free.len() - 1)]
}

/// Outcome of the full curation funnel.
#[derive(Clone, Debug, PartialEq)]
pub struct Curated {
    pub pool: usize,
    pub after_quality: usize,
    pub after_reality: usize,
    pub after_richness: usize,
    pub selected: Vec<ScoreRecord>,
    pub labels: LabelMatrix,
    pub irbl: Irbl,
    pub before: Vec<usize>,
    pub after: Vec<usize>,
}

pub fn curate(records: &[ScoreRecord], cfg: &CurationConfig) -> Result<Curated> {
    for r in records {
        r.validate()?;
    }
    let quality = filter_pool(records, cfg.vqa_min, 0);
    let real = filter_pool(&quality, cfg.vqa_min, cfg.reality_min);
    let rich = filter_richness(&real, cfg.richness_min);
    if rich.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = assign_labels(&rich, cfg.tau);
    let irbl = irbl_weights(&labels)?;
    let n_out = cfg
        .n_out
        .unwrap_or(rich.len())
        .min(if cfg.with_replacement {
            usize::MAX
        } else {
            rich.len()
        });
    let drawn = resample(&labels, &irbl, n_out, cfg.seed, cfg.with_replacement)?;
    Ok(Curated {
        pool: records.len(),
        after_quality: quality.len(),
        after_reality: real.len(),
        after_richness: rich.len(),
        selected: drawn.indices.iter().map(|&i| rich[i].clone()).collect(),
        labels,
        irbl,
        before: drawn.before,
        after: drawn.after,
    })
}

/// `max / min` over the positive entries, `None` if fewer than one.
pub fn imbalance_ratio(counts: &[usize]) -> Option<f64> {
    let pos: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    let max = *pos.iter().max()?;
    let min = *pos.iter().min()?;
    Some(max as f64 / min as f64)
}
