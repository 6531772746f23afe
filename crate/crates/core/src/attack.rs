//! The attacker's side: recognition oracles, the brute-force harness and the
//! attack-time cost model.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::glyphs::{deformed_cells_by_row, glyph, Charset, GlyphDeformation, GrayImage, Layout, FONT_ROWS};
use crate::lattice::{LatticeState, SignField, SimParams};
use crate::vault::{decrypt_f2, decrypt_with_keys, derive_keys, merge_state, SplitState, VaultContainer};

/// Output of a recognition oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Recognition {
    pub text: String,
    /// Mean best correlation over glyph slots, clamped to [0, 1].
    pub score: f64,
    pub glyph_scores: Vec<f64>,
}

/// Anything that reads a candidate p-CAPTCHA.
pub trait RecognitionOracle: Sync {
    fn decode(&self, image: &GrayImage) -> Recognition;

    /// Modeled cost of one recognition, used for attack-time reporting.
    fn seconds_per_image(&self) -> f64;
}

pub const SHEAR_GRID_DEG: [f64; 7] = [-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0];

const JITTERS: [i64; 3] = [-1, 0, 1];

struct Template {
    symbol: usize,
    /// Per font row, the stroke cells for each row jitter in [`JITTERS`], as
    /// offsets into the slot window.
    rows: Vec<[Vec<usize>; 3]>,
}

/// Normalized cross-correlation against every charset glyph over a grid of
/// shears and offsets, slot by slot. Each font row may additionally slide by
/// one site, matching the row jitter of the imprinted glyphs.
pub struct TemplateOracle {
    charset: Charset,
    layout: Layout,
    seconds_per_image: f64,
    templates: OnceLock<Vec<Template>>,
}

impl TemplateOracle {
    pub fn new(charset: Charset, n: usize, key_len: usize) -> Result<Self> {
        Ok(Self {
            charset,
            layout: Layout::new(n, key_len)?,
            seconds_per_image: 1.0,
            templates: OnceLock::new(),
        })
    }

    pub fn with_cost(mut self, seconds_per_image: f64) -> Self {
        self.seconds_per_image = seconds_per_image;
        self
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn charset(&self) -> &Charset {
        &self.charset
    }

    fn templates(&self) -> &[Template] {
        self.templates.get_or_init(|| {
            let slot = self.layout.slots[0];
            let lift = self.layout.max_lift() as i64;
            let to_window = |cells: &[(usize, usize)]| -> Vec<usize> {
                cells
                    .iter()
                    .filter(|&&(i, j)| slot.contains(i, j))
                    .map(|&(i, j)| (i - slot.row) * slot.width + (j - slot.col))
                    .collect()
            };
            let mut out = Vec::new();
            for (symbol, &ch) in self.charset.symbols.iter().enumerate() {
                let Some(bitmap) = glyph(ch) else { continue };
                for &shear_deg in &SHEAR_GRID_DEG {
                    for dy in -lift..=lift {
                        for dx in -1..=1 {
                            let variants = JITTERS.map(|jitter| {
                                let deform = GlyphDeformation {
                                    shear_deg,
                                    lift: dy,
                                    shift: dx,
                                    row_jitter: [jitter; FONT_ROWS],
                                };
                                deformed_cells_by_row(bitmap, &self.layout, 0, &deform)
                            });
                            let rows = (0..FONT_ROWS)
                                .map(|r| [0, 1, 2].map(|v| to_window(&variants[v][r])))
                                .collect();
                            out.push(Template { symbol, rows });
                        }
                    }
                }
            }
            out
        })
    }

    /// Decodes straight from a sign field, skipping the raster.
    pub fn decode_field(&self, field: &SignField) -> Recognition {
        if field.n != self.layout.n {
            return Recognition {
                text: String::new(),
                score: 0.0,
                glyph_scores: Vec::new(),
            };
        }
        let templates = self.templates();
        let mut text = String::new();
        let mut glyph_scores = Vec::with_capacity(self.layout.slots.len());
        let mut window = Vec::new();
        for slot in &self.layout.slots {
            window.clear();
            for i in slot.row..slot.row + slot.height {
                for j in slot.col..slot.col + slot.width {
                    window.push(field.get(i, j));
                }
            }
            let size = window.len() as f64;
            let mean_x = window.iter().filter(|&&b| b).count() as f64 / size;
            let var_x = mean_x * (1.0 - mean_x);
            let mut best = (f64::NEG_INFINITY, 0usize);
            for t in templates {
                // Each row takes the jitter with the largest covariance term.
                let (mut cov, mut count) = (0.0, 0usize);
                for row in &t.rows {
                    let (c, n) = row
                        .iter()
                        .map(|cells| {
                            let hits = cells.iter().filter(|&&c| window[c]).count() as f64;
                            (hits - cells.len() as f64 * mean_x, cells.len())
                        })
                        .fold((f64::NEG_INFINITY, 0), |a, b| if b.0 > a.0 { b } else { a });
                    cov += c;
                    count += n;
                }
                let mean_t = count as f64 / size;
                let denom = (mean_t * (1.0 - mean_t) * var_x).sqrt();
                let ncc = if denom > 0.0 { cov / size / denom } else { 0.0 };
                if ncc > best.0 {
                    best = (ncc, t.symbol);
                }
            }
            text.push(self.charset.symbols[best.1]);
            glyph_scores.push(best.0.clamp(0.0, 1.0));
        }
        let score = glyph_scores.iter().sum::<f64>() / glyph_scores.len().max(1) as f64;
        Recognition {
            text,
            score,
            glyph_scores,
        }
    }
}

impl RecognitionOracle for TemplateOracle {
    fn decode(&self, image: &GrayImage) -> Recognition {
        match image.to_sign_field(self.layout.n) {
            Ok(field) => self.decode_field(&field),
            Err(_) => Recognition {
                text: String::new(),
                score: 0.0,
                glyph_scores: Vec::new(),
            },
        }
    }

    fn seconds_per_image(&self) -> f64 {
        self.seconds_per_image
    }
}

/// Wall-clock breakdown of one candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CandidateTiming {
    pub decrypt: Duration,
    pub integrate: Duration,
    pub recognize: Duration,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRecord {
    pub index: usize,
    pub is_true: bool,
    pub decoded: String,
    pub score: f64,
    pub decrypt_s: f64,
    pub integrate_s: f64,
    pub recognize_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackSummary {
    pub candidates: usize,
    pub success: bool,
    pub best_index: usize,
    pub true_index: Option<usize>,
    pub true_score: Option<f64>,
    pub max_wrong_score: f64,
    /// True score minus the best wrong score.
    pub separation: Option<f64>,
    /// Mean plus three standard deviations of the wrong-candidate scores.
    pub threshold: f64,
    pub wrong_p95: f64,
    pub mean_integrate_s: f64,
    pub mean_recognize_s: f64,
    pub mean_decrypt_s: f64,
    pub modeled_seconds_per_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub records: Vec<CandidateRecord>,
    pub summary: AttackSummary,
}

impl AttackReport {
    /// One JSON object per candidate, then `{"summary": ...}`.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out.push_str(&serde_json::json!({ "summary": self.summary }).to_string());
        out.push('\n');
        out
    }

    pub fn wrong_scores(&self) -> Vec<f64> {
        self.records.iter().filter(|r| !r.is_true).map(|r| r.score).collect()
    }
}

/// Decision threshold from a null sample: mean + 3 standard deviations.
pub fn null_threshold(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 1.0;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    mean + 3.0 * var.sqrt()
}

/// Nearest-rank percentile, `q` in [0, 1].
pub fn percentile(scores: &[f64], q: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Tries every candidate password the way an attacker would: decrypt F2,
/// back-integrate, and ask the oracle. `true_sp` is used only to label the
/// report and to adjudicate success.
pub fn brute_force_sim<O: RecognitionOracle>(
    container: &VaultContainer,
    candidates: &[String],
    oracle: &O,
    true_sp: &str,
) -> Result<AttackReport> {
    let params = container.params()?;
    let records = candidates
        .par_iter()
        .enumerate()
        .map(|(index, sp)| {
            let (state, decrypt) = timed(|| candidate_state(container, sp, params));
            let mut state = state?;
            let (run, integrate) = timed(|| {
                state.time_reverse();
                state.integrate(params.tau_steps)
            });
            run.map_err(|e| Error::MalformedContainer(format!("state does not integrate: {e}")))?;
            let image = GrayImage::from_sign_field(&state.sign_field(), 1);
            let (recognition, recognize) = timed(|| oracle.decode(&image));
            Ok(CandidateRecord {
                index,
                is_true: sp == true_sp,
                decoded: recognition.text,
                score: recognition.score,
                decrypt_s: decrypt.as_secs_f64(),
                integrate_s: integrate.as_secs_f64(),
                recognize_s: recognize.as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let best = records
        .iter()
        .max_by(|a, b| a.score.total_cmp(&b.score).then(b.index.cmp(&a.index)))
        .map_or(0, |r| r.index);
    let truth = records.iter().find(|r| r.is_true);
    let wrong: Vec<f64> = records.iter().filter(|r| !r.is_true).map(|r| r.score).collect();
    let max_wrong = wrong.iter().copied().fold(0.0, f64::max);
    let success = match truth {
        Some(t) if t.index == best => {
            decrypt_with_keys(container, &candidates[best], &t.decoded).is_ok()
        }
        _ => false,
    };
    let count = records.len().max(1) as f64;
    let mean = |f: fn(&CandidateRecord) -> f64| records.iter().map(f).sum::<f64>() / count;
    let summary = AttackSummary {
        candidates: records.len(),
        success,
        best_index: best,
        true_index: truth.map(|t| t.index),
        true_score: truth.map(|t| t.score),
        max_wrong_score: max_wrong,
        separation: truth.map(|t| t.score - max_wrong),
        threshold: null_threshold(&wrong),
        wrong_p95: percentile(&wrong, 0.95),
        mean_integrate_s: mean(|r| r.integrate_s),
        mean_recognize_s: mean(|r| r.recognize_s),
        mean_decrypt_s: mean(|r| r.decrypt_s),
        modeled_seconds_per_image: oracle.seconds_per_image(),
    };
    Ok(AttackReport { records, summary })
}

fn candidate_state(container: &VaultContainer, sp: &str, params: SimParams) -> Result<LatticeState> {
    let keys = derive_keys(sp, None, &container.salt, container.kdf_work)?;
    let split = SplitState {
        n: params.n,
        f1: container.f1.clone(),
        f2: decrypt_f2(&container.ef2, &keys.k2, &container.nonce_f2),
    };
    merge_state(&split, params).map_err(|e| Error::MalformedContainer(e.to_string()))
}

/// Exhaustive-search time `alphabet^length / rate` in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackEstimate {
    pub candidates: BigUint,
    pub seconds: f64,
}

impl AttackEstimate {
    pub fn human(&self) -> String {
        humanize_seconds(self.seconds)
    }
}

pub fn attack_time_estimate(length: u32, alphabet: u32, rate: f64) -> Result<AttackEstimate> {
    if length == 0 || alphabet == 0 {
        return Err(Error::InvalidParams("length and alphabet must be positive".into()));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParams(format!("rate {rate} must be positive")));
    }
    let candidates = BigUint::from(alphabet).pow(length);
    let seconds = candidates.to_f64().unwrap_or(f64::INFINITY) / rate;
    Ok(AttackEstimate { candidates, seconds })
}

const MINUTE: f64 = 60.0;
const HOUR: f64 = 3600.0;
const DAY: f64 = 86_400.0;
const YEAR: f64 = 365.25 * DAY;

pub fn humanize_seconds(seconds: f64) -> String {
    let (value, unit) = if !seconds.is_finite() {
        return "≈ forever".to_owned();
    } else if seconds < MINUTE {
        (seconds, "seconds")
    } else if seconds < HOUR {
        (seconds / MINUTE, "minutes")
    } else if seconds < DAY {
        (seconds / HOUR, "hours")
    } else if seconds < YEAR {
        (seconds / DAY, "days")
    } else {
        (seconds / YEAR, "years")
    };
    if value >= 1e6 {
        format!("≈ {value:.3e} {unit}")
    } else {
        format!("≈ {value:.1} {unit}")
    }
}
