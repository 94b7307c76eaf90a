use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::{mix, SynthSample, ATTRIBUTE_COUNT, GRID_TOKENS};
use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, HiddenTrace, Modality};

// Residual-stream layout.
const ATTR: usize = 0;
const QUERY_ATTR: usize = ATTR + ATTRIBUTE_COUNT;
const IS_VISION: usize = QUERY_ATTR + ATTRIBUTE_COUNT;
const IS_TEXT: usize = IS_VISION + 1;
const IS_QUERY: usize = IS_TEXT + 1;
const IS_ANSWER: usize = IS_QUERY + 1;
const ACCUMULATOR: usize = IS_ANSWER + 1;
const BIAS: usize = ACCUMULATOR + 1;
const FILLER: usize = BIAS + 1;

/// Smallest residual width: the wired coordinates plus two filler coordinates.
pub const MIN_DIM: usize = FILLER + 2;
/// Heads 0 and 1 carry the transfer and scan circuits, head 2 the query copy.
pub const MIN_HEADS: usize = 3;

/// Logit scale of the matching, scanning and copying heads.
const SHARP: f64 = 12.0;
/// Logit of answer-to-text attention in sink heads.
const SINK: f64 = 10.0;
/// Gain of the per-block random map written into the filler coordinates.
const DRIFT: f64 = 0.15;
/// Standard deviation of the filler content in embeddings.
const FILLER_SCALE: f64 = 0.3;
/// Answer accumulator level separating the two labels.
const DECISION_LEVEL: f64 = 0.5;

pub(crate) const QUERY_TOKEN: usize = GRID_TOKENS;
pub(crate) const ANSWER_TOKEN: usize = GRID_TOKENS + 1;
pub(crate) const TOKEN_COUNT: usize = GRID_TOKENS + 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    /// Number of blocks; traces carry `layer_count + 1` hidden layers.
    pub layer_count: usize,
    pub dim: usize,
    pub head_count: usize,
    /// Inclusive 1-based block range wired for vision-to-answer transfer.
    pub copy_block: (usize, usize),
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self { layer_count: 12, dim: 32, head_count: 4, copy_block: (5, 8), noise_scale: 0.0, seed: 0 }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.copy_block;
        if !(1 <= a && a <= b && b < self.layer_count) {
            return Err(Error::InvalidArgument(format!(
                "copy block [{a}, {b}] must satisfy 1 <= a <= b < {}",
                self.layer_count
            )));
        }
        if self.dim < MIN_DIM {
            return Err(Error::InvalidArgument(format!("dim {} is below the minimum {MIN_DIM}", self.dim)));
        }
        if self.head_count < MIN_HEADS {
            return Err(Error::InvalidArgument(format!(
                "head_count {} is below the minimum {MIN_HEADS}",
                self.head_count
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise_scale {} must be finite and >= 0", self.noise_scale)));
        }
        Ok(())
    }
}

/// Which blocks see the vision tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "layer", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ForwardMode {
    Baseline,
    /// Vision tokens join after `l` blocks, as their raw embeddings.
    LateEntry(usize),
    /// Vision tokens leave after `l` blocks; their states freeze.
    EarlyExit(usize),
}

impl ForwardMode {
    /// `(entry, exit)`: vision is active in blocks `entry + 1 ..= exit`.
    fn window(self, n: usize) -> Result<(usize, usize)> {
        let check = |l: usize| {
            if l <= n {
                Ok(l)
            } else {
                Err(Error::InvalidArgument(format!("skip layer {l} outside 0..={n}")))
            }
        };
        match self {
            ForwardMode::Baseline => Ok((0, n)),
            ForwardMode::LateEntry(l) => Ok((check(l)?, n)),
            ForwardMode::EarlyExit(l) => Ok((0, check(l)?)),
        }
    }
}

/// Sparse `dim x dim` map stored as `(row, column, weight)` terms.
#[derive(Debug, Clone, PartialEq, Default)]
struct Linear {
    terms: Vec<(usize, usize, f64)>,
}

impl Linear {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.apply_to(x, x.len())
    }

    /// Output truncated to its first `width` coordinates.
    fn apply_to(&self, x: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; width];
        for &(r, c, w) in &self.terms {
            out[r] += w * x[c];
        }
        out
    }

    /// One past the highest row written.
    fn width(&self) -> usize {
        self.terms.iter().map(|t| t.0 + 1).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Head {
    query: Linear,
    key: Linear,
    /// Value and output projections fused.
    output: Linear,
}

impl Head {
    /// Answer attends to text keys; writes nothing.
    fn sink() -> Self {
        Self {
            query: Linear { terms: vec![(0, BIAS, SINK)] },
            key: Linear { terms: vec![(0, IS_TEXT, 1.0)] },
            output: Linear::default(),
        }
    }

    /// Answer reads the query attribute from the query token.
    fn query_copy() -> Self {
        Self {
            query: Linear { terms: vec![(0, IS_ANSWER, SHARP)] },
            key: Linear { terms: vec![(0, IS_QUERY, 1.0)] },
            output: Linear { terms: (0..ATTRIBUTE_COUNT).map(|i| (QUERY_ATTR + i, QUERY_ATTR + i, 1.0)).collect() },
        }
    }

    /// Attends to vision keys whose attribute matches the carried query
    /// attribute, with a text sink at half strength for the answer; each unit
    /// of vision mass adds one unit to the accumulator.
    fn transfer() -> Self {
        let mut q: Vec<_> = (0..ATTRIBUTE_COUNT).map(|i| (i, QUERY_ATTR + i, SHARP)).collect();
        q.push((ATTRIBUTE_COUNT, IS_ANSWER, SHARP / 2.0));
        let mut k: Vec<_> = (0..ATTRIBUTE_COUNT).map(|i| (i, ATTR + i, 1.0)).collect();
        k.push((ATTRIBUTE_COUNT, IS_TEXT, 1.0));
        Self {
            query: Linear { terms: q },
            key: Linear { terms: k },
            output: Linear { terms: vec![(ACCUMULATOR, IS_VISION, 1.0)] },
        }
    }

    /// Answer attends to every vision key; writes nothing.
    fn scan() -> Self {
        Self {
            query: Linear { terms: vec![(0, IS_ANSWER, SHARP)] },
            key: Linear { terms: vec![(0, IS_VISION, 1.0)] },
            output: Linear::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    heads: Vec<Head>,
    /// Writes only filler coordinates, so it never reaches a wired one.
    drift: Linear,
}

/// Hand-wired attention-only transformer. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyModelConfig,
    blocks: Vec<Block>,
}

pub fn build_model(config: ToyModelConfig) -> Result<ToyModel> {
    config.validate()?;
    let (a, b) = config.copy_block;
    let dim = config.dim;
    let blocks = (1..=config.layer_count)
        .map(|block| {
            let mut heads = vec![Head::sink(); config.head_count];
            if block == 1 {
                heads[2] = Head::query_copy();
            }
            if (a..=b).contains(&block) {
                heads[0] = Head::transfer();
                heads[1] = Head::scan();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, block as u64));
            let scale = DRIFT / (dim as f64).sqrt();
            let mut terms = Vec::with_capacity((dim - FILLER) * dim);
            for r in FILLER..dim {
                for c in 0..dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    terms.push((r, c, scale * z));
                }
            }
            Block { heads, drift: Linear { terms } }
        })
        .collect();
    Ok(ToyModel { config, blocks })
}

/// Traces and decision of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: HiddenTrace,
    /// Rows for the query token and the answer token.
    pub attention: AttentionTrace,
    /// Answer accumulator minus the decision level.
    pub logit: f64,
    pub prediction: bool,
}

impl ToyModel {
    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    pub fn token_count(&self) -> usize {
        TOKEN_COUNT
    }

    pub fn answer_token(&self) -> usize {
        ANSWER_TOKEN
    }

    pub fn query_token(&self) -> usize {
        QUERY_TOKEN
    }

    fn embed(&self, sample: &SynthSample) -> Vec<Vec<f64>> {
        let dim = self.config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(sample.id);
        (0..TOKEN_COUNT)
            .map(|i| {
                let mut x = vec![0.0; dim];
                if i < GRID_TOKENS {
                    x[ATTR + usize::from(sample.grid[i])] = 1.0;
                    x[IS_VISION] = 1.0;
                } else {
                    x[IS_TEXT] = 1.0;
                    if i == QUERY_TOKEN {
                        x[IS_QUERY] = 1.0;
                        x[QUERY_ATTR + usize::from(sample.query_attribute)] = 1.0;
                    } else {
                        x[IS_ANSWER] = 1.0;
                    }
                }
                x[BIAS] = 1.0;
                for v in &mut x[FILLER..] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = FILLER_SCALE * z;
                }
                x
            })
            .collect()
    }

    /// Runs the causal forward pass. Inactive vision tokens are neither
    /// updated nor attended to, so every mode shares one code path and the
    /// trivial skips reproduce the baseline bit for bit.
    pub fn forward(&self, sample: &SynthSample, mode: ForwardMode) -> Result<ForwardOutput> {
        sample.validate()?;
        let n = self.config.layer_count;
        let (dim, heads) = (self.config.dim, self.config.head_count);
        let (entry, exit) = mode.window(n)?;
        let stored = [QUERY_TOKEN, ANSWER_TOKEN];

        let mut h = self.embed(sample);
        let mut states = Vec::with_capacity((n + 1) * TOKEN_COUNT * dim);
        let mut record = |h: &[Vec<f64>]| states.extend(h.iter().flatten().map(|&v| v as f32));
        record(&h);
        let mut rows = vec![0.0f32; stored.len() * n * heads * TOKEN_COUNT];

        for (bi, block) in self.blocks.iter().enumerate() {
            let vision_active = bi + 1 > entry && bi < exit;
            let active: Vec<bool> = (0..TOKEN_COUNT).map(|i| i >= GRID_TOKENS || vision_active).collect();
            let mut next = h.clone();
            for (hi, head) in block.heads.iter().enumerate() {
                let width = head.query.width().max(head.key.width());
                let q: Vec<Vec<f64>> = h.iter().map(|x| head.query.apply_to(x, width)).collect();
                let k: Vec<Vec<f64>> = h.iter().map(|x| head.key.apply_to(x, width)).collect();
                let v: Vec<Vec<f64>> = h.iter().map(|x| head.output.apply(x)).collect();
                let writes = !head.output.terms.is_empty();
                for i in (0..TOKEN_COUNT).filter(|&i| active[i]) {
                    let slot = stored.iter().position(|&s| s == i);
                    // A head that writes nothing only matters where its row is stored.
                    if !writes && slot.is_none() {
                        continue;
                    }
                    let keys: Vec<usize> = (0..=i).filter(|&j| active[j]).collect();
                    let scores: Vec<f64> =
                        keys.iter().map(|&j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum()).collect();
                    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exp: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                    let z: f64 = exp.iter().sum();
                    for (&j, e) in keys.iter().zip(&exp) {
                        let w = e / z;
                        if writes {
                            for (o, vj) in next[i].iter_mut().zip(&v[j]) {
                                *o += w * vj;
                            }
                        }
                        if let Some(s) = slot {
                            rows[((s * n + bi) * heads + hi) * TOKEN_COUNT + j] = w as f32;
                        }
                    }
                }
            }
            for i in (0..TOKEN_COUNT).filter(|&i| active[i]) {
                for (o, d) in next[i].iter_mut().zip(block.drift.apply(&h[i])) {
                    *o += d;
                }
            }
            if self.config.noise_scale > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.config.seed, sample.id), bi as u64));
                // The stream is drawn for every token so that skips do not
                // shift the noise seen by active tokens.
                for (i, x) in next.iter_mut().enumerate() {
                    for o in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if active[i] {
                            *o += self.config.noise_scale * z;
                        }
                    }
                }
            }
            h = next;
            record(&h);
        }

        let logit = h[ANSWER_TOKEN][ACCUMULATOR] - DECISION_LEVEL;
        let mask: Vec<Modality> =
            (0..TOKEN_COUNT).map(|i| if i < GRID_TOKENS { Modality::Vision } else { Modality::Text }).collect();
        Ok(ForwardOutput {
            hidden: HiddenTrace {
                layer_count: n + 1,
                token_count: TOKEN_COUNT,
                dim,
                states,
                modality_mask: mask.clone(),
                sample_id: sample.id.to_string(),
                answer_token_index: Some(ANSWER_TOKEN),
            },
            attention: AttentionTrace {
                layer_count: n,
                head_count: heads,
                key_count: TOKEN_COUNT,
                query_token_ids: stored.to_vec(),
                rows,
                vision_key_mask: mask,
            },
            logit,
            prediction: logit > 0.0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::synth_dataset;
    use crate::trace::validate_trace;

    #[test]
    fn config_errors() {
        let bad = |f: fn(&mut ToyModelConfig)| {
            let mut c = ToyModelConfig::default();
            f(&mut c);
            matches!(build_model(c), Err(Error::InvalidArgument(_)))
        };
        assert!(bad(|c| c.copy_block = (0, 3)));
        assert!(bad(|c| c.copy_block = (6, 5)));
        assert!(bad(|c| c.copy_block = (5, 12)));
        assert!(bad(|c| c.dim = MIN_DIM - 1));
        assert!(bad(|c| c.head_count = 2));
        assert!(bad(|c| c.noise_scale = -1.0));
        assert!(bad(|c| c.noise_scale = f64::NAN));
        assert!(build_model(ToyModelConfig { dim: MIN_DIM, ..Default::default() }).is_ok());
    }

    #[test]
    fn weights_are_deterministic() {
        let c = ToyModelConfig { seed: 9, ..Default::default() };
        assert_eq!(build_model(c.clone()).unwrap(), build_model(c).unwrap());
        let other = ToyModelConfig { seed: 10, ..Default::default() };
        assert_ne!(build_model(other).unwrap(), build_model(ToyModelConfig { seed: 9, ..Default::default() }).unwrap());
    }

    #[test]
    fn trivial_skips_are_bit_identical() {
        for noise in [0.0, 0.05] {
            let m = build_model(ToyModelConfig { noise_scale: noise, ..Default::default() }).unwrap();
            for s in synth_dataset(1, 8).unwrap() {
                let base = m.forward(&s, ForwardMode::Baseline).unwrap();
                let late = m.forward(&s, ForwardMode::LateEntry(0)).unwrap();
                let early = m.forward(&s, ForwardMode::EarlyExit(12)).unwrap();
                assert_eq!(base.logit.to_bits(), late.logit.to_bits());
                assert_eq!(base, late);
                assert_eq!(base, early);
            }
        }
    }

    #[test]
    fn traces_are_valid() {
        let m = build_model(ToyModelConfig::default()).unwrap();
        let s = &synth_dataset(2, 1).unwrap()[0];
        for mode in [ForwardMode::Baseline, ForwardMode::LateEntry(6), ForwardMode::EarlyExit(3)] {
            let out = m.forward(s, mode).unwrap();
            assert!(validate_trace(&out.hidden, Some(&out.attention)).is_empty());
            for slot in 0..2 {
                for b in 0..12 {
                    for hd in 0..4 {
                        let sum: f64 = out.attention.row(slot, b, hd).iter().map(|&a| f64::from(a)).sum();
                        assert!((sum - 1.0).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn skipped_vision_is_raw_or_frozen() {
        let m = build_model(ToyModelConfig::default()).unwrap();
        let s = &synth_dataset(5, 1).unwrap()[0];
        let late = m.forward(s, ForwardMode::LateEntry(6)).unwrap().hidden;
        let early = m.forward(s, ForwardMode::EarlyExit(3)).unwrap().hidden;
        let base = m.forward(s, ForwardMode::Baseline).unwrap().hidden;
        for v in 0..GRID_TOKENS {
            for l in 0..=6 {
                assert_eq!(late.state(l, v), base.state(0, v));
            }
            for l in 3..=12 {
                assert_eq!(early.state(l, v), base.state(3, v));
            }
        }
        // Text positions and content are untouched up to the exit layer.
        for l in 0..=3 {
            for t in [QUERY_TOKEN, ANSWER_TOKEN] {
                assert_eq!(early.state(l, t), base.state(l, t));
            }
        }
        let out = m.forward(s, ForwardMode::EarlyExit(3)).unwrap().attention;
        for b in 3..12 {
            assert!(out.row(1, b, 0)[..GRID_TOKENS].iter().all(|&a| a == 0.0));
        }
    }

    #[test]
    fn out_of_range_skip() {
        let m = build_model(ToyModelConfig::default()).unwrap();
        let s = &synth_dataset(0, 1).unwrap()[0];
        assert!(matches!(m.forward(s, ForwardMode::LateEntry(13)), Err(Error::InvalidArgument(_))));
        assert!(matches!(m.forward(s, ForwardMode::EarlyExit(13)), Err(Error::InvalidArgument(_))));
    }
}
