//! Visual attention ratio: per layer, the attention mass a query token puts
//! on vision keys, summed over heads.
//!
//! Block `b` (0-based in the attention trace) produces hidden layer `b + 1`,
//! so its ratio is reported at layer `b + 1`, aligned with the redundancy
//! profile entry that compares layers `b` and `b + 1`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::trace::{AttentionTrace, Modality, ROW_SUM_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarEntry {
    pub layer: usize,
    /// Sum over heads, in `[0, head_count]`.
    pub var_raw: f64,
    /// `var_raw / head_count`, in `[0, 1]`.
    pub var_normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarProfile {
    /// Absent when averaging samples whose query positions differ.
    pub query_token: Option<usize>,
    pub head_count: usize,
    /// Absent for profiles loaded from CSV.
    pub vision_key_count: Option<usize>,
    /// Number of samples averaged into this profile.
    pub samples: usize,
    /// Ordered by layer.
    pub entries: Vec<VarEntry>,
}

impl VarProfile {
    pub fn entry(&self, layer: usize) -> Option<&VarEntry> {
        self.entries.iter().find(|e| e.layer == layer)
    }
}

fn mass_on(attention: &AttentionTrace, slot: usize, block: usize, modality: Modality) -> Result<f64> {
    let mut total = 0.0;
    for head in 0..attention.head_count {
        let row = attention.row(slot, block, head);
        let sum: f64 = row.iter().map(|&a| f64::from(a)).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::Validation(format!(
                "attention row (query slot {slot}, block {block}, head {head}) sums to {sum}"
            )));
        }
        total += row
            .iter()
            .zip(&attention.vision_key_mask)
            .filter(|(_, &m)| m == modality)
            .map(|(&a, _)| f64::from(a))
            .sum::<f64>();
    }
    Ok(total)
}

fn slot_of(attention: &AttentionTrace, query_token: usize) -> Result<usize> {
    attention.query_slot(query_token).ok_or(Error::MissingQuery(query_token))
}

pub fn var_profile(attention: &AttentionTrace, query_token: usize) -> Result<VarProfile> {
    let slot = slot_of(attention, query_token)?;
    let vision_key_count = attention.vision_key_mask.iter().filter(|&&m| m == Modality::Vision).count();
    if vision_key_count == 0 {
        return Err(Error::EmptyModality(Modality::Vision.to_string()));
    }
    let h = attention.head_count as f64;
    let entries = (0..attention.layer_count)
        .map(|block| {
            let var_raw = mass_on(attention, slot, block, Modality::Vision)?;
            Ok(VarEntry { layer: block + 1, var_raw, var_normalized: var_raw / h })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VarProfile {
        query_token: Some(query_token),
        head_count: attention.head_count,
        vision_key_count: Some(vision_key_count),
        samples: 1,
        entries,
    })
}

/// Head-summed attention mass on text keys per layer; complements the ratio.
pub fn text_attention_sum(attention: &AttentionTrace, query_token: usize) -> Result<Vec<f64>> {
    let slot = slot_of(attention, query_token)?;
    (0..attention.layer_count).map(|b| mass_on(attention, slot, b, Modality::Text)).collect()
}

/// Per-layer mean over samples with identical layer sets and head counts.
pub fn mean_var_profile(profiles: &[VarProfile]) -> Result<VarProfile> {
    let first = profiles.first().ok_or_else(|| Error::EmptyInput("no VAR profiles".into()))?;
    let layers: Vec<usize> = first.entries.iter().map(|e| e.layer).collect();
    for p in profiles {
        let these: Vec<usize> = p.entries.iter().map(|e| e.layer).collect();
        if these != layers || p.head_count != first.head_count {
            return Err(Error::ShapeMismatch("VAR profiles differ in layer range or head count".into()));
        }
    }
    let n = profiles.iter().map(|p| p.samples).sum::<usize>();
    let entries = layers
        .iter()
        .enumerate()
        .map(|(i, &layer)| {
            let mut raw: Vec<f64> = profiles.iter().map(|p| p.entries[i].var_raw * p.samples as f64).collect();
            raw.sort_by(f64::total_cmp);
            let var_raw = raw.iter().sum::<f64>() / n as f64;
            VarEntry { layer, var_raw, var_normalized: var_raw / first.head_count as f64 }
        })
        .collect();
    let query_token = first.query_token.filter(|q| profiles.iter().all(|p| p.query_token == Some(*q)));
    Ok(VarProfile {
        query_token,
        head_count: first.head_count,
        vision_key_count: first.vision_key_count,
        samples: n,
        entries,
    })
}

pub const VAR_CSV_COLUMNS: [&str; 5] = ["layer", "query_token", "var_raw", "var_normalized", "head_count"];

pub fn write_var_csv<W: Write>(profile: &VarProfile, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(VAR_CSV_COLUMNS).map_err(io)?;
    let query = profile.query_token.map_or_else(String::new, |q| q.to_string());
    for e in &profile.entries {
        w.write_record([
            e.layer.to_string(),
            query.clone(),
            e.var_raw.to_string(),
            e.var_normalized.to_string(),
            profile.head_count.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use Modality::{Text, Vision};

    fn attention(
        mask: Vec<Modality>,
        heads: usize,
        blocks: usize,
        row: impl Fn(usize, usize) -> Vec<f32>,
    ) -> AttentionTrace {
        let mut rows = Vec::new();
        for b in 0..blocks {
            for h in 0..heads {
                rows.extend(row(b, h));
            }
        }
        AttentionTrace {
            layer_count: blocks,
            head_count: heads,
            key_count: mask.len(),
            query_token_ids: vec![mask.len() - 1],
            rows,
            vision_key_mask: mask,
        }
    }

    #[test]
    fn uniform_single_head() {
        let mask = vec![Vision, Vision, Vision, Text, Text];
        let a = attention(mask, 1, 3, |_, _| vec![0.2; 5]);
        let p = var_profile(&a, 4).unwrap();
        assert_eq!(p.entries.iter().map(|e| e.layer).collect::<Vec<_>>(), vec![1, 2, 3]);
        for e in &p.entries {
            assert!((e.var_raw - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn extremes() {
        let mask = vec![Vision, Vision, Text];
        let all_vision = attention(mask.clone(), 4, 2, |_, _| vec![0.5, 0.5, 0.0]);
        let p = var_profile(&all_vision, 2).unwrap();
        assert!(p.entries.iter().all(|e| e.var_raw == 4.0 && e.var_normalized == 1.0));
        let all_text = attention(mask, 4, 2, |_, _| vec![0.0, 0.0, 1.0]);
        assert!(var_profile(&all_text, 2).unwrap().entries.iter().all(|e| e.var_raw == 0.0));
    }

    #[test]
    fn complements_text_mass() {
        let mask = vec![Vision, Text, Vision, Text];
        let a = attention(mask, 3, 2, |b, h| {
            let w = [0.1 + 0.1 * h as f32, 0.2, 0.3, 0.4 - 0.1 * h as f32 - 0.05 * b as f32];
            let s: f32 = w.iter().sum();
            w.iter().map(|x| x / s).collect()
        });
        let var = var_profile(&a, 3).unwrap();
        let text = text_attention_sum(&a, 3).unwrap();
        for (e, t) in var.entries.iter().zip(text) {
            assert!((e.var_raw + t - 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn errors() {
        let a = attention(vec![Text, Text], 1, 1, |_, _| vec![0.5, 0.5]);
        assert!(matches!(var_profile(&a, 0), Err(Error::MissingQuery(0))));
        assert!(matches!(var_profile(&a, 1), Err(Error::EmptyModality(_))));
        let scaled = attention(vec![Vision, Text], 1, 1, |_, _| vec![1.0, 1.0]);
        assert!(matches!(var_profile(&scaled, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn averaging() {
        let mask = vec![Vision, Text];
        let a = var_profile(&attention(mask.clone(), 2, 1, |_, _| vec![1.0, 0.0]), 1).unwrap();
        let b = var_profile(&attention(mask, 2, 1, |_, _| vec![0.0, 1.0]), 1).unwrap();
        let m = mean_var_profile(&[a, b]).unwrap();
        assert_eq!(m.samples, 2);
        assert_eq!(m.query_token, Some(1));
        assert_eq!(m.entries[0].var_raw, 1.0);
        assert_eq!(m.entries[0].var_normalized, 0.5);
    }
}
