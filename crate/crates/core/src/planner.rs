//! Skip planning from measured redundancy and cross-attention.
//!
//! A layer `l` of the skipped modality is flagged by three comparisons:
//!
//! ```text
//! geometric_ok  <=>  D_l <= eps_geo
//! proximal_ok   <=>  p_l >= 1 - eps_prox
//! var_ok        <=>  VAR_l / H <= tau_var
//! ```
//!
//! Late entry at `l` needs all three flags on every measured layer `<= l`;
//! layer 0 (no skipping) is always viable. Early exit at `l` needs only
//! `var_ok`, on every measured layer `>= l`. Both rules range over the layers
//! present in the profile, so sparse profiles are planned on their own grid.

use std::io::{Read, Write};

use serde::Serialize;

use crate::attention::{VarEntry, VarProfile, VAR_CSV_COLUMNS};
use crate::error::{Error, Result};
use crate::redundancy::{ProfileEntry, RedundancyProfile, PROFILE_CSV_COLUMNS};
use crate::trace::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Thresholds {
    pub eps_geo: f64,
    pub eps_prox: f64,
    pub tau_var: f64,
    /// Proximity threshold the profile was measured with.
    pub t: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { eps_geo: 0.03, eps_prox: 0.10, tau_var: 0.05, t: 0.05 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("eps_geo", self.eps_geo, 0.0, 2.0),
            ("eps_prox", self.eps_prox, 0.0, 1.0),
            ("tau_var", self.tau_var, 0.0, 1.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo && v <= hi) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [{lo}, {hi}]")));
            }
        }
        if !(self.t > 0.0 && self.t < 2.0) {
            return Err(Error::InvalidArgument(format!("t = {} outside (0, 2)", self.t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LayerFlags {
    pub layer: usize,
    pub mean_cos_dist: f64,
    pub proximal_frac: f64,
    pub var_normalized: f64,
    pub geometric_ok: bool,
    pub proximal_ok: bool,
    pub var_ok: bool,
}

impl LayerFlags {
    pub fn all_ok(&self) -> bool {
        self.geometric_ok && self.proximal_ok && self.var_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerConditions {
    pub modality: Modality,
    pub thresholds: Thresholds,
    /// Ordered by layer.
    pub layers: Vec<LayerFlags>,
}

/// Flags every profile layer of `modality`. The VAR profile must cover
/// exactly the same layers.
pub fn evaluate_conditions(
    profile: &RedundancyProfile,
    var: &VarProfile,
    thresholds: Thresholds,
    modality: Modality,
) -> Result<LayerConditions> {
    thresholds.validate()?;
    if (profile.t - thresholds.t).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "profile measured at t = {}, thresholds use t = {}",
            profile.t, thresholds.t
        )));
    }
    let layers = profile.layers_for(modality);
    if layers.is_empty() {
        return Err(Error::EmptyModality(modality.to_string()));
    }
    let var_layers: Vec<usize> = var.entries.iter().map(|e| e.layer).collect();
    if var_layers != layers {
        return Err(Error::ShapeMismatch(format!("profile layers {layers:?} differ from VAR layers {var_layers:?}")));
    }
    let flags = layers
        .iter()
        .zip(&var.entries)
        .map(|(&layer, v)| {
            let e = profile.entry(layer, modality).expect("layer listed for modality");
            LayerFlags {
                layer,
                mean_cos_dist: e.mean_cos_dist,
                proximal_frac: e.proximal_frac,
                var_normalized: v.var_normalized,
                geometric_ok: e.mean_cos_dist <= thresholds.eps_geo,
                proximal_ok: e.proximal_frac >= 1.0 - thresholds.eps_prox,
                var_ok: v.var_normalized <= thresholds.tau_var,
            }
        })
        .collect();
    Ok(LayerConditions { modality, thresholds, layers: flags })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkipPlan {
    pub modality: Modality,
    /// Deepest viable entry layer; 0 means the modality enters at the start.
    pub late_entry_layer: usize,
    /// Shallowest viable exit layer, if any.
    pub early_exit_layer: Option<usize>,
    /// Every viable entry layer, including 0.
    pub late_entry_viable: Vec<usize>,
    pub early_exit_viable: Vec<usize>,
    pub thresholds: Thresholds,
    pub rationale: Vec<LayerFlags>,
}

pub fn plan_skips(conditions: &LayerConditions) -> SkipPlan {
    let flags = &conditions.layers;
    let mut late_entry_viable = vec![0];
    for (i, f) in flags.iter().enumerate() {
        if flags[..=i].iter().all(LayerFlags::all_ok) {
            late_entry_viable.push(f.layer);
        }
    }
    let early_exit_viable: Vec<usize> =
        flags.iter().enumerate().filter(|(i, _)| flags[*i..].iter().all(|f| f.var_ok)).map(|(_, f)| f.layer).collect();
    SkipPlan {
        modality: conditions.modality,
        late_entry_layer: *late_entry_viable.last().expect("0 is always viable"),
        early_exit_layer: early_exit_viable.first().copied(),
        late_entry_viable,
        early_exit_viable,
        thresholds: conditions.thresholds,
        rationale: flags.clone(),
    }
}

pub const RATIONALE_CSV_COLUMNS: [&str; 10] = [
    "layer",
    "modality",
    "mean_cos_dist",
    "proximal_frac",
    "var_normalized",
    "geometric_ok",
    "proximal_ok",
    "var_ok",
    "late_entry_viable",
    "early_exit_viable",
];

pub fn write_rationale_csv<W: Write>(plan: &SkipPlan, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(RATIONALE_CSV_COLUMNS).map_err(io)?;
    for f in &plan.rationale {
        w.write_record([
            f.layer.to_string(),
            plan.modality.to_string(),
            f.mean_cos_dist.to_string(),
            f.proximal_frac.to_string(),
            f.var_normalized.to_string(),
            f.geometric_ok.to_string(),
            f.proximal_ok.to_string(),
            f.var_ok.to_string(),
            plan.late_entry_viable.contains(&f.layer).to_string(),
            plan.early_exit_viable.contains(&f.layer).to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// CSV records with their 1-based line numbers, header row removed if present.
fn records<R: Read>(source: R, header: &[&str]) -> Result<Vec<(u64, csv::StringRecord)>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(source);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::FormatRejected(format!("row {}: {e}", i + 1)))?;
        let line = rec.position().map_or(i as u64 + 1, |p| p.line());
        if out.is_empty() && i == 0 && rec.get(0).is_some_and(|f| f.parse::<usize>().is_err()) {
            if rec.iter().ne(header.iter().copied()) {
                return Err(Error::FormatRejected(format!(
                    "row {line}: header {:?} does not match {header:?}",
                    rec.iter().collect::<Vec<_>>()
                )));
            }
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::FormatRejected(format!("row {line}: {} columns, expected {}", rec.len(), header.len())));
        }
        out.push((line, rec));
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("CSV has no data rows".into()));
    }
    Ok(out)
}

fn field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    line: u64,
    col: usize,
    header: &[&str],
    accept: impl Fn(&T) -> bool,
) -> Result<T> {
    let raw = &rec[col];
    raw.parse::<T>().ok().filter(|v| accept(v)).ok_or_else(|| {
        Error::FormatRejected(format!("row {line}, column {} ({}): invalid value {raw:?}", col + 1, header[col]))
    })
}

/// Reads a profile CSV in the schema written by the analysis step.
pub fn load_profile_csv<R: Read>(source: R) -> Result<RedundancyProfile> {
    let h = &PROFILE_CSV_COLUMNS;
    let mut entries: Vec<ProfileEntry> = Vec::new();
    let mut t_common: Option<f64> = None;
    for (line, rec) in records(source, h)? {
        let layer = field::<usize>(&rec, line, 0, h, |&l| l >= 1)?;
        let modality = Modality::parse(&rec[1]).ok_or_else(|| {
            Error::FormatRejected(format!("row {line}, column 2 (modality): invalid value {:?}", &rec[1]))
        })?;
        let mean_cos_dist = field::<f64>(&rec, line, 2, h, |v| (0.0..=2.0).contains(v))?;
        let proximal_frac = field::<f64>(&rec, line, 3, h, |v| (0.0..=1.0).contains(v))?;
        let t = field::<f64>(&rec, line, 4, h, |v| *v > 0.0 && *v < 2.0)?;
        let n_tokens = field::<usize>(&rec, line, 5, h, |&n| n >= 1)?;
        if t_common.is_some_and(|c| c != t) {
            return Err(Error::FormatRejected(format!("row {line}, column 5 (t): differs from earlier rows")));
        }
        t_common = Some(t);
        if entries.iter().any(|e| e.layer == layer && e.modality == modality) {
            return Err(Error::FormatRejected(format!("row {line}: duplicate ({layer}, {modality})")));
        }
        entries.push(ProfileEntry { layer, modality, mean_cos_dist, proximal_frac, t, n_tokens, per_sample: None });
    }
    entries.sort_by_key(|e| (e.layer, e.modality));
    Ok(RedundancyProfile { t: t_common.expect("nonempty"), entries, sample_count: None })
}

/// Reads a VAR CSV in the schema written by the analysis step.
pub fn load_var_csv<R: Read>(source: R) -> Result<VarProfile> {
    let h = &VAR_CSV_COLUMNS;
    let mut entries: Vec<VarEntry> = Vec::new();
    let mut head_count: Option<usize> = None;
    let mut query_token: Option<Option<usize>> = None;
    for (line, rec) in records(source, h)? {
        let layer = field::<usize>(&rec, line, 0, h, |&l| l >= 1)?;
        let query = if rec[1].is_empty() { None } else { Some(field::<usize>(&rec, line, 1, h, |_| true)?) };
        let heads = field::<usize>(&rec, line, 4, h, |&n| n >= 1)?;
        let var_raw = field::<f64>(&rec, line, 2, h, |v| *v >= 0.0 && *v <= heads as f64 + 1e-9)?;
        let var_normalized = field::<f64>(&rec, line, 3, h, |v| {
            (0.0..=1.0 + 1e-12).contains(v) && (v * heads as f64 - var_raw).abs() <= 1e-6 * heads as f64
        })?;
        if head_count.is_some_and(|c| c != heads) {
            return Err(Error::FormatRejected(format!("row {line}, column 5 (head_count): differs from earlier rows")));
        }
        head_count = Some(heads);
        query_token = Some(match query_token {
            Some(q) if q != query => None,
            _ => query,
        });
        if entries.iter().any(|e| e.layer == layer) {
            return Err(Error::FormatRejected(format!("row {line}: duplicate layer {layer}")));
        }
        entries.push(VarEntry { layer, var_raw, var_normalized });
    }
    entries.sort_by_key(|e| e.layer);
    Ok(VarProfile {
        query_token: query_token.flatten(),
        head_count: head_count.expect("nonempty"),
        vision_key_count: None,
        samples: 1,
        entries,
    })
}

/// Profile and VAR read from their two CSV files.
pub fn load_external_metrics<P: Read, V: Read>(profile: P, var: V) -> Result<(RedundancyProfile, VarProfile)> {
    Ok((load_profile_csv(profile)?, load_var_csv(var)?))
}

/// Published per-layer metrics of LLaVA models on general VQA, usable as
/// planner regression inputs.
///
/// The source reports cross-attention only qualitatively, so VAR is encoded
/// at its extremes: 0 where it is described as minimal, 1 otherwise.
pub mod fixtures {
    use super::*;

    /// Metrics at the listed layers plus the layers whose accuracy the source
    /// marks as preserved.
    #[derive(Debug, Clone)]
    pub struct PublishedMetrics {
        pub model: &'static str,
        pub profile: RedundancyProfile,
        pub var: VarProfile,
        /// `(layer, accuracy)` with layer 0 the unskipped baseline.
        pub accuracy: Vec<(usize, f64)>,
        pub preserved: Vec<usize>,
    }

    fn entry(layer: usize, modality: Modality, d: f64, p: f64) -> ProfileEntry {
        ProfileEntry { layer, modality, mean_cos_dist: d, proximal_frac: p, t: 0.05, n_tokens: 576, per_sample: None }
    }

    fn var(levels: &[(usize, f64)]) -> VarProfile {
        VarProfile {
            query_token: None,
            head_count: 1,
            vision_key_count: None,
            samples: 1,
            entries: levels.iter().map(|&(layer, v)| VarEntry { layer, var_raw: v, var_normalized: v }).collect(),
        }
    }

    fn late_entry(model: &'static str, rows: [(usize, f64, f64); 3], accuracy: [f64; 4]) -> PublishedMetrics {
        PublishedMetrics {
            model,
            profile: RedundancyProfile {
                t: 0.05,
                entries: rows.iter().map(|&(l, d, p)| entry(l, Modality::Vision, d, p)).collect(),
                sample_count: None,
            },
            // Cross-attention is minimal in the early layers and not at 8 or 12.
            var: var(&[(4, 0.0), (8, 1.0), (12, 1.0)]),
            accuracy: [0, 4, 8, 12].into_iter().zip(accuracy).collect(),
            preserved: vec![0, 4],
        }
    }

    /// Vision late entry, LLaVA 1.5 7B.
    pub fn late_entry_llava15_7b() -> PublishedMetrics {
        late_entry(
            "LLaVA 1.5 7B",
            [(4, 0.025, 0.972), (8, 0.073, 0.267), (12, 0.060, 0.271)],
            [0.564, 0.553, 0.370, 0.261],
        )
    }

    /// Vision late entry, LLaVA 1.5 13B.
    pub fn late_entry_llava15_13b() -> PublishedMetrics {
        late_entry(
            "LLaVA 1.5 13B",
            [(4, 0.025, 0.965), (8, 0.066, 0.273), (12, 0.058, 0.403)],
            [0.782, 0.779, 0.747, 0.501],
        )
    }

    /// Early exit, LLaVA 1.5 7B. Cross-attention is moderate at layer 20 and
    /// minimal from 24 on.
    pub fn early_exit_llava15_7b() -> PublishedMetrics {
        let rows =
            [(20, 0.038, 0.028, 0.786, 0.939), (24, 0.026, 0.016, 0.954, 0.992), (28, 0.023, 0.017, 0.995, 0.997)];
        let mut entries = Vec::new();
        for (l, dv, dt, pv, pt) in rows {
            entries.push(entry(l, Modality::Text, dt, pt));
            entries.push(entry(l, Modality::Vision, dv, pv));
        }
        PublishedMetrics {
            model: "LLaVA 1.5 7B",
            profile: RedundancyProfile { t: 0.05, entries, sample_count: None },
            var: var(&[(20, 1.0), (24, 0.0), (28, 0.0)]),
            accuracy: vec![(20, 0.582), (24, 0.584), (28, 0.581)],
            preserved: vec![20, 24, 28],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn synthetic(flags: &[(bool, bool, bool)]) -> LayerConditions {
        LayerConditions {
            modality: Modality::Vision,
            thresholds: Thresholds::default(),
            layers: flags
                .iter()
                .enumerate()
                .map(|(i, &(g, p, v))| LayerFlags {
                    layer: i + 1,
                    mean_cos_dist: 0.0,
                    proximal_frac: 1.0,
                    var_normalized: 0.0,
                    geometric_ok: g,
                    proximal_ok: p,
                    var_ok: v,
                })
                .collect(),
        }
    }

    #[test]
    fn late_entry_takes_the_longest_ok_prefix() {
        let ok = (true, true, true);
        let plan = plan_skips(&synthetic(&[ok, ok, ok, ok, (true, false, true), ok]));
        assert_eq!(plan.late_entry_layer, 4);
        assert_eq!(plan.late_entry_viable, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn nothing_viable() {
        let bad = (false, false, false);
        let plan = plan_skips(&synthetic(&[bad, bad, bad]));
        assert_eq!(plan.late_entry_layer, 0);
        assert_eq!(plan.early_exit_layer, None);
    }

    #[test]
    fn early_exit_needs_only_attention() {
        let mut flags = vec![(false, false, false); 30];
        for f in flags.iter_mut().skip(23) {
            f.2 = true;
        }
        let plan = plan_skips(&synthetic(&flags));
        assert_eq!(plan.early_exit_layer, Some(24));
    }

    #[test]
    fn seven_b_layer_flags() {
        let m = late_entry_llava15_7b();
        let c = evaluate_conditions(&m.profile, &m.var, Thresholds::default(), Modality::Vision).unwrap();
        assert!(c.layers[0].all_ok());
        assert!(!c.layers[1].geometric_ok && !c.layers[1].proximal_ok);
    }

    #[test]
    fn published_late_entry_layers() {
        for m in [late_entry_llava15_7b(), late_entry_llava15_13b()] {
            let c = evaluate_conditions(&m.profile, &m.var, Thresholds::default(), Modality::Vision).unwrap();
            assert_eq!(plan_skips(&c).late_entry_viable, m.preserved, "{}", m.model);
        }
    }

    #[test]
    fn published_early_exit_layers() {
        let m = early_exit_llava15_7b();
        let c = evaluate_conditions(&m.profile, &m.var, Thresholds::default(), Modality::Vision).unwrap();
        let plan = plan_skips(&c);
        assert_eq!(plan.early_exit_viable, vec![24, 28]);
        assert_eq!(plan.early_exit_layer, Some(24));
    }

    #[test]
    fn loads_profile_rows_with_and_without_header() {
        let bare = load_profile_csv("4,VISION,0.025,0.972,0.05,576\n".as_bytes()).unwrap();
        let e = &bare.entries[0];
        assert_eq!(
            (e.layer, e.modality, e.mean_cos_dist, e.proximal_frac, e.n_tokens),
            (4, Modality::Vision, 0.025, 0.972, 576)
        );
        let headed = load_profile_csv(
            "layer,modality,mean_cos_dist,proximal_frac,t,n_tokens\n4,VISION,0.025,0.972,0.05,576\n".as_bytes(),
        )
        .unwrap();
        assert_eq!(bare, headed);
    }

    #[test]
    fn rejects_bad_csv() {
        assert!(matches!(load_profile_csv("".as_bytes()), Err(Error::EmptyInput(_))));
        let err = load_profile_csv("4,VISION,0.025,1.3,0.05,576\n".as_bytes()).unwrap_err();
        match err {
            Error::FormatRejected(msg) => assert!(msg.contains("row 1, column 4"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_var_csv("1,,0.5,0.9,1\n".as_bytes()), Err(Error::FormatRejected(_))));
        assert!(matches!(load_profile_csv("4,AUDIO,0.1,0.5,0.05,3\n".as_bytes()), Err(Error::FormatRejected(_))));
    }

    #[test]
    fn layer_mismatch_is_a_shape_error() {
        let m = late_entry_llava15_7b();
        let mut var = m.var.clone();
        var.entries.pop();
        assert!(matches!(
            evaluate_conditions(&m.profile, &var, Thresholds::default(), Modality::Vision),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn csv_roundtrip_preserves_conditions() {
        let m = early_exit_llava15_7b();
        let mut p = Vec::new();
        crate::redundancy::write_profile_csv(&m.profile, &mut p).unwrap();
        let mut v = Vec::new();
        crate::attention::write_var_csv(&m.var, &mut v).unwrap();
        let (profile, var) = load_external_metrics(p.as_slice(), v.as_slice()).unwrap();
        let a = evaluate_conditions(&m.profile, &m.var, Thresholds::default(), Modality::Vision).unwrap();
        let b = evaluate_conditions(&profile, &var, Thresholds::default(), Modality::Vision).unwrap();
        assert_eq!(a, b);
    }
}
