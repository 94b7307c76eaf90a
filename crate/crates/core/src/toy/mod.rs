//! A hand-wired multimodal transformer with a known vision-to-text transfer
//! window, used to check that the analysis detects the window and that skips
//! outside it are harmless.
//!
//! Each sample is a grid of vision tokens carrying attributes, followed by a
//! query token naming one attribute and an answer token. Block 1 copies the
//! query attribute into the answer; inside the copy block the answer attends
//! to matching vision tokens and accumulates one unit per block. Elsewhere
//! blocks only add a small random drift to filler coordinates, so hidden
//! states stay nearly constant across those layers.

mod data;
mod model;

pub use data::{synth_dataset, SynthSample, ATTRIBUTE_COUNT, GRID_TOKENS};
pub use model::{build_model, ForwardMode, ForwardOutput, ToyModel, ToyModelConfig, MIN_DIM, MIN_HEADS};

use rayon::prelude::*;

use crate::attention::{mean_var_profile, var_profile, VarProfile};
use crate::error::{Error, Result};
use crate::redundancy::{redundancy_profile, RedundancyProfile};

/// Exact fraction of samples whose prediction matches the label.
pub fn evaluate_accuracy(model: &ToyModel, dataset: &[SynthSample], mode: ForwardMode) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset is empty".into()));
    }
    let correct = dataset
        .par_iter()
        .map(|s| model.forward(s, mode).map(|o| usize::from(o.prediction == s.label)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(correct as f64 / dataset.len() as f64)
}

/// Redundancy and answer-token VAR profiles of baseline passes over `dataset`.
pub fn baseline_profiles(model: &ToyModel, dataset: &[SynthSample], t: f64) -> Result<(RedundancyProfile, VarProfile)> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("dataset is empty".into()));
    }
    let outputs = dataset.par_iter().map(|s| model.forward(s, ForwardMode::Baseline)).collect::<Result<Vec<_>>>()?;
    let traces: Vec<_> = outputs.iter().map(|o| o.hidden.clone()).collect();
    let vars = outputs.iter().map(|o| var_profile(&o.attention, model.answer_token())).collect::<Result<Vec<_>>>()?;
    Ok((redundancy_profile(&traces, t)?, mean_var_profile(&vars)?))
}
