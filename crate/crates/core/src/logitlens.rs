//! Logit lens and iterative multi-token intermediate decoding.
//!
//! At layer `i` the lens distribution is `softmax(W_u · norm(h_i))`, using the
//! model's own final norm. Generation is driven solely by the final layer's
//! greedy token; at every step the lens is applied to each tracked layer at
//! the last position, which yields one token per layer per step. Concatenating
//! a layer's tokens gives that layer's text output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::lexicon::LanguageCode;
use crate::refmodel::{argmax, softmax, ModelBundle, ModelError};

/// Default decoding budget for single-word answers.
pub const DEFAULT_MAX_STEPS: usize = 8;
/// Default number of trailing layers to track.
pub const DEFAULT_TRACKED_LAST: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("layer {layer} is not tracked in this trace")]
    UntrackedLayer { layer: usize },
}

/// Strictly increasing set of 1-based layer indices that always includes
/// the output layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TrackedLayers(Vec<usize>);

impl TrackedLayers {
    pub fn new(layers: Vec<usize>) -> Result<Self, LensError> {
        if layers.is_empty() {
            return Err(LensError::Argument("no tracked layers".into()));
        }
        if layers[0] == 0 {
            return Err(LensError::Argument("layers are 1-based".into()));
        }
        if layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(LensError::Argument(
                "tracked layers must be strictly increasing".into(),
            ));
        }
        Ok(Self(layers))
    }

    /// Checks the set against a model depth: all layers within `1..=n_layers`
    /// and the output layer included.
    pub fn for_depth(layers: Vec<usize>, n_layers: usize) -> Result<Self, LensError> {
        let t = Self::new(layers)?;
        t.check_depth(n_layers)?;
        Ok(t)
    }

    pub fn check_depth(&self, n_layers: usize) -> Result<(), LensError> {
        if self.output_layer() != n_layers {
            return Err(LensError::Argument(format!(
                "tracked layers must end at the output layer {n_layers}, got {:?}",
                self.0
            )));
        }
        Ok(())
    }

    /// The last `count` layers of an `n_layers`-deep model.
    pub fn last(count: usize, n_layers: usize) -> Result<Self, LensError> {
        if count == 0 {
            return Err(LensError::Argument("must track at least one layer".into()));
        }
        let first = n_layers.saturating_sub(count) + 1;
        Self::new((first..=n_layers).collect())
    }

    /// Parses `last:N`, `all`, or a comma list of layers and `a-b` ranges.
    pub fn parse(spec: &str, n_layers: usize) -> Result<Self, LensError> {
        let spec = spec.trim();
        if spec == "all" {
            return Self::last(n_layers, n_layers);
        }
        if let Some(n) = spec.strip_prefix("last:") {
            let n = n
                .parse()
                .map_err(|_| LensError::Argument(format!("bad layer count in {spec:?}")))?;
            return Self::last(n, n_layers);
        }
        let mut layers = Vec::new();
        for part in spec.split(',').map(str::trim) {
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| LensError::Argument(format!("bad layer {s:?} in {spec:?}")))
            };
            match part.split_once('-') {
                Some((a, b)) => layers.extend(parse(a)?..=parse(b)?),
                None => layers.push(parse(part)?),
            }
        }
        Self::for_depth(layers, n_layers)
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn output_layer(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.binary_search(&layer).is_ok()
    }

    /// Tracked layers strictly below the output layer.
    pub fn intermediate(&self) -> &[usize] {
        &self.0[..self.0.len() - 1]
    }
}

impl TryFrom<Vec<usize>> for TrackedLayers {
    type Error = LensError;
    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<TrackedLayers> for Vec<usize> {
    fn from(t: TrackedLayers) -> Self {
        t.0
    }
}

impl fmt::Display for TrackedLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for TrackedLayers {
    type Err = LensError;
    /// Explicit list form only; use [`TrackedLayers::parse`] for `last:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let layers = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| LensError::Argument(format!("bad layer {p:?}")))
            })
            .collect::<Result<Vec<usize>, _>>()?;
        Self::new(layers)
    }
}

/// Lens readout of one layer at one decoding step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerToken {
    pub token: u32,
    pub text: String,
    /// Top-1 probability under the lens distribution.
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensStep {
    pub step_index: usize,
    pub final_token: u32,
    pub per_layer: BTreeMap<usize, LayerToken>,
}

/// One decoded instance: a prompt, its language pair and concept, and the
/// per-step lens readouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTrace {
    pub instance_id: String,
    pub concept_id: String,
    pub source_lang: LanguageCode,
    pub target_lang: LanguageCode,
    pub prompt: String,
    pub steps: Vec<LensStep>,
    /// Language tags produced outside this toolkit, keyed by layer. Only
    /// consulted when external LID is requested.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub external_tags: BTreeMap<usize, String>,
}

/// `softmax(W_u · norm(h))` with the bundle's final-norm parameters.
pub fn lens_distribution(
    h: ArrayView1<f64>,
    bundle: &ModelBundle,
) -> Result<Array1<f64>, LensError> {
    let logits = bundle.head_logits(h)?;
    Ok(softmax(logits.view()))
}

/// Greedy readout of the lens distribution; ties go to the lowest id.
pub fn lens_token(h: ArrayView1<f64>, bundle: &ModelBundle) -> Result<(u32, f64), LensError> {
    let logits = bundle.head_logits(h)?;
    let id = argmax(logits.view());
    let probs = softmax(logits.view());
    Ok((id, probs[id as usize]))
}

/// Greedy decoding driven by the final layer, with the lens applied to each
/// tracked layer at every step.
///
/// Step `t` sees the prompt plus the final-layer tokens of steps `0..t`.
/// Decoding stops before a token in `stop_tokens` would be emitted, or after
/// `max_steps` steps; the stop step itself is not recorded, so every tracked
/// layer has exactly as many entries as the final output.
pub fn iterative_lens_decode(
    bundle: &ModelBundle,
    prompt_tokens: &[u32],
    tracked: &TrackedLayers,
    max_steps: usize,
    stop_tokens: &[u32],
) -> Result<Vec<LensStep>, LensError> {
    if max_steps < 1 {
        return Err(LensError::Argument("max_steps must be at least 1".into()));
    }
    tracked.check_depth(bundle.n_layers())?;
    bundle.check_room(prompt_tokens, max_steps)?;
    let tokenizer = bundle.tokenizer();
    let mut context = prompt_tokens.to_vec();
    let mut steps = Vec::new();
    for step_index in 0..max_steps {
        let (hidden, logits) = bundle.forward(&context)?;
        let final_token = argmax(logits.view());
        if stop_tokens.contains(&final_token) {
            break;
        }
        let mut per_layer = BTreeMap::new();
        for &layer in tracked.layers() {
            let h = hidden.last(layer).expect("layer within depth");
            let (token, prob) = lens_token(h, bundle)?;
            per_layer.insert(
                layer,
                LayerToken {
                    token,
                    text: tokenizer.token_text(token).to_string(),
                    prob,
                },
            );
        }
        steps.push(LensStep {
            step_index,
            final_token,
            per_layer,
        });
        context.push(final_token);
    }
    Ok(steps)
}

/// Text output of `layer`: its token texts concatenated across all steps.
pub fn layer_output(trace: &InstanceTrace, layer: usize) -> Result<String, LensError> {
    let mut out = String::new();
    for step in &trace.steps {
        let tok = step
            .per_layer
            .get(&layer)
            .ok_or(LensError::UntrackedLayer { layer })?;
        out.push_str(&tok.text);
    }
    Ok(out)
}
