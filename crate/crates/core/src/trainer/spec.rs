//! Experiment specification: a TOML document whose every key has a default.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::{graph_node_count, ShuffleMode, TreeVariant};
use crate::nnet::{AdamConfig, LossConfig, ModelConfig, Reduction};
use crate::supervision::{AuxKind, NoiseKind, PairDirection, PairSortKey, ScratchpadVariant};
use crate::tokenizer::{Layout, QueryMode, Vocabulary};

/// Samples per reporting "epoch" in online mode.
pub const EPOCH_SAMPLES: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Inclusive integer range, written as `5` or `[2, 5]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub fn fixed(v: usize) -> Self {
        Self { min: v, max: v }
    }

    pub fn label(&self) -> String {
        if self.min == self.max {
            self.min.to_string()
        } else {
            format!("{}-{}", self.min, self.max)
        }
    }
}

impl Serialize for IntRange {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.min == self.max {
            s.serialize_u64(self.min as u64)
        } else {
            [self.min, self.max].serialize(s)
        }
    }
}

impl<'de> Deserialize<'de> for IntRange {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(usize),
            Two([usize; 2]),
        }
        Ok(match Raw::deserialize(d)? {
            Raw::One(v) => Self::fixed(v),
            Raw::Two([min, max]) => Self { min, max },
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VocabPolicy {
    /// The node universe is exactly the largest graph's node count.
    #[default]
    Graph,
    /// A fixed universe of `graph.vocab_size` labels.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TreeSpec {
    #[default]
    None,
    DAry,
    Split,
}

impl TreeSpec {
    pub fn variant(self) -> Option<TreeVariant> {
        match self {
            TreeSpec::None => None,
            TreeSpec::DAry => Some(TreeVariant::DAry),
            TreeSpec::Split => Some(TreeVariant::Split),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSpec {
    pub d: IntRange,
    pub m: IntRange,
    pub vocab: VocabPolicy,
    pub vocab_size: usize,
    pub shuffle: ShuffleMode,
    pub query: QueryMode,
    pub layout: Layout,
    pub tree: TreeSpec,
    /// Fraction of path-star examples mixed into tree training streams.
    pub path_mix: f64,
}

impl Default for GraphSpec {
    fn default() -> Self {
        Self {
            d: IntRange::fixed(2),
            m: IntRange::fixed(5),
            vocab: VocabPolicy::Graph,
            vocab_size: 100,
            shuffle: ShuffleMode::EdgeWise,
            query: QueryMode::Standard,
            layout: Layout::QBeforeG,
            tree: TreeSpec::None,
            path_mix: 0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    None,
    /// Independent per-position Bernoulli.
    Uniform,
    /// Exactly `round(rate * len)` positions.
    UniformCount,
    Span,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AuxSpec {
    #[default]
    None,
    Bow,
    Ls,
    Ritf,
}

impl AuxSpec {
    pub fn kind(self) -> Option<AuxKind> {
        match self {
            AuxSpec::None => None,
            AuxSpec::Bow => Some(AuxKind::Bow),
            AuxSpec::Ls => Some(AuxKind::Ls),
            AuxSpec::Ritf => Some(AuxKind::Ritf),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScratchpadSpec {
    #[default]
    None,
    Reverse,
    Bow,
    SortedArm,
    Forward,
    GraphRecon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisionSpec {
    pub mask: MaskKind,
    pub mask_rate: f64,
    pub span_p_mask: f64,
    pub span_p_keep: f64,
    pub noise: NoiseKind,
    pub aux: AuxSpec,
    pub aux_weight: f64,
    pub ls_temperature: f64,
    pub hinge: f64,
    pub scratchpad: ScratchpadSpec,
    pub pair_direction: PairDirection,
    pub pair_sort: PairSortKey,
    /// Span parameters of the replacement noise on forward scratchpads.
    pub sp_noise_p_mask: f64,
    pub sp_noise_p_keep: f64,
}

impl Default for SupervisionSpec {
    fn default() -> Self {
        Self {
            mask: MaskKind::None,
            mask_rate: 0.5,
            span_p_mask: 0.5,
            span_p_keep: 0.8,
            noise: NoiseKind::Dropout,
            aux: AuxSpec::None,
            aux_weight: 1.0,
            ls_temperature: 1.0,
            hinge: 1.0,
            scratchpad: ScratchpadSpec::None,
            pair_direction: PairDirection::LeadingToTarget,
            pair_sort: PairSortKey::Leading,
            sp_noise_p_mask: 0.5,
            sp_noise_p_keep: 0.8,
        }
    }
}

impl SupervisionSpec {
    pub fn scratchpad_variant(&self) -> Option<ScratchpadVariant> {
        Some(match self.scratchpad {
            ScratchpadSpec::None => return None,
            ScratchpadSpec::Reverse => ScratchpadVariant::Reverse,
            ScratchpadSpec::Bow => ScratchpadVariant::Bow,
            ScratchpadSpec::SortedArm => ScratchpadVariant::SortedArm,
            ScratchpadSpec::Forward => ScratchpadVariant::Forward,
            ScratchpadSpec::GraphRecon => {
                ScratchpadVariant::GraphRecon { direction: self.pair_direction, sort_key: self.pair_sort }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub init_std: f64,
    /// Add one layer when an auxiliary head is trained.
    pub aux_extra_layer: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { layers: 8, heads: 2, dim: 64, ff_dim: 256, init_std: 0.02, aux_extra_layer: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Online,
    /// A fixed corpus of `train.corpus_size` examples, reshuffled each pass.
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: f64,
    pub batch: usize,
    pub micro_batch: usize,
    pub samples: u64,
    pub seeds: Vec<u64>,
    pub mode: DataMode,
    pub corpus_size: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Data-assembly worker threads; 0 builds batches on the training thread.
    pub workers: usize,
    /// Run seeds on separate threads.
    pub parallel_seeds: bool,
    /// Checkpoint cadence in samples; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub keep_checkpoints: usize,
    /// Stop once validation sequence accuracy reaches this value; 0 disables.
    pub early_stop: f64,
    pub loss_reduction: Reduction,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch: 1024,
            micro_batch: 128,
            samples: 100_000_000,
            seeds: vec![0],
            mode: DataMode::Online,
            corpus_size: 1_000_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 0,
            grad_clip: 0.0,
            workers: 0,
            parallel_seeds: false,
            checkpoint_every: EPOCH_SAMPLES,
            keep_checkpoints: 3,
            early_stop: 0.0,
            loss_reduction: Reduction::Mean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSpec {
    /// Validation cadence in samples.
    pub every: u64,
    pub valid_size: usize,
    pub generative: bool,
    pub max_extra: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { every: EPOCH_SAMPLES, valid_size: 2048, generative: true, max_extra: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub graph: GraphSpec,
    pub supervision: SupervisionSpec,
    pub model: ModelSpec,
    pub train: TrainSpec,
    pub eval: EvalSpec,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            graph: GraphSpec::default(),
            supervision: SupervisionSpec::default(),
            model: ModelSpec::default(),
            train: TrainSpec::default(),
            eval: EvalSpec::default(),
        }
    }
}

/// Sets `path` (dot-separated) in a TOML table, creating tables on the way.
fn set_dotted(root: &mut toml::Table, path: &str, value: toml::Value) -> Result<(), SpecError> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| SpecError::Override(path.into()))?;
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| SpecError::Invalid(format!("`{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentSpec {
    /// Parses a config document and applies `key=value` overrides on top.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self, SpecError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| SpecError::Parse(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| SpecError::Override(o.clone()))?;
            set_dotted(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        let spec: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| SpecError::Parse(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_toml(text: &str) -> Result<Self, SpecError> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serialises")
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        let bad = |m: String| Err(SpecError::Invalid(m));
        let g = &self.graph;
        if g.d.min < 2 || g.d.min > g.d.max {
            return bad(format!("graph.d must be >= 2 with min <= max, got {:?}", g.d));
        }
        if g.m.min < 2 || g.m.min > g.m.max {
            return bad(format!("graph.m must be >= 2 with min <= max, got {:?}", g.m));
        }
        if g.vocab == VocabPolicy::Fixed && g.vocab_size < graph_node_count(g.d.max, g.m.max) {
            return bad(format!(
                "graph.vocab_size {} is smaller than the largest graph ({} nodes)",
                g.vocab_size,
                graph_node_count(g.d.max, g.m.max)
            ));
        }
        if !(0.0..=1.0).contains(&g.path_mix) {
            return bad("graph.path_mix must lie in [0, 1]".into());
        }
        if g.tree != TreeSpec::None && g.shuffle != ShuffleMode::EdgeWise {
            return bad("tree graphs support only edge_wise shuffling".into());
        }
        let s = &self.supervision;
        if g.tree != TreeSpec::None && s.scratchpad != ScratchpadSpec::None {
            return bad("scratchpads are defined for path-star graphs only".into());
        }
        if !(0.0..=1.0).contains(&s.mask_rate) {
            return bad("supervision.mask_rate must lie in [0, 1]".into());
        }
        for (k, p) in [
            ("span_p_mask", s.span_p_mask),
            ("span_p_keep", s.span_p_keep),
            ("sp_noise_p_mask", s.sp_noise_p_mask),
            ("sp_noise_p_keep", s.sp_noise_p_keep),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("supervision.{k} must lie in (0, 1]"));
            }
        }
        if s.ls_temperature <= 0.0 {
            return bad("supervision.ls_temperature must be positive".into());
        }
        let t = &self.train;
        if t.batch == 0 || t.micro_batch == 0 {
            return bad("train.batch and train.micro_batch must be positive".into());
        }
        if t.seeds.is_empty() {
            return bad("train.seeds must list at least one seed".into());
        }
        if !(t.lr > 0.0) {
            return bad("train.lr must be positive".into());
        }
        if t.mode == DataMode::Offline && t.corpus_size == 0 {
            return bad("train.corpus_size must be positive in offline mode".into());
        }
        if self.eval.valid_size == 0 || self.eval.every == 0 {
            return bad("eval.valid_size and eval.every must be positive".into());
        }
        self.model_config().validate().map_err(|e| SpecError::Invalid(e.to_string()))
    }

    /// Size of the node-label universe shared by every example.
    pub fn universe(&self) -> usize {
        match self.graph.vocab {
            VocabPolicy::Graph => graph_node_count(self.graph.d.max, self.graph.m.max),
            VocabPolicy::Fixed => self.graph.vocab_size,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.universe())
    }

    fn scratchpad_len(&self, d: usize, m: usize) -> usize {
        match self.supervision.scratchpad {
            ScratchpadSpec::None => 0,
            ScratchpadSpec::Bow => m - 1,
            ScratchpadSpec::GraphRecon => 2 * d,
            _ => m,
        }
    }

    /// Longest model input (full sequence minus its final token).
    pub fn max_input_len(&self) -> usize {
        let (d, m) = (self.graph.d.max, self.graph.m.max);
        let query = match self.graph.query {
            QueryMode::Standard => 2,
            _ => m,
        };
        let sp = self.scratchpad_len(d, m);
        let source = query + 2 + 3 * d * (m - 1) + 1;
        let target = if sp > 0 { sp + 1 } else { 0 } + m;
        source + target - 1
    }

    pub fn has_aux(&self) -> bool {
        self.supervision.aux != AuxSpec::None
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        let layers = m.layers + usize::from(self.has_aux() && m.aux_extra_layer);
        ModelConfig {
            vocab_size: self.vocabulary().size(),
            max_seq_len: self.max_input_len(),
            layers,
            heads: m.heads,
            dim: m.dim,
            ff_dim: m.ff_dim,
            aux_head: self.has_aux(),
            init_std: m.init_std,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        let t = &self.train;
        AdamConfig { beta1: t.beta1, beta2: t.beta2, eps: t.eps, weight_decay: t.weight_decay }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            reduction: self.train.loss_reduction,
            aux_weight: self.supervision.aux_weight,
            hinge: self.supervision.hinge,
        }
    }

    /// Learning rate at optimiser step `step` (linear warmup, then constant).
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.train.warmup_steps;
        if w == 0 || step >= w {
            self.train.lr
        } else {
            self.train.lr * (step + 1) as f64 / w as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let s = ExperimentSpec::from_toml("").unwrap();
        assert_eq!(s.train.lr, 5e-4);
        assert_eq!(s.train.batch, 1024);
        assert_eq!((s.model.heads, s.model.dim, s.model.ff_dim, s.model.layers), (2, 64, 256, 8));
        assert_eq!(s.graph.path_mix, 0.10);
        assert_eq!(s.eval.valid_size, 2048);
    }

    #[test]
    fn dotted_keys_and_overrides() {
        let text = "graph.d = [2, 5]\ngraph.shuffle = \"causal_wise\"\n[train]\nlr = 1e-3\n";
        let s = ExperimentSpec::from_toml_with_overrides(
            text,
            &["train.lr=2e-3".into(), "supervision.aux=ritf".into(), "train.seeds=[1,2,3]".into()],
        )
        .unwrap();
        assert_eq!(s.graph.d, IntRange { min: 2, max: 5 });
        assert_eq!(s.graph.shuffle, ShuffleMode::CausalWise);
        assert_eq!(s.train.lr, 2e-3);
        assert_eq!(s.train.seeds, vec![1, 2, 3]);
        assert_eq!(s.model_config().layers, 9);
        let again = ExperimentSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(again, s);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentSpec::from_toml("graph.d = 1").is_err());
        assert!(ExperimentSpec::from_toml("graph.colour = 3").is_err());
        assert!(ExperimentSpec::from_toml("graph.vocab = \"fixed\"\ngraph.vocab_size = 5").is_err());
        assert!(ExperimentSpec::from_toml("graph.tree = \"split\"\ngraph.shuffle = \"causal_wise\"").is_err());
        assert!(ExperimentSpec::from_toml_with_overrides("", &["train.lr".into()]).is_err());
    }

    #[test]
    fn sequence_length_bound() {
        // '/ s t ?' + 8 edges + '=' + arm, minus the final token.
        let s = ExperimentSpec::default();
        assert_eq!(s.max_input_len(), 4 + 24 + 1 + 5 - 1);
        let s = ExperimentSpec::from_toml("supervision.scratchpad = \"reverse\"\ngraph.d = 5").unwrap();
        assert_eq!(s.max_input_len(), 4 + 3 * 5 * 4 + 1 + 6 + 5 - 1);
    }
}
