//! Argument types shared across subcommands: dataset sources, holdout
//! policies, and the pretraining knob set.

use std::collections::BTreeSet;
use std::error::Error;
use std::path::PathBuf;
use std::str::FromStr;

use promptrec_core::corpus::synth::{generate_synthetic, PlantedRule, SynthReport, SynthSpec};
use promptrec_core::corpus::{Dataset, SplitTag};
use promptrec_core::eval::pipeline::PipelineConfig;
use promptrec_core::model::ModelConfig;
use promptrec_core::prompts::{Family, PromptId, Registry, SplitPolicy};
use promptrec_core::train::TrainConfig;

/// Where a dataset comes from: a synthetic generator spec or a JSON file.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetArg {
    Synth(SynthSpec),
    File(PathBuf),
}

impl DatasetArg {
    /// Materialize the dataset. Synthetic specs generate with `seed`; the
    /// report is `None` for file-loaded data.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Option<SynthReport>), Box<dyn Error>> {
        match self {
            DatasetArg::Synth(spec) => {
                let (dataset, report) = generate_synthetic(spec, seed)?;
                Ok((dataset, Some(report)))
            }
            DatasetArg::File(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read dataset {}: {e}", path.display()))?;
                let dataset: Dataset = serde_json::from_str(&text)
                    .map_err(|e| format!("cannot parse dataset {}: {e}", path.display()))?;
                dataset.validate()?;
                Ok((dataset, None))
            }
        }
    }

    /// Short label for manifests and report ids.
    pub fn id(&self) -> String {
        match self {
            DatasetArg::Synth(spec) => format!(
                "synth-u{}-i{}-o{}",
                spec.users, spec.items, spec.item_id_offset
            ),
            DatasetArg::File(path) => path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
        }
    }
}

fn parse_synth_overrides(spec: &mut SynthSpec, overrides: &str) -> Result<(), String> {
    for kv in overrides.split(',').filter(|s| !s.is_empty()) {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {kv:?}"))?;
        let bad = |e: std::num::ParseIntError| format!("bad value for {key}: {e}");
        match key {
            "users" => spec.users = value.parse().map_err(bad)?,
            "items" => spec.items = value.parse().map_err(bad)?,
            "seq-min" => spec.seq_len_min = value.parse().map_err(bad)?,
            "seq-max" => spec.seq_len_max = value.parse().map_err(bad)?,
            "reviews" => spec.reviews_per_user = value.parse().map_err(bad)?,
            "offset" => spec.item_id_offset = value.parse().map_err(bad)?,
            "prefix" => spec.user_prefix = value.to_string(),
            "rule" => {
                spec.rule = if value == "last-two-sum" {
                    PlantedRule::LastTwoSum
                } else if let Some(step) = value.strip_prefix("successor:") {
                    PlantedRule::Successor {
                        step: step
                            .parse()
                            .map_err(|e| format!("bad successor step: {e}"))?,
                    }
                } else {
                    return Err(format!(
                        "unknown rule {value:?} (expected last-two-sum | successor:<step>)"
                    ));
                }
            }
            other => {
                return Err(format!(
                    "unknown synth key {other:?} (expected users | items | seq-min | seq-max \
                     | reviews | offset | prefix | rule)"
                ))
            }
        }
    }
    Ok(())
}

impl FromStr for DatasetArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "synth" {
            return Ok(DatasetArg::Synth(SynthSpec::default()));
        }
        if let Some(overrides) = s.strip_prefix("synth:") {
            let mut spec = SynthSpec::default();
            parse_synth_overrides(&mut spec, overrides)?;
            return Ok(DatasetArg::Synth(spec));
        }
        Ok(DatasetArg::File(PathBuf::from(s)))
    }
}

/// Which prompt templates are held out of pretraining.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HoldoutArg {
    /// The highest-index template of every family.
    Last,
    /// Exactly these template ids.
    Ids(Vec<PromptId>),
}

impl HoldoutArg {
    /// Turn the holdout list into a pretrain policy against a concrete
    /// registry (pretrain set = everything not held out).
    pub fn resolve(&self, registry: &Registry) -> Result<SplitPolicy, Box<dyn Error>> {
        match self {
            HoldoutArg::Last => Ok(SplitPolicy::LastPerFamily),
            HoldoutArg::Ids(held_out) => {
                let mut pretrain = Vec::new();
                for id in held_out {
                    // surface typos instead of silently holding out nothing
                    registry.get(*id)?;
                }
                let held: BTreeSet<PromptId> = held_out.iter().copied().collect();
                for template in registry.templates() {
                    if !held.contains(&template.id) {
                        pretrain.push(template.id);
                    }
                }
                Ok(SplitPolicy::ExplicitPretrain(pretrain))
            }
        }
    }
}

impl FromStr for HoldoutArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "last" {
            return Ok(HoldoutArg::Last);
        }
        if let Some(list) = s.strip_prefix("ids=") {
            let ids: Result<Vec<PromptId>, _> = list
                .split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse::<PromptId>().map_err(|e| e.to_string()))
                .collect();
            let ids = ids?;
            if ids.is_empty() {
                return Err("ids= needs at least one template id".to_string());
            }
            return Ok(HoldoutArg::Ids(ids));
        }
        Err(format!("unknown holdout {s:?} (expected last | ids=1-10,2-13,...)"))
    }
}

pub fn parse_split_tag(s: &str) -> Result<SplitTag, String> {
    match s {
        "train" => Ok(SplitTag::Train),
        "valid" => Ok(SplitTag::Valid),
        "test" => Ok(SplitTag::Test),
        other => Err(format!("unknown split {other:?} (expected train | valid | test)")),
    }
}

fn parse_families(s: &str) -> Result<BTreeSet<Family>, String> {
    let set: Result<BTreeSet<Family>, _> = s
        .split(',')
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<Family>().map_err(|e| e.to_string()))
        .collect();
    let set = set?;
    if set.is_empty() {
        return Err("need at least one family".to_string());
    }
    Ok(set)
}

/// Pretraining knobs shared by `pretrain` and `ablate`. Unset values fall
/// back to the library presets.
#[derive(Debug, Clone, clap::Args)]
pub struct PipelineArgs {
    /// Target subword vocabulary size
    #[arg(long)]
    pub vocab_size: Option<usize>,

    /// Give every user and item id a dedicated single token
    #[arg(long)]
    pub atomic: bool,

    /// Prompts held out of pretraining: last | ids=1-10,2-13,...
    #[arg(long, default_value = "last")]
    pub holdout: HoldoutArg,

    /// Train only on these task families (comma-separated names)
    #[arg(long, value_parser = parse_families)]
    pub families: Option<BTreeSet<Family>>,

    /// Keep only the lowest-index N pretraining prompts per family
    #[arg(long)]
    pub max_prompts_per_family: Option<usize>,

    /// Training epochs
    #[arg(long)]
    pub epochs: Option<usize>,

    /// Examples per optimizer step
    #[arg(long)]
    pub batch_size: Option<usize>,

    /// Peak learning rate after warmup
    #[arg(long)]
    pub peak_lr: Option<f64>,

    /// Model width
    #[arg(long)]
    pub d_model: Option<usize>,

    /// Attention heads per layer
    #[arg(long)]
    pub heads: Option<usize>,

    /// Feed-forward inner width
    #[arg(long)]
    pub d_ff: Option<usize>,

    /// Encoder layers
    #[arg(long)]
    pub enc_layers: Option<usize>,

    /// Decoder layers
    #[arg(long)]
    pub dec_layers: Option<usize>,

    /// Maximum sequence length in tokens
    #[arg(long)]
    pub max_len: Option<usize>,
}

impl PipelineArgs {
    /// Apply the flags onto the toy preset, with `seed` driving data
    /// sampling, initialization, and the training loop alike.
    pub fn to_config(&self, registry: &Registry, seed: u64) -> Result<PipelineConfig, Box<dyn Error>> {
        let mut cfg = PipelineConfig::toy();
        cfg.policy = self.holdout.resolve(registry)?;
        cfg.pair_cfg.seed = seed;
        if let Some(v) = self.vocab_size {
            cfg.vocab_size = v;
        }
        cfg.atomic_ids = self.atomic;
        cfg.families = self.families.clone();
        cfg.max_prompts_per_family = self.max_prompts_per_family;

        let mut model = ModelConfig::toy(0);
        if let Some(v) = self.d_model {
            model.d_model = v;
        }
        if let Some(v) = self.heads {
            model.heads = v;
        }
        if let Some(v) = self.d_ff {
            model.d_ff = v;
        }
        if let Some(v) = self.enc_layers {
            model.enc_layers = v;
        }
        if let Some(v) = self.dec_layers {
            model.dec_layers = v;
        }
        if let Some(v) = self.max_len {
            model.max_len = v;
            model.max_whole_words = v;
        }
        model.seed = seed;
        cfg.model = model;

        let mut train = TrainConfig::default();
        if let Some(v) = self.epochs {
            train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            train.batch_size = v;
        }
        if let Some(v) = self.peak_lr {
            train.peak_lr = v;
        }
        train.seed = seed;
        cfg.train = train;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_arg_parses_synth_overrides() {
        let arg: DatasetArg = "synth:users=12,items=8,rule=successor:3,prefix=v".parse().unwrap();
        let DatasetArg::Synth(spec) = arg else {
            panic!("expected synth spec")
        };
        assert_eq!(spec.users, 12);
        assert_eq!(spec.items, 8);
        assert_eq!(spec.rule, PlantedRule::Successor { step: 3 });
        assert_eq!(spec.user_prefix, "v");
    }

    #[test]
    fn dataset_arg_rejects_unknown_keys() {
        assert!("synth:frobs=3".parse::<DatasetArg>().is_err());
        assert!("synth:users=many".parse::<DatasetArg>().is_err());
    }

    #[test]
    fn plain_string_is_a_file_path() {
        let arg: DatasetArg = "data/reviews.json".parse().unwrap();
        assert_eq!(arg, DatasetArg::File(PathBuf::from("data/reviews.json")));
    }

    #[test]
    fn holdout_ids_resolve_to_the_complement() {
        let registry = Registry::builtin();
        let holdout: HoldoutArg = "ids=1-1,2-2".parse().unwrap();
        let policy = holdout.resolve(&registry).unwrap();
        let split = registry.split_for_pretrain(&policy).unwrap();
        assert_eq!(split.zeroshot_ids.len(), 2);
        assert!(split.zeroshot_ids.contains(&PromptId::new(Family::Rating, 1)));
        assert_eq!(split.pretrain_ids.len(), registry.len() - 2);
    }

    #[test]
    fn holdout_rejects_unknown_ids_and_spellings() {
        let registry = Registry::builtin();
        let holdout: HoldoutArg = "ids=1-99".parse().unwrap();
        assert!(holdout.resolve(&registry).is_err());
        assert!("everything".parse::<HoldoutArg>().is_err());
    }
}
