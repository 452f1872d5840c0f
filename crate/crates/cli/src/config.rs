//! Run configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! data.n_classes = 10
//! razor.lambda_init = 0.25
//! ```
//!
//! Keys not listed in [`RunConfig::set`] are rejected, as are repeated keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use razor_core::engine::{EditMode, RazorConfig, RetainFloor};
use razor_core::saliency::{SaliencyVariant, TauPolicy};
use razor_core::train::{Optimizer, PretrainConfig};
use razor_core::{MismatchVariant, ModelConfig, SplitSpec};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: SplitSpec,
    pub razor: RazorConfig,
    pub pretrain: PretrainConfig,
    /// Drives every random stream; copied into `data.seed`.
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: SplitSpec::default(),
            razor: RazorConfig::default(),
            pretrain: PretrainConfig::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Parses `key = value` lines, returning each value with its line number.
pub fn parse_pairs(text: &str) -> CliResult<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| CliError::parse(line_no, format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(CliError::parse(line_no, format!("bad key {k:?}")));
        }
        if let Some((first, _)) = out.insert(k.to_string(), (line_no, v.to_string())) {
            return Err(CliError::parse(line_no, format!("key {k} already set on line {first}")));
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut cfg = Self::default();
        for (key, (line, value)) in parse_pairs(text)? {
            cfg.set(&key, &value).map_err(|m| CliError::parse(line, m))?;
        }
        cfg.data.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self
    }

    /// Applies one dotted key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let (m, d, r, p) = (&mut self.model, &mut self.data, &mut self.razor, &mut self.pretrain);
        match key {
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),

            "model.embed_dim" => m.embed_dim = num(key, v)?,
            "model.n_blocks" => m.n_blocks = num(key, v)?,
            "model.n_heads" => m.n_heads = num(key, v)?,
            "model.mlp_hidden" => m.mlp_hidden = num(key, v)?,
            "model.vocab_size" => m.vocab_size = num(key, v)?,
            "model.n_patches" => m.n_patches = num(key, v)?,
            "model.patch_dim" => m.patch_dim = num(key, v)?,
            "model.max_text_len" => m.max_text_len = num(key, v)?,

            "data.n_classes" => d.n_classes = num(key, v)?,
            "data.forget_classes" => {
                d.forget_classes = v.split(',').map(|s| num(key, s.trim())).collect::<Result<_, _>>()?;
            }
            "data.pairs_per_class" => d.pairs_per_class = num(key, v)?,
            "data.noise_sigma" => d.noise_sigma = num(key, v)?,
            "data.val_fraction" => d.val_fraction = num(key, v)?,
            "data.n_styles" => d.n_styles = num(key, v)?,
            "data.style_scale" => d.style_scale = num(key, v)?,
            "data.class_overlap" => d.class_overlap = num(key, v)?,

            "pretrain.steps" => p.steps = num(key, v)?,
            "pretrain.step_size" => p.step_size = num(key, v)?,
            "pretrain.batch_size" => p.batch_size = num(key, v)?,
            "pretrain.temperature" => p.temperature = num(key, v)?,
            "pretrain.optimizer" => {
                p.optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(format!("{key}: expected sgd or adam, got {v:?}")),
                }
            }

            "razor.rho" => r.weights.rho = num(key, v)?,
            "razor.lambda_f" => r.weights.lambda_f = num(key, v)?,
            "razor.lambda_m" => r.weights.lambda_m = num(key, v)?,
            "razor.temperature" => r.weights.temperature = num(key, v)?,
            "razor.alpha" => r.score.alpha = num(key, v)?,
            "razor.eps" => r.score.eps = num(key, v)?,
            "razor.saliency_variant" => {
                r.score.variant = match v {
                    "norm" => SaliencyVariant::Norm,
                    "squared_norm" => SaliencyVariant::SquaredNorm,
                    _ => return Err(format!("{key}: expected norm or squared_norm, got {v:?}")),
                }
            }
            "razor.tau_percentile" => r.tau = TauPolicy::Percentile(num(key, v)?),
            "razor.tau_fixed" => r.tau = TauPolicy::Fixed(num(key, v)?),
            "razor.t_max" => r.t_max = num(key, v)?,
            "razor.lambda_init" => r.lambda_init = num(key, v)?,
            "razor.delta" => r.delta = num(key, v)?,
            "razor.mismatch_variant" => {
                r.mismatch_variant = match v {
                    "signed" => MismatchVariant::Signed,
                    "squared" => MismatchVariant::Squared,
                    _ => return Err(format!("{key}: expected signed or squared, got {v:?}")),
                }
            }
            "razor.mode" => {
                r.mode = match v {
                    "full" => EditMode::Full,
                    "no-iteration" => EditMode::NoIteration,
                    "no-selection" => EditMode::NoSelection,
                    _ => return Err(format!("{key}: expected full, no-iteration or no-selection, got {v:?}")),
                }
            }
            "razor.use_retain" => r.ablation.use_retain = flag(key, v)?,
            "razor.use_forget" => r.ablation.use_forget = flag(key, v)?,
            "razor.use_mismatch" => r.ablation.use_mismatch = flag(key, v)?,
            "razor.step.noop_incumbent" => r.step.noop_incumbent = flag(key, v)?,
            "razor.step.margin_tiebreak" => r.step.margin_tiebreak = flag(key, v)?,
            "razor.step.clip_forget" => r.step.clip_forget = flag(key, v)?,

            "target.m1_max" => r.target.m1_max = num(key, v)?,
            "target.m3_max" => r.target.m3_max = num(key, v)?,
            "target.m4_min" => r.target.m4_min = RetainFloor::Absolute(num(key, v)?),
            "target.m4_min_relative" => r.target.m4_min = RetainFloor::RelativeToPre(num(key, v)?),
            "target.m5_min" => r.target.m5_min = num(key, v)?,

            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.data.validate(&self.model)?;
        self.razor.validate()?;
        self.pretrain.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_blank_lines_and_dotted_keys() {
        let cfg = RunConfig::from_text("# header\n\nseed = 7  # trailing\nrazor.lambda_init = 0.5\ndata.forget_classes = 0, 3\n")
            .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.seed, 7);
        assert_eq!(cfg.razor.lambda_init, 0.5);
        assert_eq!(cfg.data.forget_classes, vec![0, 3]);
    }

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = RunConfig::from_text("seed = 1\nbogus.key = 2\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        assert_eq!(err.exit_code(), 1);
        assert!(RunConfig::from_text("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::from_text("no equals sign\n").is_err());
        assert!(RunConfig::from_text("razor.t_max = -1\n").is_err());
        assert!(RunConfig::from_text("razor.use_forget = maybe\n").is_err());
    }

    #[test]
    fn enum_keys() {
        let cfg = RunConfig::from_text(
            "razor.mode = no-selection\nrazor.mismatch_variant = squared\nrazor.tau_fixed = 0.3\ntarget.m4_min = 0.8\n",
        )
        .unwrap();
        assert_eq!(cfg.razor.mode, EditMode::NoSelection);
        assert_eq!(cfg.razor.mismatch_variant, MismatchVariant::Squared);
        assert_eq!(cfg.razor.tau, TauPolicy::Fixed(0.3));
        assert_eq!(cfg.razor.target.m4_min, RetainFloor::Absolute(0.8));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let cfg = RunConfig::from_text("razor.delta = 2\n").unwrap();
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
        let cfg = RunConfig::from_text("razor.use_retain = false\nrazor.use_forget = false\nrazor.use_mismatch = false\n").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
