use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape record of a Mamba-style model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: String,
    pub d_model: usize,
    pub n_layer: usize,
    /// `H`, states per channel
    pub d_state: usize,
    pub expand: usize,
    pub dt_rank: usize,
    pub vocab: usize,
    pub conv_width: usize,
    #[serde(default = "yes")]
    pub conv_bias: bool,
    /// output head shares the embedding matrix
    #[serde(default = "yes")]
    pub tie_embeddings: bool,
}

fn yes() -> bool {
    true
}

impl ArchConfig {
    /// A Mamba-family shape with the usual defaults (`H = 16`, expand 2,
    /// `dt_rank = ceil(d_model / 16)`, conv width 4, vocab 50280).
    pub fn mamba(name: &str, d_model: usize, n_layer: usize) -> Self {
        ArchConfig {
            name: name.to_string(),
            d_model,
            n_layer,
            d_state: 16,
            expand: 2,
            dt_rank: d_model.div_ceil(16),
            vocab: 50280,
            conv_width: 4,
            conv_bias: true,
            tie_embeddings: true,
        }
    }

    /// Small shape for tests and toy training.
    pub fn toy(d_model: usize, n_layer: usize, d_state: usize, vocab: usize) -> Self {
        ArchConfig {
            name: format!("toy-{d_model}x{n_layer}"),
            d_model,
            n_layer,
            d_state,
            expand: 2,
            dt_rank: d_model.div_ceil(16),
            vocab,
            conv_width: 4,
            conv_bias: true,
            tie_embeddings: true,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("expand", self.expand),
            ("dt_rank", self.dt_rank),
            ("vocab", self.vocab),
            ("conv_width", self.conv_width),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config {
                    path: format!("{}.{name}", self.name),
                    message: "must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

/// The published Mamba family: 130m, 370m, 790m, 1.4b, 2.8b.
pub fn builtin_configs() -> Vec<ArchConfig> {
    vec![
        ArchConfig::mamba("mamba-130m", 768, 24),
        ArchConfig::mamba("mamba-370m", 1024, 48),
        ArchConfig::mamba("mamba-790m", 1536, 48),
        ArchConfig::mamba("mamba-1.4b", 2048, 48),
        ArchConfig::mamba("mamba-2.8b", 2560, 64),
    ]
}

/// Finds `name` among `configs`.
pub fn find_config(configs: &[ArchConfig], name: &str) -> Result<ArchConfig> {
    configs
        .iter()
        .find(|c| c.name == name)
        .cloned()
        .ok_or_else(|| Error::Lookup {
            kind: "architecture",
            name: name.to_string(),
        })
}

pub fn builtin_config(name: &str) -> Result<ArchConfig> {
    find_config(&builtin_configs(), name)
}

/// Builtins with entries from a JSON array of records added or replaced by name.
pub fn load_config_overrides(json: &str) -> Result<Vec<ArchConfig>> {
    let extra: Vec<ArchConfig> = serde_json::from_str(json).map_err(|e| Error::Config {
        path: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut configs = builtin_configs();
    for c in extra {
        c.validate()?;
        match configs.iter_mut().find(|b| b.name == c.name) {
            Some(slot) => *slot = c,
            None => configs.push(c),
        }
    }
    Ok(configs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dt_rank_defaults() {
        assert_eq!(builtin_config("mamba-130m").unwrap().dt_rank, 48);
        assert_eq!(builtin_config("mamba-2.8b").unwrap().dt_rank, 160);
        assert_eq!(builtin_config("mamba-1.4b").unwrap().d_inner(), 4096);
    }

    #[test]
    fn unknown_name_is_lookup_error() {
        assert!(matches!(builtin_config("mamba-7b"), Err(Error::Lookup { .. })));
    }

    #[test]
    fn overrides_replace_and_extend() {
        let json = r#"[{"name":"mamba-130m","d_model":8,"n_layer":2,"d_state":4,"expand":2,"dt_rank":1,"vocab":32,"conv_width":4},
                       {"name":"tiny","d_model":4,"n_layer":1,"d_state":2,"expand":2,"dt_rank":1,"vocab":8,"conv_width":2,"conv_bias":false}]"#;
        let cs = load_config_overrides(json).unwrap();
        assert_eq!(cs.len(), 6);
        assert_eq!(find_config(&cs, "mamba-130m").unwrap().d_model, 8);
        assert!(!find_config(&cs, "tiny").unwrap().conv_bias);
    }

    #[test]
    fn overrides_reject_unknown_fields_and_zero_extents() {
        assert!(load_config_overrides(r#"[{"name":"x","bogus":1}]"#).is_err());
        let zero = r#"[{"name":"z","d_model":0,"n_layer":1,"d_state":1,"expand":1,"dt_rank":1,"vocab":1,"conv_width":1}]"#;
        assert!(matches!(load_config_overrides(zero), Err(Error::Config { .. })));
    }
}
