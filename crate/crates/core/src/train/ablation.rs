//! Named ablation variants AE1 to AE13.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::fusion::Aggregate;
use crate::train::config::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationId(u8);

impl AblationId {
    pub const ALL: [AblationId; 13] = [
        AblationId(1),
        AblationId(2),
        AblationId(3),
        AblationId(4),
        AblationId(5),
        AblationId(6),
        AblationId(7),
        AblationId(8),
        AblationId(9),
        AblationId(10),
        AblationId(11),
        AblationId(12),
        AblationId(13),
    ];

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn description(self) -> &'static str {
        match self.0 {
            1 => "plain coupling block instead of cross attention + coupling",
            2 => "base branch without residual skips",
            3 => "graph branch removed, two-stream decoding",
            4 => "concatenation instead of addition before the decoder",
            5 => "detail and base fusion layers swapped",
            6 => "no semantic Gram loss",
            7 => "no graph correlation term in either stage",
            8 => "graph correlation term in both stages",
            9 => "single joint stage instead of two",
            10 => "alpha1 = alpha3 = 1",
            11 => "alpha1 = alpha3 = 5",
            12 => "alpha1 = alpha3 = 8",
            _ => "alpha1 = alpha3 = 10",
        }
    }

    /// `base` with this variant's switches applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        let mut decomp = |w: f64| {
            c.losses.alpha1 = w;
            c.losses.alpha3 = w;
        };
        match self.0 {
            10 => decomp(1.0),
            11 => decomp(5.0),
            12 => decomp(8.0),
            13 => decomp(10.0),
            _ => {}
        }
        match self.0 {
            1 => c.ablation.cross_attention = false,
            2 => c.ablation.bfe_residual = false,
            3 => c.ablation.use_graph = false,
            4 => c.ablation.aggregate = Aggregate::Concat,
            5 => c.ablation.swap_fusion_layers = true,
            6 => c.switches.semantic = false,
            7 => {
                c.switches.graph_cc_stage1 = false;
                c.switches.graph_cc_stage2 = false;
            }
            8 => {
                c.switches.graph_cc_stage1 = true;
                c.switches.graph_cc_stage2 = true;
            }
            9 => c.joint = true,
            _ => {}
        }
        c
    }
}

impl fmt::Display for AblationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AE{}", self.0)
    }
}

impl FromStr for AblationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let n = s
            .trim()
            .to_ascii_uppercase()
            .strip_prefix("AE")
            .and_then(|n| n.parse::<u8>().ok())
            .filter(|n| (1..=13).contains(n))
            .ok_or_else(|| invalid!("unknown ablation `{s}`; expected AE1 to AE13"))?;
        Ok(AblationId(n))
    }
}

/// Parses `name` and applies it to `base`.
pub fn ablation_preset(name: &str, base: &TrainConfig) -> Result<TrainConfig> {
    Ok(name.parse::<AblationId>()?.apply(base))
}
