use std::fmt;
use std::str::FromStr;

use seqskip_tensor::GateKind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rnb1")]
    Rnb1,
    #[serde(rename = "rnb2_ue")]
    Rnb2Ue,
    #[serde(rename = "rnbc2_ue")]
    Rnbc2Ue,
    #[serde(rename = "seq1eH")]
    Seq1eH,
    #[serde(rename = "seq1HL")]
    Seq1HL,
    #[serde(rename = "att_pair")]
    AttPair,
    #[serde(rename = "transformer")]
    Transformer,
    #[serde(rename = "snail")]
    Snail,
    #[serde(rename = "teacher")]
    Teacher,
}

impl ModelKind {
    pub const ALL: [ModelKind; 9] = [
        ModelKind::Rnb1,
        ModelKind::Rnb2Ue,
        ModelKind::Rnbc2Ue,
        ModelKind::Seq1eH,
        ModelKind::Seq1HL,
        ModelKind::AttPair,
        ModelKind::Transformer,
        ModelKind::Snail,
        ModelKind::Teacher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rnb1 => "rnb1",
            ModelKind::Rnb2Ue => "rnb2_ue",
            ModelKind::Rnbc2Ue => "rnbc2_ue",
            ModelKind::Seq1eH => "seq1eH",
            ModelKind::Seq1HL => "seq1HL",
            ModelKind::AttPair => "att_pair",
            ModelKind::Transformer => "transformer",
            ModelKind::Snail => "snail",
            ModelKind::Teacher => "teacher",
        }
    }

    /// Relation-network models that treat the support set as unordered.
    pub fn is_metric(self) -> bool {
        matches!(self, ModelKind::Rnb1 | ModelKind::Rnb2Ue | ModelKind::Rnbc2Ue)
    }

    pub fn has_user_embedding(self) -> bool {
        matches!(self, ModelKind::Rnb2Ue | ModelKind::Rnbc2Ue)
    }

    /// Models trained to match pairwise label agreement (MSE) rather than
    /// the skip labels themselves (BCE).
    pub fn trains_on_similarity(self) -> bool {
        matches!(self, ModelKind::Rnb1 | ModelKind::Rnb2Ue)
    }

    /// Models whose query predictions only look backwards in the session.
    pub fn is_causal(self) -> bool {
        matches!(
            self,
            ModelKind::Seq1eH | ModelKind::Seq1HL | ModelKind::Snail | ModelKind::Transformer | ModelKind::Teacher
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!("unknown model `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Highway,
    Glu,
}

impl From<Gate> for GateKind {
    fn from(g: Gate) -> Self {
        match g {
            Gate::Highway => GateKind::Highway,
            Gate::Glu => GateKind::Glu,
        }
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gate::Highway => "highway",
            Gate::Glu => "glu",
        })
    }
}

impl FromStr for Gate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(Gate::Highway),
            "glu" => Ok(Gate::Glu),
            _ => Err(Error::Config(format!("unknown gate `{s}` (highway, glu)"))),
        }
    }
}

pub const CAUSAL_DILATIONS: [usize; 5] = [1, 2, 4, 8, 16];
pub const CAUSAL_KERNELS: [usize; 5] = [2; 5];
pub const PAIR_QUERY_DILATIONS: [usize; 3] = [1, 2, 4];
pub const PAIR_QUERY_KERNELS: [usize; 3] = [2, 2, 3];
pub const PAIR_SUPPORT_DILATIONS: [usize; 3] = [1, 3, 9];
pub const PAIR_SUPPORT_KERNELS: [usize; 3] = [3; 3];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Width of a preprocessed input row.
    pub input_dim: usize,
    pub width: usize,
    pub stack_count: usize,
    /// Dilations and kernel sizes of each causal stack (the query encoder
    /// for `att_pair`).
    pub dilations: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Non-causal support encoder of `att_pair`; empty otherwise.
    pub support_dilations: Vec<usize>,
    pub support_kernels: Vec<usize>,
    pub heads: usize,
    /// Self-attention blocks of `transformer`.
    pub blocks: usize,
    /// Longest timeline a learned positional table covers.
    pub max_len: usize,
    pub gate: Gate,
    pub instance_norm: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// The standard layout of `kind`.
    pub fn new(kind: ModelKind, input_dim: usize, width: usize, seed: u64) -> Self {
        let mut c = ModelConfig {
            kind,
            input_dim,
            width,
            stack_count: 0,
            dilations: Vec::new(),
            kernels: Vec::new(),
            support_dilations: Vec::new(),
            support_kernels: Vec::new(),
            heads: 1,
            blocks: 0,
            max_len: crate::data::MAX_SESSION_LEN,
            gate: Gate::Highway,
            instance_norm: true,
            seed,
        };
        match kind {
            ModelKind::Seq1eH | ModelKind::Seq1HL | ModelKind::Teacher | ModelKind::Snail => {
                c.stack_count = if matches!(kind, ModelKind::Seq1eH | ModelKind::Snail) { 1 } else { 2 };
                c.dilations = CAUSAL_DILATIONS.to_vec();
                c.kernels = CAUSAL_KERNELS.to_vec();
                if kind == ModelKind::Snail {
                    c.heads = 8;
                }
            }
            ModelKind::AttPair => {
                c.stack_count = 1;
                c.dilations = PAIR_QUERY_DILATIONS.to_vec();
                c.kernels = PAIR_QUERY_KERNELS.to_vec();
                c.support_dilations = PAIR_SUPPORT_DILATIONS.to_vec();
                c.support_kernels = PAIR_SUPPORT_KERNELS.to_vec();
            }
            ModelKind::Transformer => {
                c.heads = 8;
                c.blocks = 2;
            }
            ModelKind::Rnb1 | ModelKind::Rnb2Ue | ModelKind::Rnbc2Ue => {}
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("{}: {m}", self.kind)));
        if self.width == 0 || self.input_dim == 0 {
            return bad("width and input_dim must be positive".into());
        }
        let fixed_stack = |count: usize| {
            self.stack_count == count && self.dilations == CAUSAL_DILATIONS && self.kernels == CAUSAL_KERNELS
        };
        match self.kind {
            ModelKind::Seq1eH | ModelKind::Snail if !fixed_stack(1) => {
                return bad("needs one causal stack with dilations 1,2,4,8,16 and kernel 2".into());
            }
            ModelKind::Seq1HL | ModelKind::Teacher if !fixed_stack(2) => {
                return bad("needs two causal stacks with dilations 1,2,4,8,16 and kernel 2".into());
            }
            ModelKind::AttPair
                if self.dilations != PAIR_QUERY_DILATIONS
                    || self.kernels != PAIR_QUERY_KERNELS
                    || self.support_dilations != PAIR_SUPPORT_DILATIONS
                    || self.support_kernels != PAIR_SUPPORT_KERNELS =>
            {
                return bad("needs support encoder d=1,3,9 k=3 and query encoder d=1,2,4 k=2,2,3".into());
            }
            ModelKind::Transformer if self.blocks == 0 || self.max_len == 0 => {
                return bad("needs at least one block and a positive max_len".into());
            }
            _ => {}
        }
        let attends = matches!(self.kind, ModelKind::AttPair | ModelKind::Transformer | ModelKind::Snail);
        if attends && (self.heads == 0 || !self.width.is_multiple_of(self.heads)) {
            return bad(format!("{} heads do not divide width {}", self.heads, self.width));
        }
        if self.kind == ModelKind::Snail && self.heads != 8 {
            return bad(format!("uses 8 attention heads, got {}", self.heads));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads.max(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
    }

    #[test]
    fn defaults_are_valid() {
        for k in ModelKind::ALL {
            ModelConfig::new(k, 10, 32, 0).validate().unwrap();
        }
    }

    #[test]
    fn snail_head_split() {
        let c = ModelConfig::new(ModelKind::Snail, 10, 256, 0);
        assert_eq!(c.head_dim(), 32);
        let odd = ModelConfig { width: 36, ..c };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
    }
}
