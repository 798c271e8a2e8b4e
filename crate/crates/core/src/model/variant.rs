use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Every trainable architecture: the proposed model, four baselines and
/// three ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Image encoder + input models + graph policy.
    CnnGn,
    /// Image encoder + input models + MLP policy.
    CnnMlp,
    /// Image encoder + global input model only; no joint state.
    CnnMlpImg,
    /// Numeric target through a global input model + graph policy.
    Gn,
    /// Raw flat numeric state + MLP policy.
    Mlp,
    /// CNN-GN with raw encoder features and zero-padded raw joint states.
    CnnGnNoInputModels,
    /// GN without pooling; one shared per-node output map.
    GnNodeShared,
    /// GN without pooling; a dedicated output map per node.
    GnNodeDedicated,
}

/// How the policy turns node/flat features into action means.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    GraphPooled,
    GraphNodeShared,
    GraphNodeDedicated,
    Mlp,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::CnnGn,
        Variant::CnnMlp,
        Variant::CnnMlpImg,
        Variant::Gn,
        Variant::Mlp,
        Variant::CnnGnNoInputModels,
        Variant::GnNodeShared,
        Variant::GnNodeDedicated,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::CnnGn => "cnn-gn",
            Variant::CnnMlp => "cnn-mlp",
            Variant::CnnMlpImg => "cnn-mlp-img",
            Variant::Gn => "gn",
            Variant::Mlp => "mlp",
            Variant::CnnGnNoInputModels => "cnn-gn-no-input-models",
            Variant::GnNodeShared => "gn-node-shared",
            Variant::GnNodeDedicated => "gn-node-dedicated",
        }
    }

    /// Consumes rendered images through the encoder.
    pub fn uses_images(self) -> bool {
        matches!(
            self,
            Variant::CnnGn | Variant::CnnMlp | Variant::CnnMlpImg | Variant::CnnGnNoInputModels
        )
    }

    /// Has a global input model (and, except for the image-only model, a
    /// joint input model).
    pub fn has_input_models(self) -> bool {
        !matches!(self, Variant::Mlp | Variant::CnnGnNoInputModels)
    }

    pub fn uses_joint_states(self) -> bool {
        self != Variant::CnnMlpImg
    }

    pub fn policy_kind(self) -> PolicyKind {
        match self {
            Variant::CnnGn | Variant::Gn | Variant::CnnGnNoInputModels => PolicyKind::GraphPooled,
            Variant::GnNodeShared => PolicyKind::GraphNodeShared,
            Variant::GnNodeDedicated => PolicyKind::GraphNodeDedicated,
            Variant::CnnMlp | Variant::CnnMlpImg | Variant::Mlp => PolicyKind::Mlp,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == norm)
            .ok_or_else(|| {
                let known: Vec<_> = Variant::ALL.iter().map(|v| v.tag()).collect();
                Error::Parse(format!("unknown variant {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.tag().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("CNN_GN".parse::<Variant>().unwrap(), Variant::CnnGn);
        assert!("resnet".parse::<Variant>().is_err());
    }
}
