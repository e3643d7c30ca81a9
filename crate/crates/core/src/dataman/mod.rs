//! Dataset manifests, family-level splits, preprocessing, augmentation and
//! metadata encoding.

mod augment;
mod image;
mod manifest;
mod metadata;
mod preprocess;
mod split;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use self::augment::{augment, AugmentConfig};
pub use self::image::Image;
pub use self::manifest::{DatasetManifest, ImageRecord, SYNTHETIC_FAMILY};
pub use self::metadata::{encode_metadata, MetadataRecord, Sex};
pub use self::preprocess::{bscan_content_rows, conform, preprocess, Interpolation, PreprocessConfig};
pub use self::resample::{resize, resize_bilinear_plane};
pub use self::split::{make_splits, Split, SplitAssignment, SplitConfig, SplitStats};

mod resample;

macro_rules! modalities {
    ($($variant:ident => $tag:literal),+ $(,)?) => {
        /// Imaging modality tag. The filter can be configured over all tags;
        /// the classification pipeline uses [`Modality::PIPELINE`].
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        pub enum Modality {
            $(#[serde(rename = $tag)] $variant,)+
        }

        impl Modality {
            pub const ALL: &'static [Modality] = &[$(Modality::$variant,)+];

            pub fn tag(self) -> &'static str {
                match self {
                    $(Modality::$variant => $tag,)+
                }
            }
        }

        impl FromStr for Modality {
            type Err = crate::Error;
            fn from_str(s: &str) -> crate::Result<Self> {
                match s {
                    $($tag => Ok(Modality::$variant),)+
                    other => Err(crate::Error::InvalidInput(format!("unknown modality `{other}`"))),
                }
            }
        }
    };
}

modalities! {
    Col => "COL",
    Faf => "FAF",
    OctaEmac => "OCTA-EMAC",
    OctaEonh => "OCTA-EONH",
    OctaWonh => "OCTA-WONH",
    OctaWmac => "OCTA-WMAC",
    OctaOrccmac => "OCTA-ORCCMAC",
    OctaOrcconh => "OCTA-ORCCONH",
    OctaRmac => "OCTA-RMAC",
    OctaRonh => "OCTA-RONH",
    OctaDmac => "OCTA-DMAC",
    OctaDonh => "OCTA-DONH",
    OctaSmac => "OCTA-SMAC",
    OctaSonh => "OCTA-SONH",
    OctWonh => "OCT-WONH",
    OctWmac => "OCT-WMAC",
    OctOrccmac => "OCT-ORCCMAC",
    OctOrcconh => "OCT-ORCCONH",
    OctRmac => "OCT-RMAC",
    OctRonh => "OCT-RONH",
    OctDmac => "OCT-DMAC",
    OctDonh => "OCT-DONH",
    OctSmac => "OCT-SMAC",
    OctSonh => "OCT-SONH",
    OctBmac => "OCT-BMAC",
    OctBonh => "OCT-BONH",
}

/// How an image of a modality is acquired, which decides preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityKind {
    /// Fundus photograph on a dark background.
    Fundus,
    /// Cross-sectional OCT B-scan with empty rows above and below the retina.
    BScan,
    /// En-face projection (OCT-A slabs, structural en-face maps).
    EnFace,
}

impl Modality {
    /// The four modalities used for synthesis and classification, in the
    /// fixed order used by the fusion head.
    pub const PIPELINE: [Modality; 4] = [
        Modality::OctaSmac,
        Modality::OctBonh,
        Modality::OctBmac,
        Modality::Faf,
    ];

    pub fn kind(self) -> ModalityKind {
        match self {
            Modality::Col | Modality::Faf => ModalityKind::Fundus,
            Modality::OctBmac | Modality::OctBonh => ModalityKind::BScan,
            _ => ModalityKind::EnFace,
        }
    }

    pub fn is_bscan(self) -> bool {
        self.kind() == ModalityKind::BScan
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// AmyloidPET status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEG")]
    Neg,
    #[serde(rename = "UNKNOWN")]
    Unknown,
}

impl Label {
    pub fn tag(self) -> &'static str {
        match self {
            Label::Pos => "POS",
            Label::Neg => "NEG",
            Label::Unknown => "UNKNOWN",
        }
    }

    /// Class index used for diffusion conditioning: NEG = 0, POS = 1.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Neg => Some(0),
            Label::Pos => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_class_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Neg),
            1 => Some(Label::Pos),
            _ => None,
        }
    }

    pub fn is_known(self) -> bool {
        self != Label::Unknown
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Label {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "POS" => Ok(Label::Pos),
            "NEG" => Ok(Label::Neg),
            "UNKNOWN" => Ok(Label::Unknown),
            other => Err(crate::Error::InvalidInput(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    #[serde(rename = "REAL")]
    Real,
    #[serde(rename = "SYNTHETIC")]
    Synthetic,
}

impl Provenance {
    pub fn tag(self) -> &'static str {
        match self {
            Provenance::Real => "REAL",
            Provenance::Synthetic => "SYNTHETIC",
        }
    }
}

impl FromStr for Provenance {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "REAL" => Ok(Provenance::Real),
            "SYNTHETIC" => Ok(Provenance::Synthetic),
            other => Err(crate::Error::InvalidInput(format!("unknown provenance `{other}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modality_tags_round_trip() {
        assert_eq!(Modality::ALL.len(), 26);
        for &m in Modality::ALL {
            assert_eq!(m.tag().parse::<Modality>().unwrap(), m);
        }
    }

    #[test]
    fn pipeline_kinds() {
        assert_eq!(Modality::Faf.kind(), ModalityKind::Fundus);
        assert!(Modality::OctBmac.is_bscan());
        assert!(Modality::OctBonh.is_bscan());
        assert_eq!(Modality::OctaSmac.kind(), ModalityKind::EnFace);
    }
}
