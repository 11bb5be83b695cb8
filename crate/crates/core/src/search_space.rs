//! Candidate blocks, superblocks and the constrained macro-architectures.
//!
//! Every superblock offers the same 13 candidates in a fixed order: twelve
//! inverted-residual configurations followed by a parameter-free skip. The
//! order is part of the on-disk contract, since architecture logits and cost
//! tables are indexed by it.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of candidates per superblock.
pub const NUM_CANDIDATES: usize = 13;
/// Column of the skip candidate.
pub const SKIP_INDEX: usize = 12;

/// One candidate block choice.
///
/// The skip candidate has all numeric fields zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CandidateSpec {
    pub kernel: usize,
    pub dilation: usize,
    pub expansion: usize,
    pub groups: usize,
    pub is_skip: bool,
}

impl CandidateSpec {
    pub const SKIP: CandidateSpec = CandidateSpec {
        kernel: 0,
        dilation: 0,
        expansion: 0,
        groups: 0,
        is_skip: true,
    };

    const fn block(kernel: usize, dilation: usize, expansion: usize, groups: usize) -> Self {
        CandidateSpec {
            kernel,
            dilation,
            expansion,
            groups,
            is_skip: false,
        }
    }

    /// Builds a non-skip candidate, rejecting combinations outside the
    /// candidate table (for instance k=5 with d=2).
    pub fn new(kernel: usize, dilation: usize, expansion: usize, groups: usize) -> Result<Self> {
        let spec = Self::block(kernel, dilation, expansion, groups);
        if CANDIDATES.contains(&spec) {
            Ok(spec)
        } else {
            Err(Error::InvalidArgument(format!(
                "no candidate with k={kernel} d={dilation} e={expansion} g={groups}"
            )))
        }
    }

    /// Canonical column of this candidate.
    pub fn index(&self) -> usize {
        CANDIDATES
            .iter()
            .position(|c| c == self)
            .expect("candidate specs are only constructed from the canonical table")
    }

    /// `k3_d1_e6_g1` style name, or `skip`.
    pub fn mnemonic(&self) -> String {
        if self.is_skip {
            "skip".to_string()
        } else {
            format!(
                "k{}_d{}_e{}_g{}",
                self.kernel, self.dilation, self.expansion, self.groups
            )
        }
    }

    pub fn from_mnemonic(name: &str) -> Result<Self> {
        CANDIDATES
            .iter()
            .find(|c| c.mnemonic() == name)
            .copied()
            .ok_or_else(|| Error::UnknownName {
                kind: "candidate",
                name: name.to_string(),
                valid: CANDIDATES
                    .iter()
                    .map(|c| c.mnemonic())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    /// Receptive-field enlarging candidates: dilated or 5x5.
    pub fn enlarges_receptive_field(&self) -> bool {
        !self.is_skip && (self.dilation == 2 || self.kernel == 5)
    }

    /// Channels of the depthwise stage for a block with `c_in` inputs.
    pub fn hidden_channels(&self, c_in: usize) -> usize {
        self.expansion * c_in
    }
}

impl fmt::Display for CandidateSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic())
    }
}

/// The candidate table, in column order.
pub const CANDIDATES: [CandidateSpec; NUM_CANDIDATES] = [
    CandidateSpec::block(3, 1, 1, 2),
    CandidateSpec::block(3, 1, 1, 1),
    CandidateSpec::block(3, 1, 3, 1),
    CandidateSpec::block(3, 1, 6, 1),
    CandidateSpec::block(3, 2, 1, 2),
    CandidateSpec::block(3, 2, 1, 1),
    CandidateSpec::block(3, 2, 3, 1),
    CandidateSpec::block(3, 2, 6, 1),
    CandidateSpec::block(5, 1, 1, 2),
    CandidateSpec::block(5, 1, 1, 1),
    CandidateSpec::block(5, 1, 3, 1),
    CandidateSpec::block(5, 1, 6, 1),
    CandidateSpec::SKIP,
];

/// Spatial size plus channel count of a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// One searchable position of the encoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SuperblockSpec {
    pub index: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub output_stride: usize,
    /// Always the 13 canonical candidates.
    pub candidates: Vec<CandidateSpec>,
    /// False when the document explicitly removed the skip option.
    pub skip_enabled: bool,
}

impl SuperblockSpec {
    pub fn new(index: usize, c_in: usize, c_out: usize, stride: usize, output_stride: usize) -> Self {
        let mut sb = SuperblockSpec {
            index,
            c_in,
            c_out,
            stride,
            output_stride,
            candidates: CANDIDATES.to_vec(),
            skip_enabled: true,
        };
        sb.skip_enabled = sb.skip_structurally_possible();
        sb
    }

    /// A skip needs stride 1 and must not drop channels; extra output
    /// channels are zero-filled.
    pub fn skip_structurally_possible(&self) -> bool {
        self.stride == 1 && self.c_out >= self.c_in
    }

    /// Uses the identity residual connection inside a block.
    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn is_admissible(&self, candidate: usize) -> bool {
        if candidate >= NUM_CANDIDATES {
            return false;
        }
        if candidate == SKIP_INDEX {
            self.skip_enabled && self.skip_structurally_possible()
        } else {
            true
        }
    }

    /// Boolean mask over the 13 candidates.
    pub fn admissible_mask(&self) -> Vec<bool> {
        (0..NUM_CANDIDATES).map(|j| self.is_admissible(j)).collect()
    }

    /// Output shape for an input feature map, with "same" padding.
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        if input.channels != self.c_in {
            return Err(Error::Shape(format!(
                "superblock {} expects {} input channels, got {}",
                self.index, self.c_in, input.channels
            )));
        }
        if input.height % self.stride != 0 || input.width % self.stride != 0 {
            return Err(Error::Shape(format!(
                "superblock {}: {}x{} not divisible by stride {}",
                self.index, input.height, input.width, self.stride
            )));
        }
        Ok(FeatureShape {
            height: input.height / self.stride,
            width: input.width / self.stride,
            channels: self.c_out,
        })
    }
}

/// The fixed first convolution: 3x3, stride 2, followed by BN and ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl StemSpec {
    pub const STANDARD: StemSpec = StemSpec {
        c_in: 3,
        c_out: 16,
        kernel: 3,
        stride: 2,
    };
}

/// Fixed 1x1 conv (BN, ReLU) between the last superblock and the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConv {
    pub c_in: usize,
    pub c_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    LrAspp,
    DepthwiseAspp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    /// Width of the decoder's internal layers.
    #[serde(rename = "channels")]
    pub internal_channels: usize,
    pub num_classes: usize,
}

/// Stem, ordered superblocks, optional head conv and decoder.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroArch {
    pub name: String,
    pub stem: StemSpec,
    pub superblocks: Vec<SuperblockSpec>,
    pub head: Option<HeadConv>,
    pub decoder: DecoderSpec,
    pub low_level_tap: usize,
}

impl MacroArch {
    pub fn num_superblocks(&self) -> usize {
        self.superblocks.len()
    }

    /// Channels entering the decoder.
    pub fn encoder_channels(&self) -> usize {
        match self.head {
            Some(h) => h.c_out,
            None => self.superblocks.last().map_or(self.stem.c_out, |s| s.c_out),
        }
    }

    pub fn final_output_stride(&self) -> usize {
        self.superblocks
            .last()
            .map_or(self.stem.stride, |s| s.output_stride)
    }

    /// Spatial size of the map entering superblock `index` for a given
    /// network input; `index == len` gives the encoder output size.
    pub fn dims_before(&self, index: usize, input: (usize, usize)) -> (usize, usize) {
        let mut h = input.0 / self.stem.stride;
        let mut w = input.1 / self.stem.stride;
        for sb in &self.superblocks[..index] {
            h /= sb.stride;
            w /= sb.stride;
        }
        (h, w)
    }

    /// Largest input dimensions divisor required by the stride chain.
    pub fn required_divisor(&self) -> usize {
        self.final_output_stride()
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.stem != StemSpec::STANDARD {
            return Err(Error::Schema(format!(
                "stem must be conv 3x3 stride 2 from 3 to 16 channels, got {:?}",
                self.stem
            )));
        }
        if self.superblocks.is_empty() {
            return Err(Error::Schema("at least one superblock is required".into()));
        }
        let mut channels = self.stem.c_out;
        let mut os = self.stem.stride;
        for (i, sb) in self.superblocks.iter().enumerate() {
            if sb.index != i {
                return Err(Error::Superblock {
                    index: i,
                    reason: format!("index field is {}", sb.index),
                });
            }
            if sb.c_in != channels {
                return Err(Error::ChannelChain {
                    index: i,
                    expected: channels,
                    found: sb.c_in,
                });
            }
            if sb.c_in == 0 || sb.c_out == 0 {
                return Err(Error::Superblock {
                    index: i,
                    reason: "channel counts must be positive".into(),
                });
            }
            if sb.stride != 1 && sb.stride != 2 {
                return Err(Error::Superblock {
                    index: i,
                    reason: format!("stride must be 1 or 2, got {}", sb.stride),
                });
            }
            if sb.candidates.as_slice() != CANDIDATES.as_slice() {
                return Err(Error::Superblock {
                    index: i,
                    reason: "candidate list is not the canonical 13-entry table".into(),
                });
            }
            os *= sb.stride;
            if sb.output_stride != os {
                return Err(Error::Superblock {
                    index: i,
                    reason: format!(
                        "output stride {} inconsistent with cumulative stride {}",
                        sb.output_stride, os
                    ),
                });
            }
            if sb.skip_enabled && !sb.skip_structurally_possible() {
                return Err(Error::InadmissibleSkip {
                    index: i,
                    reason: format!(
                        "skip needs stride 1 and c_out >= c_in (stride {}, {} -> {})",
                        sb.stride, sb.c_in, sb.c_out
                    ),
                });
            }
            channels = sb.c_out;
        }
        if let Some(head) = self.head {
            if head.c_in != channels || head.c_out == 0 {
                return Err(Error::Schema(format!(
                    "head conv expects {} input channels, declared {} -> {}",
                    channels, head.c_in, head.c_out
                )));
            }
        }
        if self.decoder.internal_channels == 0 || self.decoder.num_classes == 0 {
            return Err(Error::Schema(
                "decoder channels and num_classes must be positive".into(),
            ));
        }
        if self.low_level_tap >= self.superblocks.len() {
            return Err(Error::Schema(format!(
                "low_level_tap {} out of range (0..{})",
                self.low_level_tap,
                self.superblocks.len()
            )));
        }
        let tap_os = self.superblocks[self.low_level_tap].output_stride;
        if self
            .superblocks
            .get(self.low_level_tap + 1)
            .is_some_and(|next| next.output_stride == tap_os && next.output_stride < os)
        {
            return Err(Error::Schema(format!(
                "low_level_tap {} is not the last block at output stride {}",
                self.low_level_tap, tap_os
            )));
        }
        Ok(())
    }

    /// Checks that `path` has one admissible choice per superblock.
    pub fn validate_path(&self, path: &ArchPath) -> Result<()> {
        if path.choices.len() != self.superblocks.len() {
            return Err(Error::PathLength {
                expected: self.superblocks.len(),
                found: path.choices.len(),
            });
        }
        for (sb, &choice) in self.superblocks.iter().zip(&path.choices) {
            if choice >= NUM_CANDIDATES {
                return Err(Error::InvalidPath {
                    index: sb.index,
                    reason: format!("candidate index {choice} out of range"),
                });
            }
            if !sb.is_admissible(choice) {
                return Err(Error::InvalidPath {
                    index: sb.index,
                    reason: format!(
                        "skip not admissible (stride {}, {} -> {} channels)",
                        sb.stride, sb.c_in, sb.c_out
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Free-function form of [`MacroArch::validate_path`].
pub fn validate_path(path: &ArchPath, arch: &MacroArch) -> Result<()> {
    arch.validate_path(path)
}

/// One candidate index per superblock.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchPath {
    pub choices: Vec<usize>,
}

impl ArchPath {
    pub fn new(choices: Vec<usize>) -> Self {
        ArchPath { choices }
    }

    pub fn all_skip(len: usize) -> Self {
        ArchPath {
            choices: vec![SKIP_INDEX; len],
        }
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    pub fn candidate(&self, i: usize) -> CandidateSpec {
        CANDIDATES[self.choices[i]]
    }

    pub fn mnemonics(&self) -> Vec<String> {
        self.choices.iter().map(|&c| CANDIDATES[c].mnemonic()).collect()
    }

    pub fn from_mnemonics<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        names
            .iter()
            .map(|n| CandidateSpec::from_mnemonic(n.as_ref()).map(|c| c.index()))
            .collect::<Result<Vec<_>>>()
            .map(ArchPath::new)
    }

    /// Compact single-line form, `k3_d1_e1_g2|skip|...`.
    pub fn to_compact(&self) -> String {
        self.mnemonics().join("|")
    }

    pub fn from_compact(s: &str) -> Result<Self> {
        let names: Vec<&str> = s.split('|').map(str::trim).collect();
        Self::from_mnemonics(&names)
    }

    /// Path file format: JSON list of mnemonics.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.mnemonics()).expect("strings always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let names: Vec<String> = serde_json::from_str(text)?;
        Self::from_mnemonics(&names)
    }
}

impl Serialize for ArchPath {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.mnemonics().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ArchPath {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(deserializer)?;
        ArchPath::from_mnemonics(&names).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Documents

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SuperblockDoc {
    c_in: usize,
    c_out: usize,
    stride: usize,
    output_stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    skip: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadDoc {
    c_out: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceDoc {
    name: String,
    stem: StemSpec,
    superblocks: Vec<SuperblockDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<HeadDoc>,
    decoder: DecoderSpec,
    low_level_tap: usize,
}

/// Parses and validates a JSON search-space document.
pub fn load_search_space(document: &str) -> Result<MacroArch> {
    let doc: SpaceDoc =
        serde_json::from_str(document).map_err(|e| Error::Schema(e.to_string()))?;
    let mut superblocks = Vec::with_capacity(doc.superblocks.len());
    for (i, s) in doc.superblocks.iter().enumerate() {
        let mut sb = SuperblockSpec::new(i, s.c_in, s.c_out, s.stride, s.output_stride);
        match s.skip {
            Some(true) if !sb.skip_structurally_possible() => {
                return Err(Error::InadmissibleSkip {
                    index: i,
                    reason: format!(
                        "skip declared on a block with stride {} and {} -> {} channels",
                        s.stride, s.c_in, s.c_out
                    ),
                });
            }
            Some(flag) => sb.skip_enabled = flag && sb.skip_structurally_possible(),
            None => {}
        }
        superblocks.push(sb);
    }
    let last_channels = superblocks.last().map_or(doc.stem.c_out, |s| s.c_out);
    let arch = MacroArch {
        name: doc.name,
        stem: doc.stem,
        superblocks,
        head: doc.head.map(|h| HeadConv {
            c_in: last_channels,
            c_out: h.c_out,
        }),
        decoder: doc.decoder,
        low_level_tap: doc.low_level_tap,
    };
    arch.validate()?;
    Ok(arch)
}

/// Serializes a macro-architecture to the document format.
pub fn export_search_space(arch: &MacroArch) -> String {
    let doc = SpaceDoc {
        name: arch.name.clone(),
        stem: arch.stem,
        superblocks: arch
            .superblocks
            .iter()
            .map(|s| SuperblockDoc {
                c_in: s.c_in,
                c_out: s.c_out,
                stride: s.stride,
                output_stride: s.output_stride,
                skip: (!s.skip_enabled && s.skip_structurally_possible()).then_some(false),
            })
            .collect(),
        head: arch.head.map(|h| HeadDoc { c_out: h.c_out }),
        decoder: arch.decoder,
        low_level_tap: arch.low_level_tap,
    };
    serde_json::to_string_pretty(&doc).expect("document always serializes")
}

// ---------------------------------------------------------------------------
// Built-in spaces

pub const BUILTIN_SPACES: [&str; 3] = ["small", "large", "xlarge"];
pub const BUILTIN_PATHS: [&str; 6] = [
    "mac_small",
    "mac_large",
    "mac_xlarge",
    "lat_small",
    "lat_large",
    "lat_xlarge",
];

/// Cityscapes has 19 evaluation classes.
const CITYSCAPES_CLASSES: usize = 19;

fn chain(name: &str, plan: &[(usize, usize, usize)]) -> Vec<SuperblockSpec> {
    let _ = name;
    let mut os = StemSpec::STANDARD.stride;
    plan.iter()
        .enumerate()
        .map(|(i, &(c_in, c_out, stride))| {
            os *= stride;
            SuperblockSpec::new(i, c_in, c_out, stride, os)
        })
        .collect()
}

fn repeat(out: &mut Vec<(usize, usize, usize)>, c: usize, n: usize) {
    out.extend(std::iter::repeat_n((c, c, 1), n));
}

fn small_plan() -> Vec<(usize, usize, usize)> {
    let mut p = vec![(16, 16, 2)];
    repeat(&mut p, 16, 3);
    p.push((16, 24, 2));
    repeat(&mut p, 24, 3);
    p.push((24, 40, 2));
    repeat(&mut p, 40, 3);
    p.push((40, 48, 1));
    repeat(&mut p, 48, 3);
    p.push((48, 96, 1));
    repeat(&mut p, 96, 3);
    p
}

// The "large" network pairs with the 16/24/32/64/96/160 channel plan and the
// "xlarge" network with 16/24/32/48/96/144/240; see the README section on
// cost accounting.
fn large_plan() -> Vec<(usize, usize, usize)> {
    let mut p = vec![(16, 24, 1), (24, 24, 2)];
    repeat(&mut p, 24, 3);
    p.push((24, 32, 2));
    repeat(&mut p, 32, 3);
    p.push((32, 64, 2));
    repeat(&mut p, 64, 3);
    p.push((64, 96, 1));
    repeat(&mut p, 96, 3);
    p.push((96, 160, 1));
    repeat(&mut p, 160, 4);
    p
}

fn xlarge_plan() -> Vec<(usize, usize, usize)> {
    let mut p = vec![(16, 24, 1), (24, 32, 2)];
    repeat(&mut p, 32, 3);
    p.push((32, 48, 2));
    repeat(&mut p, 48, 3);
    p.push((48, 96, 2));
    repeat(&mut p, 96, 3);
    p.push((96, 144, 1));
    repeat(&mut p, 144, 3);
    p.push((144, 240, 1));
    repeat(&mut p, 240, 4);
    p
}

/// Index of the last superblock whose output stride equals `os`.
fn last_at_stride(superblocks: &[SuperblockSpec], os: usize) -> usize {
    superblocks
        .iter()
        .rposition(|s| s.output_stride == os)
        .expect("built-in plans reach every tap stride")
}

/// Returns one of the three built-in macro-architectures.
pub fn builtin_space(name: &str) -> Result<MacroArch> {
    let (plan, head, decoder, tap_os) = match name {
        "small" => (
            small_plan(),
            384,
            DecoderSpec {
                kind: DecoderKind::LrAspp,
                internal_channels: 128,
                num_classes: CITYSCAPES_CLASSES,
            },
            8,
        ),
        "large" => (
            large_plan(),
            192,
            DecoderSpec {
                kind: DecoderKind::LrAspp,
                internal_channels: 128,
                num_classes: CITYSCAPES_CLASSES,
            },
            8,
        ),
        "xlarge" => (
            xlarge_plan(),
            256,
            DecoderSpec {
                kind: DecoderKind::DepthwiseAspp,
                internal_channels: 256,
                num_classes: CITYSCAPES_CLASSES,
            },
            4,
        ),
        other => {
            return Err(Error::UnknownName {
                kind: "search space",
                name: other.to_string(),
                valid: BUILTIN_SPACES.join(", "),
            })
        }
    };
    let superblocks = chain(name, &plan);
    let last = superblocks.last().expect("plans are nonempty").c_out;
    let low_level_tap = last_at_stride(&superblocks, tap_os);
    let arch = MacroArch {
        name: name.to_string(),
        stem: StemSpec::STANDARD,
        superblocks,
        head: Some(HeadConv {
            c_in: last,
            c_out: head,
        }),
        decoder,
        low_level_tap,
    };
    debug_assert!(arch.validate().is_ok());
    Ok(arch)
}

const MAC_SMALL: [&str; 20] = [
    "k3_d1_e1_g2", "k3_d1_e1_g1", "k3_d1_e1_g1", "k3_d1_e1_g2", "k5_d1_e6_g1",
    "k3_d1_e1_g1", "k3_d1_e1_g1", "k3_d2_e1_g2", "k5_d1_e6_g1", "k3_d2_e6_g1",
    "skip", "k3_d1_e1_g2", "k5_d1_e6_g1", "k3_d2_e3_g1", "k3_d2_e1_g1",
    "k3_d2_e1_g1", "k3_d2_e6_g1", "k3_d2_e1_g2", "k3_d2_e1_g2", "k3_d2_e1_g2",
];

const LAT_SMALL: [&str; 20] = [
    "k3_d1_e1_g1", "skip", "skip", "skip", "k3_d1_e6_g1",
    "k3_d1_e6_g1", "skip", "skip", "k5_d1_e6_g1", "k3_d2_e6_g1",
    "k5_d1_e1_g2", "k3_d1_e1_g2", "k3_d2_e6_g1", "k3_d2_e6_g1", "k3_d2_e6_g1",
    "k3_d2_e1_g1", "k3_d2_e6_g1", "k3_d2_e3_g1", "k3_d2_e3_g1", "k3_d2_e3_g1",
];

const MAC_LARGE: [&str; 22] = [
    "k3_d1_e1_g2", "k3_d1_e6_g1", "k3_d2_e1_g2", "k3_d1_e1_g2", "k3_d1_e1_g2",
    "k5_d1_e6_g1", "k5_d1_e6_g1", "k3_d2_e6_g1", "k5_d1_e6_g1", "k5_d1_e6_g1",
    "k5_d1_e6_g1", "k5_d1_e1_g1", "k3_d1_e3_g1", "k5_d1_e6_g1", "k3_d1_e1_g1",
    "k5_d1_e1_g1", "k3_d2_e3_g1", "k3_d2_e6_g1", "k3_d2_e1_g2", "k3_d2_e1_g2",
    "k3_d2_e1_g2", "k3_d2_e1_g1",
];

const LAT_LARGE: [&str; 22] = [
    "skip", "k3_d1_e6_g1", "k3_d1_e3_g1", "k3_d2_e1_g1", "k3_d1_e3_g1",
    "k5_d1_e6_g1", "k3_d1_e6_g1", "k3_d1_e3_g1", "k3_d2_e6_g1", "k5_d1_e6_g1",
    "k5_d1_e1_g1", "k5_d1_e1_g1", "k5_d1_e1_g2", "k3_d2_e6_g1", "k3_d2_e6_g1",
    "k3_d2_e6_g1", "k3_d1_e1_g1", "k3_d2_e6_g1", "k3_d2_e6_g1", "k3_d2_e6_g1",
    "k3_d2_e6_g1", "k3_d2_e6_g1",
];

const MAC_XLARGE: [&str; 22] = [
    "k3_d1_e1_g2", "k3_d1_e3_g1", "k3_d1_e1_g2", "k5_d1_e1_g1", "k3_d2_e3_g1",
    "k5_d1_e6_g1", "k5_d1_e1_g2", "k3_d2_e1_g2", "k3_d1_e3_g1", "k5_d1_e6_g1",
    "k3_d1_e3_g1", "skip", "k3_d2_e1_g2", "k5_d1_e6_g1", "k3_d1_e1_g1",
    "k5_d1_e6_g1", "skip", "k3_d2_e6_g1", "k3_d2_e1_g2", "k3_d2_e1_g2",
    "k3_d2_e1_g2", "k3_d2_e3_g1",
];

const LAT_XLARGE: [&str; 22] = [
    "skip", "k3_d1_e3_g1", "k3_d1_e3_g1", "k3_d1_e3_g1", "k3_d2_e1_g1",
    "k3_d1_e6_g1", "k3_d1_e3_g1", "k5_d1_e6_g1", "k5_d1_e1_g2", "k5_d1_e6_g1",
    "k3_d1_e6_g1", "k3_d2_e1_g2", "k3_d1_e6_g1", "k5_d1_e6_g1", "k3_d2_e3_g1",
    "k3_d2_e1_g2", "k3_d1_e3_g1", "k3_d2_e6_g1", "k3_d2_e3_g1", "k5_d1_e1_g1",
    "k3_d2_e3_g1", "k3_d2_e6_g1",
];

/// Space a built-in path belongs to.
pub fn builtin_path_space(name: &str) -> Result<&'static str> {
    match name {
        "mac_small" | "lat_small" => Ok("small"),
        "mac_large" | "lat_large" => Ok("large"),
        "mac_xlarge" | "lat_xlarge" => Ok("xlarge"),
        other => Err(Error::UnknownName {
            kind: "built-in path",
            name: other.to_string(),
            valid: BUILTIN_PATHS.join(", "),
        }),
    }
}

/// Discovered MAC- and latency-optimized architectures.
pub fn builtin_path(name: &str) -> Result<ArchPath> {
    let names: &[&str] = match name {
        "mac_small" => &MAC_SMALL,
        "lat_small" => &LAT_SMALL,
        "mac_large" => &MAC_LARGE,
        "lat_large" => &LAT_LARGE,
        "mac_xlarge" => &MAC_XLARGE,
        "lat_xlarge" => &LAT_XLARGE,
        other => {
            return Err(Error::UnknownName {
                kind: "built-in path",
                name: other.to_string(),
                valid: BUILTIN_PATHS.join(", "),
            })
        }
    };
    ArchPath::from_mnemonics(names)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(name: &str) -> usize {
        CandidateSpec::from_mnemonic(name).unwrap().index()
    }

    #[test]
    fn candidate_table_order() {
        let names: Vec<String> = CANDIDATES.iter().map(|c| c.mnemonic()).collect();
        assert_eq!(names[0], "k3_d1_e1_g2");
        assert_eq!(names[3], "k3_d1_e6_g1");
        assert_eq!(names[4], "k3_d2_e1_g2");
        assert_eq!(names[11], "k5_d1_e6_g1");
        assert_eq!(names[SKIP_INDEX], "skip");
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), NUM_CANDIDATES);
        assert!(CandidateSpec::new(5, 2, 1, 1).is_err());
        assert_eq!(CandidateSpec::new(3, 2, 6, 1).unwrap().index(), 7);
    }

    #[test]
    fn skip_is_canonically_zeroed() {
        let s = CandidateSpec::from_mnemonic("skip").unwrap();
        assert_eq!((s.kernel, s.dilation, s.expansion, s.groups), (0, 0, 0, 0));
        assert!(s.is_skip);
    }

    #[test]
    fn small_space_matches_table() {
        let s = builtin_space("small").unwrap();
        assert_eq!(s.num_superblocks(), 20);
        let sb0 = &s.superblocks[0];
        assert_eq!((sb0.c_in, sb0.c_out, sb0.stride, sb0.output_stride), (16, 16, 2, 4));
        assert_eq!(s.low_level_tap, 7);
        assert_eq!(s.superblocks[7].output_stride, 8);
        assert_eq!(s.decoder.kind, DecoderKind::LrAspp);
        assert_eq!(s.decoder.internal_channels, 128);
        let strided: Vec<usize> = s
            .superblocks
            .iter()
            .filter(|b| b.stride == 2)
            .map(|b| b.index)
            .collect();
        assert_eq!(strided, vec![0, 4, 8]);
    }

    #[test]
    fn large_and_xlarge_plans() {
        let l = builtin_space("large").unwrap();
        assert_eq!(l.num_superblocks(), 22);
        let sb5 = &l.superblocks[5];
        assert_eq!((sb5.c_in, sb5.c_out, sb5.stride, sb5.output_stride), (24, 32, 2, 8));
        assert_eq!(l.low_level_tap, 8);

        let x = builtin_space("xlarge").unwrap();
        assert_eq!(x.num_superblocks(), 22);
        let sb5 = &x.superblocks[5];
        assert_eq!((sb5.c_in, sb5.c_out, sb5.stride, sb5.output_stride), (32, 48, 2, 8));
        assert_eq!(x.low_level_tap, 4);
        assert_eq!(x.superblocks[4].output_stride, 4);
        assert_eq!(x.decoder.kind, DecoderKind::DepthwiseAspp);
        let head = x.head.unwrap();
        assert_eq!((head.c_in, head.c_out), (240, 256));
    }

    #[test]
    fn every_space_ends_at_output_stride_16() {
        for name in BUILTIN_SPACES {
            let s = builtin_space(name).unwrap();
            s.validate().unwrap();
            assert_eq!(s.final_output_stride(), 16, "{name}");
            for sb in &s.superblocks {
                assert_eq!(sb.candidates.len(), NUM_CANDIDATES);
                assert_eq!(sb.candidates[SKIP_INDEX], CandidateSpec::SKIP);
            }
        }
    }

    #[test]
    fn unknown_space_lists_options() {
        let err = builtin_space("medium").unwrap_err().to_string();
        assert!(err.contains("small") && err.contains("xlarge"), "{err}");
        assert!(builtin_path("mac_medium").is_err());
    }

    #[test]
    fn builtin_paths_validate_and_match_table() {
        for name in BUILTIN_PATHS {
            let path = builtin_path(name).unwrap();
            let space = builtin_space(builtin_path_space(name).unwrap()).unwrap();
            space.validate_path(&path).unwrap();
        }
        assert_eq!(builtin_path("mac_small").unwrap().choices[0], idx("k3_d1_e1_g2"));
        let lat_small = builtin_path("lat_small").unwrap();
        assert!(lat_small.choices[1..4].iter().all(|&c| c == SKIP_INDEX));
        assert_eq!(builtin_path("lat_large").unwrap().choices[0], SKIP_INDEX);
    }

    #[test]
    fn path_validation_errors() {
        let space = builtin_space("small").unwrap();
        let mut path = builtin_path("mac_small").unwrap();
        path.choices[0] = SKIP_INDEX; // stride 2
        match space.validate_path(&path) {
            Err(Error::InvalidPath { index, .. }) => assert_eq!(index, 0),
            other => panic!("unexpected {other:?}"),
        }
        let short = ArchPath::new(vec![0; 5]);
        assert!(matches!(
            space.validate_path(&short),
            Err(Error::PathLength { expected: 20, found: 5 })
        ));
    }

    #[test]
    fn output_shape_rules() {
        let sb = SuperblockSpec::new(0, 16, 24, 2, 4);
        let out = sb
            .output_shape(FeatureShape { height: 64, width: 128, channels: 16 })
            .unwrap();
        assert_eq!(out, FeatureShape { height: 32, width: 64, channels: 24 });
        let same = SuperblockSpec::new(1, 24, 24, 1, 4);
        let input = FeatureShape { height: 32, width: 64, channels: 24 };
        assert_eq!(same.output_shape(input).unwrap(), input);
        assert!(sb
            .output_shape(FeatureShape { height: 63, width: 128, channels: 16 })
            .is_err());
        assert!(sb
            .output_shape(FeatureShape { height: 64, width: 128, channels: 8 })
            .is_err());
    }

    #[test]
    fn dilated_same_padding_preserves_dims() {
        // out = (in + 2p - d(k-1) - 1)/s + 1 with p = d(k-1)/2
        for &(k, d) in &[(3usize, 1usize), (3, 2), (5, 1)] {
            let p = d * (k - 1) / 2;
            for n in [7usize, 16, 33] {
                assert_eq!(n + 2 * p - d * (k - 1) - 1 + 1, n);
            }
        }
        let p = 2 * (3 - 1) / 2;
        assert_eq!(p, 2);
    }

    #[test]
    fn document_round_trip() {
        for name in BUILTIN_SPACES {
            let s = builtin_space(name).unwrap();
            let doc = export_search_space(&s);
            let back = load_search_space(&doc).unwrap();
            assert_eq!(back, s);
            assert_eq!(export_search_space(&back), doc);
        }
    }

    #[test]
    fn document_errors_name_the_superblock() {
        let s = builtin_space("small").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&export_search_space(&s)).unwrap();
        v["superblocks"][5]["c_in"] = serde_json::json!(32);
        match load_search_space(&v.to_string()) {
            Err(Error::ChannelChain { index, expected, found }) => {
                assert_eq!((index, expected, found), (5, 24, 32))
            }
            other => panic!("unexpected {other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&export_search_space(&s)).unwrap();
        v["superblocks"][4]["skip"] = serde_json::json!(true);
        match load_search_space(&v.to_string()) {
            Err(Error::InadmissibleSkip { index, .. }) => assert_eq!(index, 4),
            other => panic!("unexpected {other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(&export_search_space(&s)).unwrap();
        v["superblocks"][3]["output_stride"] = serde_json::json!(8);
        assert!(matches!(
            load_search_space(&v.to_string()),
            Err(Error::Superblock { index: 3, .. })
        ));

        assert!(matches!(load_search_space("{\"name\": 1}"), Err(Error::Schema(_))));
    }

    #[test]
    fn disabling_skip_round_trips() {
        let s = builtin_space("small").unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&export_search_space(&s)).unwrap();
        v["superblocks"][2]["skip"] = serde_json::json!(false);
        let loaded = load_search_space(&v.to_string()).unwrap();
        assert!(!loaded.superblocks[2].is_admissible(SKIP_INDEX));
        let again = load_search_space(&export_search_space(&loaded)).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn path_json_round_trip() {
        let p = builtin_path("lat_xlarge").unwrap();
        assert_eq!(ArchPath::from_json(&p.to_json()).unwrap(), p);
        assert_eq!(ArchPath::from_compact(&p.to_compact()).unwrap(), p);
        assert!(ArchPath::from_json("[\"k7_d1_e1_g1\"]").is_err());
    }
}
