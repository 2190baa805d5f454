use alloc::vec::Vec;
use core::fmt;

/// Which of the two expert branches a record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchKind {
    /// Routed on the pooled image feature.
    DataDriven,
    /// Routed on the gaze feature.
    DomainExpert,
}

impl BranchKind {
    pub fn label(self) -> &'static str {
        match self {
            BranchKind::DataDriven => "DD",
            BranchKind::DomainExpert => "DE",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "DD" => Some(BranchKind::DataDriven),
            "DE" => Some(BranchKind::DomainExpert),
            _ => None,
        }
    }
}

impl fmt::Display for BranchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One sample's routing through one branch of one hybrid block.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord<T> {
    /// Position of the sample in its batch.
    pub sample: usize,
    /// Index of the hybrid block within the network, in forward order.
    pub block: usize,
    pub branch: BranchKind,
    /// All `N` raw router scores.
    pub raw_scores: Vec<T>,
    /// Selected experts, highest score first.
    pub indices: Vec<usize>,
    /// Combination weights aligned with `indices`; they sum to one.
    pub weights: Vec<T>,
    /// Fusion gate value `p` for the sample.
    pub gate: T,
}

impl<T> RoutingRecord<T> {
    pub fn top1(&self) -> usize {
        self.indices[0]
    }
}
