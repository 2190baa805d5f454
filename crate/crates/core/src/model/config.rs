use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};

/// Architecture of a [`DkghNet`](crate::model::DkghNet).
///
/// Stage `i > 0` halves the resolution in its first block. Hybrid blocks are
/// named by `(stage, block)` position and replace the basic block there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_stride: usize,
    pub stage_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub dkgh_positions: Vec<(usize, usize)>,
    pub num_experts: usize,
    pub top_k: usize,
    /// Output channels of the three stride-2 gaze encoder convolutions.
    pub gaze_channels: Vec<usize>,
    /// Width of the gaze feature `x_exp`.
    pub gaze_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// 16-channel stem, stages of two blocks at 16 and 32 channels, a hybrid
    /// block in the second slot of each stage, 4 experts, sparse routing.
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            stem_channels: 16,
            stem_stride: 1,
            stage_channels: vec![16, 32],
            stage_blocks: vec![2, 2],
            dkgh_positions: vec![(0, 1), (1, 1)],
            num_experts: 4,
            top_k: 1,
            gaze_channels: vec![8, 16, 32],
            gaze_dim: 32,
            num_classes: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small network for tests and desk-scale experiments: strided stem,
    /// one plain block, one hybrid block, two experts.
    pub fn toy() -> Self {
        ModelConfig {
            in_channels: 1,
            stem_channels: 8,
            stem_stride: 2,
            stage_channels: vec![8, 16],
            stage_blocks: vec![1, 1],
            dkgh_positions: vec![(1, 0)],
            num_experts: 2,
            top_k: 1,
            gaze_channels: vec![4, 8, 8],
            gaze_dim: 16,
            num_classes: 3,
            seed: 0,
        }
    }

    /// Same backbone with every hybrid block removed.
    pub fn baseline(&self) -> Self {
        ModelConfig {
            dkgh_positions: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(DkghError::Config(msg));
        if self.num_experts == 0 {
            return fail("num_experts must be >= 1".into());
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return fail(format!(
                "top_k must be in [1, {}], got {}",
                self.num_experts, self.top_k
            ));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.stage_blocks.len() {
            return fail("stage_channels and stage_blocks must be non-empty and equally long".into());
        }
        if self.stage_blocks.contains(&0) || self.stage_channels.contains(&0) {
            return fail("every stage needs at least one block and one channel".into());
        }
        if self.in_channels == 0 || self.stem_channels == 0 || self.stem_stride == 0 {
            return fail("stem sizes must be positive".into());
        }
        if self.gaze_channels.len() != 3 || self.gaze_channels.contains(&0) || self.gaze_dim == 0 {
            return fail("gaze encoder needs three positive conv widths and gaze_dim >= 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2".into());
        }
        for (i, &(s, b)) in self.dkgh_positions.iter().enumerate() {
            if s >= self.stage_blocks.len() || b >= self.stage_blocks[s] {
                return fail(format!("hybrid block position ({s},{b}) is outside the backbone"));
            }
            if self.dkgh_positions[..i].contains(&(s, b)) {
                return fail(format!("hybrid block position ({s},{b}) listed twice"));
            }
        }
        Ok(())
    }

    pub fn is_hybrid(&self, stage: usize, block: usize) -> bool {
        self.dkgh_positions.contains(&(stage, block))
    }

    pub fn hybrid_blocks(&self) -> usize {
        self.dkgh_positions.len()
    }

    /// `(in_channels, out_channels, stride)` of every block, stage by stage.
    pub fn block_shapes(&self) -> Vec<Vec<(usize, usize, usize)>> {
        let mut c_in = self.stem_channels;
        let mut out = Vec::new();
        for (s, (&c, &n)) in self.stage_channels.iter().zip(&self.stage_blocks).enumerate() {
            let mut stage = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                stage.push((c_in, c, stride));
                c_in = c;
            }
            out.push(stage);
        }
        out
    }
}
