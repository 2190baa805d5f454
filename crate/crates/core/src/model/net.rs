use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{DkghError, Result};
use crate::model::config::ModelConfig;
use crate::model::gaze::GazeEncoder;
use crate::moe::{BlockOutput, DkghBlock, RoutingRecord};
use crate::nn::{join, Conv2d, Linear, Module, ResidualBasicBlock};
use crate::real::Real;
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One backbone position.
#[derive(Debug, Clone)]
pub enum NetBlock<T> {
    Plain(ResidualBasicBlock<T>),
    /// Hybrid block plus the linear map adapting the shared gaze feature to
    /// this block's width.
    Hybrid {
        block: DkghBlock<T>,
        gaze_projection: Linear<T>,
    },
}

/// Residual classifier hosting hybrid mixture-of-experts blocks.
#[derive(Debug, Clone)]
pub struct DkghNet<T> {
    config: ModelConfig,
    pub stem: Conv2d<T>,
    pub stages: Vec<Vec<NetBlock<T>>>,
    /// Present only when at least one hybrid block exists.
    pub gaze: Option<GazeEncoder<T>>,
    pub head: Linear<T>,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[B, num_classes]`.
    pub logits: Var,
    /// One entry per hybrid block, in forward order.
    pub blocks: Vec<BlockOutput>,
    /// Total (expert, sample) evaluations across all hybrid blocks.
    pub expert_evals: usize,
}

impl NetOutput {
    /// Per-sample routing records of every hybrid block.
    pub fn records<T: Real>(&self, tape: &Tape<'_, T>) -> Vec<RoutingRecord<T>> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.records(tape, i))
            .collect()
    }
}

impl<T: Real> DkghNet<T> {
    /// Builds and initializes a network; all weights derive from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(config.seed, 0);
        let stem = Conv2d::new(config.in_channels, config.stem_channels, 3, config.stem_stride, 1, &mut rng);
        let mut stages = Vec::new();
        for (s, shapes) in config.block_shapes().into_iter().enumerate() {
            let mut stage = Vec::new();
            for (b, (c_in, c_out, stride)) in shapes.into_iter().enumerate() {
                stage.push(if config.is_hybrid(s, b) {
                    NetBlock::Hybrid {
                        block: DkghBlock::new(c_in, c_out, stride, config.num_experts, config.top_k, c_in, &mut rng)?,
                        gaze_projection: Linear::new(config.gaze_dim, c_in, &mut rng),
                    }
                } else {
                    NetBlock::Plain(ResidualBasicBlock::new(c_in, c_out, stride, &mut rng))
                });
            }
            stages.push(stage);
        }
        let gaze = (config.hybrid_blocks() > 0)
            .then(|| GazeEncoder::new(&config.gaze_channels, config.gaze_dim, &mut rng));
        let last = *config.stage_channels.last().expect("validated");
        let head = Linear::new(last, config.num_classes, &mut rng);
        Ok(DkghNet {
            config,
            stem,
            stages,
            gaze,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn hybrid_blocks(&self) -> impl Iterator<Item = &DkghBlock<T>> {
        self.stages.iter().flatten().filter_map(|b| match b {
            NetBlock::Hybrid { block, .. } => Some(block),
            NetBlock::Plain(_) => None,
        })
    }

    /// Parameter count predicted from the configuration alone.
    pub fn expected_param_count(config: &ModelConfig) -> usize {
        let conv = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let lin = |i: usize, o: usize| o * i + o;
        let n = config.num_experts;
        let mut total = conv(config.in_channels, config.stem_channels, 3);
        for (s, shapes) in config.block_shapes().into_iter().enumerate() {
            for (b, (c_in, c_out, stride)) in shapes.into_iter().enumerate() {
                let block = ResidualBasicBlock::<f64>::param_count_for(c_in, c_out, stride);
                if config.is_hybrid(s, b) {
                    let hidden = crate::moe::Router::<f64>::hidden_width(c_in);
                    let router = lin(c_in, hidden) + lin(hidden, n);
                    total += 2 * n * block + 2 * router + lin(2 * c_in, 1) + lin(config.gaze_dim, c_in);
                } else {
                    total += block;
                }
            }
        }
        if config.hybrid_blocks() > 0 {
            let mut c_in = 1;
            for &c in &config.gaze_channels {
                total += conv(c_in, c, 3);
                c_in = c;
            }
            total += lin(c_in, config.gaze_dim);
        }
        total + lin(*config.stage_channels.last().unwrap(), config.num_classes)
    }

    /// `image[B,C,H,W]`, `heatmap[B,1,Hg,Wg]` → logits and routing.
    ///
    /// The gaze feature is computed once and projected per hybrid block.
    /// Without hybrid blocks the heatmap is not read at all.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, image: Var, heatmap: Var) -> Result<NetOutput> {
        let (bi, bh) = (tape.shape(image)[0], tape.shape(heatmap)[0]);
        if bi != bh {
            return Err(DkghError::Contract(format!(
                "image batch {bi} and heatmap batch {bh} differ"
            )));
        }
        let x_exp = match &self.gaze {
            Some(g) => Some(g.encode(tape, heatmap)?),
            None => None,
        };
        let mut x = self.stem.forward(tape, image)?;
        x = tape.relu(x)?;
        let mut blocks = Vec::new();
        let mut evals = 0;
        for block in self.stages.iter().flatten() {
            x = match block {
                NetBlock::Plain(b) => b.forward(tape, x)?,
                NetBlock::Hybrid {
                    block,
                    gaze_projection,
                } => {
                    let e = match x_exp {
                        Some(e) => Some(gaze_projection.forward(tape, e)?),
                        None => None,
                    };
                    let out = block.forward(tape, x, e)?;
                    evals += out.expert_evals();
                    let y = out.x_hat;
                    blocks.push(out);
                    y
                }
            };
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = self.head.forward(tape, pooled)?;
        Ok(NetOutput {
            logits,
            blocks,
            expert_evals: evals,
        })
    }

    /// Expert-block evaluations performed by one forward over the batch.
    pub fn count_expert_evals(&self, image: &Tensor<T>, heatmap: &Tensor<T>) -> Result<usize> {
        let mut tape = Tape::new();
        let i = tape.constant(image.clone());
        let h = tape.constant(heatmap.clone());
        Ok(self.forward(&mut tape, i, h)?.expert_evals)
    }
}

impl<T: Real> Module<T> for DkghNet<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                let p = join(prefix, &format!("stages.{s}.{b}"));
                match block {
                    NetBlock::Plain(blk) => blk.visit(&p, f),
                    NetBlock::Hybrid {
                        block,
                        gaze_projection,
                    } => {
                        block.visit(&p, f);
                        gaze_projection.visit(&join(&p, "gaze_projection"), f);
                    }
                }
            }
        }
        if let Some(g) = &self.gaze {
            g.visit(&join(prefix, "gaze"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                let p = join(prefix, &format!("stages.{s}.{b}"));
                match block {
                    NetBlock::Plain(blk) => blk.visit_mut(&p, f),
                    NetBlock::Hybrid {
                        block,
                        gaze_projection,
                    } => {
                        block.visit_mut(&p, f);
                        gaze_projection.visit_mut(&join(&p, "gaze_projection"), f);
                    }
                }
            }
        }
        if let Some(g) = &mut self.gaze {
            g.visit_mut(&join(prefix, "gaze"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
