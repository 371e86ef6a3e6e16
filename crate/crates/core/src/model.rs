//! The assembled network: a shared-weight three-branch encoder, optional
//! stage-II fusion layers and the shared decoder.

use candle_core::Tensor;
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::encoder::{BaseFeatures, BfeConfig, CaiBlock, CaiConfig, ShallowFeatures};
use crate::error::{invalid, Error, Result};
use crate::fusion::{
    Aggregate, BaseFusion, Decoder, DetailFusion, DetailFusionConfig, FeatureTriplet, GraphFusion,
};
use crate::graph::{GrConfig, GraphReasoning};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    /// Heads of the shallow, base-fusion and decoder transformer blocks.
    pub heads: usize,
    pub ffn_expansion: f64,
    pub cai: CaiConfig,
    pub bfe: BfeConfig,
    pub graph: GrConfig,
    pub detail_fusion: DetailFusionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heads: 8,
            ffn_expansion: 2.0,
            cai: CaiConfig::default(),
            bfe: BfeConfig::default(),
            graph: GrConfig::default(),
            detail_fusion: DetailFusionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Narrow network for desk-scale runs: same topology, 16 channels.
    pub fn toy() -> Self {
        Self {
            channels: 16,
            heads: 2,
            ffn_expansion: 2.0,
            cai: CaiConfig {
                split: 8,
                heads: 2,
                exp_clamp: 5.0,
                dense_layers: 3,
                dense_growth: 8,
                bottleneck: 8,
            },
            bfe: BfeConfig {
                blocks_per_group: 2,
                groups: 2,
                ffn_expansion: 2.0,
                heads: 2,
            },
            graph: GrConfig::default(),
            detail_fusion: DetailFusionConfig {
                bottleneck: 8,
                ..DetailFusionConfig::default()
            },
        }
    }

    /// Smallest configuration with every component present (used by the
    /// gradient checks): 8 channels, two graph scales.
    pub fn miniature() -> Self {
        Self {
            channels: 8,
            heads: 2,
            ffn_expansion: 2.0,
            cai: CaiConfig {
                split: 4,
                heads: 2,
                exp_clamp: 5.0,
                dense_layers: 2,
                dense_growth: 4,
                bottleneck: 4,
            },
            bfe: BfeConfig {
                blocks_per_group: 1,
                groups: 2,
                ffn_expansion: 2.0,
                heads: 2,
            },
            graph: GrConfig {
                scales: 2,
                rounds: 1,
                gru_kernel: 3,
            },
            detail_fusion: DetailFusionConfig {
                bottleneck: 4,
                ..DetailFusionConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(invalid!(
                "{} heads must divide {} channels",
                self.heads,
                self.channels
            ));
        }
        if self.ffn_expansion <= 0.0 {
            return Err(invalid!("ffn_expansion must be positive"));
        }
        self.cai.validate(self.channels)?;
        self.bfe.validate(self.channels)?;
        self.graph.validate()?;
        if self.detail_fusion.layers == 0 {
            return Err(invalid!("detail fusion needs at least one layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    /// `false` replaces the CAI block with a plain coupling block.
    pub cross_attention: bool,
    pub bfe_residual: bool,
    pub use_graph: bool,
    pub aggregate: Aggregate,
    /// Exchange the detail and base fusion layers.
    pub swap_fusion_layers: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            cross_attention: true,
            bfe_residual: true,
            use_graph: true,
            aggregate: Aggregate::Add,
            swap_fusion_layers: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub sfe: ShallowFeatures,
    pub cai: CaiBlock,
    pub bfe: BaseFeatures,
    pub graph: Option<GraphReasoning>,
}

impl Encoder {
    pub fn new(vb: VarBuilder, cfg: &ModelConfig, ablation: &Ablation) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            sfe: ShallowFeatures::new(vb.pp("sfe"), c, cfg.heads, cfg.ffn_expansion)?,
            cai: CaiBlock::new(vb.pp("cai"), c, &cfg.cai, ablation.cross_attention)?,
            bfe: BaseFeatures::new(vb.pp("bfe"), c, &cfg.bfe, ablation.bfe_residual)?,
            graph: if ablation.use_graph {
                Some(GraphReasoning::new(vb.pp("graph"), c, &cfg.graph)?)
            } else {
                None
            },
        })
    }

    /// Decomposes both modalities with the same weights.
    pub fn encode_pair(
        &self,
        vis: &Tensor,
        ir: &Tensor,
    ) -> Result<(FeatureTriplet, FeatureTriplet)> {
        let sv = self.sfe.forward(vis)?;
        let si = self.sfe.forward(ir)?;
        let (gv, gi) = match &self.graph {
            Some(g) => {
                let (a, b) = g.forward(&sv, &si)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Ok((
            FeatureTriplet {
                detail: self.cai.forward(&sv)?,
                base: self.bfe.forward(&sv)?,
                graph: gv,
            },
            FeatureTriplet {
                detail: self.cai.forward(&si)?,
                base: self.bfe.forward(&si)?,
                graph: gi,
            },
        ))
    }
}

#[derive(Debug, Clone)]
pub struct FusionLayers {
    pub detail: DetailFusion,
    pub base: BaseFusion,
    pub graph: Option<GraphFusion>,
    pub swapped: bool,
}

impl FusionLayers {
    pub fn new(vb: VarBuilder, cfg: &ModelConfig, ablation: &Ablation) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            detail: DetailFusion::new(vb.pp("detail"), c, &cfg.detail_fusion)?,
            base: BaseFusion::new(vb.pp("base"), c, cfg.heads, cfg.ffn_expansion)?,
            graph: if ablation.use_graph {
                Some(GraphFusion::new(vb.pp("graph"), c)?)
            } else {
                None
            },
            swapped: ablation.swap_fusion_layers,
        })
    }

    pub fn fuse(&self, v: &FeatureTriplet, i: &FeatureTriplet) -> Result<FeatureTriplet> {
        let (detail, base) = if self.swapped {
            (
                self.base.forward(&v.detail, &i.detail)?,
                self.detail.forward(&v.base, &i.base)?,
            )
        } else {
            (
                self.detail.forward(&v.detail, &i.detail)?,
                self.base.forward(&v.base, &i.base)?,
            )
        };
        let graph = match (&self.graph, &v.graph, &i.graph) {
            (Some(f), Some(a), Some(b)) => Some(f.forward(a, b)?),
            (None, None, None) => None,
            _ => return Err(invalid!("graph features and graph fusion layer disagree")),
        };
        Ok(FeatureTriplet {
            detail,
            base,
            graph,
        })
    }
}

/// Stage-I forward results.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub vis_hat: Tensor,
    pub ir_hat: Tensor,
    pub vis: FeatureTriplet,
    pub ir: FeatureTriplet,
}

/// Stage-II forward results.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub fused: Tensor,
    pub vis: FeatureTriplet,
    pub ir: FeatureTriplet,
}

#[derive(Debug, Clone)]
pub struct SmfNet {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub fusion: Option<FusionLayers>,
    config: ModelConfig,
    ablation: Ablation,
}

/// Parameter-name prefixes of the model parts.
pub const ENCODER_PREFIX: &str = "encoder.";
pub const GRAPH_PREFIX: &str = "encoder.graph.";
pub const DECODER_PREFIX: &str = "decoder.";
pub const FUSION_PREFIX: &str = "fusion.";

impl SmfNet {
    /// Builds the network; `with_fusion` adds the stage-II fusion layers.
    pub fn new(
        vb: VarBuilder,
        cfg: &ModelConfig,
        ablation: &Ablation,
        with_fusion: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let streams = if ablation.use_graph { 3 } else { 2 };
        Ok(Self {
            encoder: Encoder::new(vb.pp("encoder"), cfg, ablation)?,
            decoder: Decoder::new(
                vb.pp("decoder"),
                cfg.channels,
                cfg.heads,
                cfg.ffn_expansion,
                streams,
                ablation.aggregate,
            )?,
            fusion: if with_fusion {
                Some(FusionLayers::new(vb.pp("fusion"), cfg, ablation)?)
            } else {
                None
            },
            config: *cfg,
            ablation: *ablation,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ablation(&self) -> &Ablation {
        &self.ablation
    }

    /// Spatial sizes the network accepts must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        if self.ablation.use_graph {
            self.config.graph.required_multiple()
        } else {
            1
        }
    }

    fn check_inputs(&self, vis: &Tensor, ir: &Tensor) -> Result<()> {
        if vis.dims() != ir.dims() {
            return Err(Error::ShapeMismatch {
                expected: vis.dims().to_vec(),
                actual: ir.dims().to_vec(),
            });
        }
        let (_, c, h, w) = vis.dims4()?;
        if c != 1 {
            return Err(invalid!("network inputs must be single-channel, got {c}"));
        }
        let m = self.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(invalid!(
                "input {h}x{w} is not a multiple of {m}; pad first"
            ));
        }
        Ok(())
    }

    /// Stage I: decode each modality from its own features.
    pub fn reconstruct(&self, vis: &Tensor, ir: &Tensor) -> Result<Reconstruction> {
        self.check_inputs(vis, ir)?;
        let (fv, fi) = self.encoder.encode_pair(vis, ir)?;
        Ok(Reconstruction {
            vis_hat: self.decoder.decode(&fv)?,
            ir_hat: self.decoder.decode(&fi)?,
            vis: fv,
            ir: fi,
        })
    }

    /// Stage II: fuse the two decompositions and decode the result.
    pub fn fuse(&self, vis: &Tensor, ir: &Tensor) -> Result<Fusion> {
        self.check_inputs(vis, ir)?;
        let layers = self.fusion.as_ref().ok_or_else(|| {
            invalid!("fusion layers missing: the network was built for reconstruction only")
        })?;
        let (fv, fi) = self.encoder.encode_pair(vis, ir)?;
        let fused = layers.fuse(&fv, &fi)?;
        Ok(Fusion {
            fused: self.decoder.decode(&fused)?,
            vis: fv,
            ir: fi,
        })
    }
}
