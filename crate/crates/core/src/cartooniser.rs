//! U-Net-like image-to-image cartooniser: four stride-2 downsampling blocks,
//! a bottleneck of residual blocks and four upsampling blocks.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::domain::ImageTensor;
use crate::error::{Error, Result};
use crate::nn::{join, upsample2x, BatchNorm2d, Conv2d, ParamBuilder, ParamStore, Upsample};

pub const NUM_STAGES: usize = 4;
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartooniserConfig {
    pub base_channels: usize,
    pub multipliers: [usize; NUM_STAGES],
    pub num_residual_blocks: usize,
    pub skip_connections: bool,
    pub kernel_size: usize,
    pub upsample: Upsample,
}

impl Default for CartooniserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            multipliers: [1, 2, 4, 8],
            num_residual_blocks: 4,
            skip_connections: true,
            kernel_size: 3,
            upsample: Upsample::Nearest,
        }
    }
}

impl CartooniserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.multipliers.contains(&0) {
            return Err(Error::Parameter("cartooniser channel counts must be positive".into()));
        }
        if self.num_residual_blocks != 4 {
            return Err(Error::Parameter(format!(
                "the cartooniser bottleneck has exactly 4 residual blocks, got {}",
                self.num_residual_blocks
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::Parameter("kernel size must be odd".into()));
        }
        Ok(())
    }

    fn stage_channels(&self) -> [usize; NUM_STAGES] {
        self.multipliers.map(|m| m * self.base_channels)
    }
}

/// Per-stage spatial sizes: `(down, up)`.
pub fn stage_shapes(input_res: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let factor = 1 << NUM_STAGES;
    if input_res == 0 || !input_res.is_multiple_of(factor) {
        return Err(Error::Dimension(format!(
            "cartooniser input resolution must be a positive multiple of {factor}, got {input_res}"
        )));
    }
    let down: Vec<usize> = (1..=NUM_STAGES).map(|i| input_res >> i).collect();
    let up: Vec<usize> = (0..NUM_STAGES).rev().map(|i| input_res >> i).collect();
    Ok((down, up))
}

/// conv -> batch norm -> ReLU
#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvUnit {
    fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(pb, &join(name, "conv"), cin, cout, k, stride, k / 2, RELU_GAIN, false)?,
            bn: BatchNorm2d::new(pb, &join(name, "bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?)?.relu()?)
    }

    fn summary(&self) -> ConvSummary {
        ConvSummary {
            in_channels: self.conv.in_channels(),
            out_channels: self.conv.out_channels(),
            kernel: self.conv.kernel_size(),
            stride: self.conv.stride(),
            batch_norm: true,
            activation: "relu",
        }
    }
}

#[derive(Debug, Clone)]
struct DownBlock {
    first: ConvUnit,
    second: ConvUnit,
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, name: &str, ch: usize, k: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(pb, &join(name, "conv1"), ch, ch, k, 1, k / 2, RELU_GAIN, false)?,
            bn1: BatchNorm2d::new(pb, &join(name, "bn1"), ch)?,
            // small branch gain keeps the residual stack well conditioned
            conv2: Conv2d::new(pb, &join(name, "conv2"), ch, ch, k, 1, k / 2, 0.5, false)?,
            bn2: BatchNorm2d::new(pb, &join(name, "bn2"), ch)?,
        })
    }

    fn branch(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        self.bn2.forward(&self.conv2.forward(&h)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok((x + self.branch(x)?)?)
    }
}

#[derive(Debug, Clone)]
struct UpBlock {
    first: ConvUnit,
    second: ConvUnit,
}

/// Structural description read back from the built layers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvSummary {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub batch_norm: bool,
    pub activation: &'static str,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownBlockSummary {
    pub units: Vec<ConvSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualBlockSummary {
    pub branch: Vec<ConvSummary>,
    pub identity_skip: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpBlockSummary {
    pub before_upsample: ConvSummary,
    pub upsample_factor: usize,
    pub upsample: Upsample,
    pub after_upsample: ConvSummary,
    pub skip_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchitectureSummary {
    pub down: Vec<DownBlockSummary>,
    pub residual: Vec<ResidualBlockSummary>,
    pub up: Vec<UpBlockSummary>,
    pub head: ConvSummary,
}

/// Spatial sizes observed at every block boundary during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub input: usize,
    pub down: Vec<usize>,
    pub bottleneck: usize,
    pub up: Vec<usize>,
    pub output: usize,
}

#[derive(Debug, Clone)]
pub struct Cartooniser {
    cfg: CartooniserConfig,
    down: Vec<DownBlock>,
    residual: Vec<ResBlock>,
    up: Vec<UpBlock>,
    skip_channels: Vec<usize>,
    head: Conv2d,
    params: ParamStore,
}

impl Cartooniser {
    /// Random fixed-seed weights.
    pub fn seeded(cfg: CartooniserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::build(cfg, ParamBuilder::seeded(seed, dtype, device))
    }

    pub fn build(cfg: CartooniserConfig, mut pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel_size;
        let ch = cfg.stage_channels();

        let mut down = Vec::with_capacity(NUM_STAGES);
        let mut cin = 3;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("down.{i}");
            down.push(DownBlock {
                first: ConvUnit::new(&mut pb, &join(&name, "0"), cin, c, k, 2)?,
                second: ConvUnit::new(&mut pb, &join(&name, "1"), c, c, k, 1)?,
            });
            cin = c;
        }

        let bottleneck = ch[NUM_STAGES - 1];
        let residual = (0..cfg.num_residual_blocks)
            .map(|i| ResBlock::new(&mut pb, &format!("res.{i}"), bottleneck, k))
            .collect::<Result<Vec<_>>>()?;

        // Up block i runs at the resolution of down block (3 - i) and, with
        // skips on, concatenates that block's output onto its input.
        let out_ch = [ch[2], ch[1], ch[0], ch[0]];
        let mut up = Vec::with_capacity(NUM_STAGES);
        let mut skip_channels = Vec::with_capacity(NUM_STAGES);
        let mut cin = bottleneck;
        for (i, &c) in out_ch.iter().enumerate() {
            let skip = if cfg.skip_connections { ch[NUM_STAGES - 1 - i] } else { 0 };
            let name = format!("up.{i}");
            up.push(UpBlock {
                first: ConvUnit::new(&mut pb, &join(&name, "0"), cin + skip, c, k, 1)?,
                second: ConvUnit::new(&mut pb, &join(&name, "1"), c, c, k, 1)?,
            });
            skip_channels.push(skip);
            cin = c;
        }
        let head = Conv2d::new(&mut pb, "head", cin, 3, k, 1, k / 2, 1.0, false)?;

        Ok(Self {
            cfg,
            down,
            residual,
            up,
            skip_channels,
            head,
            params: pb.finish(),
        })
    }

    pub fn config(&self) -> &CartooniserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Batched forward on `(N, 3, H, W)` in `[-1, 1]`; output has the same
    /// shape and is bounded by `tanh`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_traced(x).map(|(y, _)| y)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, ShapeTrace)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != w {
            return Err(Error::Dimension(format!("cartooniser expects square RGB input, got {:?}", x.dims())));
        }
        stage_shapes(h)?;
        let mut trace = ShapeTrace {
            input: h,
            down: vec![],
            bottleneck: 0,
            up: vec![],
            output: 0,
        };

        let mut skips = Vec::with_capacity(NUM_STAGES);
        let mut y = x.clone();
        for block in &self.down {
            y = block.second.forward(&block.first.forward(&y)?)?;
            trace.down.push(y.dim(2)?);
            skips.push(y.clone());
        }
        for block in &self.residual {
            y = block.forward(&y)?;
        }
        trace.bottleneck = y.dim(2)?;
        for (i, block) in self.up.iter().enumerate() {
            if self.skip_channels[i] > 0 {
                y = Tensor::cat(&[&y, &skips[NUM_STAGES - 1 - i]], 1)?;
            }
            y = block.first.forward(&y)?;
            y = upsample2x(&y, self.cfg.upsample)?;
            y = block.second.forward(&y)?;
            trace.up.push(y.dim(2)?);
        }
        let out = self.head.forward(&y)?.tanh()?;
        trace.output = out.dim(2)?;
        Ok((out, trace))
    }

    pub fn cartoonise(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let y = self.forward(&img.tensor().unsqueeze(0)?)?;
        ImageTensor::from_batch(&y, 0)
    }

    pub fn summary(&self) -> ArchitectureSummary {
        ArchitectureSummary {
            down: self
                .down
                .iter()
                .map(|b| DownBlockSummary {
                    units: vec![b.first.summary(), b.second.summary()],
                })
                .collect(),
            residual: self
                .residual
                .iter()
                .map(|r| ResidualBlockSummary {
                    branch: vec![
                        ConvSummary {
                            in_channels: r.conv1.in_channels(),
                            out_channels: r.conv1.out_channels(),
                            kernel: r.conv1.kernel_size(),
                            stride: r.conv1.stride(),
                            batch_norm: true,
                            activation: "relu",
                        },
                        ConvSummary {
                            in_channels: r.conv2.in_channels(),
                            out_channels: r.conv2.out_channels(),
                            kernel: r.conv2.kernel_size(),
                            stride: r.conv2.stride(),
                            batch_norm: true,
                            activation: "none",
                        },
                    ],
                    identity_skip: true,
                })
                .collect(),
            up: self
                .up
                .iter()
                .zip(&self.skip_channels)
                .map(|(b, &skip)| UpBlockSummary {
                    before_upsample: b.first.summary(),
                    upsample_factor: 2,
                    upsample: self.cfg.upsample,
                    after_upsample: b.second.summary(),
                    skip_channels: skip,
                })
                .collect(),
            head: ConvSummary {
                in_channels: self.head.in_channels(),
                out_channels: self.head.out_channels(),
                kernel: self.head.kernel_size(),
                stride: self.head.stride(),
                batch_norm: false,
                activation: "tanh",
            },
        }
    }

    /// Residual check on a bottleneck-shaped input: returns
    /// `(block_output, input + branch(input))` for block `index`.
    pub fn residual_probe(&self, index: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let block = self
            .residual
            .get(index)
            .ok_or_else(|| Error::Parameter(format!("no residual block {index}")))?;
        Ok((block.forward(x)?, (x + block.branch(x)?)?))
    }
}
