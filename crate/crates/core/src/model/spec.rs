use std::fmt::Write as _;

use crate::config::{self, Record};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BlockKind {
    /// conv3×3 → bn → relu → conv3×3 → bn
    Basic,
    /// conv1×1 → bn → relu → conv3×3 → bn → relu → conv1×1 → bn
    Bottleneck,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Basic => "basic",
            BlockKind::Bottleneck => "bottleneck",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(BlockKind::Basic),
            "bottleneck" => Ok(BlockKind::Bottleneck),
            _ => Err(Error::Config(format!("unknown block kind `{s}`"))),
        }
    }
}

/// One residual block computing `relu(F(x) + shortcut(x))`.
///
/// The shortcut is the identity unless `projection` is set, in which case it
/// is a strided 1×1 convolution followed by batch norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlockSpec {
    pub kind: BlockKind,
    pub in_ch: usize,
    pub mid_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub projection: bool,
}

impl ResidualBlockSpec {
    pub fn basic(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Basic,
            in_ch,
            mid_ch: out_ch,
            out_ch,
            stride,
            projection: in_ch != out_ch || stride != 1,
        }
    }

    pub fn bottleneck(in_ch: usize, mid_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self {
            kind: BlockKind::Bottleneck,
            in_ch,
            mid_ch,
            out_ch,
            stride,
            projection: in_ch != out_ch || stride != 1,
        }
    }

    pub fn needs_projection(&self) -> bool {
        self.in_ch != self.out_ch || self.stride != 1
    }

    /// `(suffix, [out, in, kh, kw])` of each branch convolution.
    pub(crate) fn branch_convs(&self) -> Vec<(&'static str, [usize; 4])> {
        match self.kind {
            BlockKind::Basic => vec![
                ("conv1", [self.mid_ch, self.in_ch, 3, 3]),
                ("conv2", [self.out_ch, self.mid_ch, 3, 3]),
            ],
            BlockKind::Bottleneck => vec![
                ("conv1", [self.mid_ch, self.in_ch, 1, 1]),
                ("conv2", [self.mid_ch, self.mid_ch, 3, 3]),
                ("conv3", [self.out_ch, self.mid_ch, 1, 1]),
            ],
        }
    }

    /// Stride and padding of the branch convolution at `index`.
    pub(crate) fn branch_geometry(&self, index: usize) -> (usize, usize) {
        match (self.kind, index) {
            (BlockKind::Basic, 0) => (self.stride, 1),
            (BlockKind::Basic, _) => (1, 1),
            (BlockKind::Bottleneck, 1) => (self.stride, 1),
            (BlockKind::Bottleneck, _) => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Input convolution (no bias, followed by batch norm and relu) and an
/// optional max pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StemSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub pool: Option<PoolSpec>,
}

/// `blocks` residual blocks; the first uses `block` as given, the rest map
/// `out_ch → out_ch` with stride 1 and an identity shortcut.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub blocks: usize,
    pub block: ResidualBlockSpec,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: String,
    /// Expected square input resolution.
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub head_classes: usize,
}

impl ModelSpec {
    /// Desk-scale variant for 32×32 inputs: three stages of basic blocks.
    pub fn resnet_micro(classes: usize) -> Self {
        Self {
            variant: "resnet_micro".into(),
            input_size: 32,
            stem: StemSpec {
                in_ch: 3,
                out_ch: 16,
                kernel: 3,
                stride: 1,
                padding: 1,
                pool: None,
            },
            stages: vec![
                StageSpec {
                    blocks: 2,
                    block: ResidualBlockSpec::basic(16, 16, 1),
                },
                StageSpec {
                    blocks: 2,
                    block: ResidualBlockSpec::basic(16, 32, 2),
                },
                StageSpec {
                    blocks: 2,
                    block: ResidualBlockSpec::basic(32, 64, 2),
                },
            ],
            head_classes: classes,
        }
    }

    /// The 50-layer bottleneck topology for 224×224 inputs.
    pub fn resnet50(classes: usize) -> Self {
        let stage = |blocks, in_ch, mid, out, stride| StageSpec {
            blocks,
            block: ResidualBlockSpec::bottleneck(in_ch, mid, out, stride),
        };
        Self {
            variant: "resnet50".into(),
            input_size: 224,
            stem: StemSpec {
                in_ch: 3,
                out_ch: 64,
                kernel: 7,
                stride: 2,
                padding: 3,
                pool: Some(PoolSpec {
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                }),
            },
            stages: vec![
                stage(3, 64, 64, 256, 1),
                stage(4, 256, 128, 512, 2),
                stage(6, 512, 256, 1024, 2),
                stage(3, 1024, 512, 2048, 2),
            ],
            head_classes: classes,
        }
    }

    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "resnet_micro" => Ok(Self::resnet_micro(classes)),
            "resnet50" => Ok(Self::resnet50(classes)),
            _ => Err(Error::Config(format!(
                "unknown model `{name}` (expected resnet_micro or resnet50)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        let s = &self.stem;
        if s.in_ch == 0 || s.out_ch == 0 || s.kernel == 0 || s.stride == 0 {
            return bad("stem channels, kernel and stride must be >= 1".into());
        }
        if let Some(p) = s.pool {
            if p.kernel == 0 || p.stride == 0 || 2 * p.padding > p.kernel {
                return bad(format!("invalid stem pool {p:?}"));
            }
        }
        if self.head_classes < 2 {
            return bad(format!(
                "head needs at least 2 classes, got {}",
                self.head_classes
            ));
        }
        if self.input_size == 0 {
            return bad("input_size must be >= 1".into());
        }
        let mut ch = s.out_ch;
        for (i, st) in self.stages.iter().enumerate() {
            let b = &st.block;
            if st.blocks == 0 {
                return bad(format!("stage {i} has no blocks"));
            }
            if b.in_ch != ch {
                return bad(format!(
                    "stage {i} expects {} input channels but receives {ch}",
                    b.in_ch
                ));
            }
            if b.mid_ch == 0 || b.out_ch == 0 || b.stride == 0 {
                return bad(format!("stage {i} has a zero channel count or stride"));
            }
            if b.needs_projection() && !b.projection {
                return bad(format!(
                    "stage {i} changes shape and needs a projection shortcut"
                ));
            }
            ch = b.out_ch;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.stages
            .last()
            .map_or(self.stem.out_ch, |s| s.block.out_ch)
    }

    /// Every block in forward order with its parameter prefix.
    pub fn blocks(&self) -> Vec<(String, ResidualBlockSpec)> {
        let mut out = Vec::new();
        for (si, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                let spec = if bi == 0 {
                    st.block
                } else {
                    ResidualBlockSpec {
                        in_ch: st.block.out_ch,
                        stride: 1,
                        projection: false,
                        ..st.block
                    }
                };
                out.push((format!("stages.{si}.{bi}."), spec));
            }
        }
        out
    }

    /// Learnable tensors in forward order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let s = &self.stem;
        out.push((
            "stem.conv.weight".into(),
            vec![s.out_ch, s.in_ch, s.kernel, s.kernel],
        ));
        push_bn_params(&mut out, "stem.bn", s.out_ch);
        for (prefix, b) in self.blocks() {
            for (i, (name, shape)) in b.branch_convs().into_iter().enumerate() {
                out.push((format!("{prefix}{name}.weight"), shape.to_vec()));
                push_bn_params(&mut out, &format!("{prefix}bn{}", i + 1), shape[0]);
            }
            if b.projection {
                out.push((
                    format!("{prefix}shortcut.conv.weight"),
                    vec![b.out_ch, b.in_ch, 1, 1],
                ));
                push_bn_params(&mut out, &format!("{prefix}shortcut.bn"), b.out_ch);
            }
        }
        out.push((
            "head.weight".into(),
            vec![self.feature_dim(), self.head_classes],
        ));
        out.push(("head.bias".into(), vec![self.head_classes]));
        out
    }

    /// Non-learnable state: batch-norm running statistics and the input
    /// normalization applied before the stem.
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("input.mean".to_string(), vec![self.stem.in_ch]),
            ("input.std".to_string(), vec![self.stem.in_ch]),
        ];
        for (name, shape) in self.parameter_shapes() {
            if let Some(bn) = name.strip_suffix(".gamma") {
                out.push((format!("{bn}.running_mean"), shape.clone()));
                out.push((format!("{bn}.running_var"), shape));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Canonical text form in the `key=value` grammar.
    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let st = &self.stem;
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "input_size={}", self.input_size);
        let _ = writeln!(
            s,
            "stem=in:{},out:{},kernel:{},stride:{},padding:{}",
            st.in_ch, st.out_ch, st.kernel, st.stride, st.padding
        );
        if let Some(p) = st.pool {
            let _ = writeln!(
                s,
                "stem_pool=kernel:{},stride:{},padding:{}",
                p.kernel, p.stride, p.padding
            );
        }
        for stage in &self.stages {
            let b = &stage.block;
            let _ = writeln!(
                s,
                "stage=blocks:{},kind:{},in:{},mid:{},out:{},stride:{},projection:{}",
                stage.blocks,
                b.kind.name(),
                b.in_ch,
                b.mid_ch,
                b.out_ch,
                b.stride,
                b.projection
            );
        }
        let _ = writeln!(s, "head_classes={}", self.head_classes);
        s
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let lines = config::parse_lines(text)?;
        let mut variant = None;
        let mut input_size = None;
        let mut stem = None;
        let mut pool = None;
        let mut stages = Vec::new();
        let mut head_classes = None;
        for (key, value) in &lines {
            match key.as_str() {
                "variant" => variant = Some(value.clone()),
                "input_size" => input_size = Some(parse_usize(key, value)?),
                "head_classes" => head_classes = Some(parse_usize(key, value)?),
                "stem" => {
                    let f = config::parse_record(value)?;
                    let r = Record::new(&f, "stem");
                    stem = Some(StemSpec {
                        in_ch: r.usize("in")?,
                        out_ch: r.usize("out")?,
                        kernel: r.usize("kernel")?,
                        stride: r.usize("stride")?,
                        padding: r.usize("padding")?,
                        pool: None,
                    });
                }
                "stem_pool" => {
                    let f = config::parse_record(value)?;
                    let r = Record::new(&f, "stem_pool");
                    pool = Some(PoolSpec {
                        kernel: r.usize("kernel")?,
                        stride: r.usize("stride")?,
                        padding: r.usize("padding")?,
                    });
                }
                "stage" => {
                    let f = config::parse_record(value)?;
                    let r = Record::new(&f, "stage");
                    let block = ResidualBlockSpec {
                        kind: BlockKind::parse(r.require("kind")?)?,
                        in_ch: r.usize("in")?,
                        mid_ch: r.usize("mid")?,
                        out_ch: r.usize("out")?,
                        stride: r.usize("stride")?,
                        projection: match r.get("projection") {
                            Some(_) => r.bool("projection")?,
                            None => false,
                        },
                    };
                    let block = ResidualBlockSpec {
                        projection: block.projection || block.needs_projection(),
                        ..block
                    };
                    stages.push(StageSpec {
                        blocks: r.usize("blocks")?,
                        block,
                    });
                }
                other => return Err(Error::Config(format!("unknown model key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("model description lacks `{k}`"));
        let mut stem = stem.ok_or_else(|| missing("stem"))?;
        stem.pool = pool;
        let spec = Self {
            variant: variant.ok_or_else(|| missing("variant"))?,
            input_size: input_size.ok_or_else(|| missing("input_size"))?,
            stem,
            stages,
            head_classes: head_classes.ok_or_else(|| missing("head_classes"))?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "`{key}` must be a non-negative integer, got `{value}`"
        ))
    })
}

fn push_bn_params(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, ch: usize) {
    out.push((format!("{prefix}.gamma"), vec![ch]));
    out.push((format!("{prefix}.beta"), vec![ch]));
}
