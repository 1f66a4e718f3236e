use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::hyperconv::{HyperNetSpec, DEFAULT_LEAK_SLOPE, DEFAULT_TRUNK_WIDTHS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Unet,
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Standard,
    Hyper,
}

/// Hypernetwork settings shared by every hyper-convolution of a network;
/// channel counts and kernel size are filled in per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperDefaults {
    pub hidden_widths: [usize; 3],
    pub last_width: usize,
    pub leak_slope: f64,
    pub pair_offset: bool,
    pub normalize_coords: bool,
}

impl Default for HyperDefaults {
    fn default() -> Self {
        HyperDefaults {
            hidden_widths: DEFAULT_TRUNK_WIDTHS,
            last_width: 4,
            leak_slope: DEFAULT_LEAK_SLOPE,
            pair_offset: false,
            normalize_coords: false,
        }
    }
}

impl HyperDefaults {
    pub fn layer_spec(&self, in_channels: usize, out_channels: usize, kernel: usize) -> HyperNetSpec {
        HyperNetSpec {
            hidden_widths: self.hidden_widths,
            last_width: self.last_width,
            leak_slope: self.leak_slope,
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            pair_offset: self.pair_offset,
            normalize_coords: self.normalize_coords,
        }
    }
}

fn default_flat_channels() -> Vec<usize> {
    vec![16, 32, 64, 128, 64, 32, 16]
}

fn default_flat_dilations() -> Vec<usize> {
    vec![1, 2, 4, 8, 4, 2, 1]
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn one() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

/// Declarative description of a segmentation network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub backbone: Backbone,
    pub conv_kind: ConvKind,
    pub kernel_size: usize,
    /// UNet width at full resolution; doubled after every pool.
    #[serde(default = "default_init_channels")]
    pub init_channels: usize,
    /// Dilation of every UNet convolution.
    #[serde(default = "one")]
    pub dilation: usize,
    #[serde(default = "default_flat_channels")]
    pub flat_channels: Vec<usize>,
    #[serde(default = "default_flat_dilations")]
    pub flat_dilations: Vec<usize>,
    #[serde(default = "two")]
    pub convs_per_block: usize,
    #[serde(default = "three")]
    pub num_pools: usize,
    /// Kernel size of the decoder convolution following each upsampling.
    #[serde(default = "three")]
    pub up_kernel_size: usize,
    #[serde(default = "half")]
    pub dropout_p: f64,
    #[serde(default)]
    pub hyper: HyperDefaults,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_classes: usize,
}

fn default_init_channels() -> usize {
    32
}

impl ArchitectureSpec {
    pub fn unet(conv_kind: ConvKind, kernel_size: usize, init_channels: usize) -> Self {
        ArchitectureSpec {
            backbone: Backbone::Unet,
            conv_kind,
            kernel_size,
            init_channels,
            dilation: 1,
            flat_channels: default_flat_channels(),
            flat_dilations: default_flat_dilations(),
            convs_per_block: 2,
            num_pools: 3,
            up_kernel_size: 3,
            dropout_p: 0.5,
            hyper: HyperDefaults::default(),
            in_channels: 1,
            out_classes: 1,
        }
    }

    /// Flat residual CNN with dilated 3x3 convolutions (standard) or dense
    /// kernels of matching extent (hyper).
    pub fn flat(conv_kind: ConvKind) -> Self {
        ArchitectureSpec {
            backbone: Backbone::Flat,
            kernel_size: 3,
            hyper: HyperDefaults {
                last_width: 8,
                ..HyperDefaults::default()
            },
            ..Self::unet(conv_kind, 3, 32)
        }
    }

    pub fn with_last_width(mut self, last_width: usize) -> Self {
        self.hyper.last_width = last_width;
        self
    }

    /// Parses preset names: `unet<k>`, `dilated-unet<k>`, `hyperunet<k>`,
    /// `flat`, `hyperflat`, each optionally followed by `-nl<N>` (hypernetwork
    /// last width) and `-c<N>` (UNet initial channels), e.g. `hyperunet5-nl4-c8`.
    pub fn from_name(name: &str) -> Result<Self> {
        let mut parts = name.split('-').peekable();
        let mut dilation = 1;
        if parts.peek() == Some(&"dilated") {
            parts.next();
            dilation = 2;
        }
        let head = parts.next().ok_or_else(|| invalid!("empty architecture name"))?;
        let mut spec = if let Some(k) = head.strip_prefix("hyperunet") {
            Self::unet(ConvKind::Hyper, parse_num(k, name)?, 32)
        } else if let Some(k) = head.strip_prefix("unet") {
            Self::unet(ConvKind::Standard, parse_num(k, name)?, 32)
        } else if head == "hyperflat" {
            Self::flat(ConvKind::Hyper)
        } else if head == "flat" {
            Self::flat(ConvKind::Standard)
        } else {
            return Err(invalid!("unknown architecture name {name:?}"));
        };
        spec.dilation = dilation;
        for part in parts {
            if let Some(n) = part.strip_prefix("nl") {
                spec.hyper.last_width = parse_num(n, name)?;
            } else if let Some(n) = part.strip_prefix('c') {
                spec.init_channels = parse_num(n, name)?;
            } else {
                return Err(invalid!("unknown architecture suffix {part:?} in {name:?}"));
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 || self.up_kernel_size % 2 == 0 {
            return Err(invalid!("kernel sizes must be odd"));
        }
        if self.in_channels == 0 || self.out_classes == 0 || self.convs_per_block == 0 {
            return Err(invalid!("channel and block counts must be positive"));
        }
        if self.dilation == 0 || self.flat_dilations.iter().any(|&d| d == 0) {
            return Err(invalid!("dilations must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid!("dropout probability must lie in [0, 1)"));
        }
        match self.backbone {
            Backbone::Unet if self.init_channels == 0 => Err(invalid!("init_channels must be positive")),
            Backbone::Flat if self.flat_channels.len() != self.flat_dilations.len() => Err(invalid!(
                "flat_channels has {} entries but flat_dilations has {}",
                self.flat_channels.len(),
                self.flat_dilations.len()
            )),
            Backbone::Flat if self.flat_channels.iter().any(|&c| c == 0) => {
                Err(invalid!("flat channel widths must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        match self.backbone {
            Backbone::Unet => 1 << self.num_pools,
            Backbone::Flat => 1,
        }
    }

    /// Receptive field in pixels, by the usual size/jump recurrence: each
    /// convolution adds `(k_eff - 1) * jump` with `k_eff = d (k - 1) + 1`, and
    /// each 2x2 pool adds `jump` and then doubles it. UNets are measured at
    /// the bottleneck output (encoder plus bottleneck), flat networks over the
    /// whole chain.
    pub fn receptive_field(&self) -> usize {
        let mut r = 1;
        let mut jump = 1;
        match self.backbone {
            Backbone::Unet => {
                let k_eff = self.dilation * (self.kernel_size - 1) + 1;
                for _ in 0..self.num_pools {
                    r += self.convs_per_block * (k_eff - 1) * jump;
                    r += jump;
                    jump *= 2;
                }
                r += self.convs_per_block * (k_eff - 1) * jump;
            }
            Backbone::Flat => {
                for &d in &self.flat_dilations {
                    let k_eff = d * (self.kernel_size - 1) + 1;
                    r += self.convs_per_block * (k_eff - 1);
                }
            }
        }
        r
    }

    /// Short human-readable label, e.g. `Hyper-UNet 5x5 (N_L=4)`.
    pub fn label(&self) -> String {
        let k = self.kernel_size;
        match (self.backbone, self.conv_kind) {
            (Backbone::Unet, ConvKind::Standard) if self.dilation > 1 => format!("Dilated UNet {k}x{k}"),
            (Backbone::Unet, ConvKind::Standard) => format!("UNet {k}x{k}"),
            (Backbone::Unet, ConvKind::Hyper) => format!("Hyper-UNet {k}x{k} (N_L={})", self.hyper.last_width),
            (Backbone::Flat, ConvKind::Standard) => "Flat Dilated CNN".to_string(),
            (Backbone::Flat, ConvKind::Hyper) => format!("Flat Hyper-CNN (N_L={})", self.hyper.last_width),
        }
    }
}

fn parse_num(s: &str, name: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| invalid!("cannot parse a number from {s:?} in architecture name {name:?}"))
}
