use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Shape of the U-Net.
///
/// Encoder block `i` (1-based) has `base_channels · 2^(i-1)` channels and is
/// followed by a 2×2 max-pool. The bottleneck keeps the width of the deepest
/// encoder block. Each decoder stage upsamples, concatenates the matching
/// skip connection and applies `convs_per_block` conv/BN/ReLU units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UNetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub convs_per_block: usize,
    pub num_classes: usize,
    pub input_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl UNetConfig {
    /// CPU-friendly configuration (depth 4, base width 16).
    pub fn desk() -> Self {
        Self {
            depth: 4,
            base_channels: 16,
            convs_per_block: 2,
            num_classes: 2,
            input_channels: 1,
        }
    }

    /// Width-64 configuration, about 26.7M parameters including the ESH.
    pub fn paper_scale() -> Self {
        Self {
            base_channels: 64,
            ..Self::desk()
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            depth: 2,
            base_channels: 4,
            convs_per_block: 2,
            num_classes: 2,
            input_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidArgument(format!("depth {} must be >= 2", self.depth)));
        }
        if self.base_channels == 0 || self.convs_per_block == 0 || self.input_channels == 0 {
            return Err(Error::InvalidArgument(
                "base_channels, convs_per_block and input_channels must be >= 1".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
        }
        Ok(())
    }

    /// Width of encoder block `i` (1-based).
    pub fn block_width(&self, i: usize) -> usize {
        self.base_channels << (i - 1)
    }

    pub fn bottleneck_width(&self) -> usize {
        self.block_width(self.depth)
    }

    /// Total downsampling factor between input and encoder output.
    pub fn reduction(&self) -> usize {
        1 << self.depth
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.reduction();
        if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "input {h}x{w} must be divisible by 2^depth = {f}"
            )));
        }
        Ok(())
    }

    /// `key=value` pairs, the form stored in checkpoint metadata.
    pub fn to_meta(&self) -> String {
        format!(
            "depth={},base_channels={},convs_per_block={},num_classes={},input_channels={}",
            self.depth, self.base_channels, self.convs_per_block, self.num_classes, self.input_channels
        )
    }

    pub fn from_meta(s: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for pair in s.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad config entry '{pair}'")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Format(format!("bad config value '{pair}'")))?;
            match k {
                "depth" => cfg.depth = v,
                "base_channels" => cfg.base_channels = v,
                "convs_per_block" => cfg.convs_per_block = v,
                "num_classes" => cfg.num_classes = v,
                "input_channels" => cfg.input_channels = v,
                _ => return Err(Error::Format(format!("unknown config key '{k}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which encoder blocks receive adapters. `bottleneck` covers the encoder
/// output stage that feeds both the decoder and the ESH.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InjectionSelector {
    blocks: BTreeSet<usize>,
    bottleneck: bool,
}

impl InjectionSelector {
    pub fn blocks(blocks: impl IntoIterator<Item = usize>) -> Self {
        Self {
            blocks: blocks.into_iter().collect(),
            bottleneck: false,
        }
    }

    /// Blocks `1..=n`.
    pub fn first(n: usize) -> Self {
        Self::blocks(1..=n)
    }

    /// Every encoder block plus the bottleneck.
    pub fn all(depth: usize) -> Self {
        Self {
            blocks: (1..=depth).collect(),
            bottleneck: true,
        }
    }

    pub fn block_set(&self) -> &BTreeSet<usize> {
        &self.blocks
    }

    pub fn includes_bottleneck(&self) -> bool {
        self.bottleneck
    }

    pub fn contains(&self, block: usize) -> bool {
        self.blocks.contains(&block)
    }

    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.blocks.is_empty() && !self.bottleneck {
            return Err(Error::InvalidArgument("selector selects nothing".into()));
        }
        if let Some(&bad) = self.blocks.iter().find(|&&b| b == 0 || b > depth) {
            return Err(Error::InvalidArgument(format!(
                "encoder block {bad} outside [1, {depth}]"
            )));
        }
        Ok(())
    }

    /// Resolves the textual form against a depth (`all` needs it).
    pub fn parse(s: &str, depth: usize) -> Result<Self> {
        let sel: RawSelector = s.parse()?;
        let sel = match sel {
            RawSelector::All => Self::all(depth),
            RawSelector::Blocks(b) => Self::blocks(b),
        };
        sel.validate(depth)?;
        Ok(sel)
    }

    /// Textual form; `all` when it covers every block and the bottleneck.
    pub fn describe(&self, depth: usize) -> String {
        if *self == Self::all(depth) {
            return "all".into();
        }
        self.to_string()
    }
}

impl fmt::Display for InjectionSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let blocks: Vec<usize> = self.blocks.iter().copied().collect();
        let contiguous = blocks.windows(2).all(|w| w[1] == w[0] + 1);
        let mut s = if blocks.len() > 1 && contiguous {
            format!("{}-{}", blocks[0], blocks[blocks.len() - 1])
        } else {
            blocks.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        };
        if self.bottleneck {
            if !s.is_empty() {
                s.push(',');
            }
            s.push_str("bottleneck");
        }
        f.write_str(&s)
    }
}

enum RawSelector {
    All,
    Blocks(Vec<usize>),
}

impl FromStr for RawSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(RawSelector::All);
        }
        let bad = || Error::InvalidArgument(format!("cannot parse block selector '{s}'"));
        let mut out = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            } else {
                out.push(part.parse().map_err(|_| bad())?);
            }
        }
        Ok(RawSelector::Blocks(out))
    }
}
