//! Architecture and adapter hyperparameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// 1-based layer indices whose refined outputs feed the head.
    #[serde(default)]
    pub tap_layers: Vec<usize>,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            tap_layers: default_tap_layers(4),
        }
    }
}

/// Layers at roughly one third, one half, two thirds and the end of the
/// stack: {1,2,3,4} for 4 layers, {8,12,16,24} for 24.
pub fn default_tap_layers(depth: usize) -> Vec<usize> {
    let mut taps: Vec<usize> = [depth as f64 / 3.0, depth as f64 / 2.0, 2.0 * depth as f64 / 3.0]
        .iter()
        .map(|v| (v.round() as usize).max(1))
        .collect();
    taps.push(depth);
    taps.dedup();
    taps
}

impl ViTConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch-token count `n`.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    pub fn patch_features(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Fills empty tap layers with the default and checks invariants.
    pub fn resolved(mut self) -> Result<Self> {
        if self.tap_layers.is_empty() {
            self.tap_layers = default_tap_layers(self.depth);
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depth == 0 || self.dim == 0 || self.mlp_ratio == 0 {
            return bad("depth, dim and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        let taps = &self.tap_layers;
        if taps.is_empty()
            || taps.windows(2).any(|w| w[0] >= w[1])
            || taps[0] < 1
            || *taps.last().unwrap() != self.depth
        {
            return bad(format!(
                "tap_layers {taps:?} must be strictly increasing in [1, {}] and end at {}",
                self.depth, self.depth
            ));
        }
        Ok(())
    }
}

/// Which optional pieces of the adapter are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ReinVariant {
    /// Derive head queries from the tokens.
    pub use_link: bool,
    /// One set of MLP weights for all layers.
    pub use_share: bool,
    /// Tokens as a product of two low-rank factors.
    pub use_lora: bool,
}

impl ReinVariant {
    pub const CORE: Self = ReinVariant {
        use_link: false,
        use_share: false,
        use_lora: false,
    };
    pub const LINK: Self = ReinVariant {
        use_link: true,
        use_share: false,
        use_lora: false,
    };
    pub const SHARE: Self = ReinVariant {
        use_link: true,
        use_share: true,
        use_lora: false,
    };
    pub const LORA: Self = ReinVariant {
        use_link: true,
        use_share: true,
        use_lora: true,
    };

    /// The cumulative ablation ladder, cheapest feature first.
    pub const LADDER: [Self; 4] = [Self::CORE, Self::LINK, Self::SHARE, Self::LORA];

    pub fn label(self) -> String {
        match self {
            v if v == Self::CORE => "rein-core".into(),
            v if v == Self::LINK => "rein-link".into(),
            v if v == Self::SHARE => "rein-share".into(),
            v if v == Self::LORA => "rein-lora".into(),
            v => {
                let mut s = String::from("rein");
                for (on, name) in [(v.use_link, "link"), (v.use_share, "share"), (v.use_lora, "lora")] {
                    if on {
                        s.push('+');
                        s.push_str(name);
                    }
                }
                s
            }
        }
    }
}

impl Default for ReinVariant {
    fn default() -> Self {
        Self::LORA
    }
}

impl fmt::Display for ReinVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for ReinVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rein-core" | "core" => return Ok(Self::CORE),
            "rein-link" | "link" => return Ok(Self::LINK),
            "rein-share" | "share" => return Ok(Self::SHARE),
            "rein-lora" | "lora" | "rein" => return Ok(Self::LORA),
            _ => {}
        }
        // explicit combinations such as "rein+share+lora"
        let mut parts = s.split('+');
        if parts.next() != Some("rein") {
            return Err(Error::Config(format!("unknown rein variant `{s}`")));
        }
        let mut v = Self::CORE;
        for p in parts {
            match p {
                "link" => v.use_link = true,
                "share" => v.use_share = true,
                "lora" => v.use_lora = true,
                _ => return Err(Error::Config(format!("unknown rein variant `{s}`"))),
            }
        }
        Ok(v)
    }
}

impl Serialize for ReinVariant {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

impl<'de> Deserialize<'de> for ReinVariant {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinConfig {
    /// Token-sequence length.
    pub m: usize,
    /// Rank of the token factorization.
    pub r: usize,
    /// Backbone width; 0 in a config file means "take it from the backbone".
    #[serde(default)]
    pub c: usize,
    pub c_prime: usize,
    /// Backbone depth; 0 means "take it from the backbone".
    #[serde(default)]
    pub depth: usize,
    #[serde(default)]
    pub variant: ReinVariant,
    /// Serve materialized tokens and folded token MLP outputs from a cache.
    #[serde(default)]
    pub precompute: bool,
}

impl ReinConfig {
    pub fn for_backbone(vit: &ViTConfig, m: usize, r: usize, c_prime: usize, variant: ReinVariant) -> Self {
        ReinConfig {
            m,
            r,
            c: vit.dim,
            c_prime,
            depth: vit.depth,
            variant,
            precompute: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!(
                "token length m={} leaves no tokens after dropping the first",
                self.m
            )));
        }
        if self.c == 0 || self.depth == 0 || self.c_prime == 0 {
            return Err(Error::Config("c, depth and c_prime must be positive".into()));
        }
        if self.r == 0 || self.r >= self.c {
            return Err(Error::Config(format!(
                "rank r={} must satisfy 0 < r < c={}",
                self.r, self.c
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_classes: usize,
    pub embed_dim: usize,
    pub num_queries: usize,
    #[serde(default = "yes")]
    pub use_query_head: bool,
}

fn yes() -> bool {
    true
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("class ids must fit below the ignore value 255".into()));
        }
        if self.embed_dim < 4 {
            return Err(Error::Config(format!("embed_dim {} < 4", self.embed_dim)));
        }
        if self.use_query_head && self.num_queries == 0 {
            return Err(Error::Config("query head needs at least one query".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FineTuneMode {
    /// Backbone and head train.
    Full,
    /// Only the head trains.
    Freeze,
    /// Backbone frozen; adapter and head train.
    Rein,
}

impl FromStr for FineTuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FineTuneMode::Full),
            "freeze" => Ok(FineTuneMode::Freeze),
            "rein" => Ok(FineTuneMode::Rein),
            _ => Err(Error::Config(format!("unknown fine-tune mode `{s}`"))),
        }
    }
}

impl fmt::Display for FineTuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FineTuneMode::Full => "full",
            FineTuneMode::Freeze => "freeze",
            FineTuneMode::Rein => "rein",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: FineTuneMode,
    pub vit: ViTConfig,
    pub rein: ReinConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// Desk-scale defaults for `mode` with `num_classes` classes.
    pub fn desk(mode: FineTuneMode, num_classes: usize) -> Self {
        let vit = ViTConfig::default();
        let rein = ReinConfig::for_backbone(&vit, 100, 16, 32, ReinVariant::LORA);
        ModelConfig {
            mode,
            head: HeadConfig {
                num_classes,
                embed_dim: 32,
                num_queries: rein.m,
                use_query_head: true,
            },
            vit,
            rein,
        }
    }

    pub fn uses_adapter(&self) -> bool {
        self.mode == FineTuneMode::Rein
    }

    /// Whether the head consumes queries generated by the adapter.
    pub fn links_queries(&self) -> bool {
        self.uses_adapter() && self.rein.variant.use_link && self.head.use_query_head
    }

    pub fn resolved(mut self) -> Result<Self> {
        self.vit = self.vit.resolved()?;
        if self.rein.c == 0 {
            self.rein.c = self.vit.dim;
        }
        if self.rein.depth == 0 {
            self.rein.depth = self.vit.depth;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.head.validate()?;
        self.rein.validate()?;
        if self.rein.c != self.vit.dim || self.rein.depth != self.vit.depth {
            return Err(Error::Config(format!(
                "adapter built for c={}, N={} but backbone has c={}, N={}",
                self.rein.c, self.rein.depth, self.vit.dim, self.vit.depth
            )));
        }
        if self.links_queries() && self.head.num_queries != self.rein.m {
            return Err(Error::Config(format!(
                "linked queries need num_queries = m = {}, got {}",
                self.rein.m, self.head.num_queries
            )));
        }
        Ok(())
    }
}
