use crate::{Error, Result};
use std::fmt;
use std::str::FromStr;

/// Space-time factorization of a DTCA block stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Full join space-time: one attention over all `C·F` tokens.
    Fst,
    /// Divided space-time: spatial stage then temporal stage.
    SplitSpaceTime,
    /// Half join: joint stage then spatial stage.
    HalfJoinSpace,
    /// Half join: joint stage then temporal stage.
    HalfJoinTime,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Fst,
        Variant::SplitSpaceTime,
        Variant::HalfJoinSpace,
        Variant::HalfJoinTime,
    ];

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Variant::Fst => &[Stage::Joint],
            Variant::SplitSpaceTime => &[Stage::Spatial, Stage::Temporal],
            Variant::HalfJoinSpace => &[Stage::Joint, Stage::Spatial],
            Variant::HalfJoinTime => &[Stage::Joint, Stage::Temporal],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Fst => "FST",
            Variant::SplitSpaceTime => "S+T",
            Variant::HalfJoinSpace => "HST+S",
            Variant::HalfJoinTime => "HST+T",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "FST" | "1" => Ok(Variant::Fst),
            "S+T" | "ST" | "2" => Ok(Variant::SplitSpaceTime),
            "HST+S" | "HSTS" | "3" => Ok(Variant::HalfJoinSpace),
            "HST+T" | "HSTT" | "4" => Ok(Variant::HalfJoinTime),
            other => Err(Error::Param(format!(
                "unknown variant `{other}` (expected FST, S+T, HST+S or HST+T)"
            ))),
        }
    }
}

/// How tokens are grouped for one self-attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    /// `(B, C·F, N)`.
    Joint,
    /// `(B·F, C, N)`.
    Spatial,
    /// `(B·C, F, N)`.
    Temporal,
}

/// Which token stream supplies queries to causal attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryScope {
    All,
    PredictionOnly,
}

/// How causal attention pools keys across the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyPool {
    /// With a shift above 1, queries and keys of the whole batch are
    /// flattened into a single attention pool.
    Flatten,
    /// Each sample only sees keys derived from its own conditions.
    PerSample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub variant: Variant,
    /// Channel-To-Batch Shift factor; 0 or 1 leave conditions unshifted.
    pub shift: usize,
    /// Whether the condition → prediction cross path exists at all.
    pub causal: bool,
    pub query_scope: QueryScope,
    pub key_pool: KeyPool,
    pub cond_frames: usize,
    pub pred_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            patch: 2,
            embed_dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
            variant: Variant::Fst,
            shift: 4,
            causal: true,
            query_scope: QueryScope::All,
            key_pool: KeyPool::Flatten,
            cond_frames: 2,
            pred_frames: 4,
        }
    }
}

impl ModelConfig {
    /// The full-resolution layout: a 32×32 latent grid, 4 conditions and 16
    /// predicted frames, tokens of width 1152.
    pub fn paper_scale() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 2,
            embed_dim: 1152,
            heads: 16,
            depth: 28,
            cond_frames: 4,
            pred_frames: 16,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn channels(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn frames(&self) -> usize {
        self.cond_frames + self.pred_frames
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Param(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return fail(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!(
                "embed_dim {} must equal heads {} x head_dim",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim % 4 != 0 {
            return fail(format!("embed_dim {} must be a multiple of 4", self.embed_dim));
        }
        if self.depth == 0 || self.mlp_ratio == 0 {
            return fail("depth and mlp_ratio must be positive".into());
        }
        if self.cond_frames == 0 || self.pred_frames == 0 {
            return fail("need at least one condition and one prediction frame".into());
        }
        let c = self.channels();
        if self.shift > 1 && c % self.shift != 0 {
            return fail(format!("shift {} must divide the {c} patch channels", self.shift));
        }
        Ok(())
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("height".into(), self.height.to_string()),
            ("width".into(), self.width.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("depth".into(), self.depth.to_string()),
            ("mlp_ratio".into(), self.mlp_ratio.to_string()),
            ("variant".into(), self.variant.to_string()),
            ("shift".into(), self.shift.to_string()),
            ("causal".into(), self.causal.to_string()),
            (
                "query_scope".into(),
                match self.query_scope {
                    QueryScope::All => "all",
                    QueryScope::PredictionOnly => "prediction_only",
                }
                .into(),
            ),
            (
                "key_pool".into(),
                match self.key_pool {
                    KeyPool::Flatten => "flatten",
                    KeyPool::PerSample => "per_sample",
                }
                .into(),
            ),
            ("cond_frames".into(), self.cond_frames.to_string()),
            ("pred_frames".into(), self.pred_frames.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `false` for keys that
    /// are not model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Param(format!("`{key}` expects an integer, got `{v}`")))
        };
        match key {
            "height" => self.height = num(value)?,
            "width" => self.width = num(value)?,
            "patch" => self.patch = num(value)?,
            "embed_dim" => self.embed_dim = num(value)?,
            "heads" => self.heads = num(value)?,
            "depth" => self.depth = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            "variant" => self.variant = value.parse()?,
            "shift" => self.shift = num(value)?,
            "causal" => {
                self.causal = match value.trim() {
                    "true" | "1" | "on" => true,
                    "false" | "0" | "off" => false,
                    v => return Err(Error::Param(format!("`causal` expects true/false, got `{v}`"))),
                }
            }
            "query_scope" => {
                self.query_scope = match value.trim() {
                    "all" => QueryScope::All,
                    "prediction_only" => QueryScope::PredictionOnly,
                    v => return Err(Error::Param(format!("unknown query_scope `{v}`"))),
                }
            }
            "key_pool" => {
                self.key_pool = match value.trim() {
                    "flatten" => KeyPool::Flatten,
                    "per_sample" => KeyPool::PerSample,
                    v => return Err(Error::Param(format!("unknown key_pool `{v}`"))),
                }
            }
            "cond_frames" => self.cond_frames = num(value)?,
            "pred_frames" => self.pred_frames = num(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
