//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, list values are separated by
//! whitespace or commas and per-stage triples by `;`. Spatial triples are written
//! in `x y z` (width, height, depth) order. Unknown keys are rejected.

use std::fmt::{self, Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($(#[$vm])* $variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!("expected one of {}", [$($text),+].join(", "))),
                }
            }
        }
    };
}

keyword_enum!(
    /// How feature maps are reduced between dense blocks.
    DownsampleMode {
        MaxPool => "maxpool",
        AvgPool => "avgpool",
        Stride2Conv => "stride2conv",
    }
);

keyword_enum!(
    /// Which feature maps leave a dense block.
    OutputPolicy {
        /// `[x0, x1, ..., xi]`: `c0 + i*g` channels.
        Standard => "standard",
        /// `[x0, x2, ..., xi]`: `c0 + (i-1)*g` channels.
        PaperFormula => "paper_formula",
    }
);

keyword_enum!(
    LossReduction {
        Mean => "mean",
        Sum => "sum",
    }
);

keyword_enum!(
    LossTerms {
        /// Positive and negative cross-entropy terms.
        TwoSided => "two_sided",
        /// Positive term only.
        OneSided => "one_sided",
    }
);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PosWeight {
    /// Zero cells over one cells in the batch, clipped to `[1, max]`.
    Auto { max: f64 },
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Input volume `(x, y, z)` in voxels.
    pub input_shape: [usize; 3],
    /// Output grid `(S, S, T)`.
    pub grid_shape: [usize; 3],
    pub growth_rates: Vec<usize>,
    pub block_depths: Vec<usize>,
    pub downsample_mode: DownsampleMode,
    /// Per-stage `(x, y, z)` reduction; pooling windows equal their stride.
    pub downsample_strides: Vec<[usize; 3]>,
    pub stem_channels: usize,
    pub stem_stride: [usize; 3],
    /// Dense-layer and stem kernel `(x, y, z)`; always odd so padding preserves shape.
    pub kernel: [usize; 3],
    pub output_policy: OutputPolicy,
    pub head_bias: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_shape: [512, 512, 8],
            grid_shape: [16, 16, 8],
            growth_rates: vec![16, 16, 16, 32, 64],
            block_depths: vec![6; 5],
            downsample_mode: DownsampleMode::MaxPool,
            downsample_strides: vec![[2, 2, 1]; 4],
            stem_channels: 16,
            stem_stride: [2, 2, 1],
            kernel: [3, 3, 3],
            output_policy: OutputPolicy::Standard,
            head_bias: -4.0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NetworkConfig {
    /// Two-block network on 64 x 64 x 8 chunks with an 8 x 8 x 8 grid, sized for a single CPU core.
    pub fn desk() -> Self {
        NetworkConfig {
            input_shape: [64, 64, 8],
            grid_shape: [8, 8, 8],
            growth_rates: vec![8, 8],
            block_depths: vec![2, 2],
            downsample_strides: vec![[2, 2, 1]; 2],
            stem_channels: 8,
            ..NetworkConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub pos_weight: PosWeight,
    pub neg_weight: f64,
    pub reduction: LossReduction,
    pub terms: LossTerms,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            pos_weight: PosWeight::Auto { max: 200.0 },
            neg_weight: 1.0,
            reduction: LossReduction::Mean,
            terms: LossTerms::TwoSided,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optional cap on optimizer steps; training stops at whichever limit comes first.
    pub max_iterations: Option<usize>,
    /// In-plane shift in voxels applied by augmentation; 0 disables it.
    pub shift_amount: usize,
    pub shift_probability: f64,
    /// Stop once the epoch loss falls below this value.
    pub target_loss: Option<f64>,
    /// With `target_loss`, also require this evaluation CPM before stopping.
    pub target_cpm: Option<f64>,
    /// Evaluate the training-set CPM every this many epochs (0 = only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_decay_epochs: vec![120, 170],
            lr_decay_factor: 0.1,
            epochs: 200,
            batch_size: 2,
            max_iterations: None,
            shift_amount: 32,
            shift_probability: 0.5,
            target_loss: None,
            target_cpm: None,
            eval_every: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub hu_window: [f64; 2],
    pub chunk_depth: usize,
    pub chunk_stride: usize,
    pub candidate_floor: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            hu_window: [-1000.0, 400.0],
            chunk_depth: 8,
            chunk_stride: 8,
            candidate_floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub network: NetworkConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

pub(crate) fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|_| format!("cannot parse {s:?}")))
        .collect()
}

pub(crate) fn parse_one<T: FromStr>(value: &str) -> std::result::Result<T, String> {
    value.parse::<T>().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_triple(value: &str) -> std::result::Result<[usize; 3], String> {
    let v: Vec<usize> = parse_list(value)?;
    v.try_into().map_err(|v: Vec<usize>| format!("expected 3 values, got {}", v.len()))
}

fn join<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text on top of the built-in defaults.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut blocks: Option<usize> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(source_name, Some(line_no), "expected key = value"))?;
            let (key, value) = (key.trim(), value.trim());
            cfg.apply(key, value, &mut blocks)
                .map_err(|m| Error::parse(source_name, Some(line_no), format!("{key}: {m}")))?;
        }
        let net = &mut cfg.network;
        let n = blocks.unwrap_or(net.growth_rates.len());
        if net.block_depths.len() == 1 && n > 1 {
            net.block_depths = vec![net.block_depths[0]; n];
        }
        if net.growth_rates.len() != n {
            return Err(Error::Config(format!(
                "growth_rates lists {} values for {n} blocks",
                net.growth_rates.len()
            )));
        }
        if net.block_depths.len() != n {
            return Err(Error::Config(format!(
                "block_depths lists {} values for {n} blocks",
                net.block_depths.len()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str, blocks: &mut Option<usize>) -> std::result::Result<(), String> {
        let (n, l, t, d) = (&mut self.network, &mut self.loss, &mut self.train, &mut self.data);
        match key {
            "input_shape" => n.input_shape = parse_triple(value)?,
            "grid_shape" => n.grid_shape = parse_triple(value)?,
            "blocks" => *blocks = Some(parse_one(value)?),
            "growth_rates" => n.growth_rates = parse_list(value)?,
            "block_depths" => n.block_depths = parse_list(value)?,
            "downsample_mode" => n.downsample_mode = value.parse()?,
            "downsample_strides" => {
                n.downsample_strides = value
                    .split(';')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(parse_triple)
                    .collect::<std::result::Result<_, _>>()?
            }
            "stem_channels" => n.stem_channels = parse_one(value)?,
            "stem_stride" => n.stem_stride = parse_triple(value)?,
            "kernel" => n.kernel = parse_triple(value)?,
            "output_policy" => n.output_policy = value.parse()?,
            "head_bias" => n.head_bias = parse_one(value)?,
            "bn_momentum" => n.bn_momentum = parse_one(value)?,
            "bn_eps" => n.bn_eps = parse_one(value)?,
            "pos_weight" => {
                l.pos_weight = match value {
                    "auto" => PosWeight::Auto { max: 200.0 },
                    v => PosWeight::Fixed(parse_one(v)?),
                }
            }
            "pos_weight_max" => match &mut l.pos_weight {
                PosWeight::Auto { max } => *max = parse_one(value)?,
                PosWeight::Fixed(_) => return Err("only meaningful with pos_weight = auto".into()),
            },
            "neg_weight" => l.neg_weight = parse_one(value)?,
            "loss_reduction" => l.reduction = value.parse()?,
            "loss_terms" => l.terms = value.parse()?,
            "learning_rate" => t.learning_rate = parse_one(value)?,
            "momentum" => t.momentum = parse_one(value)?,
            "weight_decay" => t.weight_decay = parse_one(value)?,
            "lr_decay_epochs" => t.lr_decay_epochs = if value == "none" { Vec::new() } else { parse_list(value)? },
            "lr_decay_factor" => t.lr_decay_factor = parse_one(value)?,
            "epochs" => t.epochs = parse_one(value)?,
            "batch_size" => t.batch_size = parse_one(value)?,
            "max_iterations" => t.max_iterations = optional(value)?,
            "shift_amount" => t.shift_amount = parse_one(value)?,
            "shift_probability" => t.shift_probability = parse_one(value)?,
            "target_loss" => t.target_loss = optional(value)?,
            "target_cpm" => t.target_cpm = optional(value)?,
            "eval_every" => t.eval_every = parse_one(value)?,
            "seed" => t.seed = parse_one(value)?,
            "hu_window" => {
                let v: Vec<f64> = parse_list(value)?;
                d.hu_window = v.try_into().map_err(|_| "expected 2 values".to_string())?;
            }
            "chunk_depth" => d.chunk_depth = parse_one(value)?,
            "chunk_stride" => d.chunk_stride = parse_one(value)?,
            "candidate_floor" => d.candidate_floor = parse_one(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.network;
        let bad = |m: String| Err(Error::Config(m));
        if n.growth_rates.is_empty() {
            return bad("at least one dense block is required".into());
        }
        if n.growth_rates.len() != n.block_depths.len() {
            return bad("growth_rates and block_depths differ in length".into());
        }
        if n.growth_rates.contains(&0) || n.block_depths.contains(&0) {
            return bad("growth rates and block depths must be >= 1".into());
        }
        if n.downsample_strides.len() > n.growth_rates.len() {
            return bad(format!(
                "{} downsampling stages need at least as many dense blocks",
                n.downsample_strides.len()
            ));
        }
        if n.kernel.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel {:?} must have odd extents", n.kernel));
        }
        if n.stem_channels == 0 {
            return bad("stem_channels must be >= 1".into());
        }
        if !(0.0..1.0).contains(&n.bn_momentum) || !(n.bn_eps > 0.0) {
            return bad("bn_momentum must lie in [0, 1) and bn_eps be positive".into());
        }
        let l = &self.loss;
        match l.pos_weight {
            PosWeight::Auto { max } if !(max >= 1.0) => return bad("pos_weight_max must be >= 1".into()),
            PosWeight::Fixed(w) if !(w > 0.0) => return bad("pos_weight must be positive".into()),
            _ => {}
        }
        if !(l.neg_weight >= 0.0) {
            return bad("neg_weight must be non-negative".into());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", t.learning_rate));
        }
        if t.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&t.shift_probability) {
            return bad("shift_probability must lie in [0, 1]".into());
        }
        let d = &self.data;
        if !(d.hu_window[0] < d.hu_window[1]) {
            return bad("hu_window minimum must be below its maximum".into());
        }
        if d.chunk_depth == 0 || d.chunk_stride == 0 {
            return bad("chunk_depth and chunk_stride must be >= 1".into());
        }
        if d.chunk_depth != n.input_shape[2] {
            return bad(format!(
                "chunk_depth {} differs from input depth {}",
                d.chunk_depth, n.input_shape[2]
            ));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let (n, l, t, d) = (&self.network, &self.loss, &self.train, &self.data);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("input_shape", join(&n.input_shape));
        kv("grid_shape", join(&n.grid_shape));
        kv("blocks", n.growth_rates.len().to_string());
        kv("growth_rates", join(&n.growth_rates));
        kv("block_depths", join(&n.block_depths));
        kv("downsample_mode", n.downsample_mode.to_string());
        kv(
            "downsample_strides",
            n.downsample_strides.iter().map(|s| join(s)).collect::<Vec<_>>().join("; "),
        );
        kv("stem_channels", n.stem_channels.to_string());
        kv("stem_stride", join(&n.stem_stride));
        kv("kernel", join(&n.kernel));
        kv("output_policy", n.output_policy.to_string());
        kv("head_bias", format!("{:?}", n.head_bias));
        kv("bn_momentum", format!("{:?}", n.bn_momentum));
        kv("bn_eps", format!("{:?}", n.bn_eps));
        match l.pos_weight {
            PosWeight::Auto { max } => {
                kv("pos_weight", "auto".into());
                kv("pos_weight_max", format!("{max:?}"));
            }
            PosWeight::Fixed(w) => kv("pos_weight", format!("{w:?}")),
        }
        kv("neg_weight", format!("{:?}", l.neg_weight));
        kv("loss_reduction", l.reduction.to_string());
        kv("loss_terms", l.terms.to_string());
        kv("learning_rate", format!("{:?}", t.learning_rate));
        kv("momentum", format!("{:?}", t.momentum));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv(
            "lr_decay_epochs",
            if t.lr_decay_epochs.is_empty() { "none".into() } else { join(&t.lr_decay_epochs) },
        );
        kv("lr_decay_factor", format!("{:?}", t.lr_decay_factor));
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("max_iterations", t.max_iterations.map_or("none".into(), |v| v.to_string()));
        kv("shift_amount", t.shift_amount.to_string());
        kv("shift_probability", format!("{:?}", t.shift_probability));
        kv("target_loss", t.target_loss.map_or("none".into(), |v| format!("{v:?}")));
        kv("target_cpm", t.target_cpm.map_or("none".into(), |v| format!("{v:?}")));
        kv("eval_every", t.eval_every.to_string());
        kv("seed", t.seed.to_string());
        kv("hu_window", format!("{:?} {:?}", d.hu_window[0], d.hu_window[1]));
        kv("chunk_depth", d.chunk_depth.to_string());
        kv("chunk_stride", d.chunk_stride.to_string());
        kv("candidate_floor", format!("{:?}", d.candidate_floor));
        s
    }
}

fn optional<T: FromStr>(value: &str) -> std::result::Result<Option<T>, String> {
    match value {
        "none" => Ok(None),
        v => parse_one(v).map(Some),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(Config::parse("# nothing\n\n", "t").unwrap(), Config::default());
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = Config::default();
        cfg.network.downsample_mode = DownsampleMode::Stride2Conv;
        cfg.loss.pos_weight = PosWeight::Fixed(12.5);
        cfg.train.max_iterations = Some(2000);
        cfg.train.learning_rate = 0.1 + 0.2;
        assert_eq!(Config::parse(&cfg.to_text(), "t").unwrap(), cfg);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = Config::parse("blocks = 5\nbogus = 1\n", "x.conf").unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn block_list_lengths_checked() {
        assert!(Config::parse("blocks = 3\ngrowth_rates = 8 8\n", "t").is_err());
        let cfg = Config::parse("blocks = 2\ngrowth_rates = 8, 8\nblock_depths = 3\ndownsample_strides = 2 2 1; 2 2 1\n", "t").unwrap();
        assert_eq!(cfg.network.block_depths, vec![3, 3]);
    }

    #[test]
    fn bad_keyword_lists_choices() {
        let err = Config::parse("downsample_mode = median\n", "t").unwrap_err().to_string();
        assert!(err.contains("maxpool") && err.contains("stride2conv"), "{err}");
    }
}
