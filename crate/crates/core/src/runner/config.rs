//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown or repeated keys are
//! rejected. [`ExperimentConfig::to_text`] renders every key, defaults
//! included, in a fixed order; that text is what `config.echo` holds and what
//! checkpoints embed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::datasets::SplitSpec;
use crate::error::{Error, Result};
use crate::exitnet::NetworkConfig;
use crate::flopsmeter::{check_grid, default_threshold_grid};
use crate::tensorcore::{LayerKind, LayerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Approach {
    /// Heads attached up front; the whole network is pruned jointly.
    Joint,
    /// Base network pruned first, heads attached and pruned afterwards.
    Ordered,
}

impl Approach {
    pub fn number(&self) -> u8 {
        match self {
            Approach::Joint => 1,
            Approach::Ordered => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Approach::Joint),
            2 => Ok(Approach::Ordered),
            other => Err(Error::config(format!("approach must be 1 or 2, got {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Synthetic {
        classes: usize,
        per_class: usize,
        side: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub approach: Approach,
    pub network: NetworkConfig,
    pub prune_fraction: f64,
    pub rounds: usize,
    pub rounds_phase_b: usize,
    pub finetune_epochs: usize,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub loss_weights: Vec<f64>,
    pub threshold_grid: Vec<f64>,
    pub seed: u64,
    pub data: DataSource,
    pub split: SplitSpec,
    pub standardize: bool,
    pub output_dir: PathBuf,
    pub freeze_backbone_phase_b: bool,
}

const KEYS: &[&str] = &[
    "approach",
    "seed",
    "prune_fraction",
    "rounds",
    "rounds_phase_b",
    "finetune_epochs",
    "pretrain_epochs",
    "learning_rate",
    "momentum",
    "batch_size",
    "loss_weights",
    "threshold_grid",
    "freeze_backbone_phase_b",
    "data",
    "idx_images",
    "idx_labels",
    "synthetic_classes",
    "synthetic_per_class",
    "synthetic_side",
    "split",
    "split_seed",
    "standardize",
    "num_classes",
    "input_shape",
    "backbone",
    "exit_after",
    "output_dir",
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::config(format!("{key}: expected true/false, got '{other}'"))),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Parses `conv2d(1,8,3,1,1); relu; maxpool2` with optional `name:` prefixes.
/// Unnamed layers are called `conv1`, `relu1`, `pool1`, `gap1`, `flatten1`,
/// `dense1`, … by kind.
pub fn parse_backbone(text: &str) -> Result<Vec<LayerSpec>> {
    let mut counters: BTreeMap<&'static str, usize> = BTreeMap::new();
    let mut layers = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, body) = match item.split_once(':') {
            Some((n, b)) => (Some(n.trim().to_string()), b.trim()),
            None => (None, item),
        };
        let (head, args) = match body.split_once('(') {
            Some((h, rest)) => {
                let inner = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::config(format!("backbone: unbalanced '{body}'")))?;
                (h.trim(), parse_list::<usize>("backbone", inner)?)
            }
            None => (body, Vec::new()),
        };
        let (kind, prefix) = match (head, args.as_slice()) {
            ("conv2d", &[c_in, c_out, k]) => (
                LayerKind::Conv2d {
                    in_channels: c_in,
                    out_channels: c_out,
                    kernel: k,
                    stride: 1,
                    pad: k / 2,
                },
                "conv",
            ),
            ("conv2d", &[c_in, c_out, k, stride, pad]) => (
                LayerKind::Conv2d {
                    in_channels: c_in,
                    out_channels: c_out,
                    kernel: k,
                    stride,
                    pad,
                },
                "conv",
            ),
            ("dense", &[i, o]) => (
                LayerKind::Dense {
                    in_features: i,
                    out_features: o,
                },
                "dense",
            ),
            ("relu", &[]) => (LayerKind::Relu, "relu"),
            ("maxpool2", &[]) => (LayerKind::MaxPool2, "pool"),
            ("gap", &[]) => (LayerKind::GlobalAvgPool, "gap"),
            ("flatten", &[]) => (LayerKind::Flatten, "flatten"),
            _ => return Err(Error::config(format!("backbone: unknown layer '{body}'"))),
        };
        let counter = counters.entry(prefix).or_insert(0);
        *counter += 1;
        let name = name.unwrap_or_else(|| format!("{prefix}{counter}"));
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || ",;:.()".contains(c)) {
            return Err(Error::config(format!("backbone: invalid layer name '{name}'")));
        }
        layers.push(LayerSpec::new(name, kind));
    }
    if layers.is_empty() {
        return Err(Error::config("backbone: no layers"));
    }
    Ok(layers)
}

pub fn render_backbone(layers: &[LayerSpec]) -> String {
    layers
        .iter()
        .map(|l| format!("{}:{}", l.name, l.kind))
        .collect::<Vec<_>>()
        .join("; ")
}

impl ExperimentConfig {
    /// Desk defaults for a given data source.
    pub fn defaults(data: DataSource) -> Self {
        let (classes, input_shape, pretrain) = match &data {
            DataSource::Idx { .. } => (10, [1, 28, 28], 20),
            DataSource::Synthetic { classes, side, .. } => (*classes, [1, *side, *side], 10),
        };
        let network = NetworkConfig::desk_default(classes, input_shape);
        let k = network.exit_count();
        Self {
            approach: Approach::Joint,
            network,
            prune_fraction: 0.10,
            rounds: 20,
            rounds_phase_b: 20,
            finetune_epochs: 10,
            pretrain_epochs: pretrain,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            loss_weights: vec![1.0; k],
            threshold_grid: default_threshold_grid(),
            seed: 0,
            data,
            split: SplitSpec {
                train: 0.8,
                val: 0.1,
                test: 0.1,
                seed: 0,
            },
            standardize: false,
            output_dir: PathBuf::from("runs/default"),
            freeze_backbone_phase_b: false,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let k = k.trim();
            if !KEYS.contains(&k) {
                return Err(Error::config(format!("line {}: unknown key '{k}'", lineno + 1)));
            }
            if kv.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(Error::config(format!("line {}: duplicate key '{k}'", lineno + 1)));
            }
        }
        let get = |k: &str| kv.get(k).map(String::as_str);

        let data = match get("data").unwrap_or("synthetic") {
            "idx" => DataSource::Idx {
                images: PathBuf::from(
                    get("idx_images").ok_or_else(|| Error::config("data = idx needs idx_images"))?,
                ),
                labels: PathBuf::from(
                    get("idx_labels").ok_or_else(|| Error::config("data = idx needs idx_labels"))?,
                ),
            },
            "synthetic" => DataSource::Synthetic {
                classes: get("synthetic_classes").map_or(Ok(10), |v| parse_num("synthetic_classes", v))?,
                per_class: get("synthetic_per_class")
                    .map_or(Ok(100), |v| parse_num("synthetic_per_class", v))?,
                side: get("synthetic_side").map_or(Ok(16), |v| parse_num("synthetic_side", v))?,
            },
            other => return Err(Error::config(format!("data: expected idx or synthetic, got '{other}'"))),
        };
        let mut c = Self::defaults(data);

        if let Some(v) = get("approach") {
            c.approach = Approach::from_number(parse_num("approach", v)?)?;
        }
        if let Some(v) = get("seed") {
            c.seed = parse_num("seed", v)?;
        }
        c.split.seed = c.seed;
        if let Some(v) = get("prune_fraction") {
            c.prune_fraction = parse_num("prune_fraction", v)?;
        }
        if let Some(v) = get("rounds") {
            c.rounds = parse_num("rounds", v)?;
        }
        if let Some(v) = get("rounds_phase_b") {
            c.rounds_phase_b = parse_num("rounds_phase_b", v)?;
        }
        if let Some(v) = get("finetune_epochs") {
            c.finetune_epochs = parse_num("finetune_epochs", v)?;
        }
        if let Some(v) = get("pretrain_epochs") {
            c.pretrain_epochs = parse_num("pretrain_epochs", v)?;
        }
        if let Some(v) = get("learning_rate") {
            c.learning_rate = parse_num("learning_rate", v)?;
        }
        if let Some(v) = get("momentum") {
            c.momentum = parse_num("momentum", v)?;
        }
        if let Some(v) = get("batch_size") {
            c.batch_size = parse_num("batch_size", v)?;
        }
        if let Some(v) = get("freeze_backbone_phase_b") {
            c.freeze_backbone_phase_b = parse_bool("freeze_backbone_phase_b", v)?;
        }
        if let Some(v) = get("standardize") {
            c.standardize = parse_bool("standardize", v)?;
        }
        if let Some(v) = get("split") {
            let f: Vec<f64> = parse_list("split", v)?;
            let [train, val, test] = f[..] else {
                return Err(Error::config("split: expected three fractions train,val,test"));
            };
            c.split.train = train;
            c.split.val = val;
            c.split.test = test;
        }
        if let Some(v) = get("split_seed") {
            c.split.seed = parse_num("split_seed", v)?;
        }
        if let Some(v) = get("output_dir") {
            c.output_dir = PathBuf::from(v);
        }
        if let Some(v) = get("threshold_grid") {
            c.threshold_grid = if v == "default" {
                default_threshold_grid()
            } else {
                parse_list("threshold_grid", v)?
            };
        }

        if let Some(v) = get("num_classes") {
            c.network.num_classes = parse_num("num_classes", v)?;
        }
        if let Some(v) = get("input_shape") {
            let s: Vec<usize> = parse_list("input_shape", v)?;
            let [ch, h, w] = s[..] else {
                return Err(Error::config("input_shape: expected channels,height,width"));
            };
            c.network.input_shape = [ch, h, w];
        }
        match get("backbone") {
            None | Some("default") => {
                let exits = c.network.exit_after.clone();
                c.network = NetworkConfig::desk_default(c.network.num_classes, c.network.input_shape);
                if get("exit_after").is_none() {
                    c.network.exit_after = exits;
                }
            }
            Some(text) => c.network.backbone = parse_backbone(text)?,
        }
        if let Some(v) = get("exit_after") {
            c.network.exit_after = parse_list("exit_after", v)?;
        }
        c.loss_weights = match get("loss_weights") {
            None | Some("equal") => vec![1.0; c.network.exit_count()],
            Some(v) => parse_list("loss_weights", v)?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.activation_shapes()?;
        if !(self.prune_fraction > 0.0 && self.prune_fraction < 1.0) {
            return Err(Error::config(format!(
                "prune_fraction must lie in (0, 1), got {}",
                self.prune_fraction
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        crate::exitnet::check_loss_weights(&self.loss_weights, self.network.exit_count())?;
        if self.approach == Approach::Ordered && self.loss_weights[self.loss_weights.len() - 1] == 0.0 {
            return Err(Error::config(
                "approach 2 trains the base network on the final exit alone; its loss weight must be positive",
            ));
        }
        check_grid(&self.threshold_grid)?;
        self.split.validate()?;
        if self.split.test == 0.0 {
            return Err(Error::config("split: the test fraction must be positive (reports use it)"));
        }
        if self.split.train == 0.0 {
            return Err(Error::config("split: the train fraction must be positive"));
        }
        if let DataSource::Synthetic {
            classes,
            per_class,
            side,
        } = self.data
        {
            if classes < 2 || per_class == 0 || side < 2 {
                return Err(Error::config("synthetic data needs classes ≥ 2, per_class ≥ 1, side ≥ 2"));
            }
        }
        Ok(())
    }

    /// Canonical rendering of every key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("approach", self.approach.number().to_string());
        line("seed", self.seed.to_string());
        line("prune_fraction", self.prune_fraction.to_string());
        line("rounds", self.rounds.to_string());
        line("rounds_phase_b", self.rounds_phase_b.to_string());
        line("finetune_epochs", self.finetune_epochs.to_string());
        line("pretrain_epochs", self.pretrain_epochs.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("momentum", self.momentum.to_string());
        line("batch_size", self.batch_size.to_string());
        line("loss_weights", join(&self.loss_weights));
        line("threshold_grid", join(&self.threshold_grid));
        line("freeze_backbone_phase_b", self.freeze_backbone_phase_b.to_string());
        match &self.data {
            DataSource::Idx { images, labels } => {
                line("data", "idx".into());
                line("idx_images", images.display().to_string());
                line("idx_labels", labels.display().to_string());
            }
            DataSource::Synthetic {
                classes,
                per_class,
                side,
            } => {
                line("data", "synthetic".into());
                line("synthetic_classes", classes.to_string());
                line("synthetic_per_class", per_class.to_string());
                line("synthetic_side", side.to_string());
            }
        }
        line(
            "split",
            join(&[self.split.train, self.split.val, self.split.test]),
        );
        line("split_seed", self.split.seed.to_string());
        line("standardize", self.standardize.to_string());
        line("num_classes", self.network.num_classes.to_string());
        line("input_shape", join(&self.network.input_shape));
        line("backbone", render_backbone(&self.network.backbone));
        line("exit_after", join(&self.network.exit_after));
        line("output_dir", self.output_dir.display().to_string());
        s
    }

    /// Equality ignoring the output directory (used when resuming).
    pub fn same_experiment(&self, other: &Self) -> bool {
        let mut a = self.clone();
        a.output_dir = other.output_dir.clone();
        a == *other
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::parse("data = synthetic\nsynthetic_side = 12\n").unwrap();
        assert_eq!(c.network.input_shape, [1, 12, 12]);
        assert_eq!(c.loss_weights, vec![1.0; 3]);
        assert_eq!(c.threshold_grid.len(), 21);
        assert_eq!(c.rounds, 20);
        assert_eq!(c.finetune_epochs, 10);
        assert_eq!(c.prune_fraction, 0.1);
        let again = ExperimentConfig::parse(&c.to_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.to_text(), again.to_text());
    }

    #[test]
    fn custom_backbone() {
        let text = "backbone = conv2d(1,4,3); relu; maxpool2; c2:conv2d(4,4,3,1,1); relu; gap; dense(4,6); relu\nexit_after = 2,5\nsynthetic_side = 8\nnum_classes = 3\nsynthetic_classes = 3\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let names: Vec<_> = c.network.backbone.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["conv1", "relu1", "pool1", "c2", "relu2", "gap1", "dense1", "relu3"]);
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(ExperimentConfig::parse("approach = 3").is_err());
        assert!(ExperimentConfig::parse("prune_fraction = 1.0").is_err());
        assert!(ExperimentConfig::parse("exit_after = ").is_err());
        assert!(ExperimentConfig::parse("loss_weights = 0,0,0").is_err());
        assert!(ExperimentConfig::parse("data = idx").is_err());
        assert!(ExperimentConfig::parse("split = 0.5,0.5").is_err());
        assert!(ExperimentConfig::parse("threshold_grid = 0,2").is_err());
    }
}
