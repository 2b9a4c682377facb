//! Run configuration.
//!
//! Plain text, one `key = value` per line, grouped under `[section]`
//! headers; `#` starts a comment. Keys are addressed as `section.key` (keys
//! before the first header have no prefix). [`RunConfig::echo`] prints every
//! field in canonical form, and parsing the echo reproduces the same run.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Base2New,
    Msst,
    Ssmt,
}

impl RunMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RunMode::Base2New => "base2new",
            RunMode::Msst => "msst",
            RunMode::Ssmt => "ssmt",
        }
    }
}

impl FromStr for RunMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "base2new" => Ok(RunMode::Base2New),
            "msst" => Ok(RunMode::Msst),
            "ssmt" => Ok(RunMode::Ssmt),
            _ => Err(format!("expected base2new, msst or ssmt, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("expected f32 or f64, got `{s}`")),
        }
    }
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: RunMode,
    pub output_dir: PathBuf,
    pub precision: Precision,

    // [federation]
    pub rounds: usize,
    pub participation_rate: f64,
    pub classes_per_client: usize,
    pub local_iterations: usize,
    pub lora_threshold: f64,
    pub lora_rank: usize,

    // [optim]
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient-norm cap per local step; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,

    // [objective]
    pub alpha: f64,
    pub tau: f64,
    /// `desc` or `plain`.
    pub scoring: String,
    pub augment_shift: usize,
    pub augment_noise: f64,

    // [encoder]
    pub d_v: usize,
    pub d_t: usize,
    pub depth: usize,
    pub encoder_heads: usize,
    pub patch_grid: usize,
    pub channels: usize,
    pub image_size: usize,

    // [promptformer]
    pub m: usize,
    pub heads: usize,
    /// Defaults to `d_v / 2`.
    pub d_ff: Option<usize>,

    // [data]
    pub num_classes: usize,
    pub base_fraction: f64,
    pub shots: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub attribute_pool: usize,
    pub attributes_per_class: usize,
    pub noise_std: f64,
    pub blob_sigma: f64,
    pub domains: Vec<String>,
    /// Held-out domain (msst) or source domain (ssmt).
    pub dg_domain: String,
    pub attribute_file: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: RunMode::Base2New,
            output_dir: PathBuf::from("out"),
            precision: Precision::F32,
            rounds: 10,
            participation_rate: 1.0,
            classes_per_client: 2,
            local_iterations: 5,
            lora_threshold: 0.5,
            lora_rank: 4,
            lr: 0.003,
            momentum: 0.9,
            weight_decay: 1e-5,
            clip_norm: 0.0,
            batch_size: 128,
            alpha: 10.0,
            tau: 0.01,
            scoring: "desc".into(),
            augment_shift: 1,
            augment_noise: 0.05,
            d_v: 32,
            d_t: 32,
            depth: 2,
            encoder_heads: 4,
            patch_grid: 4,
            channels: 3,
            image_size: 16,
            m: 4,
            heads: 4,
            d_ff: None,
            num_classes: 16,
            base_fraction: 0.75,
            shots: 8,
            train_per_class: 16,
            test_per_class: 10,
            attribute_pool: 8,
            attributes_per_class: 2,
            noise_std: 0.1,
            blob_sigma: 2.0,
            domains: vec!["photo".into()],
            dg_domain: String::new(),
            attribute_file: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

/// `(key, value, line)` triples with section prefixes applied.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut section = String::new();
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    msg: format!("unterminated section header `{line}`"),
                })?
                .trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("bad section name `{name}`"),
                });
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `key = value`, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                msg: "empty key".into(),
            });
        }
        let key = if section.is_empty() {
            k.to_string()
        } else {
            format!("{section}.{k}")
        };
        if let Some((_, _, first)) = out.iter().find(|(existing, _, _)| *existing == key) {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("`{key}` already set on line {first}"),
            });
        }
        out.push((key, v.trim().to_string(), line_no));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_str_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        for (k, v, line) in parse_pairs(text)? {
            c.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::Parse { line, msg },
                other => other,
            })?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_str_with_overrides(text, &[])
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[(String, String)]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str_with_overrides(&text, overrides)
    }

    /// Splits a `key=value` override.
    pub fn parse_override(s: &str) -> Result<(String, String)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
        Ok((k.trim().to_string(), v.trim().to_string()))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = parse(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "precision" => self.precision = parse(key, v)?,
            "federation.rounds" => self.rounds = parse(key, v)?,
            "federation.participation_rate" => self.participation_rate = parse(key, v)?,
            "federation.classes_per_client" => self.classes_per_client = parse(key, v)?,
            "federation.local_iterations" => self.local_iterations = parse(key, v)?,
            "federation.lora_threshold" => self.lora_threshold = parse(key, v)?,
            "federation.lora_rank" => self.lora_rank = parse(key, v)?,
            "optim.lr" => self.lr = parse(key, v)?,
            "optim.momentum" => self.momentum = parse(key, v)?,
            "optim.weight_decay" => self.weight_decay = parse(key, v)?,
            "optim.clip_norm" => self.clip_norm = parse(key, v)?,
            "optim.batch_size" => self.batch_size = parse(key, v)?,
            "objective.alpha" => self.alpha = parse(key, v)?,
            "objective.tau" => self.tau = parse(key, v)?,
            "objective.scoring" => self.scoring = v.to_string(),
            "objective.augment_shift" => self.augment_shift = parse(key, v)?,
            "objective.augment_noise" => self.augment_noise = parse(key, v)?,
            "encoder.d_v" => self.d_v = parse(key, v)?,
            "encoder.d_t" => self.d_t = parse(key, v)?,
            "encoder.depth" => self.depth = parse(key, v)?,
            "encoder.heads" => self.encoder_heads = parse(key, v)?,
            "encoder.patch_grid" => self.patch_grid = parse(key, v)?,
            "encoder.channels" => self.channels = parse(key, v)?,
            "encoder.image_size" => self.image_size = parse(key, v)?,
            "promptformer.m" => self.m = parse(key, v)?,
            "promptformer.heads" => self.heads = parse(key, v)?,
            "promptformer.d_ff" => self.d_ff = Some(parse(key, v)?),
            "data.num_classes" => self.num_classes = parse(key, v)?,
            "data.base_fraction" => self.base_fraction = parse(key, v)?,
            "data.shots" => self.shots = parse(key, v)?,
            "data.train_per_class" => self.train_per_class = parse(key, v)?,
            "data.test_per_class" => self.test_per_class = parse(key, v)?,
            "data.attribute_pool" => self.attribute_pool = parse(key, v)?,
            "data.attributes_per_class" => self.attributes_per_class = parse(key, v)?,
            "data.noise_std" => self.noise_std = parse(key, v)?,
            "data.blob_sigma" => self.blob_sigma = parse(key, v)?,
            "data.domains" => {
                self.domains = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "data.dg_domain" => self.dg_domain = v.to_string(),
            "data.attribute_file" => self.attribute_file = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(self.d_v / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        let positive = [
            ("federation.classes_per_client", self.classes_per_client),
            ("federation.local_iterations", self.local_iterations),
            ("federation.lora_rank", self.lora_rank),
            ("optim.batch_size", self.batch_size),
            ("encoder.d_v", self.d_v),
            ("encoder.d_t", self.d_t),
            ("encoder.depth", self.depth),
            ("encoder.heads", self.encoder_heads),
            ("encoder.patch_grid", self.patch_grid),
            ("encoder.channels", self.channels),
            ("encoder.image_size", self.image_size),
            ("promptformer.m", self.m),
            ("promptformer.heads", self.heads),
            ("promptformer.d_ff", self.d_ff()),
            ("data.num_classes", self.num_classes),
            ("data.shots", self.shots),
            ("data.train_per_class", self.train_per_class),
            ("data.test_per_class", self.test_per_class),
            ("data.attribute_pool", self.attribute_pool),
            ("data.attributes_per_class", self.attributes_per_class),
        ];
        for (k, v) in positive {
            if v == 0 {
                return bad(k, "must be >= 1".into());
            }
        }
        if !(self.participation_rate > 0.0 && self.participation_rate <= 1.0) {
            return bad("federation.participation_rate", format!("{} outside (0, 1]", self.participation_rate));
        }
        if !self.lora_threshold.is_finite() {
            return bad("federation.lora_threshold", "must be finite".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("optim.lr", format!("{} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("optim.momentum", format!("{} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("optim.weight_decay", "must be >= 0".into());
        }
        if !(self.clip_norm >= 0.0 && self.clip_norm.is_finite()) {
            return bad("optim.clip_norm", "must be >= 0".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("objective.alpha", "must be >= 0".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("objective.tau", "must be > 0".into());
        }
        if self.scoring != "desc" && self.scoring != "plain" {
            return bad("objective.scoring", format!("expected desc or plain, got `{}`", self.scoring));
        }
        if !(self.augment_noise >= 0.0 && self.augment_noise.is_finite()) {
            return bad("objective.augment_noise", "must be >= 0".into());
        }
        if !self.d_v.is_multiple_of(self.encoder_heads) {
            return bad("encoder.heads", format!("{} does not divide d_v = {}", self.encoder_heads, self.d_v));
        }
        if !self.d_v.is_multiple_of(self.heads) {
            return bad("promptformer.heads", format!("{} does not divide d_v = {}", self.heads, self.d_v));
        }
        if !self.image_size.is_multiple_of(self.patch_grid) {
            return bad(
                "encoder.patch_grid",
                format!("{} does not divide image_size = {}", self.patch_grid, self.image_size),
            );
        }
        if !(0.0..=1.0).contains(&self.base_fraction) {
            return bad("data.base_fraction", format!("{} outside [0, 1]", self.base_fraction));
        }
        if self.shots > self.train_per_class {
            return bad(
                "data.shots",
                format!("{} exceeds train_per_class = {}", self.shots, self.train_per_class),
            );
        }
        if self.attribute_file.is_none() && self.attributes_per_class > self.attribute_pool {
            return bad(
                "data.attributes_per_class",
                format!("{} exceeds attribute_pool = {}", self.attributes_per_class, self.attribute_pool),
            );
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("data.noise_std", "must be >= 0".into());
        }
        if !(self.blob_sigma > 0.0 && self.blob_sigma.is_finite()) {
            return bad("data.blob_sigma", "must be > 0".into());
        }
        if self.domains.is_empty() {
            return bad("data.domains", "at least one domain is required".into());
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].contains(d) {
                return bad("data.domains", format!("`{d}` listed twice"));
            }
        }
        match self.mode {
            RunMode::Base2New => {}
            RunMode::Msst | RunMode::Ssmt => {
                if self.domains.len() < 2 {
                    return bad("data.domains", format!("{} needs at least two domains", self.mode.as_str()));
                }
                if !self.domains.contains(&self.dg_domain) {
                    return bad("data.dg_domain", format!("`{}` is not one of the domains", self.dg_domain));
                }
            }
        }
        Ok(())
    }

    /// Every field, resolved, in canonical form.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("seed", self.seed.to_string());
        kv("mode", self.mode.as_str().into());
        kv("output_dir", self.output_dir.display().to_string());
        kv("precision", self.precision.as_str().into());
        let mut out = s;
        let mut section = |name: &str, fields: Vec<(&str, String)>| {
            out.push_str(&format!("\n[{name}]\n"));
            for (k, v) in fields {
                out.push_str(&format!("{k} = {v}\n"));
            }
        };
        section(
            "federation",
            vec![
                ("rounds", self.rounds.to_string()),
                ("participation_rate", fmt_f(self.participation_rate)),
                ("classes_per_client", self.classes_per_client.to_string()),
                ("local_iterations", self.local_iterations.to_string()),
                ("lora_threshold", fmt_f(self.lora_threshold)),
                ("lora_rank", self.lora_rank.to_string()),
            ],
        );
        section(
            "optim",
            vec![
                ("lr", fmt_f(self.lr)),
                ("momentum", fmt_f(self.momentum)),
                ("weight_decay", fmt_f(self.weight_decay)),
                ("clip_norm", fmt_f(self.clip_norm)),
                ("batch_size", self.batch_size.to_string()),
            ],
        );
        section(
            "objective",
            vec![
                ("alpha", fmt_f(self.alpha)),
                ("tau", fmt_f(self.tau)),
                ("scoring", self.scoring.clone()),
                ("augment_shift", self.augment_shift.to_string()),
                ("augment_noise", fmt_f(self.augment_noise)),
            ],
        );
        section(
            "encoder",
            vec![
                ("d_v", self.d_v.to_string()),
                ("d_t", self.d_t.to_string()),
                ("depth", self.depth.to_string()),
                ("heads", self.encoder_heads.to_string()),
                ("patch_grid", self.patch_grid.to_string()),
                ("channels", self.channels.to_string()),
                ("image_size", self.image_size.to_string()),
            ],
        );
        section(
            "promptformer",
            vec![
                ("m", self.m.to_string()),
                ("heads", self.heads.to_string()),
                ("d_ff", self.d_ff().to_string()),
            ],
        );
        section(
            "data",
            vec![
                ("num_classes", self.num_classes.to_string()),
                ("base_fraction", fmt_f(self.base_fraction)),
                ("shots", self.shots.to_string()),
                ("train_per_class", self.train_per_class.to_string()),
                ("test_per_class", self.test_per_class.to_string()),
                ("attribute_pool", self.attribute_pool.to_string()),
                ("attributes_per_class", self.attributes_per_class.to_string()),
                ("noise_std", fmt_f(self.noise_std)),
                ("blob_sigma", fmt_f(self.blob_sigma)),
                ("domains", self.domains.join(",")),
                ("dg_domain", self.dg_domain.clone()),
                (
                    "attribute_file",
                    self.attribute_file.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                ),
            ],
        );
        out
    }
}

/// Shortest representation that parses back to the same f64.
fn fmt_f(x: f64) -> String {
    format!("{x:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_sections() {
        let c = RunConfig::parse("seed = 7\n[optim]\nlr = 0.01 # faster\n\n[data]\ndomains = photo, sketch\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.domains, vec!["photo", "sketch"]);
        assert_eq!((c.shots, c.batch_size, c.momentum, c.weight_decay), (8, 128, 0.9, 1e-5));
        assert_eq!((c.alpha, c.m, c.heads, c.lora_threshold), (10.0, 4, 4, 0.5));
        assert_eq!(c.d_ff(), 16);
    }

    #[test]
    fn echo_is_a_fixed_point() {
        let c = RunConfig::parse("[optim]\nlr = 0.0031\n[data]\nnoise_std = 0.3\n").unwrap();
        let e = c.echo();
        let back = RunConfig::parse(&e).unwrap();
        assert_eq!(back.echo(), e);
        assert_eq!(back.lr, 0.0031);
    }

    #[test]
    fn overrides_apply_last() {
        let o = vec![RunConfig::parse_override("federation.rounds=3").unwrap()];
        let c = RunConfig::from_str_with_overrides("[federation]\nrounds = 9\n", &o).unwrap();
        assert_eq!(c.rounds, 3);
        assert!(RunConfig::parse_override("rounds").is_err());
    }

    #[test]
    fn errors_are_named() {
        let e = RunConfig::parse("[optim]\nlr = fast\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("optim.lr"), "{e}");
        let e = RunConfig::parse("bogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("bogus"), "{e}");
        let e = RunConfig::parse("[optim]\nmomentum = 1.0\n").unwrap_err().to_string();
        assert!(e.contains("optim.momentum"), "{e}");
        assert!(RunConfig::parse("[optim\n").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("just words\n").is_err());
        let e = RunConfig::parse("mode = msst\n[data]\ndomains = photo,sketch\ndg_domain = oil\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("data.dg_domain"), "{e}");
    }
}
