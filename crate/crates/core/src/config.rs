//! Run configuration as flat `key=value` lines.

use std::fmt;
use std::str::FromStr;

use crate::error::{CoreError, Result};
use crate::scene::{MAX_CLASSES, MIN_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Basic,
    Sg,
    Sge,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Basic, Variant::Sg, Variant::Sge];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Sg => "sg",
            Variant::Sge => "sge",
        }
    }
}

impl FromStr for Variant {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Variant::Basic),
            "sg" => Ok(Variant::Sg),
            "sge" => Ok(Variant::Sge),
            _ => Err(CoreError::config(format!("unknown variant `{s}` (basic|sg|sge)"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which pixels set the reliability threshold.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScemScope {
    Hole,
    Global,
}

impl FromStr for ScemScope {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hole" => Ok(ScemScope::Hole),
            "global" => Ok(ScemScope::Global),
            _ => Err(CoreError::config(format!("unknown scem_scope `{s}` (hole|global)"))),
        }
    }
}

impl fmt::Display for ScemScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScemScope::Hole => "hole",
            ScemScope::Global => "global",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scales: usize,
    pub classes: usize,
    /// Channels at scales 1..=L.
    pub widths: Vec<usize>,
    pub variant: Variant,
    pub scem_percentile: f64,
    pub scem_scope: ScemScope,
    pub lambda_p: f64,
    pub lambda_adv: f64,
    pub lambda_seg: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub steps: usize,
    pub save_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    pub keep_checkpoints: usize,
    pub disc_width: usize,
    pub size: usize,
    pub seed: u64,
}

impl RunConfig {
    /// Defaults for everything except the required keys.
    pub fn new(scales: usize, classes: usize, widths: Vec<usize>) -> Self {
        Self {
            scales,
            classes,
            widths,
            variant: Variant::Sge,
            scem_percentile: 25.0,
            scem_scope: ScemScope::Hole,
            lambda_p: 0.1,
            lambda_adv: 0.05,
            lambda_seg: 1.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch: 4,
            steps: 2000,
            save_every: 500,
            eval_every: 0,
            keep_checkpoints: 3,
            disc_width: 16,
            size: 64,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(CoreError::config(msg));
        if self.scales < 3 {
            return fail(format!("scales must be >= 3, got {}", self.scales));
        }
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.classes) {
            return fail(format!("classes must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {}", self.classes));
        }
        if self.widths.len() != self.scales {
            return fail(format!("widths has {} entries, scales is {}", self.widths.len(), self.scales));
        }
        if self.widths.contains(&0) {
            return fail("widths must be positive".into());
        }
        if !(self.scem_percentile > 0.0 && self.scem_percentile < 100.0) {
            return fail(format!("scem_percentile must be in (0, 100), got {}", self.scem_percentile));
        }
        for (k, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_adv", self.lambda_adv),
            ("lambda_seg", self.lambda_seg),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{k} must be a finite non-negative number"));
            }
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return fail("invalid optimizer settings".into());
        }
        if self.batch == 0 || self.disc_width == 0 {
            return fail("batch and disc_width must be positive".into());
        }
        let unit = 1usize << (self.scales - 1);
        if self.size == 0 || !self.size.is_multiple_of(unit) {
            return fail(format!("size {} not divisible by {unit}", self.size));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("scales", self.scales.to_string());
        put("classes", self.classes.to_string());
        put("widths", widths.join(","));
        put("variant", self.variant.to_string());
        put("scem_percentile", self.scem_percentile.to_string());
        put("scem_scope", self.scem_scope.to_string());
        put("lambda_p", self.lambda_p.to_string());
        put("lambda_adv", self.lambda_adv.to_string());
        put("lambda_seg", self.lambda_seg.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        put("batch", self.batch.to_string());
        put("steps", self.steps.to_string());
        put("save_every", self.save_every.to_string());
        put("eval_every", self.eval_every.to_string());
        put("keep_checkpoints", self.keep_checkpoints.to_string());
        put("disc_width", self.disc_width.to_string());
        put("size", self.size.to_string());
        put("seed", self.seed.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::config(format!("line {}: expected key=value", n + 1)))?;
            let k = k.trim().to_string();
            if pairs.iter().any(|(seen, _)| *seen == k) {
                return Err(CoreError::config(format!("duplicate config key `{k}`")));
            }
            pairs.push((k, v.trim().to_string()));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let required = |key: &str| get(key).ok_or_else(|| CoreError::config(format!("missing config key `{key}`")));

        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| CoreError::config(format!("bad value `{v}` for `{key}`")))
        }

        let widths = required("widths")?
            .split(',')
            .map(|w| num::<usize>("widths", w.trim()))
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = RunConfig::new(num("scales", required("scales")?)?, num("classes", required("classes")?)?, widths);

        for (k, v) in &pairs {
            match k.as_str() {
                "scales" | "classes" | "widths" => {}
                "variant" => cfg.variant = v.parse()?,
                "scem_percentile" => cfg.scem_percentile = num(k, v)?,
                "scem_scope" => cfg.scem_scope = v.parse()?,
                "lambda_p" => cfg.lambda_p = num(k, v)?,
                "lambda_adv" => cfg.lambda_adv = num(k, v)?,
                "lambda_seg" => cfg.lambda_seg = num(k, v)?,
                "lr" => cfg.lr = num(k, v)?,
                "beta1" => cfg.beta1 = num(k, v)?,
                "beta2" => cfg.beta2 = num(k, v)?,
                "adam_eps" => cfg.adam_eps = num(k, v)?,
                "batch" => cfg.batch = num(k, v)?,
                "steps" => cfg.steps = num(k, v)?,
                "save_every" => cfg.save_every = num(k, v)?,
                "eval_every" => cfg.eval_every = num(k, v)?,
                "keep_checkpoints" => cfg.keep_checkpoints = num(k, v)?,
                "disc_width" => cfg.disc_width = num(k, v)?,
                "size" => cfg.size = num(k, v)?,
                "seed" => cfg.seed = num(k, v)?,
                other => return Err(CoreError::config(format!("unknown config key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
