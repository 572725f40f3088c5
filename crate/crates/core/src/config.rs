//! Run configuration: a strict TOML schema layered over profile defaults.
//!
//! Resolution order, later wins: profile defaults, configuration file,
//! environment variables, command-line seed. Environment variables are
//! named `CASCADE_UNET__<SECTION>__<KEY>` (or `CASCADE_UNET__<KEY>` for
//! root keys); their values are parsed as TOML literals, falling back to
//! plain strings. Unknown keys anywhere are an error.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::augment::AugmentConfig;
use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, Phantom, PhantomSpec};
use crate::preprocess::PreprocessParams;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "CASCADE_UNET__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 32³ grid, small network: everything runs on a laptop CPU.
    #[default]
    Desk,
    /// 128³ grid and the full-size network.
    Full,
}

impl std::str::FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::Config(format!("unknown profile {other:?} (expected desk or full)"))),
        }
    }
}

/// Synthetic dataset settings used by the `phantom` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub count: usize,
    pub shape: [usize; 3],
    pub noise_std: f32,
    /// Jitter lesion position and size per case.
    pub randomize: bool,
}

impl PhantomConfig {
    /// Cases named `phantom_000`, `phantom_001`, ... with seeds `base_seed + i`.
    pub fn generate(&self, base_seed: u64) -> Result<Vec<Phantom>> {
        (0..self.count)
            .map(|i| {
                let seed = base_seed.wrapping_add(i as u64);
                let mut spec = if self.randomize {
                    PhantomSpec::random(self.shape, seed)
                } else {
                    PhantomSpec::standard(self.shape, seed)
                };
                spec.noise_std = self.noise_std;
                generate_phantom(&format!("phantom_{i:03}"), &spec)
            })
            .collect()
    }
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            count: 4,
            shape: [32; 3],
            noise_std: 20.0,
            randomize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    pub seed: u64,
    pub preprocess: PreprocessParams,
    pub augment: AugmentConfig,
    pub cascade: CascadeConfig,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
}

impl Config {
    pub fn defaults(profile: Profile) -> Config {
        let mut c = match profile {
            Profile::Desk => Config {
                profile,
                seed: 0,
                preprocess: PreprocessParams {
                    target_grid: [32; 3],
                    ..Default::default()
                },
                augment: AugmentConfig {
                    bspline_grid: 8,
                    bspline_sigma: 1.0,
                    ..Default::default()
                },
                cascade: CascadeConfig::desk(),
                train: TrainConfig {
                    epochs: 50,
                    ..Default::default()
                },
                phantom: PhantomConfig::default(),
            },
            Profile::Full => Config {
                profile,
                seed: 0,
                preprocess: PreprocessParams::default(),
                augment: AugmentConfig::default(),
                cascade: CascadeConfig::full(),
                train: TrainConfig::default(),
                phantom: PhantomConfig {
                    shape: [128; 3],
                    ..Default::default()
                },
            },
        };
        c.propagate_seed();
        c
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.augment.rng_seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.cascade.check_grid(self.preprocess.target_grid)?;
        self.train.validate(self.cascade.scales.len())?;
        if self.phantom.shape.contains(&0) {
            return Err(Error::Config("phantom.shape must be positive".into()));
        }
        if !(self.phantom.noise_std >= 0.0) {
            return Err(Error::Config("phantom.noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Layers `text` (TOML), then `env`, then `seed` over the defaults of the
    /// chosen profile. `profile` overrides a `profile` key in the text.
    pub fn resolve_str(
        text: Option<&str>,
        profile: Option<Profile>,
        env: impl IntoIterator<Item = (String, String)>,
        seed: Option<u64>,
    ) -> Result<Config> {
        let mut layer = match text {
            Some(t) => t.parse::<Table>().map_err(|e| Error::Config(e.to_string()))?,
            None => Table::new(),
        };
        apply_env(&mut layer, env)?;
        let profile = match profile {
            Some(p) => p,
            None => match layer.get("profile") {
                Some(Value::String(s)) => s.parse()?,
                Some(other) => return Err(Error::Config(format!("profile must be a string, got {other}"))),
                None => Profile::default(),
            },
        };
        layer.insert("profile".into(), Value::String(profile_name(profile).into()));
        let base = Value::try_from(Config::defaults(profile)).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Table(mut merged) = base else {
            unreachable!("a struct serialises to a table")
        };
        strip_derived(&mut merged);
        merge(&mut merged, layer);
        let mut config: Config = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        config.propagate_seed();
        config.validate()?;
        Ok(config)
    }

    /// Reads the file (if any) and the process environment.
    pub fn resolve(path: Option<&Path>, profile: Option<Profile>, seed: Option<u64>) -> Result<Config> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Config::resolve_str(text.as_deref(), profile, std::env::vars(), seed)
    }

    pub fn to_toml(&self) -> String {
        let Value::Table(mut t) = Value::try_from(self).expect("config serialises") else {
            unreachable!()
        };
        strip_derived(&mut t);
        toml::to_string_pretty(&t).expect("config serialises")
    }
}

fn profile_name(p: Profile) -> &'static str {
    match p {
        Profile::Desk => "desk",
        Profile::Full => "full",
    }
}

/// Seeds inside sections are derived from the root seed and never read back.
fn strip_derived(t: &mut Table) {
    for (section, key) in [("train", "seed"), ("augment", "rng_seed")] {
        if let Some(Value::Table(s)) = t.get_mut(section) {
            s.remove(key);
        }
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn apply_env(layer: &mut Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    for (name, raw) in env {
        let Some(rest) = name.strip_prefix(ENV_PREFIX) else {
            continue;
        };
        let path: Vec<String> = rest.split("__").map(|p| p.to_ascii_lowercase()).collect();
        if path.iter().any(|p| p.is_empty()) || path.len() > 2 {
            return Err(Error::Config(format!("malformed override variable {name}")));
        }
        let value = format!("v = {raw}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(Value::String(raw));
        let mut slot = &mut *layer;
        for section in &path[..path.len() - 1] {
            let entry = slot
                .entry(section.clone())
                .or_insert_with(|| Value::Table(Table::new()));
            slot = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::Config(format!("{name}: {section} is not a section"))),
            };
        }
        slot.insert(path[path.len() - 1].clone(), value);
    }
    Ok(())
}
