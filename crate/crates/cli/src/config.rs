//! Flat key = value run configuration.
//!
//! The whole experiment is described by one file with `[dataset]`,
//! `[schedule]`, `[training]`, `[sampling]`, and `[output]` sections.
//! Unknown sections or keys are rejected; every field is validated
//! against the library's preconditions before any work starts.

use anyhow::{bail, Context, Result};
use ccfg_core::data::{BLUE, RED};
use ccfg_core::model::Condition;
use ccfg_core::GuidanceSpec;
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetCfg {
    pub seed: u64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleCfg {
    pub t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCfg {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub drop_prob: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingCfg {
    pub method: String,
    pub cond: String,
    pub cond2: Option<String>,
    pub scale: f64,
    pub tau: f64,
    pub dng_prior: f64,
    pub dng_tau_prime: f64,
    pub dng_delta: f64,
    pub nfe: usize,
    pub seed: u64,
    pub n: usize,
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputCfg {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetCfg,
    pub schedule: ScheduleCfg,
    pub training: TrainingCfg,
    pub sampling: SamplingCfg,
    pub output: OutputCfg,
}

pub const METHODS: &[&str] = &[
    "none", "cfg", "cfg++", "ncfg", "posneg", "dng", "ccfg-pos", "ccfg-neg",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetCfg { seed: 7, n: 24_000 },
            schedule: ScheduleCfg {
                t: 500,
                beta_min: 1e-4,
                beta_max: 0.04,
            },
            training: TrainingCfg {
                epochs: 100,
                batch: 128,
                lr: 1e-3,
                drop_prob: 0.1,
                hidden: vec![128, 128],
                embed_dim: 8,
                seed: 1234,
            },
            sampling: SamplingCfg {
                method: "ccfg-neg".into(),
                cond: "red".into(),
                cond2: None,
                scale: 7.5,
                tau: 0.2,
                dng_prior: 0.25,
                dng_tau_prime: 0.25,
                dng_delta: 0.0,
                nfe: 100,
                seed: 11,
                n: 4096,
                variant: "noise-space".into(),
            },
            output: OutputCfg { dir: "out".into() },
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, BTreeMap<String, String>>> {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .with_context(|| format!("line {}: malformed section header", lineno + 1))?
                .trim()
                .to_string();
            if sections.contains_key(&name) {
                bail!("line {}: duplicate section [{name}]", lineno + 1);
            }
            sections.insert(name.clone(), BTreeMap::new());
            current = Some(name);
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .with_context(|| format!("line {}: expected key = value", lineno + 1))?;
        let section = current
            .as_ref()
            .with_context(|| format!("line {}: key outside any section", lineno + 1))?;
        let prev = sections
            .get_mut(section)
            .unwrap()
            .insert(key.trim().to_string(), value.trim().to_string());
        if prev.is_some() {
            bail!("line {}: duplicate key {}", lineno + 1, key.trim());
        }
    }
    Ok(sections)
}

struct Section {
    name: String,
    entries: BTreeMap<String, String>,
}

impl Section {
    fn take(&mut self, key: &str) -> Result<String> {
        self.entries
            .remove(key)
            .with_context(|| format!("missing key '{key}' in [{}]", self.name))
    }

    fn take_opt(&mut self, key: &str) -> Option<String> {
        self.entries.remove(key)
    }

    fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.take(key)?;
        raw.parse::<T>()
            .map_err(|e| anyhow::anyhow!("key '{key}' in [{}]: {e}", self.name))
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.entries.keys().next() {
            bail!("unknown key '{key}' in [{}]", self.name);
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut sections = parse_sections(text)?;
        let mut grab = |name: &str| -> Result<Section> {
            Ok(Section {
                name: name.to_string(),
                entries: sections
                    .remove(name)
                    .with_context(|| format!("missing section [{name}]"))?,
            })
        };

        let mut s = grab("dataset")?;
        let dataset = DatasetCfg {
            seed: s.parse("seed")?,
            n: s.parse("n")?,
        };
        s.finish()?;

        let mut s = grab("schedule")?;
        let schedule = ScheduleCfg {
            t: s.parse("t")?,
            beta_min: s.parse("beta_min")?,
            beta_max: s.parse("beta_max")?,
        };
        s.finish()?;

        let mut s = grab("training")?;
        let hidden_raw = s.take("hidden")?;
        let hidden = hidden_raw
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|e| anyhow::anyhow!("hidden dims: {e}"))
            })
            .collect::<Result<Vec<_>>>()?;
        let training = TrainingCfg {
            epochs: s.parse("epochs")?,
            batch: s.parse("batch")?,
            lr: s.parse("lr")?,
            drop_prob: s.parse("drop_prob")?,
            hidden,
            embed_dim: s.parse("embed_dim")?,
            seed: s.parse("seed")?,
        };
        s.finish()?;

        let mut s = grab("sampling")?;
        let sampling = SamplingCfg {
            method: s.take("method")?,
            cond: s.take("cond")?,
            cond2: s.take_opt("cond2"),
            scale: s.parse("scale")?,
            tau: s.parse("tau")?,
            dng_prior: s.parse("dng_prior")?,
            dng_tau_prime: s.parse("dng_tau_prime")?,
            dng_delta: s.parse("dng_delta")?,
            nfe: s.parse("nfe")?,
            seed: s.parse("seed")?,
            n: s.parse("n")?,
            variant: s.take("variant")?,
        };
        s.finish()?;

        let mut s = grab("output")?;
        let output = OutputCfg {
            dir: PathBuf::from(s.take("dir")?),
        };
        s.finish()?;

        if let Some(name) = sections.keys().next() {
            bail!("unknown section [{name}]");
        }

        let config = RunConfig {
            dataset,
            schedule,
            training,
            sampling,
            output,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        out.push_str(&format!("[dataset]\nseed = {}\nn = {}\n\n", d.seed, d.n));
        let s = &self.schedule;
        out.push_str(&format!(
            "[schedule]\nt = {}\nbeta_min = {}\nbeta_max = {}\n\n",
            s.t, s.beta_min, s.beta_max
        ));
        let t = &self.training;
        let hidden = t
            .hidden
            .iter()
            .map(|h| h.to_string())
            .collect::<Vec<_>>()
            .join(",");
        out.push_str(&format!(
            "[training]\nepochs = {}\nbatch = {}\nlr = {}\ndrop_prob = {}\nhidden = {}\nembed_dim = {}\nseed = {}\n\n",
            t.epochs, t.batch, t.lr, t.drop_prob, hidden, t.embed_dim, t.seed
        ));
        let sm = &self.sampling;
        out.push_str(&format!(
            "[sampling]\nmethod = {}\ncond = {}\n",
            sm.method, sm.cond
        ));
        if let Some(cond2) = &sm.cond2 {
            out.push_str(&format!("cond2 = {cond2}\n"));
        }
        out.push_str(&format!(
            "scale = {}\ntau = {}\ndng_prior = {}\ndng_tau_prime = {}\ndng_delta = {}\nnfe = {}\nseed = {}\nn = {}\nvariant = {}\n\n",
            sm.scale, sm.tau, sm.dng_prior, sm.dng_tau_prime, sm.dng_delta, sm.nfe, sm.seed, sm.n, sm.variant
        ));
        out.push_str(&format!("[output]\ndir = {}\n", self.output.dir.display()));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.n < 1 {
            bail!("[dataset] n must be >= 1");
        }
        if self.schedule.t < 2 {
            bail!("[schedule] t must be >= 2");
        }
        if !(self.schedule.beta_min > 0.0
            && self.schedule.beta_min <= self.schedule.beta_max
            && self.schedule.beta_max < 1.0)
        {
            bail!("[schedule] needs 0 < beta_min <= beta_max < 1");
        }
        if self.training.epochs == 0 || self.training.batch == 0 {
            bail!("[training] epochs and batch must be positive");
        }
        if !(self.training.lr.is_finite() && self.training.lr > 0.0) {
            bail!("[training] lr must be positive");
        }
        if !(0.0..=1.0).contains(&self.training.drop_prob) {
            bail!("[training] drop_prob outside [0,1]");
        }
        if self.training.hidden.is_empty() || self.training.hidden.iter().any(|&h| h == 0) {
            bail!("[training] hidden dims must be positive");
        }
        if self.training.embed_dim == 0 {
            bail!("[training] embed_dim must be positive");
        }
        let sm = &self.sampling;
        if !METHODS.contains(&sm.method.as_str()) {
            bail!(
                "[sampling] unknown method '{}' (expected one of {})",
                sm.method,
                METHODS.join(", ")
            );
        }
        parse_condition(&sm.cond)?;
        if let Some(c2) = &sm.cond2 {
            parse_condition(c2)?;
        }
        if sm.method == "posneg" && sm.cond2.is_none() {
            bail!("[sampling] method posneg requires cond2");
        }
        if !(sm.scale.is_finite() && sm.scale >= 0.0) {
            bail!("[sampling] scale must be >= 0");
        }
        if !(sm.tau.is_finite() && sm.tau > 0.0) {
            bail!("[sampling] tau must be > 0");
        }
        if !(sm.dng_prior > 0.0 && sm.dng_prior < 1.0) {
            bail!("[sampling] dng_prior outside (0,1)");
        }
        if !(sm.dng_tau_prime.is_finite() && sm.dng_tau_prime >= 0.0) {
            bail!("[sampling] dng_tau_prime must be >= 0");
        }
        if !sm.dng_delta.is_finite() {
            bail!("[sampling] dng_delta must be finite");
        }
        if sm.nfe < 1 || sm.nfe > self.schedule.t {
            bail!("[sampling] nfe outside 1..=t");
        }
        if self.schedule.t % sm.nfe != 0 {
            bail!("[sampling] nfe must divide t uniformly");
        }
        if sm.n < 1 {
            bail!("[sampling] n must be >= 1");
        }
        if sm.variant != "noise-space" && sm.variant != "posterior-mean" {
            bail!("[sampling] variant must be noise-space or posterior-mean");
        }
        if self.output.dir.as_os_str().is_empty() {
            bail!("[output] dir must not be empty");
        }
        Ok(())
    }

    /// Guidance strategy for a given method name and scale, with the
    /// remaining hyperparameters taken from this config.
    pub fn guidance_spec(&self, method: &str, scale: f64) -> Result<GuidanceSpec> {
        let sm = &self.sampling;
        Ok(match method {
            "none" => GuidanceSpec::None,
            "cfg" => GuidanceSpec::Cfg { gamma: scale },
            "cfg++" => {
                if !(scale > 0.0 && scale <= 1.0) {
                    bail!("cfg++ scale must lie in (0,1]");
                }
                GuidanceSpec::CfgPP { lambda: scale }
            }
            "ncfg" => GuidanceSpec::NCfg { gamma: scale },
            "posneg" => GuidanceSpec::PosNeg { gamma: scale },
            "dng" => GuidanceSpec::Dng {
                omega: scale,
                prior: sm.dng_prior,
                tau_prime: sm.dng_tau_prime,
                delta: sm.dng_delta,
            },
            "ccfg-pos" => GuidanceSpec::CcfgPos {
                omega: scale,
                tau: sm.tau,
            },
            "ccfg-neg" => GuidanceSpec::CcfgNeg {
                omega: scale,
                tau: sm.tau,
            },
            other => bail!("unknown method '{other}'"),
        })
    }
}

pub fn parse_condition(name: &str) -> Result<Condition> {
    Ok(match name {
        "blue" => Condition::Class(BLUE),
        "red" => Condition::Class(RED),
        "null" | "none" => Condition::Null,
        other => bail!("unknown condition '{other}' (expected blue, red, or null)"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let config = RunConfig::default();
        let text = config.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn cond2_roundtrips() {
        let mut config = RunConfig::default();
        config.sampling.method = "posneg".into();
        config.sampling.cond2 = Some("blue".into());
        let back = RunConfig::parse(&config.serialize()).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::default().serialize();
        text.push_str("\n[dataset2]\nseed = 1\n");
        assert!(RunConfig::parse(&text).is_err());
        let text = RunConfig::default()
            .serialize()
            .replace("[dataset]\nseed", "[dataset]\nbogus = 3\nseed");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn validation_gates_bad_fields() {
        let base = RunConfig::default().serialize();
        for (from, to) in [
            ("epochs = 100", "epochs = 0"),
            ("nfe = 100", "nfe = 33"),
            ("method = ccfg-neg", "method = super-guide"),
            ("cond = red", "cond = purple"),
            ("variant = noise-space", "variant = sideways"),
            ("beta_max = 0.04", "beta_max = 1.5"),
            ("drop_prob = 0.1", "drop_prob = 1.2"),
        ] {
            let text = base.replace(from, to);
            assert!(RunConfig::parse(&text).is_err(), "{to} should be rejected");
        }
    }

    #[test]
    fn comments_and_whitespace_are_tolerated() {
        let text = "\n# experiment\n[dataset]\nseed = 7   # rng\nn = 100\n".to_string()
            + "[schedule]\nt = 10\nbeta_min = 0.001\nbeta_max = 0.02\n"
            + "[training]\nepochs = 1\nbatch = 8\nlr = 0.001\ndrop_prob = 0.1\nhidden = 8\nembed_dim = 2\nseed = 1\n"
            + "[sampling]\nmethod = none\ncond = null\nscale = 0\ntau = 0.2\ndng_prior = 0.25\ndng_tau_prime = 0.25\ndng_delta = 0\nnfe = 10\nseed = 1\nn = 4\nvariant = noise-space\n"
            + "[output]\ndir = out\n";
        let config = RunConfig::parse(&text).unwrap();
        assert_eq!(config.dataset.seed, 7);
        assert_eq!(config.training.hidden, vec![8]);
    }

    #[test]
    fn method_names_cover_all_strategies() {
        let config = RunConfig::default();
        for method in METHODS {
            if *method == "posneg" {
                continue;
            }
            let scale = if *method == "cfg++" { 0.8 } else { 2.0 };
            let spec = config.guidance_spec(method, scale).unwrap();
            assert_eq!(spec.method_name(), *method);
        }
    }
}
