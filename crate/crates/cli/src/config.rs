//! `key = value` run configuration covering cohort generation, training,
//! search, evaluation and file paths.

use std::collections::BTreeMap;
use std::str::FromStr;

use toe_core::baselines::RankingPool;
use toe_core::search::{SearchConfig, StabilitySpace};
use toe_core::streams::ModelShape;
use toe_core::synth::{SpuriousConfig, SynthConfig};
use toe_core::training::TrainConfig;

use crate::error::CliError;

/// Every accepted key with its default value.
fn defaults() -> Vec<(&'static str, String)> {
    let s = SynthConfig::default();
    let t = TrainConfig::default();
    let m = ModelShape::default();
    let q = SearchConfig::default();
    let sp = SpuriousConfig::default();
    vec![
        ("n_train", s.n_train.to_string()),
        ("n_val", s.n_val.to_string()),
        ("n_test", s.n_test.to_string()),
        ("t", s.t.to_string()),
        ("d", s.d.to_string()),
        ("m_max", s.m_max.to_string()),
        ("e_dim", s.e_dim.to_string()),
        ("d_cxr", s.d_cxr.to_string()),
        ("d_ecg", s.d_ecg.to_string()),
        ("prevalence", s.prevalence.to_string()),
        ("planted_ts", s.planted_ts.to_string()),
        ("planted_note", s.planted_note.to_string()),
        ("signal_strength", s.signal_strength.to_string()),
        ("note_signal_scale", s.note_signal_scale.to_string()),
        ("noise_sd", s.noise_sd.to_string()),
        ("signal_channels", s.signal_channels.to_string()),
        ("notes_only_fraction", s.notes_only_fraction.to_string()),
        ("context_coef", s.context_coef.to_string()),
        ("context_presence", s.context_presence.to_string()),
        ("label_noise", "0".into()),
        ("spurious", "false".into()),
        ("spurious_train_correlation", sp.train_correlation.to_string()),
        ("spurious_test_correlation", sp.test_correlation.to_string()),
        ("spurious_feature", sp.feature.to_string()),
        ("epochs_phase1", t.epochs_phase1.to_string()),
        ("epochs_phase2", t.epochs_phase2.to_string()),
        ("lr", t.lr.to_string()),
        ("lr_phase2", t.lr_phase2.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("k_train", t.k_train.to_string()),
        ("ste_temperature", t.ste_temperature.to_string()),
        ("selector_hidden", m.selector_hidden.to_string()),
        ("unit_hidden", m.unit_hidden.to_string()),
        ("ctx_hidden", m.ctx_hidden.to_string()),
        ("classifier_hidden", m.classifier_hidden.to_string()),
        ("beam_width", q.beam_width.to_string()),
        ("max_steps", q.max_steps.to_string()),
        ("n_ts_candidates", q.n_ts_candidates.to_string()),
        ("n_note_candidates", q.n_note_candidates.to_string()),
        ("lambda", q.lambda.to_string()),
        ("mu", q.mu.to_string()),
        ("tau_conf", q.tau_conf.to_string()),
        ("tau_suff", q.tau_suff.to_string()),
        ("stability_space", q.stability_space.to_string()),
        ("budgets", "1,5,12".into()),
        ("methods", "toe,topk,random,saliency".into()),
        ("ranking_pool", "global".into()),
        ("ablate_k", "5".into()),
        ("ste_temperatures", "0.1,1,5".into()),
        ("split", "test".into()),
        ("seeds", "0".into()),
        ("cohort", "cohort.jsonl".into()),
        ("model", "model.json".into()),
        ("out", String::new()),
        ("traces", String::new()),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: defaults().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("invalid value {value:?} for {key}: {why}"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.trim().to_string();
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
    }

    /// Applies a `key=value` override as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("expected key=value, got {pair:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies the lines of a config file. Blank lines and `#` comments
    /// are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.parse().map_err(|e| bad(key, v, e))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.get(key);
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| bad(key, v, e)))
            .collect()
    }

    /// Copy with `seeds` narrowed to one seed and `{seed}` substituted in
    /// every path.
    pub fn for_seed(&self, seed: u64) -> RunConfig {
        let mut out = self.clone();
        out.values.insert("seeds".into(), seed.to_string());
        for key in ["cohort", "model", "out", "traces"] {
            let v = out.get(key).replace("{seed}", &seed.to_string());
            out.values.insert(key.into(), v);
        }
        out
    }

    /// All settings, one `key = value` per line in key order.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn seeds(&self) -> Result<Vec<u64>, CliError> {
        let s = self.list("seeds")?;
        if s.is_empty() {
            return Err(CliError::Usage("seeds must list at least one seed".into()));
        }
        Ok(s)
    }

    /// The single seed of a per-seed config.
    pub fn seed(&self) -> Result<u64, CliError> {
        let s = self.seeds()?;
        Ok(s[0])
    }

    /// Parses every typed key so bad values fail before any work starts.
    pub fn check(&self) -> Result<(), CliError> {
        self.synth()?;
        self.spurious()?;
        self.train()?;
        self.search()?;
        self.ranking_pool()?;
        self.budgets()?;
        self.split()?;
        self.parse::<f64>("label_noise")?;
        self.parse::<bool>("spurious")?;
        self.parse::<usize>("ablate_k")?;
        self.list::<f64>("ste_temperatures")?;
        Ok(())
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            n_train: self.parse("n_train")?,
            n_val: self.parse("n_val")?,
            n_test: self.parse("n_test")?,
            t: self.parse("t")?,
            d: self.parse("d")?,
            m_max: self.parse("m_max")?,
            e_dim: self.parse("e_dim")?,
            d_cxr: self.parse("d_cxr")?,
            d_ecg: self.parse("d_ecg")?,
            prevalence: self.parse("prevalence")?,
            planted_ts: self.parse("planted_ts")?,
            planted_note: self.parse("planted_note")?,
            signal_strength: self.parse("signal_strength")?,
            note_signal_scale: self.parse("note_signal_scale")?,
            noise_sd: self.parse("noise_sd")?,
            signal_channels: self.parse("signal_channels")?,
            notes_only_fraction: self.parse("notes_only_fraction")?,
            context_coef: self.parse("context_coef")?,
            context_presence: self.parse("context_presence")?,
            seed: self.seed()?,
        })
    }

    pub fn spurious(&self) -> Result<SpuriousConfig, CliError> {
        Ok(SpuriousConfig {
            train_correlation: self.parse("spurious_train_correlation")?,
            test_correlation: self.parse("spurious_test_correlation")?,
            feature: self.parse("spurious_feature")?,
        })
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            epochs_phase1: self.parse("epochs_phase1")?,
            epochs_phase2: self.parse("epochs_phase2")?,
            lr: self.parse("lr")?,
            lr_phase2: self.parse("lr_phase2")?,
            batch_size: self.parse("batch_size")?,
            k_train: self.parse("k_train")?,
            ste_temperature: self.parse("ste_temperature")?,
            shape: ModelShape {
                selector_hidden: self.parse("selector_hidden")?,
                unit_hidden: self.parse("unit_hidden")?,
                ctx_hidden: self.parse("ctx_hidden")?,
                classifier_hidden: self.parse("classifier_hidden")?,
            },
            seed: self.seed()?,
        })
    }

    pub fn search(&self) -> Result<SearchConfig, CliError> {
        let cfg = SearchConfig {
            beam_width: self.parse("beam_width")?,
            max_steps: self.parse("max_steps")?,
            n_ts_candidates: self.parse("n_ts_candidates")?,
            n_note_candidates: self.parse("n_note_candidates")?,
            lambda: self.parse("lambda")?,
            mu: self.parse("mu")?,
            tau_conf: self.parse("tau_conf")?,
            tau_suff: self.parse("tau_suff")?,
            stability_space: self.parse::<StabilitySpace>("stability_space")?,
            budget: None,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn ranking_pool(&self) -> Result<RankingPool, CliError> {
        self.parse("ranking_pool")
    }

    pub fn budgets(&self) -> Result<Vec<usize>, CliError> {
        let b: Vec<usize> = self.list("budgets")?;
        if b.is_empty() || b.contains(&0) {
            return Err(CliError::Usage("budgets must be a non-empty list of positive integers".into()));
        }
        Ok(b)
    }

    pub fn split(&self) -> Result<toe_core::datamodel::Split, CliError> {
        use toe_core::datamodel::Split;
        match self.get("split") {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            v => Err(bad("split", v, "expected train, val or test")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_core_configs() {
        let c = RunConfig::default();
        assert_eq!(c.synth().unwrap(), SynthConfig::default());
        assert_eq!(c.train().unwrap(), TrainConfig::default());
        assert_eq!(c.search().unwrap(), SearchConfig::default());
        assert_eq!(c.spurious().unwrap(), SpuriousConfig::default());
        assert_eq!(c.budgets().unwrap(), vec![1, 5, 12]);
    }

    #[test]
    fn file_overrides_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text("# header\n\nlambda = 0.5  # trailing\nstability_space=logit\n").unwrap();
        let s = c.search().unwrap();
        assert_eq!(s.lambda, 0.5);
        assert_eq!(s.stability_space, StabilitySpace::Logit);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("lamda = 1"), Err(CliError::Usage(_))));
        assert!(c.set_pair("nope=1").is_err());
        assert!(c.set_pair("missing_equals").is_err());
    }

    #[test]
    fn bad_values_rejected() {
        let mut c = RunConfig::default();
        c.set("beam_width", "x").unwrap();
        assert!(c.search().is_err());
        c.set("beam_width", "0").unwrap();
        assert!(c.search().is_err());
    }

    #[test]
    fn seed_substitution() {
        let mut c = RunConfig::default();
        c.set("model", "runs/m{seed}.json").unwrap();
        c.set("seeds", "3,4").unwrap();
        let s = c.for_seed(4);
        assert_eq!(s.get("model"), "runs/m4.json");
        assert_eq!(s.seed().unwrap(), 4);
        assert_eq!(s.train().unwrap().seed, 4);
    }

    #[test]
    fn resolved_lists_every_key_sorted() {
        let text = RunConfig::default().resolved();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), defaults().len());
    }
}
