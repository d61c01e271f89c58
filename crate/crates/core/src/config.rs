//! Shared configuration, seed derivation, answer normalization and the
//! JSON-lines event log.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::ToyOracleConfig;
use crate::synthbench::SynthConfig;
use crate::training::TrainConfig;

/// Environment variable naming a config file when `--config` is absent.
pub const CONFIG_ENV: &str = "SEMCLIP_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config value at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

fn invalid(path: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenes: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub supervision: Option<PathBuf>,
}

/// Resolved run configuration. Training hyperparameters sit at the top
/// level so that `{"epochs": 32, "batch_size": 64}` is a valid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    pub grid_n: u32,
    pub k: usize,
    pub tokens_per_image: u64,
    pub temperature: f64,
    pub repeats: u32,
    pub include_overview: bool,
    pub parallelism: usize,
    pub strategy: String,
    pub answerer: String,
    pub scorer: String,
    pub paths: PathsConfig,
    pub oracle: ToyOracleConfig,
    pub margin: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pair_cap_per_instance: usize,
    pub embed_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            grid_n: 3,
            k: 1,
            tokens_per_image: 576,
            temperature: 0.0,
            repeats: 32,
            include_overview: true,
            parallelism: 4,
            strategy: "topk".into(),
            answerer: "toy".into(),
            scorer: "tiny".into(),
            paths: PathsConfig::default(),
            oracle: ToyOracleConfig::default(),
            margin: train.margin,
            learning_rate: train.learning_rate,
            batch_size: train.batch_size,
            epochs: train.epochs,
            pair_cap_per_instance: train.pair_cap_per_instance,
            embed_dim: train.embed_dim,
            synth: None,
        }
    }
}

impl GlobalConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: GlobalConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::Parse {
                path,
                message: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_n < 1 {
            return Err(invalid("grid_n", "must be >= 1"));
        }
        if self.k < 1 {
            return Err(invalid("k", "must be >= 1"));
        }
        if self.k > (self.grid_n as usize).pow(2) {
            return Err(invalid("k", format!("must be <= grid_n^2 = {}", self.grid_n.pow(2))));
        }
        if self.tokens_per_image < 1 {
            return Err(invalid("tokens_per_image", "must be >= 1"));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(invalid("temperature", "must be finite and >= 0"));
        }
        if self.repeats < 1 {
            return Err(invalid("repeats", "must be >= 1"));
        }
        if self.oracle.min_visible_pixels < 1 {
            return Err(invalid("oracle.min_visible_pixels", "must be >= 1"));
        }
        if self.oracle.input_resolution < 1 {
            return Err(invalid("oracle.input_resolution", "must be >= 1"));
        }
        self.train_config().validate().map_err(|(key, msg)| invalid(key, msg))?;
        if let Some(synth) = &self.synth {
            synth.validate().map_err(|msg| invalid("synth", msg.to_string()))?;
        }
        for (key, path) in [
            ("paths.dataset", &self.paths.dataset),
            ("paths.scenes", &self.paths.scenes),
            ("paths.encoder", &self.paths.encoder),
            ("paths.supervision", &self.paths.supervision),
        ] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(invalid(key, format!("{} does not exist", p.display())));
                }
            }
        }
        if let Some(out) = &self.paths.out {
            let creatable = out.exists()
                || out
                    .ancestors()
                    .skip(1)
                    .find(|a| !a.as_os_str().is_empty())
                    .is_none_or(|a| a.exists());
            if !creatable {
                return Err(invalid("paths.out", format!("{} cannot be created", out.display())));
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            pair_cap_per_instance: self.pair_cap_per_instance,
            embed_dim: self.embed_dim,
        }
    }
}

/// Reads and validates a JSON config; defaults fill every missing key.
pub fn load_config(path: impl AsRef<Path>) -> Result<GlobalConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    GlobalConfig::from_json_str(&text)
}

/// Per-purpose offsets mixed into the global seed. Every stochastic
/// operation draws from a generator derived through [`derive_seed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum SeedPurpose {
    Synth = 0x100,
    RandomSelection = 0x200,
    PairSampling = 0x300,
    EncoderInit = 0x400,
    BatchShuffle = 0x500,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, purpose: SeedPurpose, key: u64) -> u64 {
    splitmix64(splitmix64(base ^ purpose as u64).wrapping_add(key))
}

/// Stable 64-bit key for a string (FNV-1a), used to derive per-instance seeds.
pub fn string_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NormalizedAnswer {
    pub text: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub option_letter: Option<char>,
}

fn is_trailing_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
}

fn normalize_text(raw: &str) -> String {
    let lower = raw.to_lowercase();
    let collapsed = lower.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| is_trailing_punct(c) || c.is_whitespace())
        .to_string()
}

/// Detects "a", "(a)", "(a) text", "a." / "a)" / "a:" prefixes among the
/// first `option_count` letters.
fn detect_option_letter(text: &str, option_count: usize) -> Option<char> {
    let chars: Vec<char> = text.chars().collect();
    let letter = match chars.as_slice() {
        [c] => Some(*c),
        ['(', c, ')', ..] => Some(*c),
        [c, '.' | ')' | ':', ..] => Some(*c),
        _ => None,
    }?;
    let offset = (letter as u32).checked_sub('a' as u32)? as usize;
    (letter.is_ascii_lowercase() && offset < option_count.min(26)).then_some(letter)
}

/// Lowercase, trim, collapse whitespace, strip trailing punctuation; with
/// options present, also pick out a leading option letter.
pub fn normalize_answer(raw: &str, options: Option<&[String]>) -> NormalizedAnswer {
    let text = normalize_text(raw);
    let option_letter = options.and_then(|opts| detect_option_letter(&text, opts.len()));
    NormalizedAnswer { text, option_letter }
}

/// The single correctness test shared by labeling, selection and evaluation.
/// Multiple-choice answers compare option letters; a predicted answer that
/// spells out an option's text is mapped to that option's letter.
pub fn answers_match(predicted: &str, gold: &str, options: Option<&[String]>) -> bool {
    let p = normalize_answer(predicted, options);
    let g = normalize_answer(gold, options);
    if let Some(opts) = options {
        let letter_of = |n: &NormalizedAnswer| {
            n.option_letter.or_else(|| {
                opts.iter()
                    .position(|o| normalize_text(o) == n.text)
                    .map(|i| (b'a' + i as u8) as char)
            })
        };
        if let (Some(a), Some(b)) = (letter_of(&p), letter_of(&g)) {
            return a == b;
        }
    }
    p.text == g.text
}

/// Line-delimited JSON event sink. Each line carries a run id and a unix
/// timestamp in milliseconds.
pub struct EventLog {
    run_id: String,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl EventLog {
    pub fn disabled() -> Self {
        Self {
            run_id: String::new(),
            sink: None,
        }
    }

    pub fn to_file(path: impl AsRef<Path>, run_id: impl Into<String>) -> std::io::Result<Self> {
        let file = File::create(path)?;
        Ok(Self {
            run_id: run_id.into(),
            sink: Some(Mutex::new(BufWriter::new(file))),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn emit(&self, event: &str, fields: serde_json::Value) {
        let Some(sink) = &self.sink else { return };
        let ts_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let line = serde_json::json!({
            "ts_ms": ts_ms,
            "run_id": self.run_id,
            "event": event,
            "fields": fields,
        });
        let mut w = sink.lock().expect("event log poisoned");
        // logging is best-effort
        let _ = writeln!(w, "{line}");
        let _ = w.flush();
    }
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog")
            .field("run_id", &self.run_id)
            .field("enabled", &self.sink.is_some())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = GlobalConfig::from_json_str("{}").unwrap();
        assert_eq!(cfg, GlobalConfig::default());
        assert_eq!(cfg.grid_n, 3);
        assert_eq!(cfg.k, 1);
        assert_eq!(cfg.tokens_per_image, 576);
        assert_eq!(cfg.temperature, 0.0);
        assert_eq!(cfg.repeats, 32);
        assert_eq!(cfg.margin, 0.2);
        assert_eq!(cfg.learning_rate, 5e-6);
        assert_eq!(cfg.batch_size, 64);
        assert_eq!(cfg.epochs, 32);
    }

    #[test]
    fn k_zero_is_rejected_with_key() {
        let err = GlobalConfig::from_json_str(r#"{"k": 0}"#).unwrap_err();
        match err {
            ConfigError::Invalid { path, .. } => assert_eq!(path, "k"),
            other => panic!("unexpected {other}"),
        }
        assert!(GlobalConfig::from_json_str(r#"{"k": 10}"#).is_err());
        assert!(GlobalConfig::from_json_str(r#"{"margin": 0}"#).is_err());
        assert!(GlobalConfig::from_json_str(r#"{"repeats": 0}"#).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_with_path() {
        let err = GlobalConfig::from_json_str(r#"{"grid": 3}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
        let err = GlobalConfig::from_json_str(r#"{"oracle": {"min_pixels": 3}}"#).unwrap_err();
        match err {
            ConfigError::Parse { path, message } => {
                assert!(path.starts_with("oracle"), "{path}");
                assert!(message.contains("min_pixels"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn training_hyperparameters_round_trip() {
        let cfg = GlobalConfig::from_json_str(r#"{"epochs": 32, "batch_size": 64, "learning_rate": 5e-6}"#).unwrap();
        let v = serde_json::to_value(&cfg).unwrap();
        assert_eq!(v["epochs"], serde_json::json!(32));
        assert_eq!(v["batch_size"], serde_json::json!(64));
        assert_eq!(v["learning_rate"], serde_json::json!(5e-6));
        let again = GlobalConfig::from_json_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let err = GlobalConfig::from_json_str(r#"{"paths": {"dataset": "/no/such/file.jsonl"}}"#).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { ref path, .. } if path == "paths.dataset"));
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer("  The  Cat.", None).text, "the cat");
        let opts: Vec<String> = vec!["blue".into(), "red".into()];
        let n = normalize_answer("(B) red", Some(&opts));
        assert_eq!(n.option_letter, Some('b'));
        assert_eq!(normalize_answer("A", Some(&opts)).option_letter, Some('a'));
        assert_eq!(normalize_answer("a.", Some(&opts)).option_letter, Some('a'));
        assert_eq!(normalize_answer("a cat", Some(&opts)).option_letter, None);
        // out of range letter
        assert_eq!(normalize_answer("(d)", Some(&opts)).option_letter, None);
        assert_eq!(normalize_answer("(B) red", None).option_letter, None);
    }

    #[test]
    fn matching_uses_letters_for_multiple_choice() {
        let opts: Vec<String> = vec!["blue".into(), "red".into()];
        assert!(answers_match("(B)", "b", Some(&opts)));
        assert!(answers_match("Red.", "B", Some(&opts)));
        assert!(!answers_match("A", "b", Some(&opts)));
        assert!(answers_match(" Red ", "red", None));
        assert!(!answers_match("unknown", "red", None));
    }

    #[test]
    fn seeds_are_stable_and_purpose_separated() {
        assert_eq!(
            derive_seed(7, SeedPurpose::RandomSelection, 3),
            derive_seed(7, SeedPurpose::RandomSelection, 3)
        );
        assert_ne!(
            derive_seed(7, SeedPurpose::RandomSelection, 3),
            derive_seed(7, SeedPurpose::PairSampling, 3)
        );
        assert_eq!(string_key(""), 0xcbf2_9ce4_8422_2325);
    }

    proptest! {
        #[test]
        fn normalization_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_answer(&s, None);
            let twice = normalize_answer(&once.text, None);
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalization_is_idempotent_ascii(s in "[ a-zA-Z().,!?:;\t]{0,30}") {
            let opts: Vec<String> = vec!["x".into(), "y".into(), "z".into()];
            let once = normalize_answer(&s, Some(&opts));
            let twice = normalize_answer(&once.text, Some(&opts));
            prop_assert_eq!(once, twice);
        }
    }
}
