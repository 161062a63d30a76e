//! Flat run configuration: defaults, then the config file, then
//! `ADS3D_SEED`, then `key=value` arguments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ads3d::kv::{self, KvMap};
use ads3d::synthgen::{default_paper_template, SynthConfig};
use ads3d::{Error, Result};

pub const SEED_ENV: &str = "ADS3D_SEED";

pub struct Key {
    pub name: &'static str,
    /// `None` marks a required key.
    pub default: Option<String>,
    pub help: &'static str,
    pub path: bool,
}

fn key(name: &'static str, default: &str, help: &'static str) -> Key {
    Key { name, default: Some(default.to_string()), help, path: false }
}

fn path(name: &'static str, help: &'static str) -> Key {
    Key { name, default: None, help, path: true }
}

pub struct CommandSpec {
    pub name: &'static str,
    pub keys: Vec<Key>,
    /// Accepts keys outside `keys`, such as `effect.N.*`.
    pub dynamic: Option<fn(&str) -> bool>,
    pub note: &'static str,
}

impl CommandSpec {
    fn get(&self, name: &str) -> Option<&Key> {
        self.keys.iter().find(|k| k.name == name)
    }

    fn accepts(&self, name: &str) -> bool {
        self.get(name).is_some() || self.dynamic.is_some_and(|f| f(name))
    }

    pub fn help(&self) -> String {
        let mut s = String::from("Config keys (file lines or key=value arguments; arguments win):\n");
        for k in &self.keys {
            let default = match &k.default {
                Some(d) if d.len() > 40 => format!(" [default: {}...]", &d[..37]),
                Some(d) => format!(" [default: {d}]"),
                None => " [required]".into(),
            };
            let _ = writeln!(s, "  {:<22} {}{}", k.name, k.help, default);
        }
        if !self.note.is_empty() {
            let _ = writeln!(s, "\n{}", self.note);
        }
        if self.get("seed").is_some() {
            let _ = writeln!(s, "\n{SEED_ENV} overrides the file's seed; a seed=N argument overrides both.");
        }
        s
    }
}

const MONTAGE_HELP: &str = "montage: default (8x8), reduced (4x4), auto (model's own) or a file path";

pub fn spec(command: &str) -> CommandSpec {
    match command {
        "synth" => {
            let template = default_paper_template().to_kv();
            let mut keys = vec![path("out", "output epoch file")];
            for name in SynthConfig::KEYS {
                let help = match name {
                    "n_trials_per_class" => "trials per class",
                    "fs" => "sampling rate, Hz",
                    "trial_s" => "trial length, s",
                    "window_onset_s" => "imagery window onset, s",
                    "window_s" => "imagery window length, s",
                    "noise_exponent" => "1/f^gamma background exponent",
                    "noise_uv" => "background RMS, uV",
                    "line_uv" => "60 Hz line amplitude, uV",
                    "effect_gain" => "multiplier on every planted amplitude",
                    "ceiling_uv" => "output clamp, uV",
                    "channels" => "comma-separated channel names",
                    "seed" => "generator seed",
                    _ => "number of planted effects",
                };
                keys.push(key(name, &template[name], help));
            }
            CommandSpec {
                name: "synth",
                keys,
                dynamic: Some(SynthConfig::is_key),
                note: "Planted effects: effect.N.classes, effect.N.channels, effect.N.center_hz,\n\
                       effect.N.bandwidth_hz, effect.N.amplitude_uv for N < effects.\n\
                       Defaults are the built-in three-effect template.",
            }
        }
        "preprocess" => CommandSpec {
            name: "preprocess",
            keys: vec![
                path("in", "raw epoch file"),
                path("out", "output epoch file"),
                key("notch", "true", "apply the notch filter"),
                key("notch_hz", "60", "notch frequency, Hz"),
                key("notch_q", "30", "notch quality factor"),
                key("band_low", "4", "bandpass lower edge, Hz"),
                key("band_high", "40", "bandpass upper edge, Hz"),
                key("order", "5", "Butterworth order"),
                key("factor", "2", "downsampling factor"),
                key("onset_s", "0.5", "epoch onset after downsampling, s"),
                key("epoch_len", "1001", "epoch length, samples"),
            ],
            dynamic: None,
            note: "Order: notch, bandpass, downsample, epoch.",
        },
        "train" => CommandSpec {
            name: "train",
            keys: vec![
                path("in", "preprocessed epoch file"),
                path("out", "output directory"),
                key("model", "reduced", "full or reduced"),
                key("montage", "auto", MONTAGE_HELP),
                key("folds", "5", "cross-validation folds"),
                key("epochs", "200", "training epochs per fold"),
                key("batch_size", "40", "mini-batch size"),
                key("lr", "0.001", "AdamW learning rate; 0 freezes the model"),
                key("beta1", "0.9", "AdamW first-moment decay"),
                key("beta2", "0.999", "AdamW second-moment decay"),
                key("eps", "1e-8", "AdamW epsilon"),
                key("weight_decay", "0.01", "AdamW decoupled weight decay"),
                key("separate_selection", "false", "select on a held-out part of the training split"),
                key("normalize_input", "true", "scale inputs by the training split's RMS"),
                key("jobs", "1", "folds trained in parallel"),
                key("seed", "0", "fold, initialisation, shuffle and dropout seed"),
            ],
            dynamic: None,
            note: "Writes config.txt, summary.txt, foldK.log and foldK.ckpt.",
        },
        "eval" => CommandSpec {
            name: "eval",
            keys: vec![
                path("in", "preprocessed epoch file"),
                path("checkpoint", "checkpoint written by train"),
                path("out", "output metrics file"),
                key("montage", "auto", MONTAGE_HELP),
                key("batch_size", "40", "trials per forward pass"),
            ],
            dynamic: None,
            note: "",
        },
        "stats" => CommandSpec {
            name: "stats",
            keys: vec![
                path("in", "preprocessed epoch file"),
                path("out", "output directory"),
                key("montage", "default", MONTAGE_HELP),
                key("class_a", "split", "contrast minuend (name or index)"),
                key("class_b", "hovering", "contrast subtrahend (name or index)"),
                key("bands", "alpha,beta,both", "alpha, beta, both or name:lo:hi, comma-separated"),
                key("alpha", "0.01", "significance level after Bonferroni"),
                key("anova_alpha", "0.05", "ANOVA significance level"),
                key("segment_s", "1", "Welch segment length, s"),
                key("overlap", "0.5", "Welch segment overlap fraction"),
                key("log_power", "false", "test log band power"),
            ],
            dynamic: None,
            note: "Writes config.txt and, per band, contrast_B.csv, anova_B.csv,\n\
                   topo_B_t.csv, topo_B_mask.csv and topo_B.pgm.",
        },
        other => unreachable!("unknown command {other}"),
    }
}

/// Merge every configuration source for `spec` and check the result.
pub fn resolve(spec: &CommandSpec, file: Option<&Path>, env_seed: Option<String>, args: &[String]) -> Result<KvMap> {
    let mut map: KvMap = spec
        .keys
        .iter()
        .filter_map(|k| k.default.clone().map(|d| (k.name.to_string(), d)))
        .collect();
    if let Some(file) = file {
        let text = std::fs::read_to_string(file)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", file.display())))?;
        for (k, v) in kv::parse(&text)? {
            if !spec.accepts(&k) {
                return Err(Error::Config(format!("{}: unknown key {k:?} for {}", file.display(), spec.name)));
            }
            map.insert(k, v);
        }
    }
    if let Some(seed) = env_seed {
        if spec.accepts("seed") {
            map.insert("seed".into(), seed.trim().to_string());
        }
    }
    for arg in args {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("argument {arg:?} is not key=value")))?;
        let k = k.trim();
        if !spec.accepts(k) {
            return Err(Error::Config(format!("unknown key {k:?} for {}", spec.name)));
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    for k in &spec.keys {
        if !map.contains_key(k.name) {
            return Err(Error::Config(format!("missing required key {:?}", k.name)));
        }
        if k.path {
            let p = absolute(Path::new(&map[k.name]))?;
            map.insert(k.name.to_string(), p.display().to_string());
        }
    }
    Ok(map)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}
