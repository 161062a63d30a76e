//! Deterministic synthetic EEG with planted narrowband effects.
//!
//! Each channel of each trial is 1/f^γ Gaussian background noise built in
//! the frequency domain, plus Hann-windowed sinusoid bursts for every effect
//! that targets the trial's class and the channel, plus an optional 60 Hz
//! line component. Bursts fall inside the imagery window
//! `[window_onset_s, window_onset_s + window_s)`. All draws come from
//! [`CounterRng`] streams keyed by `(seed, trial, channel, purpose)`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::eegio::EpochSet;
use crate::error::{Error, Result};
use crate::kv::{self, KvMap};
use crate::montage::MontageMap;
use crate::rng::CounterRng;

/// Class names in label order.
pub const CLASS_NAMES: [&str; 4] = ["split", "spread out", "fall in", "hovering"];

pub fn class_index(name: &str) -> Option<u8> {
    CLASS_NAMES
        .iter()
        .position(|c| c.eq_ignore_ascii_case(name.trim()))
        .map(|i| i as u8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Effect {
    pub classes: Vec<u8>,
    pub channels: Vec<String>,
    pub center_hz: f64,
    /// Burst frequencies are drawn uniformly from `center ± bandwidth/2`.
    pub bandwidth_hz: f64,
    /// Peak burst amplitude in µV.
    pub amplitude_uv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_trials_per_class: usize,
    pub fs: f64,
    pub trial_s: f64,
    pub window_onset_s: f64,
    pub window_s: f64,
    pub noise_exponent: f64,
    /// Background RMS in µV.
    pub noise_uv: f64,
    pub line_uv: f64,
    /// Common multiplier on every effect amplitude.
    pub effect_gain: f64,
    pub ceiling_uv: f64,
    pub effects: Vec<Effect>,
    pub channel_names: Vec<String>,
    pub seed: u64,
}

fn names(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// The 64 montage channels in alphabetical order, the channel order of
/// generated files.
pub fn default_channel_names() -> Vec<String> {
    let mut v = MontageMap::default_8x8().names().to_vec();
    v.sort_by_key(|n| n.to_ascii_lowercase());
    v
}

/// Default planted effects:
/// occipital α (10 Hz) in every moving-swarm class but not in "hovering",
/// prefrontal β (20 Hz) in the two dispersion classes ("split",
/// "spread out") but not in "fall in", and a right parieto-occipital 22 Hz
/// component only in "split" so that all four classes are distinguishable.
pub fn default_paper_template() -> SynthConfig {
    SynthConfig {
        n_trials_per_class: 50,
        fs: 500.0,
        trial_s: 5.0,
        window_onset_s: 0.5,
        window_s: 4.0,
        noise_exponent: 1.0,
        noise_uv: 10.0,
        line_uv: 5.0,
        effect_gain: 1.0,
        ceiling_uv: 500.0,
        effects: vec![
            Effect {
                classes: vec![0, 1, 2],
                channels: names(&["O1", "Oz", "O2"]),
                center_hz: 10.0,
                bandwidth_hz: 2.0,
                amplitude_uv: 10.0,
            },
            Effect {
                classes: vec![0, 1],
                channels: names(&["Fp1", "Fp2"]),
                center_hz: 20.0,
                bandwidth_hz: 4.0,
                amplitude_uv: 10.0,
            },
            Effect {
                classes: vec![0],
                channels: names(&["PO4", "PO8"]),
                center_hz: 22.0,
                bandwidth_hz: 4.0,
                amplitude_uv: 10.0,
            },
        ],
        channel_names: default_channel_names(),
        seed: 0,
    }
}

impl SynthConfig {
    pub fn trial_samples(&self) -> usize {
        (self.trial_s * self.fs).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fs <= 0.0 || self.trial_s <= 0.0 || self.trial_samples() < 2 {
            return bad("fs and trial_s must be positive".into());
        }
        if self.n_trials_per_class == 0 {
            return bad("n_trials_per_class must be positive".into());
        }
        if self.window_onset_s < 0.0 || self.window_s <= 0.0 || self.window_onset_s + self.window_s > self.trial_s {
            return bad("imagery window must lie inside the trial".into());
        }
        for (k, v) in [
            ("noise_uv", self.noise_uv),
            ("line_uv", self.line_uv),
            ("effect_gain", self.effect_gain),
            ("noise_exponent", self.noise_exponent),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{k} must be finite and non-negative"));
            }
        }
        if !(self.ceiling_uv > 0.0) {
            return bad("ceiling_uv must be positive".into());
        }
        if self.channel_names.is_empty() {
            return bad("no channels".into());
        }
        for (i, e) in self.effects.iter().enumerate() {
            if !(e.amplitude_uv >= 0.0) || !(e.bandwidth_hz >= 0.0) {
                return bad(format!("effect {i}: amplitude and bandwidth must be non-negative"));
            }
            if !(e.center_hz - e.bandwidth_hz / 2.0 > 0.0 && e.center_hz + e.bandwidth_hz / 2.0 < self.fs / 2.0) {
                return bad(format!("effect {i}: band must lie inside (0, fs/2)"));
            }
            if let Some(c) = e.classes.iter().find(|&&c| usize::from(c) >= CLASS_NAMES.len()) {
                return bad(format!("effect {i}: class {c} out of range"));
            }
            for ch in &e.channels {
                if !self.channel_names.iter().any(|n| n.eq_ignore_ascii_case(ch)) {
                    return Err(Error::UnknownChannel(ch.clone()));
                }
            }
        }
        Ok(())
    }

    /// Channels planted by any effect that separates `class_a` from
    /// `class_b` at a frequency inside `[lo, hi]`.
    pub fn planted_channels(&self, class_a: u8, class_b: u8, lo: f64, hi: f64) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.effects {
            let differs = e.classes.contains(&class_a) != e.classes.contains(&class_b);
            if differs && e.amplitude_uv * self.effect_gain > 0.0 && e.center_hz >= lo && e.center_hz <= hi {
                for c in &e.channels {
                    if !out.iter().any(|o| o.eq_ignore_ascii_case(c)) {
                        out.push(c.clone());
                    }
                }
            }
        }
        out
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("n_trials_per_class", self.n_trials_per_class.to_string());
        put("fs", self.fs.to_string());
        put("trial_s", self.trial_s.to_string());
        put("window_onset_s", self.window_onset_s.to_string());
        put("window_s", self.window_s.to_string());
        put("noise_exponent", self.noise_exponent.to_string());
        put("noise_uv", self.noise_uv.to_string());
        put("line_uv", self.line_uv.to_string());
        put("effect_gain", self.effect_gain.to_string());
        put("ceiling_uv", self.ceiling_uv.to_string());
        put("channels", self.channel_names.join(","));
        put("seed", self.seed.to_string());
        put("effects", self.effects.len().to_string());
        for (i, e) in self.effects.iter().enumerate() {
            let classes: Vec<&str> = e.classes.iter().map(|&c| CLASS_NAMES[usize::from(c)]).collect();
            put(&format!("effect.{i}.classes"), classes.join(","));
            put(&format!("effect.{i}.channels"), e.channels.join(","));
            put(&format!("effect.{i}.center_hz"), e.center_hz.to_string());
            put(&format!("effect.{i}.bandwidth_hz"), e.bandwidth_hz.to_string());
            put(&format!("effect.{i}.amplitude_uv"), e.amplitude_uv.to_string());
        }
        m
    }

    /// Keys recognised by [`SynthConfig::apply_kv`]; `effect.N.*` keys are
    /// accepted for `N < effects`.
    pub const KEYS: [&'static str; 13] = [
        "n_trials_per_class",
        "fs",
        "trial_s",
        "window_onset_s",
        "window_s",
        "noise_exponent",
        "noise_uv",
        "line_uv",
        "effect_gain",
        "ceiling_uv",
        "channels",
        "seed",
        "effects",
    ];

    /// Override fields from `map`, starting from `self`. Unknown synth keys
    /// are left for the caller to reject.
    pub fn apply_kv(mut self, map: &KvMap) -> Result<Self> {
        self.n_trials_per_class = kv::get_or(map, "n_trials_per_class", self.n_trials_per_class)?;
        self.fs = kv::get_or(map, "fs", self.fs)?;
        self.trial_s = kv::get_or(map, "trial_s", self.trial_s)?;
        self.window_onset_s = kv::get_or(map, "window_onset_s", self.window_onset_s)?;
        self.window_s = kv::get_or(map, "window_s", self.window_s)?;
        self.noise_exponent = kv::get_or(map, "noise_exponent", self.noise_exponent)?;
        self.noise_uv = kv::get_or(map, "noise_uv", self.noise_uv)?;
        self.line_uv = kv::get_or(map, "line_uv", self.line_uv)?;
        self.effect_gain = kv::get_or(map, "effect_gain", self.effect_gain)?;
        self.ceiling_uv = kv::get_or(map, "ceiling_uv", self.ceiling_uv)?;
        self.seed = kv::get_or(map, "seed", self.seed)?;
        if let Some(v) = map.get("channels") {
            self.channel_names = kv::split_list(v);
        }
        let n: usize = kv::get_or(map, "effects", self.effects.len())?;
        self.effects.resize(
            n,
            Effect {
                classes: Vec::new(),
                channels: Vec::new(),
                center_hz: 10.0,
                bandwidth_hz: 0.0,
                amplitude_uv: 0.0,
            },
        );
        for (i, e) in self.effects.iter_mut().enumerate() {
            let key = |f: &str| format!("effect.{i}.{f}");
            if let Some(v) = map.get(&key("classes")) {
                e.classes = kv::split_list(v)
                    .iter()
                    .map(|c| class_index(c).ok_or_else(|| Error::Config(format!("{}: unknown class {c:?}", key("classes")))))
                    .collect::<Result<_>>()?;
            }
            if let Some(v) = map.get(&key("channels")) {
                e.channels = kv::split_list(v);
            }
            e.center_hz = kv::get_or(map, &key("center_hz"), e.center_hz)?;
            e.bandwidth_hz = kv::get_or(map, &key("bandwidth_hz"), e.bandwidth_hz)?;
            e.amplitude_uv = kv::get_or(map, &key("amplitude_uv"), e.amplitude_uv)?;
        }
        self.validate()?;
        Ok(self)
    }

    /// Whether `key` belongs to the synth namespace.
    pub fn is_key(key: &str) -> bool {
        if Self::KEYS.contains(&key) {
            return true;
        }
        let mut parts = key.split('.');
        matches!(
            (parts.next(), parts.next().map(str::parse::<usize>), parts.next(), parts.next()),
            (Some("effect"), Some(Ok(_)), Some("classes" | "channels" | "center_hz" | "bandwidth_hz" | "amplitude_uv"), None)
        )
    }

    /// Positive-frequency spectral weights `f^-γ` of the background noise
    /// for an `n`-sample trial (index = FFT bin; bin 0 is zero).
    fn noise_shape(&self, n: usize) -> Vec<f64> {
        (0..=n / 2)
            .map(|k| {
                if k == 0 {
                    0.0
                } else {
                    let f = k as f64 * self.fs / n as f64;
                    f.powf(-self.noise_exponent / 2.0)
                }
            })
            .collect()
    }

    /// Share of the background variance carried by frequencies in `[lo, hi]`.
    pub fn noise_band_fraction(&self, lo: f64, hi: f64) -> f64 {
        let n = self.trial_samples();
        let shape = self.noise_shape(n);
        let weight = |k: usize| if 2 * k == n { 1.0 } else { 2.0 };
        let mut total = 0.0;
        let mut band = 0.0;
        for (k, s) in shape.iter().enumerate().skip(1) {
            let p = weight(k) * s * s;
            total += p;
            let f = k as f64 * self.fs / n as f64;
            if f >= lo && f <= hi {
                band += p;
            }
        }
        band / total
    }

    /// Expected mean power (µV²) a burst of `effect` adds over the imagery
    /// window: `A²/2` for the sinusoid, `3/8` for the Hann envelope, and the
    /// mean duration fraction `3/4`.
    pub fn expected_burst_power(&self, effect: &Effect) -> f64 {
        let a = effect.amplitude_uv * self.effect_gain;
        a * a / 2.0 * 3.0 / 8.0 * 0.75
    }
}

/// 1/f background synthesis for one trial length, shared across channels.
struct Background {
    /// Per-bin amplitude including the variance normalization.
    amp: Vec<f64>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    spec: Vec<Complex64>,
}

impl Background {
    fn new(cfg: &SynthConfig, n: usize) -> Self {
        let shape = cfg.noise_shape(n);
        // Var(x_t) = (1/n²) Σ_k E|X_k|² over the full Hermitian spectrum.
        let power: f64 = shape
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, s)| if 2 * k == n { s * s } else { 2.0 * s * s })
            .sum();
        let scale = cfg.noise_uv * n as f64 / power.sqrt();
        Self {
            amp: shape.iter().map(|s| s * scale).collect(),
            ifft: FftPlanner::new().plan_fft_inverse(n),
            spec: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    fn add(&mut self, rng: &mut CounterRng, out: &mut [f64]) {
        let n = out.len();
        let spec = &mut self.spec;
        spec.fill(Complex64::new(0.0, 0.0));
        for k in 1..=n / 2 {
            let s = self.amp[k];
            if 2 * k == n {
                spec[k] = Complex64::new(s * rng.normal(), 0.0);
            } else {
                let z = Complex64::new(rng.normal(), rng.normal()) * (s / 2f64.sqrt());
                spec[k] = z;
                spec[n - k] = z.conj();
            }
        }
        self.ifft.process(spec);
        for (o, z) in out.iter_mut().zip(spec.iter()) {
            *o += z.re / n as f64;
        }
    }
}

struct Burst {
    start: usize,
    len: usize,
    freq: f64,
    phase: f64,
    amplitude: f64,
}

impl Burst {
    fn draw(cfg: &SynthConfig, effect: &Effect, rng: &mut CounterRng) -> Self {
        let window = cfg.window_s * cfg.fs;
        let len = (window * rng.uniform_range(0.5, 1.0)).round().max(2.0) as usize;
        let onset = (cfg.window_onset_s * cfg.fs).round() as usize;
        let slack = (window as usize).saturating_sub(len);
        let start = onset + (rng.uniform() * (slack + 1) as f64) as usize;
        let freq = effect.center_hz + rng.uniform_range(-0.5, 0.5) * effect.bandwidth_hz;
        let phase = rng.uniform_range(0.0, 2.0 * PI);
        Self {
            start,
            len,
            freq,
            phase,
            amplitude: effect.amplitude_uv * cfg.effect_gain,
        }
    }

    fn add(&self, fs: f64, out: &mut [f64]) {
        let end = (self.start + self.len).min(out.len());
        for (i, o) in out[self.start..end].iter_mut().enumerate() {
            let u = i as f64 / self.len as f64;
            let env = 0.5 * (1.0 - (2.0 * PI * u).cos());
            *o += self.amplitude * env * (2.0 * PI * self.freq * i as f64 / fs + self.phase).sin();
        }
    }
}

/// Generate the corpus; trial `i` has label `i mod 4`.
pub fn generate(cfg: &SynthConfig) -> Result<EpochSet> {
    cfg.validate()?;
    let n = cfg.trial_samples();
    let n_ch = cfg.channel_names.len();
    let n_trials = cfg.n_trials_per_class * CLASS_NAMES.len();
    let labels: Vec<u8> = (0..n_trials).map(|i| (i % CLASS_NAMES.len()) as u8).collect();
    let targets: Vec<Vec<usize>> = cfg
        .effects
        .iter()
        .map(|e| {
            e.channels
                .iter()
                .filter_map(|c| cfg.channel_names.iter().position(|n| n.eq_ignore_ascii_case(c)))
                .collect()
        })
        .collect();
    let mut background = Background::new(cfg, n);
    let mut ceiling = cfg.ceiling_uv as f32;
    if f64::from(ceiling) > cfg.ceiling_uv {
        ceiling = f32::from_bits(ceiling.to_bits() - 1);
    }
    let mut line = vec![0.0; n];
    let mut data = Vec::with_capacity(n_trials * n_ch * n);
    let mut buf = vec![0.0; n];
    for (trial, &label) in labels.iter().enumerate() {
        let t = trial as u64;
        let bursts: Vec<Option<Burst>> = cfg
            .effects
            .iter()
            .enumerate()
            .map(|(ei, e)| {
                let active = e.classes.contains(&label) && e.amplitude_uv * cfg.effect_gain > 0.0;
                active.then(|| Burst::draw(cfg, e, &mut CounterRng::new(cfg.seed, &[t, 0xb0, ei as u64])))
            })
            .collect();
        let line_phase = CounterRng::new(cfg.seed, &[t, 0x60]).uniform_range(0.0, 2.0 * PI);
        for (i, v) in line.iter_mut().enumerate() {
            *v = cfg.line_uv * (2.0 * PI * 60.0 * i as f64 / cfg.fs + line_phase).sin();
        }
        for ch in 0..n_ch {
            buf.fill(0.0);
            if cfg.noise_uv > 0.0 {
                let mut rng = CounterRng::new(cfg.seed, &[t, 0x1f, ch as u64]);
                background.add(&mut rng, &mut buf);
            }
            for (burst, chans) in bursts.iter().zip(&targets) {
                if let Some(b) = burst {
                    if chans.contains(&ch) {
                        b.add(cfg.fs, &mut buf);
                    }
                }
            }
            if cfg.line_uv > 0.0 {
                for (v, l) in buf.iter_mut().zip(&line) {
                    *v += l;
                }
            }
            data.extend(buf.iter().map(|&v| (v as f32).clamp(-ceiling, ceiling)));
        }
    }
    EpochSet::new(cfg.fs as f32, cfg.channel_names.clone(), n, labels, data)
}
