//! Preprocessing: Butterworth bandpass, 60 Hz notch, decimation and epoching.
//!
//! Filters are cascades of second-order sections applied forward and
//! backward (zero phase), so the effective magnitude response is `|H|²`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::eegio::EpochSet;
use crate::error::{Error, Result};

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    /// Both poles strictly inside the unit circle (Jury conditions).
    pub fn is_stable(&self) -> bool {
        self.a2.abs() < 1.0 && self.a1.abs() < 1.0 + self.a2
    }

    /// Direct form II transposed state that yields a steady-state output for
    /// a unit step input.
    fn step_state(&self) -> ([f64; 2], f64) {
        let gain = (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2);
        let z2 = self.b2 - self.a2 * gain;
        let z1 = self.b1 - self.a1 * gain + z2;
        ([z1, z2], gain)
    }

    fn run(&self, x: &mut [f64], mut state: [f64; 2]) {
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + state[0];
            state[0] = self.b1 * input - self.a1 * y + state[1];
            state[1] = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FilterKind {
    Bandpass { low: f64, high: f64, order: usize },
    Notch { freq: f64, q: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiquadCascade {
    pub sections: Vec<Biquad>,
    pub kind: FilterKind,
    pub fs: f64,
}

impl BiquadCascade {
    pub fn response(&self, freq: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / self.fs);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq: f64) -> f64 {
        self.response(freq).norm()
    }

    /// Samples of odd-reflection padding used by [`filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * 2 * self.sections.len()
    }

    /// Single forward pass with zero initial state.
    pub fn lfilter(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            s.run(&mut y, [0.0; 2]);
        }
        y
    }

    /// Single pass whose initial state is the step steady state scaled by `x[0]`.
    fn lfilter_steady(&self, y: &mut [f64]) {
        let x0 = match y.first() {
            Some(&v) => v,
            None => return,
        };
        let mut level = x0;
        for s in &self.sections {
            let (zi, gain) = s.step_state();
            s.run(y, [zi[0] * level, zi[1] * level]);
            level *= gain;
        }
    }
}

/// Butterworth bandpass of prototype order `order` (a `2·order` digital filter
/// realized as `order` sections), bilinear transform with prewarped edges.
pub fn design_butter_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<BiquadCascade> {
    if order == 0 {
        return Err(Error::FilterDesign("order must be at least 1".into()));
    }
    if !(fs > 0.0 && low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::FilterDesign(format!(
            "band edges must satisfy 0 < low < high < fs/2, got low={low} high={high} fs={fs}"
        )));
    }
    let wl = (PI * low / fs).tan();
    let wh = (PI * high / fs).tan();
    let bw = wh - wl;
    let w0_sq = wl * wh;

    // Analog lowpass prototype poles in the upper half plane (plus the real
    // pole for odd orders); their conjugates produce the mirrored sections.
    let mut sections = Vec::with_capacity(order);
    for k in 0..order.div_ceil(2) {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        // s² − p·bw·s + w0² = 0
        let pb = p * bw;
        let disc = (pb * pb - 4.0 * w0_sq).sqrt();
        let s1 = (pb + disc) / 2.0;
        let s2 = (pb - disc) / 2.0;
        let z1 = bilinear(s1);
        let z2 = bilinear(s2);
        if 2 * k + 1 == order {
            // real prototype pole: the two bandpass poles form one real section
            sections.push(section_from_poles(z1, z2));
        } else {
            sections.push(section_from_poles(z1, z1.conj()));
            sections.push(section_from_poles(z2, z2.conj()));
        }
    }

    // Unity gain per section at the band center.
    let f0 = fs / PI * w0_sq.sqrt().atan();
    let z_inv = Complex64::from_polar(1.0, -2.0 * PI * f0 / fs);
    for s in &mut sections {
        let g = 1.0 / s.response(z_inv).norm();
        s.b0 *= g;
        s.b1 *= g;
        s.b2 *= g;
    }

    Ok(BiquadCascade {
        sections,
        kind: FilterKind::Bandpass { low, high, order },
        fs,
    })
}

fn bilinear(s: Complex64) -> Complex64 {
    (1.0 + s) / (1.0 - s)
}

/// Section with zeros at z = ±1 and the given pole pair.
fn section_from_poles(p1: Complex64, p2: Complex64) -> Biquad {
    Biquad {
        b0: 1.0,
        b1: 0.0,
        b2: -1.0,
        a1: -(p1 + p2).re,
        a2: (p1 * p2).re,
    }
}

/// Second-order IIR notch.
pub fn design_notch(freq: f64, q: f64, fs: f64) -> Result<BiquadCascade> {
    if !(fs > 2.0 * freq && freq > 0.0 && q > 0.0) {
        return Err(Error::FilterDesign(format!(
            "notch at {freq} Hz needs fs > {} Hz and q > 0, got fs={fs} q={q}",
            2.0 * freq
        )));
    }
    let w0 = 2.0 * PI * freq / fs;
    let beta = (w0 / q / 2.0).tan();
    let gain = 1.0 / (1.0 + beta);
    let c = w0.cos();
    let section = Biquad {
        b0: gain,
        b1: -2.0 * gain * c,
        b2: gain,
        a1: -2.0 * gain * c,
        a2: 2.0 * gain - 1.0,
    };
    Ok(BiquadCascade {
        sections: vec![section],
        kind: FilterKind::Notch { freq, q },
        fs,
    })
}

/// Zero-phase forward-backward filtering with odd reflection padding.
pub fn filtfilt(filter: &BiquadCascade, x: &[f64]) -> Result<Vec<f64>> {
    let pad = filter.pad_len();
    if x.len() <= pad {
        return Err(Error::TooShort(format!(
            "filtfilt needs more than {pad} samples, got {}",
            x.len()
        )));
    }
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (x[0], x[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));

    filter.lfilter_steady(&mut ext);
    ext.reverse();
    filter.lfilter_steady(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

pub fn notch60(x: &[f64], fs: f64) -> Result<Vec<f64>> {
    if fs <= 120.0 {
        return Err(Error::FilterDesign(format!(
            "a 60 Hz notch needs fs > 120 Hz, got {fs}"
        )));
    }
    filtfilt(&design_notch(60.0, NOTCH_Q, fs)?, x)
}

pub const NOTCH_Q: f64 = 30.0;

/// Keep every `factor`-th sample starting at 0.
pub fn downsample(x: &[f64], factor: usize) -> Result<Vec<f64>> {
    if factor < 1 {
        return Err(Error::InvalidArgument("downsample factor must be ≥ 1".into()));
    }
    Ok(x.iter().step_by(factor).copied().collect())
}

pub fn extract_epoch(recording: &[f64], onset: usize, length: usize) -> Result<Vec<f64>> {
    match onset.checked_add(length) {
        Some(end) if end <= recording.len() => Ok(recording[onset..end].to_vec()),
        _ => Err(Error::OutOfRange(format!(
            "epoch [{onset}, {onset}+{length}) exceeds recording of {} samples",
            recording.len()
        ))),
    }
}

/// Parameters of the notch → bandpass → downsample → epoch chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub notch: bool,
    pub notch_hz: f64,
    pub notch_q: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub order: usize,
    pub factor: usize,
    /// Epoch onset, seconds from the start of each raw trial.
    pub onset_s: f64,
    /// Epoch length in output samples.
    pub epoch_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            notch: true,
            notch_hz: 60.0,
            notch_q: NOTCH_Q,
            band_low: 4.0,
            band_high: 40.0,
            order: 5,
            factor: 2,
            onset_s: 0.5,
            epoch_len: 1001,
        }
    }
}

/// Filters designed for one input rate, reusable across channels.
#[derive(Debug, Clone)]
pub struct Preprocessor {
    config: PreprocessConfig,
    fs_in: f64,
    notch: Option<BiquadCascade>,
    bandpass: BiquadCascade,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig, fs_in: f64) -> Result<Self> {
        let notch = if config.notch {
            Some(design_notch(config.notch_hz, config.notch_q, fs_in)?)
        } else {
            None
        };
        let bandpass = design_butter_bandpass(config.order, config.band_low, config.band_high, fs_in)?;
        if config.factor < 1 {
            return Err(Error::InvalidArgument("downsample factor must be ≥ 1".into()));
        }
        Ok(Self {
            config,
            fs_in,
            notch,
            bandpass,
        })
    }

    pub fn fs_out(&self) -> f64 {
        self.fs_in / self.config.factor as f64
    }

    pub fn onset_sample(&self) -> usize {
        (self.config.onset_s * self.fs_out()).round() as usize
    }

    pub fn channel(&self, raw: &[f64]) -> Result<Vec<f64>> {
        let x = match &self.notch {
            Some(n) => filtfilt(n, raw)?,
            None => raw.to_vec(),
        };
        let x = filtfilt(&self.bandpass, &x)?;
        let x = downsample(&x, self.config.factor)?;
        extract_epoch(&x, self.onset_sample(), self.config.epoch_len)
    }

    pub fn epochset(&self, raw: &EpochSet) -> Result<EpochSet> {
        if (raw.fs as f64 - self.fs_in).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "preprocessor designed for {} Hz, data is {} Hz",
                self.fs_in, raw.fs
            )));
        }
        let len = self.config.epoch_len;
        let mut data = Vec::with_capacity(raw.n_trials * raw.n_channels * len);
        let mut buf = vec![0.0; raw.n_samples];
        for t in 0..raw.n_trials {
            for c in 0..raw.n_channels {
                for (b, &v) in buf.iter_mut().zip(raw.channel(t, c)) {
                    *b = v as f64;
                }
                data.extend(self.channel(&buf)?.into_iter().map(|v| v as f32));
            }
        }
        EpochSet::new(
            self.fs_out() as f32,
            raw.channel_names.clone(),
            len,
            raw.labels.clone(),
            data,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent closed form of the prewarped Butterworth bandpass.
    fn analytic_mag(f: f64, low: f64, high: f64, order: usize, fs: f64) -> f64 {
        let w = (PI * f / fs).tan();
        let wl = (PI * low / fs).tan();
        let wh = (PI * high / fs).tan();
        if w == 0.0 {
            return 0.0;
        }
        let x = (w * w - wl * wh) / (w * (wh - wl));
        1.0 / (1.0 + x.powi(2 * order as i32)).sqrt()
    }

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn interior_rms(x: &[f64]) -> f64 {
        let m = x.len() / 4;
        let s = &x[m..x.len() - m];
        (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt()
    }

    #[test]
    fn bandpass_structure() {
        let f = design_butter_bandpass(5, 4.0, 40.0, 250.0).unwrap();
        assert_eq!(f.sections.len(), 5);
        assert!(f.sections.iter().all(Biquad::is_stable));
    }

    #[test]
    fn bandpass_reference_magnitudes() {
        let f = design_butter_bandpass(5, 4.0, 40.0, 250.0).unwrap();
        assert_eq!(f.magnitude(0.0), 0.0);
        assert!(f.magnitude((4.0f64 * 40.0).sqrt()) >= 0.999);
        for edge in [4.0, 40.0] {
            assert!((f.magnitude(edge) - 0.5f64.sqrt()).abs() < 1e-9);
        }
        // Closed form at 60 Hz, fs = 250: 0.0498457...
        let m60 = f.magnitude(60.0);
        assert!((m60 - analytic_mag(60.0, 4.0, 40.0, 5, 250.0)).abs() < 1e-12);
        assert!((m60 - 0.049_845_7).abs() < 1e-7, "{m60}");
    }

    #[test]
    fn bandpass_matches_closed_form() {
        for &fs in &[250.0, 500.0] {
            let f = design_butter_bandpass(5, 4.0, 40.0, fs).unwrap();
            for i in 1..200 {
                let freq = i as f64 * (fs / 2.0) / 200.0;
                let d = (f.magnitude(freq) - analytic_mag(freq, 4.0, 40.0, 5, fs)).abs();
                assert!(d < 1e-9, "fs {fs} f {freq}: {d}");
            }
        }
    }

    #[test]
    fn stopbands_are_monotonic() {
        let f = design_butter_bandpass(5, 4.0, 40.0, 250.0).unwrap();
        let lower: Vec<f64> = (0..=40).map(|i| f.magnitude(i as f64 * 0.1)).collect();
        assert!(lower.windows(2).all(|w| w[1] >= w[0]));
        let upper: Vec<f64> = (0..=80).map(|i| f.magnitude(40.0 + i as f64)).collect();
        assert!(upper.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn invalid_band_edges() {
        assert!(design_butter_bandpass(5, 40.0, 4.0, 250.0).is_err());
        assert!(design_butter_bandpass(5, 4.0, 125.0, 250.0).is_err());
        assert!(design_butter_bandpass(5, 0.0, 40.0, 250.0).is_err());
    }

    #[test]
    fn impulse_response_decays() {
        for fs in [250.0, 500.0] {
            let f = design_butter_bandpass(5, 4.0, 40.0, fs).unwrap();
            let n = (10.0 * fs) as usize;
            let mut x = vec![0.0; n + 200];
            x[0] = 1.0;
            let h = f.lfilter(&x);
            let tail = h[n..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(tail < 1e-12, "fs {fs}: tail {tail}");
        }
    }

    #[test]
    fn filtfilt_rejects_constant() {
        let f = design_butter_bandpass(5, 4.0, 40.0, 250.0).unwrap();
        let y = filtfilt(&f, &vec![3.0; 1000]).unwrap();
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 3e-6, "{peak}");
    }

    #[test]
    fn filtfilt_tone_gains_follow_squared_magnitude() {
        let fs = 250.0;
        let f = design_butter_bandpass(5, 4.0, 40.0, fs).unwrap();
        let x10 = sine(10.0, fs, 1000);
        let r10 = interior_rms(&filtfilt(&f, &x10).unwrap()) / interior_rms(&x10);
        assert!((r10 - 1.0).abs() < 0.01, "{r10}");

        // Two passes of the closed form give |H(60)|² ≈ 2.49e-3 at fs = 250.
        let x60 = sine(60.0, fs, 1000);
        let r60 = interior_rms(&filtfilt(&f, &x60).unwrap()) / interior_rms(&x60);
        let expect = analytic_mag(60.0, 4.0, 40.0, 5, fs).powi(2);
        assert!((r60 / expect - 1.0).abs() < 0.05, "{r60} vs {expect}");
    }

    #[test]
    fn filtfilt_is_zero_phase() {
        let fs = 250.0;
        let f = design_butter_bandpass(5, 4.0, 40.0, fs).unwrap();
        let x = sine(12.65, fs, 1000);
        let y = filtfilt(&f, &x).unwrap();
        let xcorr = |lag: i64| -> f64 {
            (200..800)
                .map(|i| x[i] * y[(i as i64 + lag) as usize])
                .sum::<f64>()
        };
        let best = (-10..=10)
            .max_by(|&a, &b| xcorr(a).partial_cmp(&xcorr(b)).unwrap())
            .unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn filtfilt_too_short() {
        let f = design_butter_bandpass(5, 4.0, 40.0, 250.0).unwrap();
        assert!(matches!(filtfilt(&f, &[0.0; 30]), Err(Error::TooShort(_))));
        assert!(filtfilt(&f, &[0.0; 31]).is_ok());
    }

    #[test]
    fn notch_attenuation() {
        let fs = 500.0;
        let x60 = sine(60.0, fs, 2000);
        let y60 = notch60(&x60, fs).unwrap();
        assert!(interior_rms(&y60) / interior_rms(&x60) < 0.032);
        let x10 = sine(10.0, fs, 2000);
        let y10 = notch60(&x10, fs).unwrap();
        assert!(interior_rms(&y10) / interior_rms(&x10) >= 0.9);
        assert!(notch60(&vec![0.0; 500], fs).unwrap().iter().all(|&v| v == 0.0));
        assert!(notch60(&x10, 120.0).is_err());
    }

    #[test]
    fn downsample_examples() {
        assert_eq!(
            downsample(&[1.0, 2.0, 3.0, 4.0, 5.0], 2).unwrap(),
            vec![1.0, 3.0, 5.0]
        );
        assert_eq!(downsample(&vec![2.5; 7], 3).unwrap(), vec![2.5; 3]);
        assert_eq!(downsample(&vec![0.0; 2000], 2).unwrap().len(), 1000);
        assert!(downsample(&[1.0], 0).is_err());
    }

    #[test]
    fn epoch_examples() {
        let rec: Vec<f64> = (0..1250).map(|i| i as f64).collect();
        assert_eq!(extract_epoch(&rec, 0, rec.len()).unwrap(), rec);
        // 4 s at 250 Hz with both endpoints.
        let e = extract_epoch(&rec, 125, 4 * 250 + 1).unwrap();
        assert_eq!(e.len(), 1001);
        assert_eq!(e[0], 125.0);
        assert!(extract_epoch(&rec, 1300, 1).is_err());
        assert!(extract_epoch(&rec, 250, 1001).is_err());
    }
}
