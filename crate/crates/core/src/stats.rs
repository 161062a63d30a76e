//! Band power, paired contrasts and class x channel ANOVA.
//!
//! The replicate unit is the trial: within one recording, trials of two
//! classes are paired by sorted trial order and truncated to the smaller
//! class count. Reports say so in their header.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use statrs::function::beta::beta_reg;

use crate::eegio::{write_atomic, EpochSet};
use crate::error::{Error, Result};
use crate::montage::MontageMap;

pub const REPLICATE_NOTE: &str = "replicate unit: trials within one recording, paired by sorted trial order";

#[derive(Debug, Clone, PartialEq)]
pub struct BandSpec {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
}

impl BandSpec {
    pub fn new(name: impl Into<String>, lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("band [{lo}, {hi}] must satisfy 0 < lo < hi")));
        }
        Ok(Self { name: name.into(), lo, hi })
    }

    pub fn alpha() -> Self {
        Self { name: "alpha".into(), lo: 8.0, hi: 13.0 }
    }

    pub fn beta() -> Self {
        Self { name: "beta".into(), lo: 13.0, hi: 30.0 }
    }

    pub fn both() -> Self {
        Self { name: "both".into(), lo: 8.0, hi: 30.0 }
    }

    /// `alpha`, `beta`, `both`, or `name:lo:hi`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(Self::alpha()),
            "beta" => Ok(Self::beta()),
            "both" => Ok(Self::both()),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                let num = |v: &str| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("band {s:?}: bad number {v:?}")))
                };
                match parts.as_slice() {
                    [name, lo, hi] => Self::new(*name, num(lo)?, num(hi)?),
                    _ => Err(Error::InvalidArgument(format!(
                        "band {s:?}: expected alpha, beta, both or name:lo:hi"
                    ))),
                }
            }
        }
    }

    pub fn check_nyquist(&self, fs: f64) -> Result<()> {
        if self.hi > fs / 2.0 {
            return Err(Error::InvalidArgument(format!(
                "band {} upper edge {} Hz exceeds Nyquist {} Hz",
                self.name,
                self.hi,
                fs / 2.0
            )));
        }
        Ok(())
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Welch estimate with a periodic Hann window, per-segment mean removal and
/// one-sided density scaling (units of x² per Hz).
pub fn welch_psd(x: &[f64], fs: f64, win: usize, overlap: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if win == 0 || win > x.len() {
        return Err(Error::TooShort(format!("window of {win} samples on a signal of {}", x.len())));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} outside [0, 1)")));
    }
    if !(fs > 0.0) {
        return Err(Error::InvalidArgument(format!("sampling rate {fs}")));
    }
    let step = ((win as f64 * (1.0 - overlap)).round() as usize).max(1);
    let w = hann_periodic(win);
    let wss: f64 = w.iter().map(|v| v * v).sum();
    let fft = FftPlanner::new().plan_fft_forward(win);
    let n_freq = win / 2 + 1;
    let mut acc = vec![0.0; n_freq];
    let mut buf = vec![Complex64::new(0.0, 0.0); win];
    let mut segments = 0usize;
    let mut start = 0;
    while start + win <= x.len() {
        let seg = &x[start..start + win];
        let mean = seg.iter().sum::<f64>() / win as f64;
        for ((b, &s), &wi) in buf.iter_mut().zip(seg).zip(&w) {
            *b = Complex64::new((s - mean) * wi, 0.0);
        }
        fft.process(&mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += b.norm_sqr();
        }
        segments += 1;
        start += step;
    }
    let scale = 1.0 / (fs * wss * segments as f64);
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, a)| {
            let one_sided = if k == 0 || (win.is_multiple_of(2) && k == win / 2) { 1.0 } else { 2.0 };
            a * scale * one_sided
        })
        .collect();
    let freqs = (0..n_freq).map(|k| k as f64 * fs / win as f64).collect();
    Ok((freqs, psd))
}

/// Trapezoidal integral of the piecewise-linear PSD restricted to the band.
pub fn band_power(psd: &[f64], freqs: &[f64], band: &BandSpec) -> f64 {
    let interp = |f: f64, i: usize| {
        let (f0, f1) = (freqs[i], freqs[i + 1]);
        psd[i] + (psd[i + 1] - psd[i]) * (f - f0) / (f1 - f0)
    };
    let mut total = 0.0;
    for i in 0..freqs.len().saturating_sub(1) {
        let a = freqs[i].max(band.lo);
        let b = freqs[i + 1].min(band.hi);
        if b > a {
            total += 0.5 * (b - a) * (interp(a, i) + interp(b, i));
        }
    }
    total
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Upper tail probability of the F distribution.
pub fn f_upper_tail(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    if f.is_infinite() {
        return 0.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("paired samples of length {} and {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::TooShort(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateContrast(format!("all {n} paired differences equal {mean}")));
    }
    let t = mean / (var / n as f64).sqrt();
    let df = n - 1;
    Ok(TTest { t, p: student_t_two_sided(t, df as f64), df })
}

pub fn bonferroni(p: &[f64], m: usize) -> Vec<f64> {
    p.iter().map(|&v| (v * m as f64).min(1.0)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnovaEffect {
    pub ss: f64,
    pub df: usize,
    pub f: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnovaTable {
    pub class: AnovaEffect,
    pub channel: AnovaEffect,
    pub interaction: AnovaEffect,
    pub ss_error: f64,
    pub df_error: usize,
    pub ss_total: f64,
    /// Set when the error mean square is zero; F is then 0 or infinite.
    pub degenerate: bool,
}

/// Fixed-effects two-way ANOVA with interaction on `power[class][channel][replicate]`.
pub fn two_way_anova(power: &[Vec<Vec<f64>>]) -> Result<AnovaTable> {
    let a = power.len();
    let b = power.first().map_or(0, Vec::len);
    let n = power.first().and_then(|c| c.first()).map_or(0, Vec::len);
    if a < 2 || b < 2 {
        return Err(Error::Dimension(format!("ANOVA needs at least 2x2 cells, got {a}x{b}")));
    }
    if n < 2 {
        return Err(Error::TooShort(format!("ANOVA needs >= 2 replicates per cell, got {n}")));
    }
    for (i, row) in power.iter().enumerate() {
        if row.len() != b || row.iter().any(|cell| cell.len() != n) {
            return Err(Error::Dimension(format!("unbalanced design at class {i}")));
        }
    }
    let cell_mean: Vec<Vec<f64>> = power
        .iter()
        .map(|row| row.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect())
        .collect();
    let grand = cell_mean.iter().flatten().sum::<f64>() / (a * b) as f64;
    let class_mean: Vec<f64> = cell_mean.iter().map(|r| r.iter().sum::<f64>() / b as f64).collect();
    let chan_mean: Vec<f64> = (0..b)
        .map(|j| cell_mean.iter().map(|r| r[j]).sum::<f64>() / a as f64)
        .collect();

    let sq = |v: f64| v * v;
    let ss_class = (b * n) as f64 * class_mean.iter().map(|m| sq(m - grand)).sum::<f64>();
    let ss_channel = (a * n) as f64 * chan_mean.iter().map(|m| sq(m - grand)).sum::<f64>();
    let mut ss_inter = 0.0;
    let mut ss_error = 0.0;
    let mut ss_total = 0.0;
    for i in 0..a {
        for j in 0..b {
            let m = cell_mean[i][j];
            ss_inter += n as f64 * sq(m - class_mean[i] - chan_mean[j] + grand);
            for &v in &power[i][j] {
                ss_error += sq(v - m);
                ss_total += sq(v - grand);
            }
        }
    }
    let df_error = a * b * (n - 1);
    let ms_error = ss_error / df_error as f64;
    let degenerate = ms_error <= 0.0;
    let effect = |ss: f64, df: usize| {
        let ms = ss / df as f64;
        let f = if !degenerate {
            ms / ms_error
        } else if ms > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        AnovaEffect { ss, df, f, p: f_upper_tail(f, df as f64, df_error as f64) }
    };
    Ok(AnovaTable {
        class: effect(ss_class, a - 1),
        channel: effect(ss_channel, b - 1),
        interaction: effect(ss_inter, (a - 1) * (b - 1)),
        ss_error,
        df_error,
        ss_total,
        degenerate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastConfig {
    pub alpha: f64,
    /// Welch segment length in seconds.
    pub segment_s: f64,
    pub overlap: f64,
    pub log_power: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            segment_s: 1.0,
            overlap: 0.5,
            log_power: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatsReport {
    pub class_a: u8,
    pub class_b: u8,
    pub band: BandSpec,
    pub n_pairs: usize,
    pub alpha: f64,
    pub channel_names: Vec<String>,
    /// Sign convention: positive when class A has more power.
    pub t: Vec<f64>,
    pub p_raw: Vec<f64>,
    pub p_corrected: Vec<f64>,
    pub mask: Vec<bool>,
    /// Mean band power per class, in µV²/Hz integrated over the band (µV²).
    pub mean_power_a: Vec<f64>,
    pub mean_power_b: Vec<f64>,
}

impl StatsReport {
    pub fn significant(&self) -> Vec<&str> {
        self.channel_names
            .iter()
            .zip(&self.mask)
            .filter(|(_, &m)| m)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {REPLICATE_NOTE}");
        let _ = writeln!(
            s,
            "# contrast {} - {} band {} [{}, {}] Hz, pairs {}, bonferroni m = {}, alpha {}",
            self.class_a,
            self.class_b,
            self.band.name,
            self.band.lo,
            self.band.hi,
            self.n_pairs,
            self.t.len(),
            self.alpha
        );
        s.push_str("channel,t,p_raw,p_corrected,significant,mean_power_a,mean_power_b\n");
        for i in 0..self.t.len() {
            let _ = writeln!(
                s,
                "{},{:.8e},{:.8e},{:.8e},{},{:.8e},{:.8e}",
                self.channel_names[i],
                self.t[i],
                self.p_raw[i],
                self.p_corrected[i],
                u8::from(self.mask[i]),
                self.mean_power_a[i],
                self.mean_power_b[i]
            );
        }
        s
    }
}

/// Band power of every trial and channel, `[trial][channel]`.
pub fn trial_band_powers(set: &EpochSet, trials: &[usize], band: &BandSpec, cfg: &ContrastConfig) -> Result<Vec<Vec<f64>>> {
    let fs = set.fs as f64;
    band.check_nyquist(fs)?;
    let win = (cfg.segment_s * fs).round() as usize;
    let mut out = Vec::with_capacity(trials.len());
    let mut buf = Vec::with_capacity(set.n_samples);
    for &tr in trials {
        let mut row = Vec::with_capacity(set.n_channels);
        for ch in 0..set.n_channels {
            buf.clear();
            buf.extend(set.channel(tr, ch).iter().map(|&v| v as f64));
            let (f, p) = welch_psd(&buf, fs, win, cfg.overlap)?;
            let bp = band_power(&p, &f, band);
            row.push(if cfg.log_power { bp.max(f64::MIN_POSITIVE).ln() } else { bp });
        }
        out.push(row);
    }
    Ok(out)
}

fn present_trials(set: &EpochSet, class: u8) -> Result<Vec<usize>> {
    let trials = set.class_trials(class);
    if trials.is_empty() {
        return Err(Error::InvalidArgument(format!("class {class} absent from the epoch set")));
    }
    Ok(trials)
}

/// Per-channel paired t-test of band power, class A minus class B.
/// Channels whose paired differences are all equal get t = 0, p = 1.
pub fn contrast_topography(
    set: &EpochSet,
    class_a: u8,
    class_b: u8,
    band: &BandSpec,
    cfg: &ContrastConfig,
) -> Result<StatsReport> {
    let mut ta = present_trials(set, class_a)?;
    let mut tb = present_trials(set, class_b)?;
    let n = ta.len().min(tb.len());
    if n < 2 {
        return Err(Error::TooShort(format!("{n} trial pairs; need at least 2")));
    }
    ta.truncate(n);
    tb.truncate(n);
    let pa = trial_band_powers(set, &ta, band, cfg)?;
    let pb = trial_band_powers(set, &tb, band, cfg)?;

    let m = set.n_channels;
    let mut t = Vec::with_capacity(m);
    let mut p_raw = Vec::with_capacity(m);
    let mut mean_a = Vec::with_capacity(m);
    let mut mean_b = Vec::with_capacity(m);
    for ch in 0..m {
        let a: Vec<f64> = pa.iter().map(|r| r[ch]).collect();
        let b: Vec<f64> = pb.iter().map(|r| r[ch]).collect();
        mean_a.push(a.iter().sum::<f64>() / n as f64);
        mean_b.push(b.iter().sum::<f64>() / n as f64);
        match paired_ttest(&a, &b) {
            Ok(r) => {
                t.push(r.t);
                p_raw.push(r.p);
            }
            Err(Error::DegenerateContrast(_)) => {
                t.push(0.0);
                p_raw.push(1.0);
            }
            Err(e) => return Err(e),
        }
    }
    let p_corrected = bonferroni(&p_raw, m);
    let mask = p_corrected.iter().map(|&p| p < cfg.alpha).collect();
    Ok(StatsReport {
        class_a,
        class_b,
        band: band.clone(),
        n_pairs: n,
        alpha: cfg.alpha,
        channel_names: set.channel_names.clone(),
        t,
        p_raw,
        p_corrected,
        mask,
        mean_power_a: mean_a,
        mean_power_b: mean_b,
    })
}

/// Class x channel ANOVA on band power, truncating every class to the
/// smallest class count.
pub fn class_channel_anova(set: &EpochSet, classes: &[u8], band: &BandSpec, cfg: &ContrastConfig) -> Result<AnovaTable> {
    let trials: Vec<Vec<usize>> = classes.iter().map(|&c| present_trials(set, c)).collect::<Result<_>>()?;
    let n = trials.iter().map(Vec::len).min().unwrap_or(0);
    let mut power = Vec::with_capacity(classes.len());
    for tr in &trials {
        let bp = trial_band_powers(set, &tr[..n], band, cfg)?;
        power.push((0..set.n_channels).map(|ch| bp.iter().map(|r| r[ch]).collect()).collect());
    }
    two_way_anova(&power)
}

pub fn anova_text(table: &AnovaTable, band: &BandSpec) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {REPLICATE_NOTE}");
    let _ = writeln!(s, "# two-way anova, band {} [{}, {}] Hz", band.name, band.lo, band.hi);
    s.push_str("source,ss,df,f,p\n");
    for (name, e) in [("class", &table.class), ("channel", &table.channel), ("interaction", &table.interaction)] {
        let _ = writeln!(s, "{name},{:.8e},{},{:.8e},{:.8e}", e.ss, e.df, e.f, e.p);
    }
    let _ = writeln!(s, "error,{:.8e},{},,", table.ss_error, table.df_error);
    let _ = writeln!(s, "total,{:.8e},,,", table.ss_total);
    if table.degenerate {
        s.push_str("# degenerate: zero error mean square\n");
    }
    s
}

/// Gray level for `t` on the linear map [-tmax, tmax] -> [0, 255].
pub fn gray_level(t: f64, tmax: f64) -> u8 {
    if !(tmax > 0.0) {
        return 128;
    }
    let t = t.clamp(-tmax, tmax);
    (255.0 * (t + tmax) / (2.0 * tmax)).round() as u8
}

/// Write `<prefix>_t.csv`, `<prefix>_mask.csv` and `<prefix>.pgm`, laid out by the montage.
/// The gray scale spans the largest finite |t|.
pub fn export_topomap(report: &StatsReport, montage: &MontageMap, prefix: &Path) -> Result<Vec<PathBuf>> {
    let (rows, cols) = (montage.rows(), montage.cols());
    let mut cell_index = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let name = montage.channel_at(r, c);
            let i = report
                .channel_names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::UnknownChannel(name.to_string()))?;
            cell_index.push(i);
        }
    }
    let tmax = report.t.iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));

    let mut t_csv = String::new();
    let mut m_csv = String::new();
    let mut pgm = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for r in 0..rows {
        let row = &cell_index[r * cols..(r + 1) * cols];
        let t: Vec<String> = row.iter().map(|&i| format!("{:.8e}", report.t[i])).collect();
        let m: Vec<&str> = row.iter().map(|&i| if report.mask[i] { "1" } else { "0" }).collect();
        t_csv.push_str(&t.join(","));
        t_csv.push('\n');
        m_csv.push_str(&m.join(","));
        m_csv.push('\n');
        pgm.extend(row.iter().map(|&i| gray_level(report.t[i], tmax)));
    }

    let with_suffix = |s: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(s);
        PathBuf::from(p)
    };
    let paths = vec![with_suffix("_t.csv"), with_suffix("_mask.csv"), with_suffix(".pgm")];
    write_atomic(&paths[0], t_csv.as_bytes())?;
    write_atomic(&paths[1], m_csv.as_bytes())?;
    write_atomic(&paths[2], &pgm)?;
    Ok(paths)
}

/// Parse a CSV grid written by [`export_topomap`].
pub fn read_csv_grid(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.parse().map_err(|_| Error::InvalidArgument(format!("bad CSV value {v:?}"))))
                .collect()
        })
        .collect()
}
