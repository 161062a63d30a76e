use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ads3d::adsnet::{AdsNet, AdsNetConfig};
use ads3d::dsp::{PreprocessConfig, Preprocessor};
use ads3d::eegio::{read_checkpoint, read_epochset, write_atomic, write_checkpoint, write_epochset};
use ads3d::kv::{self, KvMap};
use ads3d::montage::{load_montage, MontageMap};
use ads3d::optim::AdamWConfig;
use ads3d::stats::{anova_text, class_channel_anova, contrast_topography, export_topomap, BandSpec, ContrastConfig};
use ads3d::synthgen::{class_index, default_paper_template, generate, SynthConfig, CLASS_NAMES};
use ads3d::training::{cross_validate, evaluate, Dataset, TrainHyper};
use ads3d::{Error, Result};
use log::info;

fn req<T: std::str::FromStr>(map: &KvMap, key: &str) -> Result<T> {
    kv::get(map, key)?.ok_or_else(|| Error::Config(format!("missing key {key:?}")))
}

fn flag(map: &KvMap, key: &str) -> Result<bool> {
    kv::parse_bool(key, &map[key])
}

fn file_path(map: &KvMap, key: &str) -> PathBuf {
    PathBuf::from(&map[key])
}

/// `<file>.config` beside a file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

fn ensure_parent(out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(())
}

fn ensure_input(p: &Path) -> Result<()> {
    if !p.is_file() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} does not exist", p.display()),
        )));
    }
    Ok(())
}

fn montage(value: &str, model: Option<&AdsNetConfig>) -> Result<MontageMap> {
    match value {
        "default" => Ok(MontageMap::default_8x8()),
        "reduced" => Ok(MontageMap::reduced_4x4()),
        "auto" => model
            .and_then(AdsNetConfig::montage)
            .ok_or_else(|| Error::Config("montage = auto needs a model with a bundled montage".into())),
        path => load_montage(path),
    }
}

fn class_arg(map: &KvMap, key: &str) -> Result<u8> {
    let v = &map[key];
    if let Ok(i) = v.parse::<u8>() {
        if usize::from(i) < CLASS_NAMES.len() {
            return Ok(i);
        }
    }
    class_index(v).ok_or_else(|| Error::Config(format!("{key}: unknown class {v:?}")))
}

pub fn synth(map: &KvMap) -> Result<()> {
    let out = file_path(map, "out");
    let mut synth_keys = map.clone();
    synth_keys.remove("out");
    let cfg: SynthConfig = default_paper_template().apply_kv(&synth_keys)?;
    info!(
        "generating {} trials x {} channels, seed {}",
        cfg.n_trials_per_class * CLASS_NAMES.len(),
        cfg.channel_names.len(),
        cfg.seed
    );
    let set = generate(&cfg)?;
    ensure_parent(&out)?;
    write_epochset(&set, &out)?;
    write_atomic(&sidecar(&out), kv::render(map).as_bytes())?;
    info!("wrote {}", out.display());
    Ok(())
}

pub fn preprocess(map: &KvMap) -> Result<()> {
    let (input, out) = (file_path(map, "in"), file_path(map, "out"));
    ensure_input(&input)?;
    let cfg = PreprocessConfig {
        notch: flag(map, "notch")?,
        notch_hz: req(map, "notch_hz")?,
        notch_q: req(map, "notch_q")?,
        band_low: req(map, "band_low")?,
        band_high: req(map, "band_high")?,
        order: req(map, "order")?,
        factor: req(map, "factor")?,
        onset_s: req(map, "onset_s")?,
        epoch_len: req(map, "epoch_len")?,
    };
    let raw = read_epochset(&input)?;
    let pre = Preprocessor::new(cfg, f64::from(raw.fs))?;
    let set = pre.epochset(&raw)?;
    info!("{} trials at {} Hz, {} samples per epoch", set.n_trials, set.fs, set.n_samples);
    ensure_parent(&out)?;
    write_epochset(&set, &out)?;
    write_atomic(&sidecar(&out), kv::render(map).as_bytes())?;
    Ok(())
}

pub fn train(map: &KvMap) -> Result<()> {
    let (input, out) = (file_path(map, "in"), file_path(map, "out"));
    ensure_input(&input)?;
    let cfg = AdsNetConfig::by_name(&map["model"])?;
    let grid = montage(&map["montage"], Some(&cfg))?;
    let set = read_epochset(&input)?;
    let (data, gather) = Dataset::prepare(&set, &cfg, &grid)?;
    let hyper = TrainHyper {
        epochs: req(map, "epochs")?,
        batch_size: req(map, "batch_size")?,
        adamw: AdamWConfig {
            lr: req(map, "lr")?,
            beta1: req(map, "beta1")?,
            beta2: req(map, "beta2")?,
            eps: req(map, "eps")?,
            weight_decay: req(map, "weight_decay")?,
        },
        separate_selection: flag(map, "separate_selection")?,
        normalize_input: flag(map, "normalize_input")?,
    };
    let seed: u64 = req(map, "seed")?;
    let folds: usize = req(map, "folds")?;
    fs::create_dir_all(&out)?;
    write_atomic(&out.join("config.txt"), kv::render(map).as_bytes())?;

    let cv = cross_validate(&cfg, &data, &gather, folds, &hyper, seed, req(map, "jobs")?)?;
    let mut summary = String::new();
    let _ = writeln!(summary, "# model {} folds {} seed {}", cfg.name, folds, seed);
    summary.push_str("fold\tinitial_acc\tfinal_acc\tbest_epoch\tbest_eval_loss\ttest_acc\n");
    for f in &cv.folds {
        let r = &f.report;
        let k = r.fold;
        let final_acc = r.epochs.last().map_or(r.initial.accuracy, |e| e.eval_accuracy);
        let _ = writeln!(
            summary,
            "{k}\t{:.6}\t{:.6}\t{}\t{:.9}\t{:.6}",
            r.initial.accuracy,
            final_acc,
            r.best_epoch,
            r.best.loss,
            r.test.accuracy
        );
        write_atomic(&out.join(format!("fold{k}.log")), r.to_log().as_bytes())?;
        let meta = [
            ("seed".to_string(), seed.to_string()),
            ("fold".into(), k.to_string()),
            ("best_epoch".into(), r.best_epoch.to_string()),
            ("best_eval_loss".into(), format!("{:e}", r.best.loss)),
            ("test_accuracy".into(), format!("{:e}", r.test.accuracy)),
        ];
        write_checkpoint(&f.model.to_checkpoint(meta), out.join(format!("fold{k}.ckpt")))?;
        info!("fold {k}: test accuracy {:.3}, {:.1}s", r.test.accuracy, f.wall_time.as_secs_f64());
    }
    let _ = writeln!(summary, "# mean_acc {:.6} std_acc {:.6}", cv.mean_accuracy, cv.std_accuracy);
    write_atomic(&out.join("summary.txt"), summary.as_bytes())?;
    info!("mean accuracy {:.3} ± {:.3}", cv.mean_accuracy, cv.std_accuracy);
    Ok(())
}

pub fn eval(map: &KvMap) -> Result<()> {
    let (input, ckpt_path, out) = (file_path(map, "in"), file_path(map, "checkpoint"), file_path(map, "out"));
    ensure_input(&input)?;
    ensure_input(&ckpt_path)?;
    let ckpt = read_checkpoint(&ckpt_path)?;
    let model_name = ckpt
        .metadata
        .get("model")
        .ok_or_else(|| Error::Config("checkpoint has no model name".into()))?;
    let cfg = AdsNetConfig::by_name(model_name)?;
    let grid = montage(&map["montage"], Some(&cfg))?;
    let (data, gather) = Dataset::prepare(&read_epochset(&input)?, &cfg, &grid)?;
    let stored: Vec<usize> = ckpt
        .metadata
        .get("gather")
        .map(|g| kv::split_list(g).iter().map(|v| v.parse::<usize>()).collect::<std::result::Result<_, _>>())
        .transpose()
        .map_err(|_| Error::Config("checkpoint gather is malformed".into()))?
        .unwrap_or_else(|| gather.clone());
    if stored != gather {
        return Err(Error::Config("epoch file channel order differs from the one the checkpoint was trained on".into()));
    }
    let model = AdsNet::from_checkpoint(cfg, gather, &ckpt)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let e = evaluate(&model, &data, &all, req(map, "batch_size")?)?;
    let mut s = String::new();
    let _ = writeln!(s, "trials {}", data.len());
    let _ = writeln!(s, "accuracy {:.6}", e.accuracy);
    let _ = writeln!(s, "loss {:.9}", e.loss);
    let _ = writeln!(s, "# confusion: rows true class, columns predicted ({})", CLASS_NAMES.join(", "));
    for row in &e.confusion {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{}", cells.join("\t"));
    }
    ensure_parent(&out)?;
    write_atomic(&out, s.as_bytes())?;
    write_atomic(&sidecar(&out), kv::render(map).as_bytes())?;
    info!("accuracy {:.3} on {} trials", e.accuracy, data.len());
    Ok(())
}

pub fn stats(map: &KvMap) -> Result<()> {
    let (input, out) = (file_path(map, "in"), file_path(map, "out"));
    ensure_input(&input)?;
    let grid = montage(&map["montage"], None)?;
    let (a, b) = (class_arg(map, "class_a")?, class_arg(map, "class_b")?);
    let bands = kv::split_list(&map["bands"])
        .iter()
        .map(|s| BandSpec::parse(s))
        .collect::<Result<Vec<_>>>()?;
    if bands.is_empty() {
        return Err(Error::Config("bands is empty".into()));
    }
    let cfg = ContrastConfig {
        alpha: req(map, "alpha")?,
        segment_s: req(map, "segment_s")?,
        overlap: req(map, "overlap")?,
        log_power: flag(map, "log_power")?,
    };
    let anova_alpha: f64 = req(map, "anova_alpha")?;
    let set = read_epochset(&input)?;
    let present: Vec<u8> = (0..CLASS_NAMES.len() as u8).filter(|&c| !set.class_trials(c).is_empty()).collect();
    fs::create_dir_all(&out)?;
    write_atomic(&out.join("config.txt"), kv::render(map).as_bytes())?;
    for band in &bands {
        let report = contrast_topography(&set, a, b, band, &cfg)?;
        write_atomic(&out.join(format!("contrast_{}.csv", band.name)), report.to_text().as_bytes())?;
        export_topomap(&report, &grid, &out.join(format!("topo_{}", band.name)))?;
        info!("{} band: {} significant channels {:?}", band.name, report.significant().len(), report.significant());

        let table = class_channel_anova(&set, &present, band, &cfg)?;
        let mut text = anova_text(&table, band);
        let _ = writeln!(
            text,
            "# significant at {anova_alpha}: class {}, channel {}, interaction {}",
            table.class.p < anova_alpha,
            table.channel.p < anova_alpha,
            table.interaction.p < anova_alpha
        );
        write_atomic(&out.join(format!("anova_{}.csv", band.name)), text.as_bytes())?;
    }
    Ok(())
}
