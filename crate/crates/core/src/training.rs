//! Mini-batch training, model selection on held-out loss, and stratified
//! k-fold cross-validation.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use log::info;

use crate::adsnet::{argmax_rows, AdsNet, AdsNetConfig};
use crate::eegio::EpochSet;
use crate::error::{Error, Result};
use crate::montage::MontageMap;
use crate::nn::cross_entropy;
use crate::optim::{AdamWConfig, OptimState};
use crate::rng::{stream_key, CounterRng};

/// Trials laid out `[trial][channel][sample]` in model input order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub samples: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.channels * self.samples;
        &self.x[i * n..(i + 1) * n]
    }

    /// Root mean square over every value of the selected trials.
    pub fn rms(&self, indices: &[usize]) -> f64 {
        let mut ss = 0.0;
        let mut n = 0usize;
        for &i in indices {
            let t = self.trial(i);
            ss += t.iter().map(|v| v * v).sum::<f64>();
            n += t.len();
        }
        if n == 0 {
            0.0
        } else {
            (ss / n as f64).sqrt()
        }
    }

    /// Concatenate the selected trials and their labels.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(indices.len() * self.channels * self.samples);
        for &i in indices {
            x.extend_from_slice(self.trial(i));
        }
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Shape an epoch set for `config`, returning the data and the grid
    /// gather order.
    ///
    /// When the set has exactly `config.channels` channels they are used in
    /// file order and the grid is resolved through `map`. Otherwise only the
    /// map's channels are kept, in map order. Epochs longer than
    /// `config.samples` are cropped around their centre.
    pub fn prepare(set: &EpochSet, config: &AdsNetConfig, map: &MontageMap) -> Result<(Self, Vec<usize>)> {
        set.validate()?;
        if (map.rows(), map.cols()) != config.grid {
            return Err(Error::Config(format!(
                "montage is {}x{}, model expects {}x{}",
                map.rows(),
                map.cols(),
                config.grid.0,
                config.grid.1
            )));
        }
        let (rows, gather) = if set.n_channels == config.channels {
            (
                (0..set.n_channels).collect::<Vec<_>>(),
                map.resolve(&set.channel_names)?,
            )
        } else if map.len() == config.channels {
            (map.resolve(&set.channel_names)?, (0..map.len()).collect())
        } else {
            return Err(Error::Config(format!(
                "{} input channels cannot feed a {}-channel model",
                set.n_channels, config.channels
            )));
        };
        if set.n_samples < config.samples {
            return Err(Error::TooShort(format!(
                "epochs have {} samples, model needs {}",
                set.n_samples, config.samples
            )));
        }
        let start = (set.n_samples - config.samples) / 2;
        let mut x = Vec::with_capacity(set.n_trials * rows.len() * config.samples);
        for t in 0..set.n_trials {
            for &ch in &rows {
                x.extend(set.channel(t, ch)[start..start + config.samples].iter().map(|&v| f64::from(v)));
            }
        }
        let data = Self {
            x,
            labels: set.labels.iter().map(|&l| usize::from(l)).collect(),
            channels: rows.len(),
            samples: config.samples,
        };
        Ok((data, gather))
    }
}

/// Disjoint held-out index sets, stratified by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn test(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// All indices outside `fold`, ascending.
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        v.sort_unstable();
        v
    }
}

/// Shuffle each class with its own stream, then deal its trials round-robin
/// over the folds. Fold sizes per class differ by at most one.
pub fn make_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}: need at least 2 folds")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut folds = vec![Vec::new(); k];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < k {
            return Err(Error::InvalidArgument(format!(
                "k = {k} exceeds the {} trials of class {class}",
                members.len()
            )));
        }
        CounterRng::new(seed, &[0xf01d, class as u64]).shuffle(&mut members);
        for (j, i) in members.into_iter().enumerate() {
            folds[j % k].push(i);
        }
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("no trials to split".into()));
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { folds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode loss, accuracy and confusion matrix on `indices`, processed in
/// chunks of `chunk` trials.
pub fn evaluate(model: &AdsNet, data: &Dataset, indices: &[usize], chunk: usize) -> Result<Evaluation> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one trial".into()));
    }
    let n_classes = model.config().n_classes;
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    let mut loss_sum = 0.0;
    for part in indices.chunks(chunk.max(1)) {
        let (x, labels) = data.batch(part);
        let logits = model.logits(&x)?;
        let (loss, _) = cross_entropy(&logits, n_classes, &labels)?;
        loss_sum += loss * part.len() as f64;
        for (p, &l) in argmax_rows(&logits, n_classes).into_iter().zip(&labels) {
            confusion[l][p] += 1;
        }
    }
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    Ok(Evaluation {
        loss: loss_sum / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        confusion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    /// Hold out part of each training split for model selection instead of
    /// selecting on the test fold.
    pub separate_selection: bool,
    /// Scale inputs by the reciprocal RMS of the training split.
    pub normalize_input: bool,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 40,
            adamw: AdamWConfig::default(),
            separate_selection: false,
            normalize_input: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub fold: usize,
    /// Selection-set metrics of the untrained model.
    pub initial: Evaluation,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the retained parameters; 0 if no epoch ran.
    pub best_epoch: usize,
    /// Selection-set metrics of the retained parameters.
    pub best: Evaluation,
    /// Test-fold metrics of the retained parameters.
    pub test: Evaluation,
}

impl TrainReport {
    pub fn best_eval_loss(&self) -> f64 {
        self.best.loss
    }

    /// Line-oriented log: `#` header lines, then one line per epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fold {}", self.fold);
        let _ = writeln!(
            s,
            "# initial eval_loss {:.9} eval_acc {:.6}",
            self.initial.loss, self.initial.accuracy
        );
        let _ = writeln!(
            s,
            "# best_epoch {} eval_loss {:.9} eval_acc {:.6} test_acc {:.6}",
            self.best_epoch, self.best.loss, self.best.accuracy, self.test.accuracy
        );
        let _ = writeln!(s, "epoch\ttrain_loss\teval_loss\teval_acc");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.9}\t{:.9}\t{:.6}",
                e.epoch, e.train_loss, e.eval_loss, e.eval_accuracy
            );
        }
        s
    }
}

/// A trained fold: the report, the retained model, and the time it took.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub report: TrainReport,
    pub model: AdsNet,
    pub wall_time: Duration,
}

/// Split `indices` into mini-batches of `size`; a trailing batch of one
/// trial is merged into the previous batch so batch-norm always sees two.
pub fn mini_batches(indices: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = indices.chunks(size.max(2)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Train a fresh model on `train` and retain the epoch with the lowest loss
/// on the selection set.
///
/// With a learning rate of zero the model is frozen: no train-mode passes
/// run, so batch-norm running statistics stay at their initial values too.
#[allow(clippy::too_many_arguments)]
pub fn train_one_fold(
    config: &AdsNetConfig,
    data: &Dataset,
    gather: &[usize],
    train: &[usize],
    selection: &[usize],
    test: &[usize],
    hyper: &TrainHyper,
    seed: u64,
    fold: usize,
) -> Result<FoldResult> {
    let started = Instant::now();
    if train.len() < 2 {
        return Err(Error::InvalidArgument("training split needs at least 2 trials".into()));
    }
    let mut model = AdsNet::new(config.clone(), gather.to_vec(), stream_key(seed, &[0x3d1, fold as u64]))?;
    if hyper.normalize_input {
        let rms = data.rms(train);
        if rms > 0.0 {
            model.set_input_scale(1.0 / rms)?;
        }
    }
    let mut opt = OptimState::for_params(hyper.adamw, model.params());
    let chunk = hyper.batch_size.max(2);
    let initial = evaluate(&model, data, selection, chunk)?;
    let frozen = hyper.adamw.lr == 0.0;
    let mut best_model = model.clone();
    let mut best = initial.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(hyper.epochs);
    for epoch in 1..=hyper.epochs {
        let mut order = train.to_vec();
        CounterRng::new(seed, &[0x5e9, fold as u64, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        for (bi, batch) in mini_batches(&order, hyper.batch_size).iter().enumerate() {
            let (x, labels) = data.batch(batch);
            let loss = if frozen {
                let (loss, _) = model.eval_loss(&x, &labels)?;
                loss
            } else {
                let key = stream_key(seed, &[0xd70, fold as u64, epoch as u64, bi as u64]);
                let (loss, grads) = model.loss_and_grads(&x, &labels, key)?;
                opt.step_params(model.params_mut(), &grads)
                    .map_err(|e| Error::NonFinite(format!("fold {fold} epoch {epoch}: {e}")))?;
                loss
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fold {fold} epoch {epoch}: training loss {loss}")));
            }
            loss_sum += loss * batch.len() as f64;
        }
        let eval = evaluate(&model, data, selection, chunk)?;
        if !eval.loss.is_finite() {
            return Err(Error::NonFinite(format!("fold {fold} epoch {epoch}: eval loss {}", eval.loss)));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_loss: eval.loss,
            eval_accuracy: eval.accuracy,
        });
        if best_epoch == 0 || eval.loss < best.loss {
            best_epoch = epoch;
            best = eval;
            best_model = model.clone();
        }
        if epoch % 10 == 0 || epoch == hyper.epochs {
            info!(
                "fold {fold} epoch {epoch}: train {:.4} eval {:.4} acc {:.3}",
                loss_sum / train.len() as f64,
                epochs[epoch - 1].eval_loss,
                epochs[epoch - 1].eval_accuracy
            );
        }
    }
    let test_eval = if test == selection {
        best.clone()
    } else {
        evaluate(&best_model, data, test, chunk)?
    };
    Ok(FoldResult {
        report: TrainReport {
            fold,
            initial,
            epochs,
            best_epoch,
            best,
            test: test_eval,
        },
        model: best_model,
        wall_time: started.elapsed(),
    })
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone)]
pub struct CvResult {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

impl CvResult {
    pub fn accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.report.test.accuracy).collect()
    }
}

/// Stratified k-fold cross-validation. Folds are independent and may run on
/// `jobs` threads; results do not depend on `jobs`.
pub fn cross_validate(
    config: &AdsNetConfig,
    data: &Dataset,
    gather: &[usize],
    k: usize,
    hyper: &TrainHyper,
    seed: u64,
    jobs: usize,
) -> Result<CvResult> {
    let plan = make_folds(&data.labels, k, seed)?;
    let run = |fold: usize| -> Result<FoldResult> {
        let test = plan.test(fold).to_vec();
        let mut train = plan.train(fold);
        let selection = if hyper.separate_selection {
            let labels: Vec<usize> = train.iter().map(|&i| data.labels[i]).collect();
            let inner = make_folds(&labels, k - 1, stream_key(seed, &[0x5e1, fold as u64]))?;
            let chosen: Vec<usize> = inner.test(0).iter().map(|&j| train[j]).collect();
            train.retain(|i| !chosen.contains(i));
            chosen
        } else {
            test.clone()
        };
        info!("fold {fold}: {} train, {} selection, {} test trials", train.len(), selection.len(), test.len());
        train_one_fold(config, data, gather, &train, &selection, &test, hyper, seed, fold)
    };
    let mut slots: Vec<Option<Result<FoldResult>>> = (0..k).map(|_| None).collect();
    let jobs = jobs.clamp(1, k);
    if jobs == 1 {
        for (fold, slot) in slots.iter_mut().enumerate() {
            *slot = Some(run(fold));
        }
    } else {
        std::thread::scope(|scope| {
            let run = &run;
            let handles: Vec<_> = (0..jobs)
                .map(|j| scope.spawn(move || (j..k).step_by(jobs).map(|f| (f, run(f))).collect::<Vec<_>>()))
                .collect();
            for h in handles {
                for (f, r) in h.join().expect("fold thread panicked") {
                    slots[f] = Some(r);
                }
            }
        });
    }
    let folds = slots
        .into_iter()
        .map(|s| s.expect("every fold ran"))
        .collect::<Result<Vec<_>>>()?;
    let accs: Vec<f64> = folds.iter().map(|f| f.report.test.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    Ok(CvResult {
        plan,
        folds,
        mean_accuracy,
        std_accuracy,
    })
}
