//! The dual-stream attention 3D CNN.
//!
//! Pipeline per batch: channel attention on each `[C × T]` trial, gather the
//! attended channels into the montage grid `[B, 1, rows, cols, T]`, run block 1
//! and block 2 on that same tensor, concatenate their outputs along the
//! height axis, run block 3, flatten, and map to class logits with one dense
//! layer.

use ndarray::{Array2, ArrayView2};

use crate::attention::{channel_attention_backward, channel_attention_cached, AttentionCache, AttentionParams};
use crate::eegio::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::montage::MontageMap;
use crate::nn::{
    batchnorm_backward, batchnorm_eval, batchnorm_train, concat, conv3d_backward, conv3d_output_dims, conv3d_valid,
    cross_entropy, dense, dense_backward, dropout, dropout_backward, elu, elu_backward, pool3d, pool3d_backward,
    pool_output_dims, split, BatchNormCache, BatchNormParams, DropoutMask, PoolCache, PoolKind, Tensor,
};
use crate::rng::CounterRng;

const UNIT: [usize; 3] = [1, 1, 1];
/// Blocks 1 and 2 are concatenated along the height axis.
pub const CONCAT_AXIS: usize = 3;

/// One row of a block: a convolution (always followed by batch norm) or a
/// temporal pooling layer (followed by dropout).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stage {
    Conv { out: usize, kernel: [usize; 3], elu: bool },
    Pool { kind: PoolKind, width: usize, dropout: f64 },
}

fn conv(out: usize, kernel: [usize; 3], elu: bool) -> Stage {
    Stage::Conv { out, kernel, elu }
}

fn pool(kind: PoolKind, width: usize, dropout: f64) -> Stage {
    Stage::Pool { kind, width, dropout }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdsNetConfig {
    /// `"full"` or `"reduced"`; recorded in checkpoints.
    pub name: String,
    pub channels: usize,
    pub samples: usize,
    pub grid: (usize, usize),
    pub d_k: usize,
    pub block1: Vec<Stage>,
    pub block2: Vec<Stage>,
    pub block3: Vec<Stage>,
    pub n_classes: usize,
    pub batch_size: usize,
}

impl AdsNetConfig {
    /// Full-size network: 64 channels on an 8×8 grid, 1001 samples.
    pub fn full() -> Self {
        use PoolKind::{Avg, Max};
        Self {
            name: "full".into(),
            channels: 64,
            samples: 1001,
            grid: (8, 8),
            d_k: 64,
            block1: vec![
                conv(10, [4, 4, 125], false),
                conv(20, [3, 3, 16], true),
                pool(Avg, 4, 0.5),
                conv(30, [3, 3, 16], true),
                pool(Avg, 4, 0.5),
            ],
            block2: vec![
                conv(6, [3, 3, 62], false),
                conv(12, [3, 3, 10], true),
                pool(Max, 2, 0.25),
                conv(18, [2, 2, 10], true),
                pool(Max, 2, 0.25),
                conv(24, [2, 2, 10], true),
                pool(Max, 2, 0.25),
                conv(30, [2, 2, 10], true),
                pool(Max, 2, 0.25),
            ],
            block3: vec![conv(60, [1, 2, 10], true), pool(Avg, 2, 0.5)],
            n_classes: 4,
            batch_size: 40,
        }
    }

    /// Same topology on a 4×4 grid of 16 channels and 64 samples.
    pub fn reduced() -> Self {
        use PoolKind::{Avg, Max};
        Self {
            name: "reduced".into(),
            channels: 16,
            samples: 64,
            grid: (4, 4),
            d_k: 8,
            block1: vec![
                conv(4, [2, 2, 9], false),
                conv(6, [2, 2, 5], true),
                pool(Avg, 4, 0.5),
                conv(8, [2, 2, 4], true),
                pool(Avg, 4, 0.5),
            ],
            block2: vec![
                conv(3, [2, 2, 5], false),
                conv(4, [2, 2, 5], true),
                pool(Max, 2, 0.25),
                conv(6, [1, 1, 5], true),
                pool(Max, 2, 0.25),
                conv(7, [1, 1, 3], true),
                pool(Max, 2, 0.25),
                conv(8, [2, 2, 2], true),
                pool(Max, 2, 0.25),
            ],
            block3: vec![conv(16, [1, 2, 1], true), pool(Avg, 2, 0.5)],
            n_classes: 4,
            batch_size: 40,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "reduced" => Ok(Self::reduced()),
            other => Err(Error::Config(format!("unknown model {other:?} (expected full or reduced)"))),
        }
    }

    pub fn montage(&self) -> Option<MontageMap> {
        match self.grid {
            (8, 8) => Some(MontageMap::default_8x8()),
            (4, 4) => Some(MontageMap::reduced_4x4()),
            _ => None,
        }
    }

    pub fn input_dims(&self, batch: usize) -> [usize; 5] {
        [batch, 1, self.grid.0, self.grid.1, self.samples]
    }

    /// Output size after every layer, in the row order of the architecture
    /// table: reshape, block 1, block 2, concatenation, block 3.
    pub fn shape_chain(&self, batch: usize) -> Result<Vec<ShapeRow>> {
        let mut rows = vec![ShapeRow::new("Reshape", self.input_dims(batch))];
        let out1 = block_shapes(&self.block1, 'a', self.input_dims(batch), &mut rows)?;
        let out2 = block_shapes(&self.block2, 'b', self.input_dims(batch), &mut rows)?;
        let joined = concat_dims(out1, out2)?;
        rows.push(ShapeRow::new("Concatenate", joined));
        block_shapes(&self.block3, 'c', joined, &mut rows)?;
        Ok(rows)
    }

    /// Width of the flattened block-3 output feeding the dense head.
    pub fn head_inputs(&self) -> Result<usize> {
        let last = self.shape_chain(1)?.last().expect("non-empty chain").dims;
        Ok(last[1..].iter().product())
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.0 * self.grid.1 > self.channels {
            return Err(Error::Config(format!(
                "{}x{} grid needs more than {} channels",
                self.grid.0, self.grid.1, self.channels
            )));
        }
        if self.d_k == 0 || self.n_classes < 2 || self.batch_size < 2 {
            return Err(Error::Config("d_k, n_classes and batch_size must be positive (batch >= 2)".into()));
        }
        for s in self.block1.iter().chain(&self.block2).chain(&self.block3) {
            if let Stage::Pool { dropout, .. } = s {
                if !(0.0..1.0).contains(dropout) {
                    return Err(Error::Config(format!("dropout {dropout} not in [0, 1)")));
                }
            }
        }
        self.head_inputs().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: String,
    pub dims: [usize; 5],
}

impl ShapeRow {
    fn new(layer: impl Into<String>, dims: [usize; 5]) -> Self {
        Self {
            layer: layer.into(),
            dims,
        }
    }
}

fn stage_label(stage: &Stage, letter: char, conv_index: usize) -> String {
    match stage {
        Stage::Conv { .. } => format!("Conv.{letter}{conv_index}"),
        Stage::Pool { kind: PoolKind::Avg, .. } => "Avgpool".into(),
        Stage::Pool { kind: PoolKind::Max, .. } => "Maxpool".into(),
    }
}

fn stage_output(stage: &Stage, dims: [usize; 5], label: &str) -> Result<[usize; 5]> {
    let [b, f, d, h, w] = dims;
    let (features, out) = match *stage {
        Stage::Conv { out, kernel, .. } => (out, conv3d_output_dims([d, h, w], kernel, UNIT)),
        Stage::Pool { width, .. } => (f, pool_output_dims([d, h, w], [1, 1, width], [1, 1, width])),
    };
    let [d, h, w] = out.ok_or_else(|| Error::shape(label, format!("kernel does not fit input {dims:?}")))?;
    Ok([b, features, d, h, w])
}

fn block_shapes(block: &[Stage], letter: char, mut dims: [usize; 5], rows: &mut Vec<ShapeRow>) -> Result<[usize; 5]> {
    let mut convs = 0;
    for stage in block {
        if matches!(stage, Stage::Conv { .. }) {
            convs += 1;
        }
        let label = stage_label(stage, letter, convs);
        dims = stage_output(stage, dims, &label)?;
        rows.push(ShapeRow::new(label, dims));
    }
    Ok(dims)
}

fn concat_dims(a: [usize; 5], b: [usize; 5]) -> Result<[usize; 5]> {
    for axis in 0..5 {
        if axis != CONCAT_AXIS && a[axis] != b[axis] {
            return Err(Error::shape("Concatenate", format!("block outputs {a:?} and {b:?} differ")));
        }
    }
    let mut out = a;
    out[CONCAT_AXIS] += b[CONCAT_AXIS];
    Ok(out)
}

/// A named parameter tensor. Batch-norm running statistics are stored
/// alongside the learnable parameters but are not trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Gradients aligned with [`AdsNet::params`]; non-trainable entries are zero.
pub type Grads = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy)]
enum Layer {
    /// `first` indexes w, b, gamma, beta, running mean, running var.
    Conv { first: usize, elu: bool },
    Pool { kind: PoolKind, width: usize, dropout: f64 },
}

enum StageCache {
    Conv {
        input: Tensor,
        bn: BatchNormCache,
        activated: Option<Tensor>,
    },
    Pool {
        cache: PoolCache,
        mask: Option<DropoutMask>,
    },
}

struct Tape {
    attention: Vec<AttentionCache>,
    blocks: [Vec<StageCache>; 3],
    heights: [usize; 2],
    block3_dims: Vec<usize>,
    flat: Tensor,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[batch × n_classes]`, row-major.
    pub logits: Vec<f64>,
    /// Layer outputs in the order of [`AdsNetConfig::shape_chain`].
    pub shapes: Vec<ShapeRow>,
}

#[derive(Debug, Clone)]
pub struct AdsNet {
    config: AdsNetConfig,
    gather: Vec<usize>,
    params: Vec<Param>,
    blocks: [Vec<Layer>; 3],
    /// Fixed factor applied to the raw input before attention.
    input_scale: f64,
}

impl AdsNet {
    /// `gather[cell]` is the input channel placed at grid cell `cell` (row-major).
    pub fn new(config: AdsNetConfig, gather: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        let cells = config.grid.0 * config.grid.1;
        if gather.len() != cells {
            return Err(Error::Config(format!("gather has {} entries for {cells} cells", gather.len())));
        }
        let mut seen = vec![false; config.channels];
        for &g in &gather {
            if g >= config.channels || std::mem::replace(&mut seen[g], true) {
                return Err(Error::Config(format!("gather entry {g} out of range or repeated")));
            }
        }
        let mut rng = CounterRng::new(seed, &[0x1417]);
        let mut params = Vec::new();
        let attn = AttentionParams::init(config.samples, config.d_k, config.samples, &mut rng);
        for (name, w) in [("attn.wq", attn.wq), ("attn.wk", attn.wk), ("attn.wv", attn.wv)] {
            let dims = [w.nrows(), w.ncols()];
            params.push(Param {
                name: name.into(),
                value: Tensor::from_vec(&dims, w.into_raw_vec_and_offset().0)?,
                trainable: true,
            });
        }
        let mut blocks: [Vec<Layer>; 3] = Default::default();
        let mut block_features = [0; 2];
        for (bi, block) in [&config.block1, &config.block2, &config.block3].into_iter().enumerate() {
            let mut features = if bi == 2 { block_features[0] } else { 1 };
            if bi == 2 && block_features[0] != block_features[1] {
                return Err(Error::shape("Concatenate", "blocks 1 and 2 end with different feature counts"));
            }
            let mut convs = 0;
            for stage in block {
                match *stage {
                    Stage::Conv { out, kernel, elu } => {
                        convs += 1;
                        let prefix = format!("b{}.conv{convs}", bi + 1);
                        let bn = format!("b{}.bn{convs}", bi + 1);
                        let fan_in = features * kernel.iter().product::<usize>();
                        let bound = (1.0 / fan_in as f64).sqrt();
                        let first = params.len();
                        let mut push = |name: String, value: Tensor, trainable| {
                            params.push(Param { name, value, trainable });
                        };
                        push(
                            format!("{prefix}.w"),
                            Tensor::uniform(&[out, features, kernel[0], kernel[1], kernel[2]], bound, &mut rng),
                            true,
                        );
                        push(format!("{prefix}.b"), Tensor::uniform(&[out], bound, &mut rng), true);
                        push(format!("{bn}.gamma"), Tensor::filled(&[out], 1.0), true);
                        push(format!("{bn}.beta"), Tensor::zeros(&[out]), true);
                        push(format!("{bn}.rmean"), Tensor::zeros(&[out]), false);
                        push(format!("{bn}.rvar"), Tensor::filled(&[out], 1.0), false);
                        blocks[bi].push(Layer::Conv { first, elu });
                        features = out;
                    }
                    Stage::Pool { kind, width, dropout } => blocks[bi].push(Layer::Pool { kind, width, dropout }),
                }
            }
            if bi < 2 {
                block_features[bi] = features;
            }
        }
        let n_in = config.head_inputs()?;
        let bound = (1.0 / n_in as f64).sqrt();
        params.push(Param {
            name: "head.w".into(),
            value: Tensor::uniform(&[config.n_classes, n_in], bound, &mut rng),
            trainable: true,
        });
        params.push(Param {
            name: "head.b".into(),
            value: Tensor::uniform(&[config.n_classes], bound, &mut rng),
            trainable: true,
        });
        Ok(Self {
            config,
            gather,
            params,
            blocks,
            input_scale: 1.0,
        })
    }

    /// Build with the grid order resolved from a montage and the input's channel names.
    pub fn with_montage(config: AdsNetConfig, map: &MontageMap, channel_names: &[String], seed: u64) -> Result<Self> {
        if (map.rows(), map.cols()) != config.grid {
            return Err(Error::Config(format!(
                "montage is {}x{}, model expects {:?}",
                map.rows(),
                map.cols(),
                config.grid
            )));
        }
        if channel_names.len() != config.channels {
            return Err(Error::Config(format!(
                "input has {} channels, model expects {}",
                channel_names.len(),
                config.channels
            )));
        }
        Self::new(config, map.resolve(channel_names)?, seed)
    }

    pub fn config(&self) -> &AdsNetConfig {
        &self.config
    }

    pub fn gather(&self) -> &[usize] {
        &self.gather
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// Multiply every input value by `scale` before the attention stage.
    pub fn set_input_scale(&mut self, scale: f64) -> Result<()> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("input scale {scale} must be positive")));
        }
        self.input_scale = scale;
        Ok(())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Zero the dense head so every input maps to uniform class probabilities.
    pub fn zero_head(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with("head.")) {
            p.value.data_mut().fill(0.0);
        }
    }

    fn head(&self) -> (&Tensor, &[f64]) {
        let n = self.params.len();
        (&self.params[n - 2].value, self.params[n - 1].value.data())
    }

    fn attention_params(&self) -> Result<AttentionParams> {
        let m = |i: usize| {
            let t = &self.params[i].value;
            Array2::from_shape_vec((t.dims()[0], t.dims()[1]), t.data().to_vec())
                .map_err(|e| Error::shape("attention", e.to_string()))
        };
        AttentionParams::new(m(0)?, m(1)?, m(2)?)
    }

    fn check_input(&self, x: &[f64]) -> Result<usize> {
        let per = self.config.channels * self.config.samples;
        if x.is_empty() || !x.len().is_multiple_of(per) {
            return Err(Error::shape(
                "input",
                format!(
                    "{} values is not a whole number of {}x{} trials",
                    x.len(),
                    self.config.channels,
                    self.config.samples
                ),
            ));
        }
        Ok(x.len() / per)
    }

    /// Eval-mode forward pass on `x` laid out `[trial][channel][sample]`.
    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let (fwd, _, _) = self.run(x, None)?;
        Ok(fwd)
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Arg-max class per trial; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?, self.config.n_classes))
    }

    /// Train-mode loss and gradients. Batch-norm uses batch statistics and
    /// its running estimates are updated; dropout masks derive from `dropout_key`.
    pub fn loss_and_grads(&mut self, x: &[f64], labels: &[usize], dropout_key: u64) -> Result<(f64, Grads)> {
        let (fwd, tape, updates) = self.run(x, Some(dropout_key))?;
        let tape = tape.expect("train mode records a tape");
        if labels.len() * self.config.n_classes != fwd.logits.len() {
            return Err(Error::shape("loss", format!("{} labels for {} trials", labels.len(), fwd.logits.len() / self.config.n_classes)));
        }
        let (loss, dlogits) = cross_entropy(&fwd.logits, self.config.n_classes, labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = self.backward(&tape, dlogits)?;
        for (i, values) in updates {
            self.params[i].value.data_mut().copy_from_slice(&values);
        }
        Ok((loss, grads))
    }

    /// Mean cross-entropy in eval mode.
    pub fn eval_loss(&self, x: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        let logits = self.logits(x)?;
        Ok((cross_entropy(&logits, self.config.n_classes, labels)?.0, logits))
    }

    #[allow(clippy::type_complexity)]
    fn run(&self, x: &[f64], train: Option<u64>) -> Result<(Forward, Option<Tape>, Vec<(usize, Vec<f64>)>)> {
        let batch = self.check_input(x)?;
        if train.is_some() && batch < 2 {
            return Err(Error::InvalidArgument("training needs a batch of at least 2 trials".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input batch".into()));
        }
        let (c, t) = (self.config.channels, self.config.samples);
        let attn = self.attention_params()?;
        let mut grid = Vec::with_capacity(batch * self.gather.len() * t);
        let mut attn_caches = Vec::new();
        let mut scaled = Vec::new();
        for trial in x.chunks(c * t) {
            let trial = if self.input_scale == 1.0 {
                trial
            } else {
                scaled.clear();
                scaled.extend(trial.iter().map(|v| v * self.input_scale));
                &scaled[..]
            };
            let view = ArrayView2::from_shape((c, t), trial).expect("checked length");
            let (out, cache) = channel_attention_cached(view, &attn)?;
            for &ch in &self.gather {
                grid.extend(out.row(ch).iter());
            }
            if train.is_some() {
                attn_caches.push(cache);
            }
        }
        let input = Tensor::from_vec(&self.config.input_dims(batch), grid)?;
        let mut shapes = vec![ShapeRow::new("Reshape", self.config.input_dims(batch))];
        let mut updates = Vec::new();
        let mut caches: [Vec<StageCache>; 3] = Default::default();

        let y1 = self.run_block(0, input.clone(), train, &mut shapes, &mut caches[0], &mut updates)?;
        let y2 = self.run_block(1, input, train, &mut shapes, &mut caches[1], &mut updates)?;
        let heights = [y1.dims()[CONCAT_AXIS], y2.dims()[CONCAT_AXIS]];
        let joined = concat(&[&y1, &y2], CONCAT_AXIS).map_err(|e| Error::shape("Concatenate", e.to_string()))?;
        shapes.push(ShapeRow::new("Concatenate", joined.dim5("Concatenate")?));
        let y3 = self.run_block(2, joined, train, &mut shapes, &mut caches[2], &mut updates)?;
        let block3_dims = y3.dims().to_vec();
        let n_in = y3.len() / batch;
        let flat = y3.reshape(&[batch, n_in])?;
        let (hw, hb) = self.head();
        let logits = dense(&flat, hw, hb).map_err(|e| Error::shape("head", e.to_string()))?;
        let tape = train.map(|_| Tape {
            attention: attn_caches,
            blocks: caches,
            heights,
            block3_dims,
            flat,
        });
        Ok((
            Forward {
                logits: logits.into_data(),
                shapes,
            },
            tape,
            updates,
        ))
    }

    fn run_block(
        &self,
        bi: usize,
        mut x: Tensor,
        train: Option<u64>,
        shapes: &mut Vec<ShapeRow>,
        caches: &mut Vec<StageCache>,
        updates: &mut Vec<(usize, Vec<f64>)>,
    ) -> Result<Tensor> {
        let letter = [b'a', b'b', b'c'][bi] as char;
        let mut convs = 0;
        for (si, layer) in self.blocks[bi].iter().enumerate() {
            match *layer {
                Layer::Conv { first, elu: with_elu } => {
                    convs += 1;
                    let label = format!("Conv.{letter}{convs}");
                    let p = &self.params[first..first + 6];
                    let z = conv3d_valid(&x, &p[0].value, p[1].value.data(), UNIT)
                        .map_err(|e| Error::shape(&label, e.to_string()))?;
                    let (gamma, beta) = (p[2].value.data(), p[3].value.data());
                    let out = if train.is_some() {
                        let mut rm = p[4].value.data().to_vec();
                        let mut rv = p[5].value.data().to_vec();
                        let (y, bn) = batchnorm_train(
                            &z,
                            BatchNormParams {
                                gamma,
                                beta,
                                running_mean: &mut rm,
                                running_var: &mut rv,
                            },
                        )?;
                        updates.push((first + 4, rm));
                        updates.push((first + 5, rv));
                        let activated = with_elu.then(|| elu(&y));
                        let out = activated.clone().unwrap_or(y);
                        caches.push(StageCache::Conv {
                            input: x,
                            bn,
                            activated,
                        });
                        out
                    } else {
                        let y = batchnorm_eval(&z, gamma, beta, p[4].value.data(), p[5].value.data())?;
                        if with_elu {
                            elu(&y)
                        } else {
                            y
                        }
                    };
                    shapes.push(ShapeRow::new(label, out.dim5("conv")?));
                    x = out;
                }
                Layer::Pool { kind, width, dropout: p } => {
                    let label = if kind == PoolKind::Avg { "Avgpool" } else { "Maxpool" };
                    let (y, cache) =
                        pool3d(&x, kind, [1, 1, width], [1, 1, width]).map_err(|e| Error::shape(label, e.to_string()))?;
                    let rng = train.map(|key| CounterRng::new(key, &[bi as u64, si as u64]));
                    let (y, mask) = dropout(&y, p, rng.as_ref())?;
                    if train.is_some() {
                        caches.push(StageCache::Pool { cache, mask });
                    }
                    shapes.push(ShapeRow::new(label, y.dim5("pool")?));
                    x = y;
                }
            }
        }
        Ok(x)
    }

    fn backward(&self, tape: &Tape, dlogits: Vec<f64>) -> Result<Grads> {
        let mut grads: Grads = self.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        let n = self.params.len();
        let batch = tape.flat.dims()[0];
        let dl = Tensor::from_vec(&[batch, self.config.n_classes], dlogits)?;
        let (hw, _) = self.head();
        let hg = dense_backward(&tape.flat, hw, &dl)?;
        grads[n - 2] = hg.weight.into_data();
        grads[n - 1] = hg.bias;

        let d3 = hg.input.reshape(&tape.block3_dims)?;
        let djoined = self.block_backward(2, &tape.blocks[2], d3, &mut grads)?;
        let parts = split(&djoined, CONCAT_AXIS, &tape.heights)?;
        let mut parts = parts.into_iter();
        let d1 = self.block_backward(0, &tape.blocks[0], parts.next().expect("two parts"), &mut grads)?;
        let d2 = self.block_backward(1, &tape.blocks[1], parts.next().expect("two parts"), &mut grads)?;

        let (c, t) = (self.config.channels, self.config.samples);
        let cells = self.gather.len();
        let attn = self.attention_params()?;
        for (b, cache) in tape.attention.iter().enumerate() {
            let mut dy = Array2::<f64>::zeros((c, t));
            let base = b * cells * t;
            for (cell, &ch) in self.gather.iter().enumerate() {
                let off = base + cell * t;
                for (k, v) in dy.row_mut(ch).iter_mut().enumerate() {
                    *v = d1.data()[off + k] + d2.data()[off + k];
                }
            }
            let g = channel_attention_backward(cache, &attn, dy.view())?;
            for (i, m) in [g.wq, g.wk, g.wv].into_iter().enumerate() {
                for (acc, v) in grads[i].iter_mut().zip(m.iter()) {
                    *acc += v;
                }
            }
        }
        Ok(grads)
    }

    fn block_backward(&self, bi: usize, caches: &[StageCache], mut d: Tensor, grads: &mut Grads) -> Result<Tensor> {
        for (layer, cache) in self.blocks[bi].iter().zip(caches).rev() {
            match (layer, cache) {
                (Layer::Pool { .. }, StageCache::Pool { cache, mask }) => {
                    d = pool3d_backward(cache, &dropout_backward(mask.as_ref(), &d))?;
                }
                (
                    Layer::Conv { first, .. },
                    StageCache::Conv {
                        input,
                        bn,
                        activated,
                    },
                ) => {
                    if let Some(y) = activated {
                        d = elu_backward(y, &d);
                    }
                    let first = *first;
                    let bg = batchnorm_backward(bn, &d, self.params[first + 2].value.data())?;
                    grads[first + 2] = bg.gamma;
                    grads[first + 3] = bg.beta;
                    let cg = conv3d_backward(input, &self.params[first].value, &bg.input, UNIT)?;
                    grads[first] = cg.weight.into_data();
                    grads[first + 1] = cg.bias;
                    d = cg.input;
                }
                _ => unreachable!("tape mirrors the layer list"),
            }
        }
        Ok(d)
    }

    /// Parameters as 32-bit checkpoint entries with the given metadata.
    pub fn to_checkpoint(&self, metadata: impl IntoIterator<Item = (String, String)>) -> ModelCheckpoint {
        let mut ckpt = ModelCheckpoint::new();
        for p in &self.params {
            ckpt.push(
                p.name.clone(),
                p.value.dims().to_vec(),
                p.value.data().iter().map(|&v| v as f32).collect(),
            );
        }
        ckpt.metadata.insert("model".into(), self.config.name.clone());
        ckpt.metadata.insert("d_k".into(), self.config.d_k.to_string());
        ckpt.metadata.insert("input_scale".into(), format!("{:e}", self.input_scale));
        ckpt.metadata.insert(
            "gather".into(),
            self.gather.iter().map(|g| g.to_string()).collect::<Vec<_>>().join(","),
        );
        ckpt.metadata.extend(metadata);
        ckpt
    }

    /// Rebuild a model whose configuration matches `config`, loading every
    /// parameter by name.
    pub fn from_checkpoint(config: AdsNetConfig, gather: Vec<usize>, ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.validate()?;
        let mut net = Self::new(config, gather, 0)?;
        if let Some(v) = ckpt.metadata.get("input_scale") {
            let scale = v
                .parse()
                .map_err(|_| Error::Dimension(format!("bad input_scale {v:?} in checkpoint")))?;
            net.set_input_scale(scale)?;
        }
        for p in &mut net.params {
            let e = ckpt
                .get(&p.name)
                .ok_or_else(|| Error::Dimension(format!("checkpoint lacks entry {:?}", p.name)))?;
            if e.dims != p.value.dims() {
                return Err(Error::Dimension(format!(
                    "entry {:?} has dims {:?}, model expects {:?}",
                    p.name,
                    e.dims,
                    p.value.dims()
                )));
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&e.values) {
                *dst = f64::from(src);
            }
        }
        Ok(net)
    }

    /// Round every parameter to the nearest 32-bit value, as stored in checkpoints.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }
}

/// Index of the largest value of each row; the first one wins on ties.
pub fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, softmax_rows};

    fn identity_gather(cfg: &AdsNetConfig) -> Vec<usize> {
        (0..cfg.grid.0 * cfg.grid.1).collect()
    }

    fn random_batch(cfg: &AdsNetConfig, batch: usize, seed: u64) -> Vec<f64> {
        let mut rng = CounterRng::new(seed, &[]);
        (0..batch * cfg.channels * cfg.samples).map(|_| rng.normal()).collect()
    }

    #[test]
    fn full_shape_chain_matches_table() {
        let rows = AdsNetConfig::full().shape_chain(40).unwrap();
        let want: [(&str, [usize; 5]); 18] = [
            ("Reshape", [40, 1, 8, 8, 1001]),
            ("Conv.a1", [40, 10, 5, 5, 877]),
            ("Conv.a2", [40, 20, 3, 3, 862]),
            ("Avgpool", [40, 20, 3, 3, 215]),
            ("Conv.a3", [40, 30, 1, 1, 200]),
            ("Avgpool", [40, 30, 1, 1, 50]),
            ("Conv.b1", [40, 6, 6, 6, 940]),
            ("Conv.b2", [40, 12, 4, 4, 931]),
            ("Maxpool", [40, 12, 4, 4, 465]),
            ("Conv.b3", [40, 18, 3, 3, 456]),
            ("Maxpool", [40, 18, 3, 3, 228]),
            ("Conv.b4", [40, 24, 2, 2, 219]),
            ("Maxpool", [40, 24, 2, 2, 109]),
            ("Conv.b5", [40, 30, 1, 1, 100]),
            ("Maxpool", [40, 30, 1, 1, 50]),
            ("Concatenate", [40, 30, 1, 2, 50]),
            ("Conv.c1", [40, 60, 1, 1, 41]),
            ("Avgpool", [40, 60, 1, 1, 20]),
        ];
        assert_eq!(rows.len(), 18);
        for (row, (layer, dims)) in rows.iter().zip(want) {
            assert_eq!(row.layer, layer);
            assert_eq!(row.dims, dims, "{layer}");
        }
        assert_eq!(AdsNetConfig::full().head_inputs().unwrap(), 1200);
    }

    #[test]
    fn first_temporal_kernels_follow_sampling_rate() {
        let cfg = AdsNetConfig::full();
        let fs = 250;
        let first = |b: &[Stage]| match b[0] {
            Stage::Conv { kernel, .. } => kernel[2],
            _ => unreachable!(),
        };
        assert_eq!(first(&cfg.block1), fs / 2);
        assert_eq!(first(&cfg.block2), fs / 4);
    }

    #[test]
    fn reduced_shape_chain() {
        let rows = AdsNetConfig::reduced().shape_chain(2).unwrap();
        assert_eq!(rows.len(), 18);
        let concat = rows.iter().find(|r| r.layer == "Concatenate").unwrap();
        assert_eq!(concat.dims, [2, 8, 1, 2, 2]);
        assert_eq!(rows.last().unwrap().dims, [2, 16, 1, 1, 1]);
    }

    #[test]
    fn mismatched_blocks_name_the_layer() {
        let mut cfg = AdsNetConfig::reduced();
        cfg.block2.pop();
        let err = cfg.shape_chain(1).unwrap_err().to_string();
        assert!(err.contains("Concatenate"), "{err}");
        let mut cfg = AdsNetConfig::reduced();
        cfg.block1[0] = conv(4, [5, 2, 9], false);
        let err = cfg.shape_chain(1).unwrap_err().to_string();
        assert!(err.contains("Conv.a1"), "{err}");
    }

    #[test]
    fn parameter_count_is_stable() {
        let cfg = AdsNetConfig::reduced();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 1).unwrap();
        // attention 64·8·2 + 64·64; convs with bias, gamma, beta; head 16·4 + 4
        let convs = [
            (4, 1 * 2 * 2 * 9),
            (6, 4 * 2 * 2 * 5),
            (8, 6 * 2 * 2 * 4),
            (3, 1 * 2 * 2 * 5),
            (4, 3 * 2 * 2 * 5),
            (6, 4 * 5),
            (7, 6 * 3),
            (8, 7 * 2 * 2 * 2),
            (16, 8 * 2),
        ];
        let conv_total: usize = convs.iter().map(|(o, k)| o * k + 3 * o).sum();
        assert_eq!(net.trainable_count(), 64 * 8 * 2 + 64 * 64 + conv_total + 16 * 4 + 4);
        assert_eq!(net.trainable_count(), 8016);
    }

    #[test]
    fn full_parameter_count() {
        let cfg = AdsNetConfig::full();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 1).unwrap();
        assert_eq!(net.trainable_count(), 1_371_311);
    }

    #[test]
    fn forward_reports_shapes_and_probabilities() {
        let cfg = AdsNetConfig::reduced();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 2).unwrap();
        let x = random_batch(&cfg, 3, 9);
        let fwd = net.forward(&x).unwrap();
        assert_eq!(fwd.shapes, cfg.shape_chain(3).unwrap());
        assert!(fwd.logits.iter().all(|v| v.is_finite()));
        for row in softmax_rows(&fwd.logits, 4).chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = AdsNetConfig::reduced();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 3).unwrap();
        let x = random_batch(&cfg, 1, 10);
        assert_eq!(net.logits(&x).unwrap(), net.logits(&x).unwrap());
        let again = AdsNet::new(cfg.clone(), identity_gather(&cfg), 3).unwrap();
        assert_eq!(net.logits(&x).unwrap(), again.logits(&x).unwrap());
    }

    #[test]
    fn zero_head_gives_ln4() {
        let cfg = AdsNetConfig::reduced();
        let mut net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 4).unwrap();
        net.zero_head();
        let x = random_batch(&cfg, 4, 11);
        let (loss, _) = net.eval_loss(&x, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        let (loss, _) = net.loss_and_grads(&x, &[3, 3, 1, 0], 5).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range() {
        let cfg = AdsNetConfig::reduced();
        let mut net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 4).unwrap();
        let x = random_batch(&cfg, 2, 11);
        assert!(net.loss_and_grads(&x, &[0, 4], 0).is_err());
    }

    #[test]
    fn predict_ties_and_one_hot() {
        assert_eq!(argmax_rows(&[0.0; 8], 4), vec![0, 0]);
        assert_eq!(argmax_rows(&[0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0], 4), vec![2, 1]);
    }

    #[test]
    fn batch_permutation_permutes_predictions() {
        let cfg = AdsNetConfig::reduced();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 6).unwrap();
        let x = random_batch(&cfg, 3, 12);
        let per = cfg.channels * cfg.samples;
        let mut swapped = x[2 * per..].to_vec();
        swapped.extend_from_slice(&x[..2 * per]);
        let a = net.logits(&x).unwrap();
        let b = net.logits(&swapped).unwrap();
        assert_eq!(&b[..4], &a[8..]);
        assert_eq!(&b[4..], &a[..8]);
    }

    #[test]
    fn channel_permutation_with_consistent_montage() {
        let cfg = AdsNetConfig::reduced();
        let map = MontageMap::reduced_4x4();
        let names: Vec<String> = map.names().to_vec();
        let net = AdsNet::with_montage(cfg.clone(), &map, &names, 7).unwrap();
        let x = random_batch(&cfg, 2, 13);
        let mut rng = CounterRng::new(14, &[]);
        let mut perm: Vec<usize> = (0..16).collect();
        rng.shuffle(&mut perm);
        let permuted_names: Vec<String> = perm.iter().map(|&i| names[i].clone()).collect();
        let t = cfg.samples;
        let mut px = Vec::with_capacity(x.len());
        for trial in x.chunks(16 * t) {
            for &i in &perm {
                px.extend_from_slice(&trial[i * t..(i + 1) * t]);
            }
        }
        let mut other = AdsNet::with_montage(cfg.clone(), &map, &permuted_names, 7).unwrap();
        for (dst, src) in other.params_mut().iter_mut().zip(net.params()) {
            dst.value = src.value.clone();
        }
        let a = net.logits(&x).unwrap();
        let b = other.logits(&px).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12, "{u} vs {v}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = AdsNetConfig::reduced();
        let mut net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 8).unwrap();
        net.set_input_scale(0.1 + 1e-17).unwrap();
        let ckpt = net.to_checkpoint([("seed".to_string(), "8".to_string())]);
        for name in ["attn.wq", "b1.conv1.w", "b1.bn1.gamma", "b2.conv5.b", "b3.bn1.rvar", "head.w"] {
            assert!(ckpt.get(name).is_some(), "{name}");
        }
        let bytes = ckpt.encode().unwrap();
        let back = ModelCheckpoint::decode(&bytes).unwrap();
        let restored = AdsNet::from_checkpoint(cfg.clone(), identity_gather(&cfg), &back).unwrap();
        let mut rounded = net.clone();
        rounded.round_to_f32();
        let x = random_batch(&cfg, 2, 15);
        assert_eq!(restored.input_scale(), net.input_scale());
        assert_eq!(restored.logits(&x).unwrap(), rounded.logits(&x).unwrap());
    }

    #[test]
    fn training_step_updates_running_stats() {
        let cfg = AdsNetConfig::reduced();
        let mut net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 9).unwrap();
        let x = random_batch(&cfg, 4, 16);
        let before = net.param("b1.bn1.rmean").unwrap().value.clone();
        net.loss_and_grads(&x, &[0, 1, 2, 3], 1).unwrap();
        assert_ne!(net.param("b1.bn1.rmean").unwrap().value, before);
    }

    #[test]
    fn reduced_network_gradients() {
        let cfg = AdsNetConfig::reduced();
        let net = AdsNet::new(cfg.clone(), identity_gather(&cfg), 10).unwrap();
        let x = random_batch(&cfg, 3, 17);
        let labels = [0, 2, 3];
        let key = 99;
        let (_, grads) = net.clone().loss_and_grads(&x, &labels, key).unwrap();
        let mut worst = 0.0f64;
        for (i, p) in net.params().iter().enumerate().filter(|(_, p)| p.trainable) {
            let r = grad_check(p.value.data(), &grads[i], 1e-5, |v| {
                let mut probe = net.clone();
                probe.params_mut()[i].value.data_mut().copy_from_slice(v);
                probe.loss_and_grads(&x, &labels, key).unwrap().0
            });
            assert!(r.max_rel_error < 1e-5, "{}: {r:?}", p.name);
            worst = worst.max(r.max_rel_error);
        }
        assert!(worst < 1e-5);
    }
}
