//! Transformer encoder trained to predict a masked token from the `CLS` summary.
//!
//! Frame → token embedding + sinusoidal position → `blocks` × (multi-head
//! self-attention, residual + norm, two-layer ReLU feed-forward, residual +
//! norm) → row 0 → linear head over the vocabulary.
//!
//! Head outputs are concatenated without an output projection. The position
//! code follows the sine/cosine form with element index `i` in the exponent
//! (`i / d`) for both the even (sine) and odd (cosine) components.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{
    softmax, AdamConfig, Gradients, Matrix, OptimizerState, ParameterSet, Scalar, Tape, Var,
    LAYER_NORM_EPS,
};
use crate::sampler::{sample_random_mask, MaskedSample};
use crate::tokenizer::TokenSequence;

pub const DEFAULT_D: usize = 256;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_BLOCKS: usize = 1;
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_SEED: u64 = 7;
const INIT_RANGE: f64 = 0.1;

/// Architecture and training sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub blocks: usize,
    /// Framed sequence length (payload budget + 1 for `CLS`).
    pub frame_length: usize,
    pub vocab_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture for a given vocabulary and frame length.
    pub fn new(vocab_size: usize, frame_length: usize) -> Self {
        ModelConfig {
            d: DEFAULT_D,
            heads: DEFAULT_HEADS,
            ffn_hidden: 2 * DEFAULT_D,
            blocks: DEFAULT_BLOCKS,
            frame_length,
            vocab_size,
            epochs: 5,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: DEFAULT_SEED,
        }
    }

    /// Sets `d` and keeps the feed-forward width at `2d`.
    pub fn with_width(mut self, d: usize, heads: usize) -> Self {
        self.d = d;
        self.heads = heads;
        self.ffn_hidden = 2 * d;
        self
    }

    pub fn head_width(&self) -> usize {
        self.d / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d", self.d),
            ("heads", self.heads),
            ("ffn_hidden", self.ffn_hidden),
            ("blocks", self.blocks),
            ("frame_length", self.frame_length),
            ("vocab_size", self.vocab_size),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Validation(format!(
                "d = {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    /// Names and shapes of every tensor, in initialization order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (d, w, h) = (self.d, self.head_width(), self.ffn_hidden);
        let mut out = vec![("token_embeddings".to_string(), (self.vocab_size, d))];
        for b in 0..self.blocks {
            for l in 0..self.heads {
                for m in ["wq", "wk", "wv"] {
                    out.push((format!("block{b}.head{l}.{m}"), (d, w)));
                }
            }
            out.push((format!("block{b}.attn_norm.gain"), (1, d)));
            out.push((format!("block{b}.attn_norm.bias"), (1, d)));
            out.push((format!("block{b}.ffn.w1"), (d, h)));
            out.push((format!("block{b}.ffn.b1"), (1, h)));
            out.push((format!("block{b}.ffn.w2"), (h, d)));
            out.push((format!("block{b}.ffn.b2"), (1, d)));
            out.push((format!("block{b}.ffn_norm.gain"), (1, d)));
            out.push((format!("block{b}.ffn_norm.bias"), (1, d)));
        }
        out.push(("head.weight".to_string(), (d, self.vocab_size)));
        out.push(("head.bias".to_string(), (1, self.vocab_size)));
        out
    }
}

/// Sinusoidal position code, one row per frame position.
pub fn positional_encoding<T: Scalar>(frame_length: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(frame_length, d, |j, i| {
        let angle = j as f64 / 10000f64.powf(i as f64 / d as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

struct BlockLayout {
    wq: Vec<usize>,
    wk: Vec<usize>,
    wv: Vec<usize>,
    attn_gain: usize,
    attn_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ffn_gain: usize,
    ffn_bias: usize,
}

/// Parameter indices of the encoder inside a [`ParameterSet`].
pub(crate) struct Layout {
    embeddings: usize,
    blocks: Vec<BlockLayout>,
}

impl Layout {
    pub(crate) fn resolve<T: Scalar>(params: &ParameterSet<T>, config: &ModelConfig) -> Result<Self> {
        let find = |name: String| {
            params
                .index_of(&name)
                .ok_or_else(|| Error::Validation(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let per_head = |m: &str| {
                (0..config.heads)
                    .map(|l| find(format!("block{b}.head{l}.{m}")))
                    .collect::<Result<Vec<_>>>()
            };
            blocks.push(BlockLayout {
                wq: per_head("wq")?,
                wk: per_head("wk")?,
                wv: per_head("wv")?,
                attn_gain: find(format!("block{b}.attn_norm.gain"))?,
                attn_bias: find(format!("block{b}.attn_norm.bias"))?,
                w1: find(format!("block{b}.ffn.w1"))?,
                b1: find(format!("block{b}.ffn.b1"))?,
                w2: find(format!("block{b}.ffn.w2"))?,
                b2: find(format!("block{b}.ffn.b2"))?,
                ffn_gain: find(format!("block{b}.ffn_norm.gain"))?,
                ffn_bias: find(format!("block{b}.ffn_norm.bias"))?,
            });
        }
        Ok(Layout {
            embeddings: find("token_embeddings".into())?,
            blocks,
        })
    }
}

/// Borrowed view used to record forward passes in either precision.
pub(crate) struct Encoder<'a, T: Scalar> {
    pub(crate) params: &'a ParameterSet<T>,
    pub(crate) layout: &'a Layout,
    pub(crate) positions: &'a Matrix<T>,
    pub(crate) config: &'a ModelConfig,
}

impl<T: Scalar> Encoder<'_, T> {
    pub(crate) fn embed(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        if ids.len() != self.positions.rows() {
            return Err(Error::Shape(format!(
                "frame of {} ids for frame length {}",
                ids.len(),
                self.positions.rows()
            )));
        }
        let table = tape.param(self.params, self.layout.embeddings);
        let x = tape.gather(table, ids)?;
        tape.add_constant(x, self.positions)
    }

    /// Multi-head attention. With `queries` set to a row subset of `x`, only
    /// those output rows are produced.
    fn attention(
        &self,
        tape: &mut Tape<T>,
        block: &BlockLayout,
        x: Var,
        queries: Var,
        mut weights_out: Option<&mut Vec<Matrix<T>>>,
    ) -> Result<Var> {
        let scale = T::lit(1.0 / (self.config.head_width() as f64).sqrt());
        let mut heads = Vec::with_capacity(block.wq.len());
        for l in 0..block.wq.len() {
            let wq = tape.param(self.params, block.wq[l]);
            let wk = tape.param(self.params, block.wk[l]);
            let wv = tape.param(self.params, block.wv[l]);
            let q = tape.matmul(queries, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let scores = tape.matmul_transposed(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scores)?;
            if let Some(out) = weights_out.as_deref_mut() {
                out.push(tape.value(attn).clone());
            }
            heads.push(tape.matmul(attn, v)?);
        }
        tape.concat_cols(&heads)
    }

    fn block(&self, tape: &mut Tape<T>, block: &BlockLayout, x: Var, cls_only: bool) -> Result<Var> {
        let queries = if cls_only { tape.row_slice(x, 0, 1)? } else { x };
        let attended = self.attention(tape, block, x, queries, None)?;
        let eps = T::lit(LAYER_NORM_EPS);
        let resid = tape.add(queries, attended)?;
        let (g, b) = (
            tape.param(self.params, block.attn_gain),
            tape.param(self.params, block.attn_bias),
        );
        let y = tape.layer_norm(resid, g, b, eps)?;

        let w1 = tape.param(self.params, block.w1);
        let b1 = tape.param(self.params, block.b1);
        let w2 = tape.param(self.params, block.w2);
        let b2 = tape.param(self.params, block.b2);
        let h = tape.matmul(y, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h)?;
        let f = tape.matmul(h, w2)?;
        let f = tape.add_row(f, b2)?;
        let resid = tape.add(y, f)?;
        let (g, b) = (
            tape.param(self.params, block.ffn_gain),
            tape.param(self.params, block.ffn_bias),
        );
        tape.layer_norm(resid, g, b, eps)
    }

    /// Runs all blocks on an embedded frame. With `cls_only`, the last block
    /// computes row 0 alone, which is all the prediction heads read.
    pub(crate) fn encode(&self, tape: &mut Tape<T>, x: Var, cls_only: bool) -> Result<Var> {
        let n = self.layout.blocks.len();
        let mut x = x;
        for (i, block) in self.layout.blocks.iter().enumerate() {
            x = self.block(tape, block, x, cls_only && i + 1 == n)?;
        }
        Ok(x)
    }

    /// `CLS` row of the encoder output for a framed id sequence.
    pub(crate) fn cls(&self, tape: &mut Tape<T>, ids: &[usize]) -> Result<Var> {
        let x = self.embed(tape, ids)?;
        let out = self.encode(tape, x, true)?;
        tape.row_slice(out, 0, 1)
    }

    /// `1×classes` logits of a linear head on the `CLS` row.
    pub(crate) fn head_logits(
        &self,
        tape: &mut Tape<T>,
        cls: Var,
        weight: usize,
        bias: usize,
    ) -> Result<Var> {
        let w = tape.param(self.params, weight);
        let b = tape.param(self.params, bias);
        let logits = tape.matmul(cls, w)?;
        tape.add_row(logits, b)
    }
}

/// Summary vector of one message (the final `CLS` row).
#[derive(Debug, Clone, PartialEq)]
pub struct MessageEmbedding {
    pub message_index: usize,
    pub vector: Vec<f32>,
}

/// Attention output for one block together with the per-head weight rows.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Matrix<f32>,
    pub weights: Vec<Matrix<f32>>,
}

/// All learnable tensors of the encoder and its vocabulary head.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    params: ParameterSet<f32>,
    positions: Matrix<f32>,
    layout_head: (usize, usize),
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Parameters initialized from `rng`: norm gains 1, norm biases 0, all else uniform(±0.1).
pub(crate) fn init_parameters(
    shapes: &[(String, (usize, usize))],
    rng: &mut impl Rng,
) -> Result<ParameterSet<f32>> {
    let mut params = ParameterSet::new();
    for (name, (r, c)) in shapes {
        let value = if name.ends_with("norm.gain") {
            Matrix::filled(*r, *c, 1.0)
        } else if name.ends_with("norm.bias") {
            Matrix::zeros(*r, *c)
        } else {
            Matrix::from_fn(*r, *c, |_, _| {
                rng.random_range(-INIT_RANGE..INIT_RANGE) as f32
            })
        };
        params.insert(name.clone(), value)?;
    }
    Ok(params)
}

impl ModelState {
    /// Fresh, randomly initialized state seeded by `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::init_with(config, &mut rng)
    }

    fn init_with(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let params = init_parameters(&config.parameter_shapes(), rng)?;
        Self::from_parameters(*config, params)
    }

    /// Wraps existing tensors, checking names and shapes against `config`.
    pub fn from_parameters(config: ModelConfig, params: ParameterSet<f32>) -> Result<Self> {
        config.validate()?;
        let expected = config.parameter_shapes();
        if expected.len() != params.len() {
            return Err(Error::Validation(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Validation(format!("missing tensor {name}")))?;
            if p.value.shape() != *shape {
                return Err(Error::Validation(format!(
                    "tensor {name} is {:?}, expected {:?}",
                    p.value.shape(),
                    shape
                )));
            }
            if !p.value.is_finite() {
                return Err(Error::Validation(format!("tensor {name} has non-finite values")));
            }
        }
        let layout_head = (
            params.index_of("head.weight").unwrap(),
            params.index_of("head.bias").unwrap(),
        );
        Ok(ModelState {
            positions: positional_encoding(config.frame_length, config.d),
            config,
            params,
            layout_head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet<f32> {
        &self.params
    }

    pub(crate) fn positions(&self) -> &Matrix<f32> {
        &self.positions
    }

    pub fn into_parts(self) -> (ModelConfig, ParameterSet<f32>) {
        (self.config, self.params)
    }

    /// Same model evaluated in 64-bit arithmetic (for gradient checks).
    pub fn params_f64(&self) -> ParameterSet<f64> {
        self.params.cast()
    }

    fn with_encoder<R>(&self, f: impl FnOnce(&Encoder<'_, f32>) -> Result<R>) -> Result<R> {
        let layout = Layout::resolve(&self.params, &self.config)?;
        f(&Encoder {
            params: &self.params,
            layout: &layout,
            positions: &self.positions,
            config: &self.config,
        })
    }

    /// Token embeddings plus position code for a framed id sequence.
    pub fn embed(&self, framed_ids: &[usize]) -> Result<Matrix<f32>> {
        self.with_encoder(|enc| {
            let mut tape = Tape::new();
            let x = enc.embed(&mut tape, framed_ids)?;
            Ok(tape.value(x).clone())
        })
    }

    /// Multi-head self-attention of block `block` applied to `x`.
    pub fn attention(&self, block: usize, x: &Matrix<f32>) -> Result<AttentionOutput> {
        if x.cols() != self.config.d {
            return Err(Error::Shape(format!(
                "attention input has {} columns, model width is {}",
                x.cols(),
                self.config.d
            )));
        }
        self.with_encoder(|enc| {
            let layout = enc.layout.blocks.get(block).ok_or_else(|| {
                Error::Index(format!("block {block} of {}", self.config.blocks))
            })?;
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut weights = Vec::new();
            let out = enc.attention(&mut tape, layout, xv, xv, Some(&mut weights))?;
            Ok(AttentionOutput {
                output: tape.value(out).clone(),
                weights,
            })
        })
    }

    /// All encoder blocks applied to every row of `x`.
    pub fn encoder_forward(&self, x: &Matrix<f32>) -> Result<Matrix<f32>> {
        if x.cols() != self.config.d {
            return Err(Error::Shape(format!(
                "encoder input has {} columns, model width is {}",
                x.cols(),
                self.config.d
            )));
        }
        self.with_encoder(|enc| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let out = enc.encode(&mut tape, xv, false)?;
            Ok(tape.value(out).clone())
        })
    }

    /// Probability of every vocabulary entry at the masked position.
    pub fn predict_masked(&self, sample: &MaskedSample) -> Result<Vec<f32>> {
        self.predict_frame(&sample.input_ids)
    }

    /// Head distribution for an arbitrary framed sequence.
    pub fn predict_frame(&self, ids: &[usize]) -> Result<Vec<f32>> {
        self.with_encoder(|enc| {
            let mut tape = Tape::new();
            let cls = enc.cls(&mut tape, ids)?;
            let logits = enc.head_logits(&mut tape, cls, self.layout_head.0, self.layout_head.1)?;
            Ok(softmax(tape.value(logits).as_slice()))
        })
    }

    /// Head distributions for several frames, reusing one parameter layout.
    pub fn predict_frames(&self, frames: &[Vec<usize>]) -> Result<Vec<Vec<f32>>> {
        self.with_encoder(|enc| {
            frames
                .iter()
                .map(|ids| {
                    let mut tape = Tape::new();
                    let cls = enc.cls(&mut tape, ids)?;
                    let logits =
                        enc.head_logits(&mut tape, cls, self.layout_head.0, self.layout_head.1)?;
                    Ok(softmax(tape.value(logits).as_slice()))
                })
                .collect()
        })
    }

    /// Cross-entropy of one masked sample.
    pub fn sample_loss(&self, sample: &MaskedSample) -> Result<f32> {
        let (loss, _) = mlm_loss(&self.params, &self.config, &self.positions, sample, false)?;
        Ok(loss)
    }

    /// Final `CLS` row for the unmasked frame.
    pub fn cls_embedding(&self, message: &TokenSequence) -> Result<MessageEmbedding> {
        self.with_encoder(|enc| {
            let mut tape = Tape::new();
            let cls = enc.cls(&mut tape, &message.framed_ids)?;
            Ok(MessageEmbedding {
                message_index: message.message_index,
                vector: tape.value(cls).as_slice().to_vec(),
            })
        })
    }
}

/// Loss of one masked sample and, when requested, its gradients.
pub fn mlm_loss<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    positions: &Matrix<T>,
    sample: &MaskedSample,
    with_grads: bool,
) -> Result<(T, Option<Gradients<T>>)> {
    let layout = Layout::resolve(params, config)?;
    let enc = Encoder {
        params,
        layout: &layout,
        positions,
        config,
    };
    let weight = params
        .index_of("head.weight")
        .ok_or_else(|| Error::Validation("missing head.weight".into()))?;
    let bias = params
        .index_of("head.bias")
        .ok_or_else(|| Error::Validation("missing head.bias".into()))?;
    let mut tape = Tape::new();
    let cls = enc.cls(&mut tape, &sample.input_ids)?;
    let logits = enc.head_logits(&mut tape, cls, weight, bias)?;
    let loss = tape.cross_entropy(logits, sample.target_id)?;
    let grads = if with_grads {
        Some(tape.gradients(loss)?)
    } else {
        None
    };
    Ok((tape.value(loss).get(0, 0), grads))
}

/// Runs one pass of mini-batch updates and returns the mean loss.
///
/// `loss_fn` is evaluated in parallel within a batch; gradients are summed in
/// batch order so results do not depend on thread scheduling.
pub(crate) fn run_batches<J: Sync>(
    params: &mut ParameterSet<f32>,
    optimizer: &mut OptimizerState<f32>,
    jobs: &[J],
    batch_size: usize,
    loss_fn: impl Fn(&ParameterSet<f32>, &J) -> Result<(f32, Gradients<f32>)> + Sync,
) -> Result<f32> {
    let mut total = 0.0f64;
    for batch in jobs.chunks(batch_size.max(1)) {
        let snapshot = &*params;
        let results: Vec<Result<(f32, Gradients<f32>)>> =
            batch.par_iter().map(|job| loss_fn(snapshot, job)).collect();
        params.zero_grad();
        let scale = 1.0 / batch.len() as f32;
        for r in results {
            let (loss, grads) = r?;
            total += loss as f64;
            params.accumulate(&grads, scale);
        }
        optimizer.step(params)?;
    }
    Ok(if jobs.is_empty() {
        0.0
    } else {
        (total / jobs.len() as f64) as f32
    })
}

/// Options for masked-token training beyond the architecture.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
}

/// Per-epoch mean training loss alongside the trained state.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub state: ModelState,
    pub epoch_losses: Vec<f32>,
}

/// Trains a fresh model on `corpus` for `config.epochs` epochs.
pub fn train(corpus: &[TokenSequence], config: &ModelConfig) -> Result<ModelState> {
    Ok(train_with(corpus, config, &TrainOptions::default())?.state)
}

pub fn train_with(
    corpus: &[TokenSequence],
    config: &ModelConfig,
    options: &TrainOptions,
) -> Result<TrainedModel> {
    if corpus.is_empty() {
        return Err(Error::Validation("cannot train on an empty corpus".into()));
    }
    if let Some(bad) = corpus.iter().find(|s| s.frame_len() != config.frame_length) {
        return Err(Error::Validation(format!(
            "message {} is framed to {} ids, model expects {}",
            bad.message_index,
            bad.frame_len(),
            config.frame_length
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let state = ModelState::init_with(config, &mut rng)?;
    let (config, mut params) = (state.config, state.params);
    let positions = state.positions;
    let mut optimizer = OptimizerState::new(&params, options.adam);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let samples: Vec<MaskedSample> = order
            .iter()
            .filter_map(|&i| sample_random_mask(&corpus[i], &mut rng))
            .collect();
        let mean = run_batches(&mut params, &mut optimizer, &samples, config.batch_size, |p, s| {
            let (loss, grads) = mlm_loss(p, &config, &positions, s, true)?;
            Ok((loss, grads.expect("requested gradients")))
        })?;
        log::info!("epoch {}/{}: mean loss {mean:.4}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }
    Ok(TrainedModel {
        state: ModelState::from_parameters(config, params)?,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{layer_norm_rows, GradientCheck};
    use crate::tokenizer::{frame, Vocabulary};

    fn tiny_config(vocab: usize, frame_length: usize) -> ModelConfig {
        ModelConfig {
            ffn_hidden: 12,
            ..ModelConfig::new(vocab, frame_length).with_width(8, 2)
        }
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let c = ModelConfig::new(10, 5).with_width(10, 4);
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn positional_values() {
        let p: Matrix<f64> = positional_encoding(4, 6);
        for i in 0..6 {
            let expected = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(p.get(0, i), expected);
        }
        assert!((p.get(1, 0) - 0.841_470_984_8).abs() < 1e-9);
        // odd components use their own index in the exponent
        assert!((p.get(1, 1) - (1.0 / 10000f64.powf(1.0 / 6.0)).cos()).abs() < 1e-12);
    }

    #[test]
    fn zero_embeddings_embed_to_positions() {
        let config = tiny_config(6, 4);
        let mut state = ModelState::init(&config).unwrap();
        let idx = state.params.index_of("token_embeddings").unwrap();
        state.params.value_mut(idx).as_mut_slice().fill(0.0);
        let x = state.embed(&[0, 4, 5, 2]).unwrap();
        assert_eq!(x, positional_encoding::<f32>(4, 8));
    }

    #[test]
    fn embed_adds_rows_by_hand() {
        let config = ModelConfig {
            ffn_hidden: 2,
            ..ModelConfig::new(5, 1).with_width(2, 1)
        };
        let state = ModelState::init(&config).unwrap();
        let e = state.params.get("token_embeddings").unwrap().value.row(0).to_vec();
        let x = state.embed(&[0]).unwrap();
        assert_eq!(x.as_slice(), &[e[0] + 0.0, e[1] + 1.0]);
        assert!(matches!(state.embed(&[9]), Err(Error::Index(_))));
    }

    #[test]
    fn zero_query_key_gives_mean_of_values() {
        let config = tiny_config(6, 5);
        let mut state = ModelState::init(&config).unwrap();
        for l in 0..2 {
            for m in ["wq", "wk"] {
                let i = state.params.index_of(&format!("block0.head{l}.{m}")).unwrap();
                state.params.value_mut(i).as_mut_slice().fill(0.0);
            }
        }
        let x = Matrix::from_fn(5, 8, |r, c| ((r * 8 + c) as f32 * 0.37).sin());
        let out = state.attention(0, &x).unwrap();
        for l in 0..2 {
            let wv = &state.params.get(&format!("block0.head{l}.wv")).unwrap().value;
            let v = crate::numerics::matmul(&x, wv).unwrap();
            for c in 0..4 {
                let mean = (0..5).map(|r| v.get(r, c)).sum::<f32>() / 5.0;
                for r in 0..5 {
                    assert!((out.output.get(r, l * 4 + c) - mean).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn single_row_attention_returns_value_row() {
        let config = tiny_config(6, 1);
        let state = ModelState::init(&config).unwrap();
        let x = Matrix::from_fn(1, 8, |_, c| c as f32 * 0.1);
        let out = state.attention(0, &x).unwrap();
        let mut expected = Vec::new();
        for l in 0..2 {
            let wv = &state.params.get(&format!("block0.head{l}.wv")).unwrap().value;
            expected.extend_from_slice(crate::numerics::matmul(&x, wv).unwrap().as_slice());
        }
        for (a, b) in out.output.as_slice().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn encoder_preserves_shape_and_zero_ffn_reduces_to_norm() {
        let config = tiny_config(6, 5);
        let mut state = ModelState::init(&config).unwrap();
        let x = Matrix::from_fn(5, 8, |r, c| ((r + 2 * c) as f32 * 0.21).cos());
        let y = state.encoder_forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(state.encoder_forward(&x).unwrap(), y);

        for name in ["block0.ffn.w1", "block0.ffn.b1", "block0.ffn.w2", "block0.ffn.b2"] {
            let i = state.params.index_of(name).unwrap();
            state.params.value_mut(i).as_mut_slice().fill(0.0);
        }
        let attended = state.attention(0, &x).unwrap().output;
        let ones = vec![1.0f32; 8];
        let zeros = vec![0.0f32; 8];
        let first = layer_norm_rows(&x.add(&attended).unwrap(), &ones, &zeros, 1e-5).unwrap();
        let expected = layer_norm_rows(&first, &ones, &zeros, 1e-5).unwrap();
        let got = state.encoder_forward(&x).unwrap();
        for (a, b) in got.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn cls_only_path_matches_full_encoder_row() {
        let config = ModelConfig {
            blocks: 2,
            ..tiny_config(7, 5)
        };
        let state = ModelState::init(&config).unwrap();
        let ids = [0, 4, 5, 6, 2];
        let full = state.encoder_forward(&state.embed(&ids).unwrap()).unwrap();
        let seq = TokenSequence {
            message_index: 0,
            tokens: vec![],
            framed_ids: ids.to_vec(),
            truncated: false,
        };
        let cls = state.cls_embedding(&seq).unwrap();
        for (a, b) in cls.vector.iter().zip(full.row(0)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn full_model_gradient_check() {
        let config = ModelConfig {
            ffn_hidden: 16,
            ..ModelConfig::new(20, 6).with_width(8, 2)
        };
        let state = ModelState::init(&config).unwrap();
        let params = state.params_f64();
        let positions = positional_encoding::<f64>(6, 8);
        let sample = MaskedSample {
            input_ids: vec![0, 7, 1, 12, 19, 2],
            target_id: 9,
            position: 2,
        };
        let check = GradientCheck::run(
            &params,
            1e-3,
            |p| Ok(mlm_loss(p, &config, &positions, &sample, false)?.0),
            |p| Ok(mlm_loss(p, &config, &positions, &sample, true)?.1.unwrap()),
        )
        .unwrap();
        assert!(check.max_relative_error <= 1e-3, "{check:?}");
    }

    fn two_template_corpus(n: usize) -> (Vocabulary, Vec<TokenSequence>) {
        let msgs: Vec<Vec<String>> = (0..n)
            .map(|i| {
                let text = if i % 2 == 0 {
                    format!("INFO opened file f{}", i % 9)
                } else {
                    format!("WARN closed socket s{}", i % 7)
                };
                text.split(' ').map(str::to_string).collect()
            })
            .collect();
        let vocab = Vocabulary::build(&msgs).unwrap();
        let m = crate::tokenizer::compute_frame_length(&msgs).unwrap();
        let seqs = msgs
            .into_iter()
            .enumerate()
            .map(|(i, t)| frame(i, t, m, &vocab))
            .collect();
        (vocab, seqs)
    }

    fn small(vocab: &Vocabulary, seqs: &[TokenSequence], epochs: usize) -> ModelConfig {
        ModelConfig {
            epochs,
            batch_size: 8,
            ..ModelConfig::new(vocab.len(), seqs[0].frame_len()).with_width(16, 2)
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let (vocab, seqs) = two_template_corpus(40);
        let state = ModelState::init(&small(&vocab, &seqs, 0)).unwrap();
        let probs = state.predict_masked(&MaskedSample::at(&seqs[0], 2)).unwrap();
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let mean: f32 = seqs
            .iter()
            .map(|s| state.sample_loss(&MaskedSample::at(s, 1)).unwrap())
            .sum::<f32>()
            / seqs.len() as f32;
        let uniform = (vocab.len() as f32).ln();
        assert!((mean - uniform).abs() <= 0.1 * uniform, "{mean} vs {uniform}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (vocab, seqs) = two_template_corpus(10);
        let config = small(&vocab, &seqs, 0);
        assert_eq!(train(&seqs, &config).unwrap(), ModelState::init(&config).unwrap());
        assert!(matches!(train(&[], &config), Err(Error::Validation(_))));
    }

    #[test]
    fn training_learns_two_templates() {
        let (vocab, seqs) = two_template_corpus(120);
        let config = small(&vocab, &seqs, 40);
        let run = train_with(&seqs, &config, &TrainOptions::default()).unwrap();
        assert!(run.epoch_losses.last() < run.epoch_losses.first(), "{:?}", run.epoch_losses);

        let again = train_with(&seqs, &config, &TrainOptions::default()).unwrap();
        assert_eq!(again.state, run.state);

        // "INFO" always opens the first template.
        let probs = run.state.predict_masked(&MaskedSample::at(&seqs[0], 1)).unwrap();
        let argmax = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(vocab.decode(argmax), Some("INFO"));

        let emb: Vec<Vec<f32>> = seqs
            .iter()
            .map(|s| run.state.cls_embedding(s).unwrap().vector)
            .collect();
        assert_eq!(emb[0].len(), 16);
        assert_eq!(emb[0], run.state.cls_embedding(&seqs[0]).unwrap().vector);
        let cos = |a: &[f32], b: &[f32]| {
            let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
            let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
            dot / (na * nb)
        };
        let (mut intra, mut inter, mut ni, mut ne) = (0.0, 0.0, 0, 0);
        for i in 0..seqs.len() {
            for j in i + 1..seqs.len() {
                let c = cos(&emb[i], &emb[j]);
                if i % 2 == j % 2 {
                    intra += c;
                    ni += 1;
                } else {
                    inter += c;
                    ne += 1;
                }
            }
        }
        assert!(intra / ni as f32 > inter / ne as f32);
    }
}
