//! A small BERT-style transformer encoder for text classification.
//!
//! Besides class logits, a forward pass exposes everything the distillation
//! losses consume: the embedding output, every layer's hidden states and
//! pre-softmax attention score matrices, the pooled sequence representation
//! h(X), and the domain sub-network's outputs — the transferable-knowledge
//! vector h_d(X) = tanh((h(X) + E_D[d]) W + b) and domain logits.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::tensor::{seeded_rng, Parameter, Tensor, TensorError};

/// How sequences are pooled into h(X).
///
/// `Mean` is the default: cosine similarity is scale-invariant, so prototype
/// scores do not depend on the choice, and the mean keeps the domain
/// sub-network's pre-activations independent of sequence length. `Sum` is the
/// literal unnormalized form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    Sum,
}

/// Which vector feeds the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// The pooled representation h(X), consistent with how prototypes and
    /// the transfer head are defined.
    #[default]
    Pooled,
    /// The final-layer [CLS] vector.
    Cls,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_classes: usize,
    pub num_domains: usize,
    pub dropout_rate: f64,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub classifier_input: ClassifierInput,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.hidden_dim % self.num_heads != 0 {
            return Err(TensorError::Invalid {
                op: "encoder_config",
                msg: format!(
                    "hidden_dim {} not divisible by num_heads {}",
                    self.hidden_dim, self.num_heads
                ),
            });
        }
        if self.num_layers < 1 || self.max_seq_len < 2 {
            return Err(TensorError::Invalid {
                op: "encoder_config",
                msg: "need num_layers >= 1 and max_seq_len >= 2".into(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// Train/eval switch; dropout only fires in training mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Everything observable from one encoder pass over a batch.
pub struct ForwardTrace {
    /// Post-layer-norm embedding output, [B, N, H].
    pub embedding_out: Tensor,
    /// Output of each encoder layer, [B, N, H] each.
    pub hidden_states: Vec<Tensor>,
    /// Pre-softmax attention scores QK^T/sqrt(d_head), [B, A, N, N] each.
    pub attention_scores: Vec<Tensor>,
    /// Pooled sequence representation h(X), [B, H].
    pub pooled: Tensor,
    /// Transferable-knowledge vector h_d(X), [B, H].
    pub transfer_vec: Tensor,
    /// Class logits, [B, M].
    pub class_logits: Tensor,
    /// Domain logits from the sub-network classifier, [B, K].
    pub domain_logits: Tensor,
}

/// Which domain-embedding rows the sub-network adds to the pooled vectors.
#[derive(Debug, Clone, Copy)]
pub enum DomainRows<'a> {
    /// One row per sample, selected by its true domain label.
    PerSample(&'a [usize]),
    /// The mean of all learned rows, for samples from a domain this model
    /// never saw (zero-shot distillation targets).
    MeanEmbedding,
}

/// The domain sub-network: a learned embedding per domain label, a tanh
/// projection producing the transferable-knowledge vector, and a linear
/// domain classifier on top of it.
pub struct DomainSubnet {
    pub domain_embedding: Parameter, // [K, H]
    pub weight: Parameter,           // [H, H]
    pub bias: Parameter,             // [H]
    pub classifier_weight: Parameter, // [H, K]
    pub classifier_bias: Parameter,  // [K]
}

impl DomainSubnet {
    fn new(prefix: &str, k: usize, h: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        DomainSubnet {
            domain_embedding: Parameter::randn(
                format!("{prefix}.domain_embedding"),
                &[k, h],
                INIT_STD,
                trainable,
                rng,
            ),
            weight: Parameter::randn(format!("{prefix}.weight"), &[h, h], INIT_STD, trainable, rng),
            bias: Parameter::zeros(format!("{prefix}.bias"), &[h], trainable),
            classifier_weight: Parameter::randn(
                format!("{prefix}.classifier_weight"),
                &[h, k],
                INIT_STD,
                trainable,
                rng,
            ),
            classifier_bias: Parameter::zeros(format!("{prefix}.classifier_bias"), &[k], trainable),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.domain_embedding,
            &self.weight,
            &self.bias,
            &self.classifier_weight,
            &self.classifier_bias,
        ]
    }
}

struct EncoderLayer {
    wq: Parameter,
    bq: Parameter,
    wk: Parameter,
    bk: Parameter,
    wv: Parameter,
    bv: Parameter,
    wo: Parameter,
    bo: Parameter,
    attn_ln_gamma: Parameter,
    attn_ln_beta: Parameter,
    ffn_w1: Parameter,
    ffn_b1: Parameter,
    ffn_w2: Parameter,
    ffn_b2: Parameter,
    ffn_ln_gamma: Parameter,
    ffn_ln_beta: Parameter,
}

impl EncoderLayer {
    fn new(prefix: &str, h: usize, f: usize, trainable: bool, rng: &mut ChaCha8Rng) -> Self {
        let mat = |name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Parameter::randn(
                format!("{prefix}.{name}"),
                &[rows, cols],
                INIT_STD,
                trainable,
                rng,
            )
        };
        EncoderLayer {
            wq: mat("attn.wq", h, h, rng),
            bq: Parameter::zeros(format!("{prefix}.attn.bq"), &[h], trainable),
            wk: mat("attn.wk", h, h, rng),
            bk: Parameter::zeros(format!("{prefix}.attn.bk"), &[h], trainable),
            wv: mat("attn.wv", h, h, rng),
            bv: Parameter::zeros(format!("{prefix}.attn.bv"), &[h], trainable),
            wo: mat("attn.wo", h, h, rng),
            bo: Parameter::zeros(format!("{prefix}.attn.bo"), &[h], trainable),
            attn_ln_gamma: Parameter::ones(format!("{prefix}.attn.ln_gamma"), &[h], trainable),
            attn_ln_beta: Parameter::zeros(format!("{prefix}.attn.ln_beta"), &[h], trainable),
            ffn_w1: mat("ffn.w1", h, f, rng),
            ffn_b1: Parameter::zeros(format!("{prefix}.ffn.b1"), &[f], trainable),
            ffn_w2: mat("ffn.w2", f, h, rng),
            ffn_b2: Parameter::zeros(format!("{prefix}.ffn.b2"), &[h], trainable),
            ffn_ln_gamma: Parameter::ones(format!("{prefix}.ffn.ln_gamma"), &[h], trainable),
            ffn_ln_beta: Parameter::zeros(format!("{prefix}.ffn.ln_beta"), &[h], trainable),
        }
    }

    fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.attn_ln_gamma,
            &self.attn_ln_beta,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ffn_ln_gamma,
            &self.ffn_ln_beta,
        ]
    }
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;
const MASK_BIAS: f64 = -1e30;

/// The encoder with its classification head and domain sub-network.
pub struct EncoderModel {
    pub config: EncoderConfig,
    token_embedding: Parameter,    // [V, H]
    position_embedding: Parameter, // [max_seq_len, H]
    emb_ln_gamma: Parameter,
    emb_ln_beta: Parameter,
    layers: Vec<EncoderLayer>,
    classifier_weight: Parameter, // [H, M]
    classifier_bias: Parameter,   // [M]
    pub subnet: DomainSubnet,
}

impl EncoderModel {
    /// Fresh model with normal(0, 0.02) matrices and zero biases, seeded.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self, TensorError> {
        Self::new_with_trainable(config, seed, true)
    }

    pub fn new_with_trainable(
        config: EncoderConfig,
        seed: u64,
        trainable: bool,
    ) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = seeded_rng(seed, "encoder-init");
        let (h, f) = (config.hidden_dim, config.ffn_dim);
        let mut model = EncoderModel {
            token_embedding: Parameter::randn(
                "embeddings.token",
                &[config.vocab_size, h],
                INIT_STD,
                trainable,
                &mut rng,
            ),
            position_embedding: Parameter::randn(
                "embeddings.position",
                &[config.max_seq_len, h],
                INIT_STD,
                trainable,
                &mut rng,
            ),
            emb_ln_gamma: Parameter::ones("embeddings.ln_gamma", &[h], trainable),
            emb_ln_beta: Parameter::zeros("embeddings.ln_beta", &[h], trainable),
            layers: Vec::new(),
            classifier_weight: Parameter::randn(
                "classifier.weight",
                &[h, config.num_classes],
                INIT_STD,
                trainable,
                &mut rng,
            ),
            classifier_bias: Parameter::zeros("classifier.bias", &[config.num_classes], trainable),
            subnet: DomainSubnet::new("subnet", config.num_domains, h, trainable, &mut rng),
            config,
        };
        model.layers = (0..model.config.num_layers)
            .map(|l| EncoderLayer::new(&format!("encoder.layer{l}"), h, f, trainable, &mut rng))
            .collect();
        Ok(model)
    }

    /// All parameters in a fixed order; names are unique within the model.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut out = self.body_params();
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out.extend(self.subnet.params());
        out
    }

    fn body_params(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.emb_ln_gamma,
            &self.emb_ln_beta,
        ];
        for layer in &self.layers {
            out.extend(layer.params());
        }
        out
    }

    /// Encoder body plus the classification head (prediction-phase training).
    pub fn body_and_classifier_params(&self) -> Vec<&Parameter> {
        let mut out = self.body_params();
        out.push(&self.classifier_weight);
        out.push(&self.classifier_bias);
        out
    }

    /// Encoder body plus the domain sub-network: the parameters reached by
    /// the intermediate-phase distillation losses.
    pub fn body_and_subnet_params(&self) -> Vec<&Parameter> {
        let mut out = self.body_params();
        out.extend(self.subnet.params());
        out
    }

    /// Full forward pass over a batch.
    ///
    /// Token ids must be below vocab_size and the batch non-empty. Padded
    /// positions are excluded from attention and pooling, so appending
    /// padding never changes the logits.
    pub fn encode(
        &self,
        batch: &Batch,
        domains: DomainRows,
        mode: Mode,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ForwardTrace, TensorError> {
        let b = batch.len();
        if b == 0 {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: "empty batch".into(),
            });
        }
        let n = batch.seq_len;
        if n > self.config.max_seq_len {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!(
                    "sequence length {n} exceeds max_seq_len {}",
                    self.config.max_seq_len
                ),
            });
        }
        let h = self.config.hidden_dim;
        let a = self.config.num_heads;
        let dh = self.config.head_dim();
        let drop = |t: Tensor, rng: &mut ChaCha8Rng| -> Tensor {
            match mode {
                Mode::Train => t.dropout(self.config.dropout_rate, rng),
                Mode::Eval => t,
            }
        };

        let token_ids: Vec<usize> = batch.token_ids.iter().map(|&id| id as usize).collect();
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..n).collect();
        let tok = self.token_embedding.tensor.gather_rows(&token_ids)?;
        let pos = self.position_embedding.tensor.gather_rows(&positions)?;
        let emb = tok
            .add(&pos)?
            .layer_norm(&self.emb_ln_gamma.tensor, &self.emb_ln_beta.tensor, LN_EPS)?;
        let emb = drop(emb, dropout_rng);
        let embedding_out = emb.reshape(&[b, n, h])?;

        // Additive attention bias: 0 on valid keys, a large negative on
        // padding keys, identical for every query row and head.
        let mut attn_bias = vec![0.0; b * a * n * n];
        for r in 0..b {
            for key in 0..n {
                if batch.mask[r * n + key] == 0.0 {
                    for head in 0..a {
                        for q in 0..n {
                            attn_bias[((r * a + head) * n + q) * n + key] = MASK_BIAS;
                        }
                    }
                }
            }
        }

        let mut x = emb; // [B*N, H]
        let mut hidden_states = Vec::with_capacity(self.layers.len());
        let mut attention_scores = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let split_heads = |t: Tensor| -> Result<Tensor, TensorError> {
                t.reshape(&[b, n, a, dh])?
                    .swap_dims12()?
                    .reshape(&[b * a, n, dh])
            };
            let q = split_heads(x.matmul(&layer.wq.tensor)?.add_bias(&layer.bq.tensor)?)?;
            let k = split_heads(x.matmul(&layer.wk.tensor)?.add_bias(&layer.bk.tensor)?)?;
            let v = split_heads(x.matmul(&layer.wv.tensor)?.add_bias(&layer.bv.tensor)?)?;
            let scores = q
                .bmm(&k.transpose_last2()?)?
                .scale(1.0 / (dh as f64).sqrt())
                .reshape(&[b, a, n, n])?;
            let probs = scores.softmax_with_bias(3, &attn_bias)?;
            let probs = drop(probs, dropout_rng).reshape(&[b * a, n, n])?;
            let ctx = probs
                .bmm(&v)?
                .reshape(&[b, a, n, dh])?
                .swap_dims12()?
                .reshape(&[b * n, h])?;
            let attn_out = drop(
                ctx.matmul(&layer.wo.tensor)?.add_bias(&layer.bo.tensor)?,
                dropout_rng,
            );
            let x1 = x.add(&attn_out)?.layer_norm(
                &layer.attn_ln_gamma.tensor,
                &layer.attn_ln_beta.tensor,
                LN_EPS,
            )?;
            let ffn = x1
                .matmul(&layer.ffn_w1.tensor)?
                .add_bias(&layer.ffn_b1.tensor)?
                .gelu()
                .matmul(&layer.ffn_w2.tensor)?
                .add_bias(&layer.ffn_b2.tensor)?;
            let ffn = drop(ffn, dropout_rng);
            x = x1.add(&ffn)?.layer_norm(
                &layer.ffn_ln_gamma.tensor,
                &layer.ffn_ln_beta.tensor,
                LN_EPS,
            )?;
            hidden_states.push(x.reshape(&[b, n, h])?);
            attention_scores.push(scores);
        }

        let final_hidden = hidden_states.last().unwrap();
        let pooled = pool(final_hidden, &batch.mask, self.config.pooling)?;
        let classifier_in = match self.config.classifier_input {
            ClassifierInput::Pooled => pooled.clone(),
            ClassifierInput::Cls => final_hidden.select_seq_position(0)?,
        };
        let class_logits = classifier_in
            .matmul(&self.classifier_weight.tensor)?
            .add_bias(&self.classifier_bias.tensor)?;
        let (transfer_vec, domain_logits) = transfer_head(&pooled, domains, &self.subnet)?;

        Ok(ForwardTrace {
            embedding_out,
            hidden_states,
            attention_scores,
            pooled,
            transfer_vec,
            class_logits,
            domain_logits,
        })
    }
}

/// Pool final hidden states [B, N, H] over non-padding positions.
pub fn pool(final_hidden: &Tensor, mask: &[f64], pooling: Pooling) -> Result<Tensor, TensorError> {
    final_hidden.masked_pool_seq(mask, pooling == Pooling::Mean)
}

/// The domain sub-network applied to pooled vectors:
/// `transfer_vec = tanh((pooled + E_D[d]) W + b)`, domain logits on top.
pub fn transfer_head(
    pooled: &Tensor,
    domains: DomainRows,
    subnet: &DomainSubnet,
) -> Result<(Tensor, Tensor), TensorError> {
    let b = pooled.shape()[0];
    let k = subnet.domain_embedding.tensor.shape()[0];
    let rows = match domains {
        DomainRows::PerSample(labels) => {
            if labels.len() != b {
                return Err(TensorError::Invalid {
                    op: "transfer_head",
                    msg: format!("{} domain labels for {} samples", labels.len(), b),
                });
            }
            subnet.domain_embedding.tensor.gather_rows(labels)?
        }
        DomainRows::MeanEmbedding => {
            let h = subnet.domain_embedding.tensor.shape()[1];
            let mean = subnet
                .domain_embedding
                .tensor
                .reshape(&[1, k, h])?
                .masked_pool_seq(&vec![1.0; k], true)?; // [1, H]
            // replicating the row via gather keeps the gradient fan-in
            mean.gather_rows(&vec![0usize; b])?
        }
    };
    let transfer_vec = pooled
        .add(&rows)?
        .matmul(&subnet.weight.tensor)?
        .add_bias(&subnet.bias.tensor)?
        .tanh();
    let domain_logits = transfer_vec
        .matmul(&subnet.classifier_weight.tensor)?
        .add_bias(&subnet.classifier_bias.tensor)?;
    Ok((transfer_vec, domain_logits))
}

/// Fraction of argmax class predictions matching the labels.
pub fn accuracy(class_logits: &Tensor, labels: &[usize]) -> f64 {
    let s = class_logits.shape();
    let (b, c) = (s[0], s[1]);
    assert_eq!(labels.len(), b);
    let d = class_logits.data();
    let mut correct = 0usize;
    for i in 0..b {
        if argmax(&d[i * c..(i + 1) * c]) == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / b as f64
}

/// Index of the largest element (first on ties).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Batch, CLS_ID, SEP_ID};
    use crate::tensor::seeded_rng;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 16,
            max_seq_len: 8,
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 4,
            ffn_dim: 32,
            num_classes: 2,
            num_domains: 3,
            dropout_rate: 0.1,
            pooling: Pooling::Mean,
            classifier_input: ClassifierInput::Pooled,
        }
    }

    /// Hand-built batch: rows of token ids padded to `width`.
    pub(crate) fn batch_from_rows(rows: &[Vec<u32>], domains: &[usize], width: usize) -> Batch {
        let b = rows.len();
        let mut token_ids = vec![0u32; b * width];
        let mut mask = vec![0.0; b * width];
        for (r, row) in rows.iter().enumerate() {
            for (t, &id) in row.iter().enumerate() {
                token_ids[r * width + t] = id;
                mask[r * width + t] = 1.0;
            }
        }
        Batch {
            token_ids,
            seq_len: width,
            mask,
            class_labels: vec![0; b],
            domain_labels: domains.to_vec(),
            corrupted_domains: domains.to_vec(),
            ids: (0..b).map(|i| format!("ex{i}")).collect(),
        }
    }

    #[test]
    fn duplicated_rows_give_identical_trace_rows() {
        let model = EncoderModel::new(tiny_config(), 3).unwrap();
        let row = vec![CLS_ID, 5, 9, 4, SEP_ID];
        let batch = batch_from_rows(&[row.clone(), row], &[0, 0], 8);
        let mut rng = seeded_rng(0, "drop");
        let trace = model
            .encode(&batch, DomainRows::PerSample(&[0, 0]), Mode::Eval, &mut rng)
            .unwrap();
        let logits = trace.class_logits.to_vec();
        assert_eq!(logits[0], logits[2]);
        assert_eq!(logits[1], logits[3]);
        let pooled = trace.pooled.to_vec();
        let h = 16;
        assert_eq!(pooled[..h], pooled[h..]);
    }

    #[test]
    fn encode_rejects_out_of_range_ids_and_empty_batches() {
        let model = EncoderModel::new(tiny_config(), 3).unwrap();
        let mut rng = seeded_rng(0, "drop");
        let bad = batch_from_rows(&[vec![CLS_ID, 99, SEP_ID]], &[0], 8);
        assert!(model
            .encode(&bad, DomainRows::PerSample(&[0]), Mode::Eval, &mut rng)
            .is_err());
        let empty = batch_from_rows(&[], &[], 8);
        assert!(model
            .encode(&empty, DomainRows::PerSample(&[]), Mode::Eval, &mut rng)
            .is_err());
    }

    #[test]
    fn attention_probabilities_sum_to_one_over_valid_keys() {
        let model = EncoderModel::new(tiny_config(), 5).unwrap();
        let batch = batch_from_rows(&[vec![CLS_ID, 5, SEP_ID]], &[1], 8);
        let mut rng = seeded_rng(0, "drop");
        let trace = model
            .encode(&batch, DomainRows::PerSample(&[1]), Mode::Eval, &mut rng)
            .unwrap();
        // softmax over the key axis with the mask applied
        for scores in &trace.attention_scores {
            let n = 8;
            let mut bias = vec![0.0; scores.numel()];
            for head in 0..4 {
                for q in 0..n {
                    for key in 0..n {
                        if batch.mask[key] == 0.0 {
                            bias[(head * n + q) * n + key] = -1e30;
                        }
                    }
                }
            }
            let probs = scores.softmax_with_bias(3, &bias).unwrap();
            let d = probs.data();
            for row in 0..4 * n {
                let sum: f64 = d[row * n..(row + 1) * n].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
                // no probability mass on padded keys
                for key in 3..n {
                    assert_eq!(d[row * n + key], 0.0);
                }
            }
        }
    }

    #[test]
    fn padding_extension_never_changes_outputs() {
        let model = EncoderModel::new(tiny_config(), 7).unwrap();
        let row = vec![CLS_ID, 4, 11, SEP_ID];
        let mut rng = seeded_rng(0, "drop");
        let short = batch_from_rows(&[row.clone()], &[2], 5);
        let long = batch_from_rows(&[row], &[2], 8);
        let t_short = model
            .encode(&short, DomainRows::PerSample(&[2]), Mode::Eval, &mut rng)
            .unwrap();
        let t_long = model
            .encode(&long, DomainRows::PerSample(&[2]), Mode::Eval, &mut rng)
            .unwrap();
        let (a, b) = (t_short.class_logits.to_vec(), t_long.class_logits.to_vec());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        let (pa, pb) = (t_short.pooled.to_vec(), t_long.pooled.to_vec());
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn eval_mode_is_deterministic_bitwise() {
        let model = EncoderModel::new(tiny_config(), 11).unwrap();
        let batch = batch_from_rows(&[vec![CLS_ID, 6, 7, SEP_ID]], &[0], 8);
        let mut rng_a = seeded_rng(1, "a");
        let mut rng_b = seeded_rng(2, "b"); // different streams: eval must not consume them
        let ta = model
            .encode(&batch, DomainRows::PerSample(&[0]), Mode::Eval, &mut rng_a)
            .unwrap();
        let tb = model
            .encode(&batch, DomainRows::PerSample(&[0]), Mode::Eval, &mut rng_b)
            .unwrap();
        assert_eq!(ta.class_logits.to_vec(), tb.class_logits.to_vec());
        assert_eq!(ta.transfer_vec.to_vec(), tb.transfer_vec.to_vec());
    }

    #[test]
    fn trace_shapes_are_structural() {
        let cfg = tiny_config();
        let model = EncoderModel::new(cfg.clone(), 13).unwrap();
        let batch = batch_from_rows(
            &[vec![CLS_ID, 5, SEP_ID], vec![CLS_ID, 6, 7, SEP_ID]],
            &[0, 1],
            8,
        );
        let mut rng = seeded_rng(0, "drop");
        let trace = model
            .encode(&batch, DomainRows::PerSample(&[0, 1]), Mode::Eval, &mut rng)
            .unwrap();
        assert_eq!(trace.hidden_states.len(), cfg.num_layers);
        assert_eq!(trace.attention_scores.len(), cfg.num_layers);
        for hs in &trace.hidden_states {
            assert_eq!(hs.shape(), &[2, 8, cfg.hidden_dim]);
        }
        for sc in &trace.attention_scores {
            assert_eq!(sc.shape(), &[2, cfg.num_heads, 8, 8]);
        }
        assert_eq!(trace.embedding_out.shape(), &[2, 8, cfg.hidden_dim]);
        assert_eq!(trace.pooled.shape(), &[2, cfg.hidden_dim]);
        assert_eq!(trace.transfer_vec.shape(), &[2, cfg.hidden_dim]);
        assert_eq!(trace.class_logits.shape(), &[2, cfg.num_classes]);
        assert_eq!(trace.domain_logits.shape(), &[2, cfg.num_domains]);
    }

    #[test]
    fn pool_oracles() {
        // single-token row -> that token's vector; two tokens -> their mean
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 2, 2]);
        let mask = [1.0, 0.0, 1.0, 1.0];
        let pooled = pool(&x, &mask, Pooling::Mean).unwrap();
        assert_eq!(pooled.to_vec(), vec![1.0, 2.0, 6.0, 7.0]);
        let summed = pool(&x, &mask, Pooling::Sum).unwrap();
        assert_eq!(summed.to_vec(), vec![1.0, 2.0, 12.0, 14.0]);
        // all-padding row errors
        assert!(pool(&x, &[0.0, 0.0, 1.0, 1.0], Pooling::Mean).is_err());
    }

    #[test]
    fn transfer_head_zero_parameters_give_zero_vector() {
        let mut rng = seeded_rng(0, "subnet");
        let mut subnet = DomainSubnet::new("s", 3, 4, true, &mut rng);
        subnet.domain_embedding = Parameter::zeros("s.domain_embedding", &[3, 4], true);
        subnet.weight = Parameter::zeros("s.weight", &[4, 4], true);
        subnet.bias = Parameter::zeros("s.bias", &[4], true);
        let pooled = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.1], &[1, 4]);
        let (tv, _) = transfer_head(&pooled, DomainRows::PerSample(&[1]), &subnet).unwrap();
        assert_eq!(tv.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn transfer_head_outputs_bounded_by_tanh() {
        let mut rng = seeded_rng(4, "subnet");
        let subnet = DomainSubnet::new("s", 2, 4, true, &mut rng);
        let pooled = Tensor::from_vec(vec![30.0, -40.0, 25.0, -31.0], &[1, 4]);
        let (tv, _) = transfer_head(&pooled, DomainRows::PerSample(&[0]), &subnet).unwrap();
        assert!(tv.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn transfer_head_distinguishes_domains_through_embedding_rows() {
        let mut rng = seeded_rng(9, "subnet");
        let subnet = DomainSubnet::new("s", 2, 4, true, &mut rng);
        let pooled = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.1], &[1, 4]);
        let (tv0, _) = transfer_head(&pooled, DomainRows::PerSample(&[0]), &subnet).unwrap();
        let (tv1, _) = transfer_head(&pooled, DomainRows::PerSample(&[1]), &subnet).unwrap();
        assert_ne!(tv0.to_vec(), tv1.to_vec());
        // label out of range errors
        assert!(transfer_head(&pooled, DomainRows::PerSample(&[2]), &subnet).is_err());
    }

    #[test]
    fn zeroing_domain_embedding_makes_transfer_vec_label_invariant() {
        let mut rng = seeded_rng(9, "subnet");
        let mut subnet = DomainSubnet::new("s", 2, 4, true, &mut rng);
        subnet.domain_embedding = Parameter::zeros("s.domain_embedding", &[2, 4], true);
        let pooled = Tensor::from_vec(vec![0.5, -1.0, 2.0, 0.1], &[1, 4]);
        let (tv0, _) = transfer_head(&pooled, DomainRows::PerSample(&[0]), &subnet).unwrap();
        let (tv1, _) = transfer_head(&pooled, DomainRows::PerSample(&[1]), &subnet).unwrap();
        assert_eq!(tv0.to_vec(), tv1.to_vec());
    }

    #[test]
    fn mean_embedding_rows_average_the_table() {
        let mut rng = seeded_rng(9, "subnet");
        let mut subnet = DomainSubnet::new("s", 2, 2, true, &mut rng);
        subnet.domain_embedding =
            Parameter::new("s.domain_embedding", vec![1.0, 0.0, 0.0, 1.0], &[2, 2], true);
        subnet.weight = Parameter::new("s.weight", vec![1.0, 0.0, 0.0, 1.0], &[2, 2], true);
        subnet.bias = Parameter::zeros("s.bias", &[2], true);
        let pooled = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let (tv, _) = transfer_head(&pooled, DomainRows::MeanEmbedding, &subnet).unwrap();
        let expect = 0.5f64.tanh();
        for v in tv.data().iter() {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}
