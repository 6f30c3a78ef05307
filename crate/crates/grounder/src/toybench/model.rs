//! Trainable toy model, training loop, and evaluators.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{build_ptext, main_distribution, ComponentLabels, RowRole, TextDistribution};
use crate::deptree::tokenize;
use crate::error::{Error, Result};
use crate::inference;
use crate::losses::{
    position_loss, semantic_loss, total_loss, LossParts, PositiveSets,
};
use crate::numcore::{Matrix, NodeId, Tape};
use crate::vocab::Vocab;

use super::{ToyConfig, ToyExample, ToyObject};

/// Checkpoint format; bump when the parameter layout changes.
pub const FORMAT_VERSION: u32 = 1;

fn descriptor_dim(v: &Vocab) -> usize {
    v.categories.len() + v.colors.len() + v.materials.len() + v.sizes.len() + 6
}

/// One-hot category/color/material/size plus the normalized box.
fn descriptor(obj: &ToyObject, v: &Vocab) -> Vec<f64> {
    let mut out = Vec::with_capacity(descriptor_dim(v));
    let one_hot = |list: &[String], val: &str, out: &mut Vec<f64>| {
        for item in list {
            out.push(if item == val { 1.0 } else { 0.0 });
        }
    };
    one_hot(&v.categories, &obj.category, &mut out);
    one_hot(&v.colors, &obj.color, &mut out);
    one_hot(&v.materials, &obj.material, &mut out);
    one_hot(&v.sizes, &obj.size_tag, &mut out);
    for d in 0..3 {
        out.push(obj.bbox[d] / 10.0);
    }
    for d in 3..6 {
        out.push(obj.bbox[d] / 2.5);
    }
    out
}

/// Word-embedding table, two-layer object encoder, and a bilinear position
/// head; every parameter lives in a plain matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub embed: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub w_pos: Matrix,
    pub seed: u64,
}

/// Tape handles for the model parameters within one epoch's graph.
pub struct ModelNodes {
    pub embed: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w_pos: NodeId,
}

impl ToyModel {
    pub fn init(config: &ToyConfig) -> ToyModel {
        let v = Vocab::builtin();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A);
        let mut mat = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-0.1..0.1));
        let d = config.embed_dim;
        let h = config.hidden_dim;
        ToyModel {
            embed: mat(v.vocab_size(), d),
            w1: mat(descriptor_dim(v), h),
            b1: Matrix::zeros(1, h),
            w2: mat(h, d),
            b2: Matrix::zeros(1, d),
            w_pos: mat(d, d),
            seed: config.seed,
        }
    }

    pub fn parameter_count(&self) -> usize {
        [
            &self.embed,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
            &self.w_pos,
        ]
        .iter()
        .map(|m| m.data.len())
        .sum()
    }

    pub fn nodes(&self, tape: &Tape) -> ModelNodes {
        ModelNodes {
            embed: tape.leaf(self.embed.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            w_pos: tape.leaf(self.w_pos.clone()),
        }
    }

    /// Object features without a tape, for evaluation.
    pub fn encode_objects(&self, desc: &Matrix) -> Result<Matrix> {
        let mut h = desc.matmul(&self.w1)?;
        for r in 0..h.rows {
            for c in 0..h.cols {
                h.set(r, c, h.get(r, c) + self.b1.get(0, c));
            }
        }
        let mut o = h.matmul(&self.w2)?;
        for r in 0..o.rows {
            for c in 0..o.cols {
                o.set(r, c, o.get(r, c) + self.b2.get(0, c));
            }
        }
        Ok(o)
    }

    pub fn gather_embeddings(&self, ids: &[usize]) -> Matrix {
        Matrix::from_fn(ids.len(), self.embed.cols, |r, c| self.embed.get(ids[r], c))
    }
}

/// Versioned on-disk form of a trained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab_hash: String,
    pub seed: u64,
    pub config: ToyConfig,
    pub model: ToyModel,
}

impl Checkpoint {
    pub fn new(model: ToyModel, config: ToyConfig) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            vocab_hash: Vocab::hash(),
            seed: model.seed,
            config,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format {} unsupported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.vocab_hash != Vocab::hash() {
            return Err(Error::Config(
                "checkpoint was built against a different vocabulary".into(),
            ));
        }
        Ok(())
    }
}

/// A corpus example converted to matrices and label structures once, ahead
/// of the epoch loop.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub desc: Matrix,
    pub word_ids: Vec<usize>,
    pub masked_word_ids: Vec<usize>,
    pub labels: ComponentLabels,
    pub masked_labels: ComponentLabels,
    pub roles: Vec<RowRole>,
    pub p_text: TextDistribution,
    pub pos_sets: PositiveSets,
    pub masked_p_text: TextDistribution,
    pub masked_pos_sets: PositiveSets,
    pub target: usize,
    pub candidates: usize,
}

fn pad_ids(tokens: &[String], l: usize, v: &Vocab) -> Result<Vec<usize>> {
    if tokens.len() > l - 1 {
        return Err(Error::Capacity {
            got: tokens.len(),
            limit: l - 1,
        });
    }
    let mut ids = vec![Vocab::PAD_ID; l];
    for (i, t) in tokens.iter().enumerate() {
        ids[i] = v.word_id(t);
    }
    ids[l - 1] = Vocab::NULL_ID;
    Ok(ids)
}

/// Build labels, the text distribution, positive sets, and input matrices
/// for one example under the configured component subset.
pub fn prepare(example: &ToyExample, config: &ToyConfig) -> Result<Prepared> {
    let v = Vocab::builtin();
    let l = config.capacity;
    let utt = &example.utterance;
    let k = example.scene.objects.len();

    let desc = {
        let dim = descriptor_dim(v);
        let mut m = Matrix::zeros(k, dim);
        for (i, obj) in example.scene.objects.iter().enumerate() {
            for (j, val) in descriptor(obj, v).into_iter().enumerate() {
                m.set(i, j, val);
            }
        }
        m
    };

    let keep = |kind| config.components.keeps(kind);
    let labels = ComponentLabels::build(&utt.gold_components, l)?.restrict(keep);
    let masked_labels = ComponentLabels::build(&utt.masked_components, l)?.restrict(keep);

    let use_aux = config.components.auxiliary && labels.auxiliary.count() > 0;
    let roles: Vec<RowRole> = (0..k)
        .map(|i| {
            if i == utt.target_index {
                RowRole::Main
            } else if use_aux && utt.auxiliary_index == Some(i) {
                RowRole::Auxiliary
            } else {
                RowRole::Other
            }
        })
        .collect();

    let p_main = main_distribution(&labels, &config.weights)?;
    let p_text = build_ptext(&p_main, &labels.auxiliary, &roles)?;
    let token_count = utt.gold_tree.token_count();
    let pos_sets = PositiveSets::build(&labels, &roles, token_count, &config.loss)?;

    let tokens: Vec<String> = utt.gold_tree.surfaces().iter().map(|s| s.to_string()).collect();
    let word_ids = pad_ids(&tokens, l, v)?;
    let masked_tokens = tokenize(&utt.masked_text);
    let masked_word_ids = pad_ids(&masked_tokens, l, v)?;

    let masked_p_main = main_distribution(&masked_labels, &config.weights)?;
    let masked_p_text = build_ptext(&masked_p_main, &masked_labels.auxiliary, &roles)?;
    let masked_pos_sets =
        PositiveSets::build(&masked_labels, &roles, masked_tokens.len(), &config.loss)?;

    Ok(Prepared {
        desc,
        word_ids,
        masked_word_ids,
        labels,
        masked_labels,
        roles,
        p_text,
        pos_sets,
        masked_p_text,
        masked_pos_sets,
        target: utt.target_index,
        candidates: k,
    })
}

/// Unit-norm rows keep every similarity in [-1, 1], so the contrastive
/// temperature cannot blow the logits up as training lengthens.
fn normalize_rows_on(tape: &Tape, x: NodeId) -> Result<NodeId> {
    let (_, cols) = tape.shape(x);
    let sq = tape.mul(x, x)?;
    let ss = tape.add_scalar(tape.row_sum(sq), 1e-12);
    // sqrt as exp(log(x)/2); ss is strictly positive
    let norm = tape.exp(tape.scale(tape.log(ss)?, 0.5));
    let ones = tape.constant(Matrix::from_fn(1, cols, |_, _| 1.0));
    tape.div(x, tape.matmul(norm, ones)?)
}

/// Plain-matrix twin of `normalize_rows_on` for tape-free evaluation.
fn normalize_rows(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows, x.cols, |r, c| {
        let ss: f64 = (0..x.cols).map(|j| x.get(r, j) * x.get(r, j)).sum();
        x.get(r, c) / (ss + 1e-12).sqrt()
    })
}

/// Forward activations for one example on the tape.
pub struct FeatureBundle {
    /// Object features, k x d.
    pub o: NodeId,
    /// Text features (gathered word embeddings), l x d.
    pub t: NodeId,
    /// Position logits, k x l.
    pub l_pred: NodeId,
}

pub fn forward(
    tape: &Tape,
    nodes: &ModelNodes,
    prep: &Prepared,
    mode: EvalMode,
) -> Result<FeatureBundle> {
    let desc = tape.constant(prep.desc.clone());
    let h = tape.add_row_broadcast(tape.matmul(desc, nodes.w1)?, nodes.b1)?;
    let o = normalize_rows_on(tape, tape.add_row_broadcast(tape.matmul(h, nodes.w2)?, nodes.b2)?)?;
    let ids = match mode {
        EvalMode::Regular => &prep.word_ids,
        EvalMode::Masked => &prep.masked_word_ids,
    };
    let t = normalize_rows_on(tape, tape.gather_rows(nodes.embed, ids)?)?;
    let l_pred = tape.matmul_nt(tape.matmul(o, nodes.w_pos)?, t)?;
    Ok(FeatureBundle { o, t, l_pred })
}

fn example_loss(
    tape: &Tape,
    bundle: &FeatureBundle,
    prep: &Prepared,
    config: &ToyConfig,
    mode: EvalMode,
) -> Result<NodeId> {
    let (p_text, pos_sets) = match mode {
        EvalMode::Regular => (&prep.p_text, &prep.pos_sets),
        EvalMode::Masked => (&prep.masked_p_text, &prep.masked_pos_sets),
    };
    let mut parts = LossParts::default();
    if config.losses_enabled.position {
        // averaged over candidate rows: the sum grows with k and would let
        // the many all-null distractor rows drown the semantic term on the
        // shared features
        let pos = position_loss(tape, bundle.l_pred, p_text)?;
        parts.position = Some(tape.scale(pos, 1.0 / prep.candidates as f64));
    }
    if config.losses_enabled.semantic {
        parts.semantic = Some(semantic_loss(
            tape,
            bundle.o,
            bundle.t,
            pos_sets,
            &config.loss,
        )?);
    }
    total_loss(tape, parts, &config.loss)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub train_examples: usize,
    pub loss_history: Vec<f64>,
    pub final_loss: f64,
}

/// Full-batch gradient descent over the generated corpus.
pub fn train(config: &ToyConfig) -> Result<(ToyModel, TrainReport)> {
    config.validate()?;
    let corpus = super::gen_corpus(config.seed, config.train_scenes, config)?;
    let prepared: Vec<Prepared> = corpus
        .iter()
        .map(|ex| prepare(ex, config))
        .collect::<Result<_>>()?;
    let mut model = ToyModel::init(config);
    let n = prepared.len() as f64;
    let mut loss_history = Vec::with_capacity(config.epochs);
    // Adam state, one slot per parameter matrix
    let mut adam_m: Vec<Matrix> = Vec::new();
    let mut adam_v: Vec<Matrix> = Vec::new();
    let (beta1, beta2, adam_eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    for epoch in 0..config.epochs {
        let tape = Tape::new();
        let nodes = model.nodes(&tape);
        let mut acc: Option<NodeId> = None;
        for (i, prep) in prepared.iter().enumerate() {
            // deterministic stratified choice of masked presentations
            let frac = config.masked_train_fraction;
            let mode = if ((i + 1) as f64 * frac).floor() > (i as f64 * frac).floor() {
                EvalMode::Masked
            } else {
                EvalMode::Regular
            };
            let bundle = forward(&tape, &nodes, prep, mode)?;
            let loss = example_loss(&tape, &bundle, prep, config, mode)?;
            acc = Some(match acc {
                None => loss,
                Some(a) => tape.add(a, loss)?,
            });
        }
        let mean = tape.scale(acc.expect("non-empty corpus"), 1.0 / n);
        loss_history.push(tape.value(mean).as_scalar());
        let grads = tape.backward(mean)?;
        let param_nodes = [
            nodes.embed,
            nodes.w1,
            nodes.b1,
            nodes.w2,
            nodes.b2,
            nodes.w_pos,
        ];
        let all_grads: Vec<Matrix> = param_nodes
            .iter()
            .map(|n| grads.wrt(&tape, *n))
            .collect();
        // clip the global gradient norm; the contrastive temperature makes
        // raw full-batch steps explosive early in training
        let norm: f64 = all_grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let clip = if config.grad_clip > 0.0 && norm > config.grad_clip {
            config.grad_clip / norm
        } else {
            1.0
        };
        if adam_m.is_empty() {
            adam_m = all_grads.iter().map(|g| Matrix::zeros(g.rows, g.cols)).collect();
            adam_v = adam_m.clone();
        }
        let bc1 = 1.0 - beta1.powi(epoch as i32 + 1);
        let bc2 = 1.0 - beta2.powi(epoch as i32 + 1);
        for (slot, (param, g)) in [
            &mut model.embed,
            &mut model.w1,
            &mut model.b1,
            &mut model.w2,
            &mut model.b2,
            &mut model.w_pos,
        ]
        .into_iter()
        .zip(&all_grads)
        .enumerate()
        {
            let (m, v) = (&mut adam_m[slot], &mut adam_v[slot]);
            for (i, (p, gv)) in param.data.iter_mut().zip(&g.data).enumerate() {
                let gv = clip * gv;
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gv;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gv * gv;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                *p -= config.lr * m_hat / (v_hat.sqrt() + adam_eps);
            }
        }
    }

    let final_loss = *loss_history.last().unwrap();
    Ok((
        model,
        TrainReport {
            seed: config.seed,
            epochs: config.epochs,
            train_examples: prepared.len(),
            loss_history,
            final_loss,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Regular,
    Masked,
}

/// Inference similarity combines the position head and the contrastive
/// space, so a model trained with either loss produces a usable score:
/// logits = o W_pos t' + (o t') / tau.
fn inference_features(model: &ToyModel, o: &Matrix, t: &Matrix, tau: f64) -> Result<(Matrix, Matrix)> {
    let o_pos = o.matmul(&model.w_pos)?;
    let d = o.cols;
    let oc = Matrix::from_fn(o.rows, 2 * d, |r, c| {
        if c < d {
            o_pos.get(r, c)
        } else {
            o.get(r, c - d) / tau
        }
    });
    let tc = Matrix::from_fn(t.rows, 2 * d, |r, c| t.get(r, c % d));
    Ok((oc, tc))
}

/// Target-selection accuracy over a prepared corpus.
pub fn evaluate(model: &ToyModel, prepared: &[Prepared], mode: EvalMode, config: &ToyConfig) -> Result<f64> {
    if prepared.is_empty() {
        return Err(Error::Config("empty evaluation corpus".into()));
    }
    let mut correct = 0usize;
    for prep in prepared {
        let o = normalize_rows(&model.encode_objects(&prep.desc)?);
        let (ids, labels) = match mode {
            EvalMode::Regular => (&prep.word_ids, &prep.labels),
            EvalMode::Masked => (&prep.masked_word_ids, &prep.masked_labels),
        };
        let t = normalize_rows(&model.gather_embeddings(ids));
        let (oc, tc) = inference_features(model, &o, &t, config.loss.tau)?;
        if inference::ground(&oc, &tc, labels, 1.0)? == prep.target {
            correct += 1;
        }
    }
    Ok(correct as f64 / prepared.len() as f64)
}

/// Analytic chance level: mean of 1/k over the corpus.
pub fn chance_level(prepared: &[Prepared]) -> f64 {
    let total: f64 = prepared.iter().map(|p| 1.0 / p.candidates as f64).sum();
    total / prepared.len() as f64
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub components: super::ComponentSet,
    pub losses: super::LossSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: String,
    pub components: String,
    pub losses: String,
    pub regular: Vec<f64>,
    pub masked: Vec<f64>,
    pub regular_mean: f64,
    pub regular_sd: f64,
    pub masked_mean: f64,
    pub masked_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub chance: f64,
    pub rows: Vec<AblationRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    (mean, var.sqrt())
}

/// Seed offset separating the evaluation corpus stream from training.
const EVAL_STREAM: u64 = 0x51_7c_c1_b7;

/// Generate the held-out evaluation set for a config.
pub fn eval_corpus(config: &ToyConfig) -> Result<Vec<Prepared>> {
    let corpus = super::gen_corpus(config.seed.wrapping_add(EVAL_STREAM), config.eval_scenes, config)?;
    corpus.iter().map(|ex| prepare(ex, config)).collect()
}

/// Train and evaluate every cell over every seed.
pub fn ablate(base: &ToyConfig, cells: &[AblationCell], seeds: &[u64]) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs cells and seeds".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    let mut chance = 0.0;
    for cell in cells {
        let mut regular = Vec::new();
        let mut masked = Vec::new();
        for seed in seeds {
            let config = ToyConfig {
                seed: *seed,
                components: cell.components,
                losses_enabled: cell.losses,
                ..base.clone()
            };
            let (model, _) = train(&config)?;
            let eval = eval_corpus(&config)?;
            chance = chance_level(&eval);
            regular.push(evaluate(&model, &eval, EvalMode::Regular, &config)?);
            masked.push(evaluate(&model, &eval, EvalMode::Masked, &config)?);
        }
        let (regular_mean, regular_sd) = mean_sd(&regular);
        let (masked_mean, masked_sd) = mean_sd(&masked);
        rows.push(AblationRow {
            cell: cell.name.clone(),
            components: cell.components.describe(),
            losses: cell.losses.describe(),
            regular,
            masked,
            regular_mean,
            regular_sd,
            masked_mean,
            masked_sd,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        chance,
        rows,
    })
}

impl AblationReport {
    /// Aligned-column text table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:<22} {:<8} {:>16} {:>16}\n",
            "cell", "components", "losses", "regular", "masked"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<16} {:<22} {:<8} {:>8.4}±{:.4} {:>8.4}±{:.4}\n",
                row.cell,
                row.components,
                row.losses,
                row.regular_mean,
                row.regular_sd,
                row.masked_mean,
                row.masked_sd
            ));
        }
        out.push_str(&format!("chance level: {:.4}\n", self.chance));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gen_corpus, ComponentSet, LossSet, ToyConfig};
    use super::*;

    fn tiny_config(seed: u64) -> ToyConfig {
        ToyConfig {
            seed,
            train_scenes: 30,
            eval_scenes: 30,
            epochs: 15,
            ..Default::default()
        }
    }

    #[test]
    fn model_is_small_and_deterministic() {
        let cfg = tiny_config(3);
        let a = ToyModel::init(&cfg);
        let b = ToyModel::init(&cfg);
        assert_eq!(a, b);
        assert!(a.parameter_count() < 100_000);
    }

    #[test]
    fn loss_decreases_early_in_training() {
        for seed in [1, 2, 3] {
            let cfg = ToyConfig {
                epochs: 10,
                train_scenes: 30,
                ..tiny_config(seed)
            };
            let (_, report) = train(&cfg).unwrap();
            assert!(
                report.loss_history[9] < report.loss_history[0],
                "seed {seed}: {:?}",
                report.loss_history
            );
        }
    }

    #[test]
    fn untrained_model_scores_near_chance() {
        let cfg = ToyConfig {
            eval_scenes: 400,
            ..tiny_config(5)
        };
        let model = ToyModel::init(&cfg);
        let eval = eval_corpus(&cfg).unwrap();
        let chance = chance_level(&eval);
        for mode in [EvalMode::Regular, EvalMode::Masked] {
            let acc = evaluate(&model, &eval, mode, &cfg).unwrap();
            assert!(
                (acc - chance).abs() < 0.05,
                "{mode:?}: acc {acc} vs chance {chance}"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config(9);
        let (m1, r1) = train(&cfg).unwrap();
        let (m2, r2) = train(&cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1.loss_history, r2.loss_history);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config(4);
        let model = ToyModel::init(&cfg);
        let ckpt = Checkpoint::new(model.clone(), cfg);
        ckpt.validate().unwrap();
        let json = serde_json::to_string(&ckpt).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.model, model);

        let stale = Checkpoint {
            vocab_hash: "not-the-vocab".into(),
            ..ckpt
        };
        assert!(stale.validate().is_err());
    }

    #[test]
    fn prepared_examples_are_consistent() {
        let cfg = ToyConfig::default();
        let corpus = gen_corpus(13, 20, &cfg).unwrap();
        for ex in &corpus {
            let prep = prepare(ex, &cfg).unwrap();
            assert_eq!(prep.candidates, ex.scene.objects.len());
            assert_eq!(prep.roles[prep.target], RowRole::Main);
            assert_eq!(prep.word_ids.len(), cfg.capacity);
            prep.p_text.validate().unwrap();
            // sparse preparation drops non-main positives
            let sparse_cfg = ToyConfig {
                components: ComponentSet::sparse(),
                ..cfg.clone()
            };
            let sparse = prepare(ex, &sparse_cfg).unwrap();
            assert!(sparse.labels.attribute.count() == 0);
            assert!(!sparse.roles.contains(&RowRole::Auxiliary));
        }
    }

    #[test]
    fn trained_model_beats_chance_quickly() {
        // a short dense run already clears chance comfortably
        let cfg = ToyConfig {
            train_scenes: 60,
            eval_scenes: 60,
            epochs: 40,
            ..tiny_config(7)
        };
        let (model, _) = train(&cfg).unwrap();
        let eval = eval_corpus(&cfg).unwrap();
        let acc = evaluate(&model, &eval, EvalMode::Regular, &cfg).unwrap();
        let chance = chance_level(&eval);
        assert!(acc > chance + 0.15, "acc {acc} vs chance {chance}");
    }

    #[test]
    fn loss_set_toggles_take_effect() {
        let cfg = ToyConfig {
            losses_enabled: LossSet {
                position: true,
                semantic: false,
            },
            epochs: 2,
            train_scenes: 10,
            ..tiny_config(8)
        };
        let (_, r_pos) = train(&cfg).unwrap();
        let cfg_sem = ToyConfig {
            losses_enabled: LossSet {
                position: false,
                semantic: true,
            },
            ..cfg.clone()
        };
        let (_, r_sem) = train(&cfg_sem).unwrap();
        assert_ne!(r_pos.loss_history[0], r_sem.loss_history[0]);
    }
}
