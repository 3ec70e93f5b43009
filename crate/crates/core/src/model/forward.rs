use ecn_tensor::{Real, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use super::{AttentionMode, Model, ModelError};
use crate::concept_net::EntityKind;
use crate::dataset::features::{ModelInput, PathNode, BEHAVIOR_TYPES, DAY_GAP_BUCKETS};
use crate::paths::MetaPath;
use crate::records::{ConceptSchema, UserProfile};

const LN_EPS: f64 = 1e-5;
const CLAMP: f64 = 1e-7;

/// Tape handles for one batched forward pass. Row `b` of every matrix
/// belongs to the `b`-th input.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// `[B×1]` probabilities.
    pub scores: Var,
    pub alpha_u: Var,
    pub alpha_p: Var,
    pub alpha_c: Var,
    pub u_b: Var,
    pub u_h: Var,
    pub u: Var,
    pub c_s: Var,
    pub c: Var,
    pub p: Var,
    /// Per input, whether each meta-path slot had at least one instance.
    pub presence: Vec<[bool; 5]>,
}

/// Attention weights and intermediate embeddings of one scored pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub score: f64,
    pub alpha_u: Vec<f64>,
    pub alpha_p: Vec<f64>,
    pub alpha_c: Vec<f64>,
    pub presence: [bool; 5],
    pub u_b: Vec<f64>,
    pub u_h: Vec<f64>,
    pub u: Vec<f64>,
    pub c_s: Vec<f64>,
    pub c: Vec<f64>,
    pub p: Vec<f64>,
}

fn row<T: Real>(tape: &Tape<'_, T>, v: Var, b: usize) -> Vec<f64> {
    let t = tape.value(v);
    let w = t.shape()[1];
    t.data()[b * w..(b + 1) * w].iter().map(|x| x.as_f64()).collect()
}

impl BatchOutput {
    pub fn scores<T: Real>(&self, tape: &Tape<'_, T>) -> Vec<f64> {
        tape.value(self.scores).to_f64_vec()
    }

    pub fn trace<T: Real>(&self, tape: &Tape<'_, T>, b: usize) -> ForwardTrace {
        ForwardTrace {
            score: row(tape, self.scores, b)[0],
            alpha_u: row(tape, self.alpha_u, b),
            alpha_p: row(tape, self.alpha_p, b),
            alpha_c: row(tape, self.alpha_c, b),
            presence: self.presence[b],
            u_b: row(tape, self.u_b, b),
            u_h: row(tape, self.u_h, b),
            u: row(tape, self.u, b),
            c_s: row(tape, self.c_s, b),
            c: row(tape, self.c, b),
            p: row(tape, self.p, b),
        }
    }
}

/// Mean binary cross-entropy of `[B×1]` scores, clamped to [1e-7, 1 − 1e-7].
pub fn bce_loss<T: Real>(tape: &mut Tape<'_, T>, scores: Var, labels: &[u8]) -> Result<Var, ModelError> {
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(ModelError::Label(l));
    }
    if labels.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let n = labels.len();
    let y = tape.clamp(scores, T::of(CLAMP), T::one() - T::of(CLAMP));
    let pos = tape.constant(Tensor::new([n, 1], labels.iter().map(|&l| T::of(l as f64)).collect())?);
    let neg = tape.constant(Tensor::new([n, 1], labels.iter().map(|&l| T::of(1.0 - l as f64)).collect())?);
    let ones = tape.constant(Tensor::ones([n, 1]));
    let ln_y = tape.ln(y);
    let one_minus = tape.sub(ones, y)?;
    let ln_1y = tape.ln(one_minus);
    let a = tape.mul(pos, ln_y)?;
    let b = tape.mul(neg, ln_1y)?;
    let ll = tape.add(a, b)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, T::of(-1.0 / n as f64)))
}

fn check(feature: &'static str, index: usize, size: usize) -> Result<(), ModelError> {
    if index >= size {
        return Err(ModelError::Index { feature, index, size });
    }
    Ok(())
}

impl<T: Real> Model<T> {
    /// Rejects any index a lookup table cannot serve, and malformed paths.
    pub fn check_input(&self, x: &ModelInput) -> Result<(), ModelError> {
        let cfg = &self.config;
        let v = cfg.vocab;
        if x.behaviors.len() > cfg.seq_len {
            return Err(ModelError::TooManyBehaviors {
                count: x.behaviors.len(),
                limit: cfg.seq_len,
            });
        }
        if x.positions.len() != x.behaviors.len() {
            return Err(ModelError::TooManyBehaviors {
                count: x.positions.len(),
                limit: x.behaviors.len(),
            });
        }
        let sizes = [v.categories + 1, v.brands + 1, v.shops + 1, BEHAVIOR_TYPES, DAY_GAP_BUCKETS];
        for r in &x.behaviors {
            for f in 0..5 {
                check(super::BEHAVIOR_FEATURES[f], r[f], sizes[f])?;
            }
        }
        for &p in &x.positions {
            check("position", p, cfg.seq_len)?;
        }
        for (a, (&i, n)) in x.profile.iter().zip(UserProfile::vocab_sizes()).enumerate() {
            check(super::PROFILE_ASPECTS[a], i, n)?;
        }
        for (a, (&i, n)) in x.schema.iter().zip(ConceptSchema::vocab_sizes()).enumerate() {
            check(super::SCHEMA_ASPECTS[a], i, n)?;
        }
        check("concept", x.concept, v.concepts)?;
        for mp in MetaPath::ALL {
            let list = &x.paths[mp.index()];
            if list.len() > cfg.k_paths {
                return Err(ModelError::TooManyPaths {
                    meta_path: mp,
                    count: list.len(),
                    limit: cfg.k_paths,
                });
            }
            for inst in list {
                let expect = std::iter::once(None).chain(mp.node_kinds().iter().map(|&k| Some(k)));
                if inst.nodes.len() != mp.len() {
                    return Err(ModelError::NodeKind {
                        meta_path: mp,
                        position: inst.nodes.len().min(mp.len()),
                        found: format!("sequence of {} nodes", inst.nodes.len()),
                    });
                }
                for (position, (node, want)) in inst.nodes.iter().zip(expect).enumerate() {
                    if node.kind() != want {
                        return Err(ModelError::NodeKind {
                            meta_path: mp,
                            position,
                            found: format!("{node:?}"),
                        });
                    }
                    match *node {
                        PathNode::Item { category, brand, shop } => {
                            check("category", category, sizes[0])?;
                            check("brand", brand, sizes[1])?;
                            check("shop", shop, sizes[2])?;
                        }
                        PathNode::Category(c) => check("category", c, v.categories + 1)?,
                        PathNode::Brand(b) => check("brand", b, v.brands + 1)?,
                        PathNode::Concept(c) => check("concept", c, v.concepts)?,
                        PathNode::User => {}
                    }
                }
            }
        }
        Ok(())
    }

    /// Records the batched forward pass on `tape`, which must be attached
    /// to this model's parameters.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p, T>, batch: &[&ModelInput]) -> Result<BatchOutput, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for x in batch {
            self.check_input(x)?;
        }
        let cfg = &self.config;
        let ids = &self.ids;
        let n = batch.len();
        let de = cfg.d_entity;

        let u_b = self.encode_behaviors(tape, batch)?;

        let prof = if cfg.use_profile {
            self.aspects(tape, &ids.profile, batch, |x, a| x.profile[a])?
        } else {
            tape.constant(Tensor::zeros([n, 1, de]))
        };
        let schema = if cfg.use_schema {
            self.aspects(tape, &ids.schema, batch, |x, a| x.schema[a])?
        } else {
            tape.constant(Tensor::zeros([n, 1, de]))
        };
        let (i_len, k_len) = (tape.shape(prof)[1], tape.shape(schema)[1]);

        let (paths, presence) = self.encode_paths(tape, batch, u_b)?;
        let j_len = MetaPath::ALL.len();

        let (alpha_u, alpha_p, alpha_c) = match cfg.attention {
            AttentionMode::Cube => {
                let w = [tape.param(ids.cube[0])?, tape.param(ids.cube[1])?, tape.param(ids.cube[2])?];
                attention_cube(tape, prof, paths, schema, w)?
            }
            AttentionMode::Average => {
                let uniform = |len: usize| Tensor::full([n, len], T::of(1.0 / len as f64));
                (
                    tape.constant(uniform(i_len)),
                    tape.constant(uniform(j_len)),
                    tape.constant(uniform(k_len)),
                )
            }
        };

        let u_h = attention_pool(tape, alpha_u, prof)?;
        let p = attention_pool(tape, alpha_p, paths)?;
        let c_s = attention_pool(tape, alpha_c, schema)?;

        let ub_uh = tape.concat(&[u_b, u_h], 1)?;
        let u = self.dense(tape, ub_uh, ids.user_fc)?;
        let concept_table = tape.param(ids.concept)?;
        let concepts: Vec<usize> = batch.iter().map(|x| x.concept).collect();
        let c_i = tape.gather(concept_table, &concepts)?;
        let ci_cs = tape.concat(&[c_i, c_s], 1)?;
        let c = self.dense(tape, ci_cs, ids.concept_fc)?;

        let mut h = tape.concat(&[u, p, c], 1)?;
        let last = ids.mlp.len() - 1;
        for (l, &layer) in ids.mlp.iter().enumerate() {
            h = self.dense(tape, h, layer)?;
            if l < last {
                h = tape.relu(h);
            }
        }
        let scores = tape.sigmoid(h);
        Ok(BatchOutput {
            scores,
            alpha_u,
            alpha_p,
            alpha_c,
            u_b,
            u_h,
            u,
            c_s,
            c,
            p,
            presence,
        })
    }

    fn dense(
        &self,
        tape: &mut Tape<'_, T>,
        x: Var,
        (w, b): (ecn_tensor::ParamId, ecn_tensor::ParamId),
    ) -> Result<Var, ModelError> {
        let w = tape.param(w)?;
        let b = tape.param(b)?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }

    /// `[B×A×d]` stack of aspect embeddings.
    fn aspects(
        &self,
        tape: &mut Tape<'_, T>,
        tables: &[ecn_tensor::ParamId],
        batch: &[&ModelInput],
        index: impl Fn(&ModelInput, usize) -> usize,
    ) -> Result<Var, ModelError> {
        let n = batch.len();
        let de = self.config.d_entity;
        let mut slots = Vec::with_capacity(tables.len());
        for (a, &table) in tables.iter().enumerate() {
            let t = tape.param(table)?;
            let idx: Vec<usize> = batch.iter().map(|x| index(x, a)).collect();
            let g = tape.gather(t, &idx)?;
            slots.push(tape.reshape(g, &[n, 1, de])?);
        }
        Ok(tape.concat(&slots, 1)?)
    }

    /// Transformer over each input's behaviors, mean-pooled to `[B×d_model]`.
    fn encode_behaviors(&self, tape: &mut Tape<'_, T>, batch: &[&ModelInput]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        let ids = &self.ids;
        let dm = cfg.d_model();
        let lengths: Vec<usize> = batch
            .iter()
            .map(|x| if cfg.use_behavior_seq { x.behaviors.len() } else { 0 })
            .collect();
        let total: usize = lengths.iter().sum();
        if total == 0 {
            return Ok(tape.constant(Tensor::zeros([batch.len(), dm])));
        }
        let rows = || batch.iter().filter(|_| cfg.use_behavior_seq).flat_map(|x| x.behaviors.iter());
        let mut feats = Vec::with_capacity(6);
        for f in 0..5 {
            let table = tape.param(ids.behavior[f])?;
            let idx: Vec<usize> = rows().map(|r| r[f]).collect();
            feats.push(tape.gather(table, &idx)?);
        }
        let pad = dm - cfg.d_behavior();
        if pad > 0 {
            feats.push(tape.constant(Tensor::zeros([total, pad])));
        }
        let mut x = tape.concat(&feats, 1)?;
        let pos_table = tape.param(ids.position)?;
        let pos: Vec<usize> = batch
            .iter()
            .filter(|_| cfg.use_behavior_seq)
            .flat_map(|x| x.positions.iter().copied())
            .collect();
        let pos = tape.gather(pos_table, &pos)?;
        x = tape.add(x, pos)?;
        let eps = T::of(LN_EPS);
        for layer in &ids.layers {
            let wq = tape.param(layer.wq)?;
            let wk = tape.param(layer.wk)?;
            let wv = tape.param(layer.wv)?;
            let wo = tape.param(layer.wo)?;
            let q = tape.matmul(x, wq)?;
            let k = tape.matmul(x, wk)?;
            let v = tape.matmul(x, wv)?;
            let att = tape.segment_attention(q, k, v, &lengths, cfg.heads)?;
            let o = tape.matmul(att, wo)?;
            let res = tape.add(x, o)?;
            let (g, b) = (tape.param(layer.ln1.0)?, tape.param(layer.ln1.1)?);
            x = tape.layer_norm(res, g, b, eps)?;
            let f = self.dense(tape, x, layer.ff1)?;
            let f = tape.relu(f);
            let f = self.dense(tape, f, layer.ff2)?;
            let res = tape.add(x, f)?;
            let (g, b) = (tape.param(layer.ln2.0)?, tape.param(layer.ln2.1)?);
            x = tape.layer_norm(res, g, b, eps)?;
        }
        Ok(tape.segment_mean(x, &lengths)?)
    }

    /// `[B×5×d_path]` meta-path vectors plus presence flags.
    fn encode_paths(
        &self,
        tape: &mut Tape<'_, T>,
        batch: &[&ModelInput],
        u_b: Var,
    ) -> Result<(Var, Vec<[bool; 5]>), ModelError> {
        let cfg = &self.config;
        let ids = &self.ids;
        let (n, dp) = (batch.len(), cfg.d_path);
        let mut presence = vec![[false; 5]; n];
        let mut user_proj = None;
        let mut slots = Vec::with_capacity(5);
        for mp in MetaPath::ALL {
            let j = mp.index();
            let mut owners = Vec::new();
            let mut counts = vec![0usize; n];
            if cfg.uses(mp) {
                for (b, x) in batch.iter().enumerate() {
                    counts[b] = x.paths[j].len();
                    presence[b][j] = counts[b] > 0;
                    owners.extend(std::iter::repeat_n(b, counts[b]));
                }
            }
            if owners.is_empty() {
                let z = tape.constant(Tensor::zeros([n, 1, dp]));
                slots.push(z);
                continue;
            }
            let m = owners.len();
            let insts: Vec<&[PathNode]> = batch
                .iter()
                .flat_map(|x| x.paths[j].iter().map(|p| p.nodes.as_slice()))
                .collect();
            let mut nodes = Vec::with_capacity(mp.len());
            for t in 0..mp.len() {
                let h = if t == 0 {
                    let up = match user_proj {
                        Some(v) => v,
                        None => {
                            let w = tape.param(ids.proj[0])?;
                            let v = tape.matmul(u_b, w)?;
                            user_proj = Some(v);
                            v
                        }
                    };
                    tape.gather(up, &owners)?
                } else {
                    match mp.node_kinds()[t - 1] {
                        EntityKind::Item => {
                            let mut parts = Vec::with_capacity(3);
                            for f in 0..3 {
                                let idx: Vec<usize> = insts
                                    .iter()
                                    .map(|nodes| match nodes[t] {
                                        PathNode::Item { category, brand, shop } => [category, brand, shop][f],
                                        _ => unreachable!("checked by check_input"),
                                    })
                                    .collect();
                                let table = tape.param(ids.behavior[f])?;
                                parts.push(tape.gather(table, &idx)?);
                            }
                            let desc = tape.concat(&parts, 1)?;
                            let w = tape.param(ids.proj[1])?;
                            tape.matmul(desc, w)?
                        }
                        kind => {
                            let (table, proj) = match kind {
                                EntityKind::Category => (ids.path_category, ids.proj[2]),
                                EntityKind::Brand => (ids.path_brand, ids.proj[3]),
                                _ => (ids.concept, ids.proj[4]),
                            };
                            let idx: Vec<usize> = insts
                                .iter()
                                .map(|nodes| match nodes[t] {
                                    PathNode::Category(i) | PathNode::Brand(i) | PathNode::Concept(i) => i,
                                    _ => unreachable!("checked by check_input"),
                                })
                                .collect();
                            let table = tape.param(table)?;
                            let e = tape.gather(table, &idx)?;
                            let w = tape.param(proj)?;
                            tape.matmul(e, w)?
                        }
                    }
                };
                nodes.push(tape.reshape(h, &[m, 1, dp])?);
            }
            let seq = tape.concat(&nodes, 1)?;
            let (kernel, bias) = ids.cnn[j];
            let kernel = tape.param(kernel)?;
            let bias = tape.param(bias)?;
            let conv = tape.conv1d(seq, kernel)?;
            let conv = tape.add_bias(conv, bias)?;
            let conv = tape.relu(conv);
            let inst = tape.max_axis(conv, 1)?;
            let pooled = tape.segment_max(inst, &counts)?;
            slots.push(tape.reshape(pooled, &[n, 1, dp])?);
        }
        Ok((tape.concat(&slots, 1)?, presence))
    }

    /// Scores in input order, `chunk` inputs per tape.
    pub fn predict(&self, inputs: &[ModelInput], chunk: usize) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk.max(1)) {
            let refs: Vec<&ModelInput> = part.iter().collect();
            let mut tape = Tape::with_params(&self.params);
            let o = self.forward(&mut tape, &refs)?;
            out.extend(o.scores(&tape));
        }
        Ok(out)
    }

    pub fn trace(&self, input: &ModelInput) -> Result<ForwardTrace, ModelError> {
        let mut tape = Tape::with_params(&self.params);
        let o = self.forward(&mut tape, &[input])?;
        Ok(o.trace(&tape, 0))
    }
}

/// `Σ_i α[b,i] · x[b,i,:]` for `α: [B×I]`, `x: [B×I×d]`.
pub fn attention_pool<T: Real>(tape: &mut Tape<'_, T>, alpha: Var, x: Var) -> Result<Var, ModelError> {
    let (n, i, d) = {
        let s = tape.shape(x);
        (s[0], s[1], s[2])
    };
    let a = tape.reshape(alpha, &[n, 1, i])?;
    let y = tape.bmm(a, x, false)?;
    Ok(tape.reshape(y, &[n, d])?)
}

/// Attention weights from the cube
/// `att[i,j,k] = u_iᵀW1 p_j + p_jᵀW2 c_k + u_iᵀW3 c_k`, each α being the
/// softmax of the cube summed over the other two axes.
///
/// `u: [B×I×du]`, `p: [B×J×dp]`, `c: [B×K×dc]`, `w = [W1: du×dp, W2: dp×dc,
/// W3: du×dc]`. Returns `α_u: [B×I]`, `α_p: [B×J]`, `α_c: [B×K]`.
pub fn attention_cube<T: Real>(
    tape: &mut Tape<'_, T>,
    u: Var,
    p: Var,
    c: Var,
    w: [Var; 3],
) -> Result<(Var, Var, Var), ModelError> {
    let dims = |tape: &Tape<'_, T>, v: Var| -> Result<[usize; 3], ModelError> {
        match *tape.shape(v) {
            [b, n, d] if n > 0 => Ok([b, n, d]),
            ref s => Err(TensorError::Rank {
                op: "attention_cube",
                expected: 3,
                shape: s.to_vec(),
            }
            .into()),
        }
    };
    let [n, i_len, du] = dims(tape, u)?;
    let [_, j_len, dp] = dims(tape, p)?;
    let [_, _, dc] = dims(tape, c)?;
    let u_flat = tape.reshape(u, &[n * i_len, du])?;
    let a = tape.matmul(u_flat, w[0])?;
    let a = tape.reshape(a, &[n, i_len, dp])?;
    let s_up = tape.bmm(a, p, true)?;
    let p_flat = tape.reshape(p, &[n * j_len, dp])?;
    let b = tape.matmul(p_flat, w[1])?;
    let b = tape.reshape(b, &[n, j_len, dc])?;
    let s_pc = tape.bmm(b, c, true)?;
    let c3 = tape.matmul(u_flat, w[2])?;
    let c3 = tape.reshape(c3, &[n, i_len, dc])?;
    let s_uc = tape.bmm(c3, c, true)?;
    let cube = tape.cube(s_up, s_pc, s_uc)?;
    let over_k = tape.sum_axis(cube, 3)?;
    let lu = tape.sum_axis(over_k, 2)?;
    let lp = tape.sum_axis(over_k, 1)?;
    let over_j = tape.sum_axis(cube, 2)?;
    let lc = tape.sum_axis(over_j, 1)?;
    Ok((
        tape.softmax_last(lu, None)?,
        tape.softmax_last(lp, None)?,
        tape.softmax_last(lc, None)?,
    ))
}
