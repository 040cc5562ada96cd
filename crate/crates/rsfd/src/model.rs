//! All trainable parameters in one place, with a single canonical tensor
//! ordering shared by the optimizer, checkpointing, and gradient checks.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderBlockWeights, EmbeddingTable, OutputHead};
use crate::dss::DssWeights;
use crate::encoder::HighwayWeights;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_v: usize,
    pub d_h: usize,
    pub heads: usize,
    pub d_e: usize,
    pub t_max: usize,
    pub n_layers: usize,
}

#[derive(Debug, Clone)]
pub struct ModelState {
    pub dims: ModelDims,
    pub hel_image: HighwayWeights,
    pub hel_motion: HighwayWeights,
    pub embedding: EmbeddingTable,
    pub blocks: Vec<DecoderBlockWeights>,
    pub head: OutputHead,
    pub dss: DssWeights,
}

/// Reference to one named tensor plus its weight-decay eligibility.
pub enum TensorRef<'a> {
    V1(&'a Array1<f64>),
    V2(&'a Array2<f64>),
}

pub enum TensorMut<'a> {
    V1(&'a mut Array1<f64>),
    V2(&'a mut Array2<f64>),
}

impl TensorRef<'_> {
    pub fn len(&self) -> usize {
        match self {
            TensorRef::V1(a) => a.len(),
            TensorRef::V2(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            TensorRef::V1(a) => Box::new(a.iter()),
            TensorRef::V2(a) => Box::new(a.iter()),
        }
    }
}

impl TensorMut<'_> {
    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            TensorMut::V1(a) => Box::new(a.iter_mut()),
            TensorMut::V2(a) => Box::new(a.iter_mut()),
        }
    }
}

impl ModelState {
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        assert!(dims.d_h % dims.heads == 0, "heads must divide d_h");
        ModelState {
            dims,
            hel_image: HighwayWeights::init(dims.d_v, dims.d_h, rng),
            hel_motion: HighwayWeights::init(dims.d_v, dims.d_h, rng),
            embedding: EmbeddingTable::init(dims.d_e, dims.d_h, dims.t_max, rng),
            blocks: (0..dims.n_layers)
                .map(|_| DecoderBlockWeights::init(dims.d_h, rng))
                .collect(),
            head: OutputHead::init(dims.d_h, dims.d_e, rng),
            dss: DssWeights::init(dims.d_h, rng),
        }
    }

    /// Zero gradient accumulator shaped like this model.
    pub fn zeros_like(&self) -> Self {
        ModelState {
            dims: self.dims,
            hel_image: self.hel_image.zeros_like(),
            hel_motion: self.hel_motion.zeros_like(),
            embedding: EmbeddingTable {
                table: Array2::zeros(self.embedding.table.dim()),
                positional: self.embedding.positional.clone(),
            },
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            head: OutputHead {
                w_p: Array2::zeros(self.head.w_p.dim()),
            },
            dss: DssWeights {
                w_a: Array2::zeros(self.dss.w_a.dim()),
            },
        }
    }

    /// Canonical (name, tensor, decay) listing of all trainable tensors.
    /// Must stay in lockstep with `for_each_param_mut`; a unit test checks
    /// the orderings agree.
    pub fn param_list(&self) -> Vec<(String, TensorRef<'_>, bool)> {
        let mut out: Vec<(String, TensorRef<'_>, bool)> = Vec::new();
        out.push(("hel_image.w_eh".into(), TensorRef::V2(&self.hel_image.w_eh), true));
        out.push(("hel_image.w_ep".into(), TensorRef::V2(&self.hel_image.w_ep), true));
        out.push(("hel_image.w_et".into(), TensorRef::V2(&self.hel_image.w_et), true));
        out.push(("hel_image.b_et".into(), TensorRef::V1(&self.hel_image.b_et), true));
        out.push(("hel_image.bn_scale".into(), TensorRef::V1(&self.hel_image.bn_scale), false));
        out.push(("hel_image.bn_shift".into(), TensorRef::V1(&self.hel_image.bn_shift), false));
        out.push(("hel_motion.w_eh".into(), TensorRef::V2(&self.hel_motion.w_eh), true));
        out.push(("hel_motion.w_ep".into(), TensorRef::V2(&self.hel_motion.w_ep), true));
        out.push(("hel_motion.w_et".into(), TensorRef::V2(&self.hel_motion.w_et), true));
        out.push(("hel_motion.b_et".into(), TensorRef::V1(&self.hel_motion.b_et), true));
        out.push(("hel_motion.bn_scale".into(), TensorRef::V1(&self.hel_motion.bn_scale), false));
        out.push(("hel_motion.bn_shift".into(), TensorRef::V1(&self.hel_motion.bn_shift), false));
        out.push(("embedding.table".into(), TensorRef::V2(&self.embedding.table), true));
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.self.w_q"), TensorRef::V2(&b.self_attn.w_q), true));
            out.push((format!("block{i}.self.w_k"), TensorRef::V2(&b.self_attn.w_k), true));
            out.push((format!("block{i}.self.w_v"), TensorRef::V2(&b.self_attn.w_v), true));
            out.push((format!("block{i}.self.w_o"), TensorRef::V2(&b.self_attn.w_o), true));
            out.push((format!("block{i}.cross.w_q"), TensorRef::V2(&b.cross_attn.w_q), true));
            out.push((format!("block{i}.cross.w_k"), TensorRef::V2(&b.cross_attn.w_k), true));
            out.push((format!("block{i}.cross.w_v"), TensorRef::V2(&b.cross_attn.w_v), true));
            out.push((format!("block{i}.cross.w_o"), TensorRef::V2(&b.cross_attn.w_o), true));
            out.push((format!("block{i}.ffn_w1"), TensorRef::V2(&b.ffn_w1), true));
            out.push((format!("block{i}.ffn_b1"), TensorRef::V1(&b.ffn_b1), true));
            out.push((format!("block{i}.ffn_w2"), TensorRef::V2(&b.ffn_w2), true));
            out.push((format!("block{i}.ffn_b2"), TensorRef::V1(&b.ffn_b2), true));
            out.push((format!("block{i}.ln1.scale"), TensorRef::V1(&b.ln1.scale), true));
            out.push((format!("block{i}.ln1.shift"), TensorRef::V1(&b.ln1.shift), true));
            out.push((format!("block{i}.ln2.scale"), TensorRef::V1(&b.ln2.scale), true));
            out.push((format!("block{i}.ln2.shift"), TensorRef::V1(&b.ln2.shift), true));
            out.push((format!("block{i}.ln3.scale"), TensorRef::V1(&b.ln3.scale), true));
            out.push((format!("block{i}.ln3.shift"), TensorRef::V1(&b.ln3.shift), true));
        }
        out.push(("head.w_p".into(), TensorRef::V2(&self.head.w_p), true));
        out.push(("dss.w_a".into(), TensorRef::V2(&self.dss.w_a), true));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_list().iter().map(|(_, t, _)| t.len()).sum()
    }

    /// Flatten all trainable parameters in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t, _) in self.param_list() {
            out.extend(t.iter());
        }
        out
    }

    /// Per-scalar weight-decay mask aligned with `flatten`.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for (_, t, decay) in self.param_list() {
            out.extend(std::iter::repeat(decay).take(t.len()));
        }
        out
    }

    /// Write a flat parameter vector back in canonical order.
    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut idx = 0;
        self.for_each_param_mut(|_, mut t| {
            for x in t.iter_mut() {
                *x = flat[idx];
                idx += 1;
            }
        });
        assert_eq!(idx, flat.len(), "flat vector length mismatch");
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, TensorMut<'_>)) {
        f("hel_image.w_eh", TensorMut::V2(&mut self.hel_image.w_eh));
        f("hel_image.w_ep", TensorMut::V2(&mut self.hel_image.w_ep));
        f("hel_image.w_et", TensorMut::V2(&mut self.hel_image.w_et));
        f("hel_image.b_et", TensorMut::V1(&mut self.hel_image.b_et));
        f("hel_image.bn_scale", TensorMut::V1(&mut self.hel_image.bn_scale));
        f("hel_image.bn_shift", TensorMut::V1(&mut self.hel_image.bn_shift));
        f("hel_motion.w_eh", TensorMut::V2(&mut self.hel_motion.w_eh));
        f("hel_motion.w_ep", TensorMut::V2(&mut self.hel_motion.w_ep));
        f("hel_motion.w_et", TensorMut::V2(&mut self.hel_motion.w_et));
        f("hel_motion.b_et", TensorMut::V1(&mut self.hel_motion.b_et));
        f("hel_motion.bn_scale", TensorMut::V1(&mut self.hel_motion.bn_scale));
        f("hel_motion.bn_shift", TensorMut::V1(&mut self.hel_motion.bn_shift));
        f("embedding.table", TensorMut::V2(&mut self.embedding.table));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{i}.self.w_q"), TensorMut::V2(&mut b.self_attn.w_q));
            f(&format!("block{i}.self.w_k"), TensorMut::V2(&mut b.self_attn.w_k));
            f(&format!("block{i}.self.w_v"), TensorMut::V2(&mut b.self_attn.w_v));
            f(&format!("block{i}.self.w_o"), TensorMut::V2(&mut b.self_attn.w_o));
            f(&format!("block{i}.cross.w_q"), TensorMut::V2(&mut b.cross_attn.w_q));
            f(&format!("block{i}.cross.w_k"), TensorMut::V2(&mut b.cross_attn.w_k));
            f(&format!("block{i}.cross.w_v"), TensorMut::V2(&mut b.cross_attn.w_v));
            f(&format!("block{i}.cross.w_o"), TensorMut::V2(&mut b.cross_attn.w_o));
            f(&format!("block{i}.ffn_w1"), TensorMut::V2(&mut b.ffn_w1));
            f(&format!("block{i}.ffn_b1"), TensorMut::V1(&mut b.ffn_b1));
            f(&format!("block{i}.ffn_w2"), TensorMut::V2(&mut b.ffn_w2));
            f(&format!("block{i}.ffn_b2"), TensorMut::V1(&mut b.ffn_b2));
            f(&format!("block{i}.ln1.scale"), TensorMut::V1(&mut b.ln1.scale));
            f(&format!("block{i}.ln1.shift"), TensorMut::V1(&mut b.ln1.shift));
            f(&format!("block{i}.ln2.scale"), TensorMut::V1(&mut b.ln2.scale));
            f(&format!("block{i}.ln2.shift"), TensorMut::V1(&mut b.ln2.shift));
            f(&format!("block{i}.ln3.scale"), TensorMut::V1(&mut b.ln3.scale));
            f(&format!("block{i}.ln3.shift"), TensorMut::V1(&mut b.ln3.shift));
        }
        f("head.w_p", TensorMut::V2(&mut self.head.w_p));
        f("dss.w_a", TensorMut::V2(&mut self.dss.w_a));
    }

    /// Non-trainable batch-norm state, flattened for checkpointing.
    pub fn bn_state(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for hel in [&self.hel_image, &self.hel_motion] {
            out.extend(hel.bn_mean.iter());
            out.extend(hel.bn_var.iter());
            out.push(if hel.bn_initialized { 1.0 } else { 0.0 });
        }
        out
    }

    pub fn set_bn_state(&mut self, flat: &[f64]) {
        let d = self.dims.d_h;
        let mut idx = 0;
        for hel in [&mut self.hel_image, &mut self.hel_motion] {
            hel.bn_mean = Array1::from_iter(flat[idx..idx + d].iter().copied());
            idx += d;
            hel.bn_var = Array1::from_iter(flat[idx..idx + d].iter().copied());
            idx += d;
            hel.bn_initialized = flat[idx] != 0.0;
            idx += 1;
        }
        assert_eq!(idx, flat.len());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims {
            d_v: 6,
            d_h: 8,
            heads: 2,
            d_e: 10,
            t_max: 7,
            n_layers: 2,
        }
    }

    #[test]
    fn flatten_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let m = ModelState::init(dims(), &mut rng);
        let flat = m.flatten();
        assert_eq!(flat.len(), m.num_params());
        let mut m2 = ModelState::init(dims(), &mut rng);
        m2.unflatten(&flat);
        assert_eq!(m2.flatten(), flat);
    }

    #[test]
    fn param_list_and_mut_visit_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut m = ModelState::init(dims(), &mut rng);
        let names: Vec<String> = m.param_list().iter().map(|(n, _, _)| n.clone()).collect();
        let mut mut_names = Vec::new();
        m.for_each_param_mut(|n, _| mut_names.push(n.to_string()));
        assert_eq!(names, mut_names);
    }

    #[test]
    fn bn_params_excluded_from_decay() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let m = ModelState::init(dims(), &mut rng);
        for (name, _, decay) in m.param_list() {
            if name.contains("bn_") {
                assert!(!decay, "{name} must not decay");
            }
        }
    }

    #[test]
    fn bn_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut m = ModelState::init(dims(), &mut rng);
        m.hel_image.freeze_identity_stats();
        m.hel_image.bn_mean[0] = 0.5;
        let state = m.bn_state();
        let mut m2 = ModelState::init(dims(), &mut rng);
        m2.set_bn_state(&state);
        assert_eq!(m2.bn_state(), state);
    }
}
