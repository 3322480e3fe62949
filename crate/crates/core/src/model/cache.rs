//! Incremental decoding with per-layer key/value caches.

use crate::error::{Error, Result};
use crate::tokenizer::PAD;

use super::float::{gemm, Float};
use super::forward::attend;
use super::mask::mask_row;
use super::Model;

/// Keys (after rotary phase) and values of every processed position.
#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    k: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    pad: Vec<bool>,
    prefix_len: usize,
}

impl<T: Float> DecodeCache<T> {
    pub fn new(model: &Model<T>, prefix_len: usize) -> Self {
        let layers = model.config.layers;
        DecodeCache { k: vec![Vec::new(); layers], v: vec![Vec::new(); layers], pad: Vec::new(), prefix_len }
    }

    pub fn len(&self) -> usize {
        self.pad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad.is_empty()
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }
}

impl<T: Float> Model<T> {
    /// Appends `ids` at global `positions` and returns their next-token
    /// logits `[ids.len(), vocab]`. `hidden` flags prefix tokens invisible
    /// to the new queries; the cached keys themselves are never rewritten.
    pub fn forward_incremental(
        &self,
        cache: &mut DecodeCache<T>,
        ids: &[u32],
        positions: &[usize],
        local_pos: &[u32],
        hidden: Option<&[bool]>,
    ) -> Result<Vec<T>> {
        self.incremental(cache, ids, positions, local_pos, hidden, false)
    }

    /// As [`Model::forward_incremental`] but projects only the last new position.
    pub fn forward_incremental_last(
        &self,
        cache: &mut DecodeCache<T>,
        ids: &[u32],
        positions: &[usize],
        local_pos: &[u32],
        hidden: Option<&[bool]>,
    ) -> Result<Vec<T>> {
        self.incremental(cache, ids, positions, local_pos, hidden, true)
    }

    fn incremental(
        &self,
        cache: &mut DecodeCache<T>,
        ids: &[u32],
        positions: &[usize],
        local_pos: &[u32],
        hidden: Option<&[bool]>,
        last_only: bool,
    ) -> Result<Vec<T>> {
        let c = &self.config;
        let m = ids.len();
        if m == 0 {
            return Ok(Vec::new());
        }
        if positions.len() != m || local_pos.len() != m {
            return Err(Error::Shape("ids, positions and local positions differ in length".into()));
        }
        let start = cache.len();
        for (i, &p) in positions.iter().enumerate() {
            if p != start + i {
                return Err(Error::CacheOrder { got: p, last: (start + i).wrapping_sub(1) });
            }
        }
        if start + m > c.max_len {
            return Err(Error::Length { need: start + m, max: c.max_len });
        }
        if start < cache.prefix_len && (start > 0 || m < cache.prefix_len) {
            return Err(Error::Shape("the whole prefix must be fed in the first call".into()));
        }
        if let Some(h) = hidden {
            if h.len() != cache.prefix_len {
                return Err(Error::Shape(format!("hidden row of {} for prefix {}", h.len(), cache.prefix_len)));
            }
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::Range(format!("token id {id} outside vocabulary")));
        }
        if let Some(&lp) = local_pos.iter().find(|&&p| p as usize >= c.max_len) {
            return Err(Error::Range(format!("local position {lp} outside table")));
        }

        let (d, dh) = (c.embed_dim, c.head_dim());
        let (qw, kw) = (c.q_heads * dh, c.kv_heads * dh);
        cache.pad.extend(ids.iter().map(|&id| id == PAD));
        let s = cache.len();
        let mut mask = vec![false; m * s];
        for i in 0..m {
            let q = start + i;
            let h = if q <= cache.prefix_len { None } else { hidden };
            mask_row(q, cache.prefix_len, &cache.pad, h, &mut mask[i * s..(i + 1) * s]);
        }

        let mut x = vec![T::zero(); m * d];
        self.embed_into(ids, local_pos, &mut x);
        let mut probs = vec![T::zero(); c.q_heads * m * s];
        for (l, bl) in self.layout.blocks.iter().enumerate() {
            let mut n1 = vec![T::zero(); m * d];
            let mut inv1 = vec![T::zero(); m];
            let (q, k, v) = self.qkv(bl, &x, positions, &mut n1, &mut inv1);
            cache.k[l].extend_from_slice(&k);
            cache.v[l].extend_from_slice(&v);
            let mut o = vec![T::zero(); m * qw];
            attend(&q, &cache.k[l], &cache.v[l], m, s, c.q_heads, c.kv_heads, dh, &mask, &mut probs, &mut o);
            debug_assert_eq!(cache.k[l].len(), s * kw);
            x = self.block_tail(bl, &x, &o, false).0;
        }

        let rows: Vec<usize> = if last_only { vec![m - 1] } else { (0..m).collect() };
        let vsz = c.vocab_size;
        let gathered: Vec<T> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        let mut nf = vec![T::zero(); rows.len() * d];
        let mut inv = vec![T::zero(); rows.len()];
        let fnm = self.layout.final_norm;
        super::forward::rms_norm(&gathered, &self.params[fnm..fnm + d], c.norm_eps, &mut nf, &mut inv);
        let mut logits = vec![T::zero(); rows.len() * vsz];
        gemm(false, false, rows.len(), vsz, d, T::one(), &nf, d, &self.params[self.layout.out..], vsz, T::zero(), &mut logits, vsz);
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SeqInput};
    use crate::problems::ProblemKind;

    fn record() -> crate::dataset::TrajectoryRecord {
        crate::model::forward::tests::sample_record(ProblemKind::Tsp, 5, 2, 64)
    }

    #[test]
    fn token_by_token_matches_full() {
        let model = Model::<f64>::init(ModelConfig::tiny(), 9).unwrap();
        let r = record();
        let seq = SeqInput::from_record(&r, true, true);
        let full = &model.forward_seqs(std::slice::from_ref(&seq)).unwrap()[0];
        let hidden = r.prefix_hidden();
        let steps = r.query_steps();
        let p = r.prefix_len;
        let mut cache = DecodeCache::new(&model, p);
        let mut got = model
            .forward_incremental(&mut cache, &seq.ids[..=p], &(0..=p).collect::<Vec<_>>(), &seq.local_pos[..=p], None)
            .unwrap();
        for t in p + 1..seq.len() {
            let h = steps[t].map(|j| hidden[j].as_slice());
            got.extend(model.forward_incremental(&mut cache, &seq.ids[t..=t], &[t], &seq.local_pos[t..=t], h).unwrap());
        }
        let worst = full.iter().zip(&got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn empty_feed_and_order_errors() {
        let model = Model::<f32>::init(ModelConfig::tiny(), 9).unwrap();
        let mut cache = DecodeCache::new(&model, 2);
        assert!(model.forward_incremental(&mut cache, &[], &[], &[], None).unwrap().is_empty());
        assert_eq!(cache.len(), 0);
        assert!(matches!(
            model.forward_incremental(&mut cache, &[1], &[0], &[0], None),
            Err(Error::Shape(_))
        ));
        model.forward_incremental(&mut cache, &[1, 2, 2001], &[0, 1, 2], &[0, 1, 0], None).unwrap();
        assert!(matches!(
            model.forward_incremental(&mut cache, &[5], &[1], &[0], None),
            Err(Error::CacheOrder { got: 1, .. })
        ));
    }

    #[test]
    fn masking_at_step_leaves_earlier_outputs() {
        let model = Model::<f64>::init(ModelConfig::tiny(), 4).unwrap();
        let ids = [300u32, 400, 500, 600, 2001, 700, 800];
        let local = [0u32, 1, 2, 3, 0, 0, 1];
        let mut a = DecodeCache::new(&model, 4);
        let mut b = DecodeCache::new(&model, 4);
        let head_a = model.forward_incremental(&mut a, &ids[..6], &[0, 1, 2, 3, 4, 5], &local[..6], None).unwrap();
        let head_b = model.forward_incremental(&mut b, &ids[..6], &[0, 1, 2, 3, 4, 5], &local[..6], None).unwrap();
        assert_eq!(head_a, head_b);
        let hide = [true, true, false, false];
        let ta = model.forward_incremental(&mut a, &ids[6..], &[6], &local[6..], None).unwrap();
        let tb = model.forward_incremental(&mut b, &ids[6..], &[6], &local[6..], Some(&hide)).unwrap();
        assert_ne!(ta, tb);
    }
}
