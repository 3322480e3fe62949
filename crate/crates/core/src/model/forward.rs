//! Full-sequence forward pass, next-token cross-entropy and its gradient.

use crate::dataset::{Batch, TrajectoryRecord};
use crate::error::{Error, Result};

use super::float::{gemm, Float};
use super::mask::{mask_row, AttentionMask};
use super::{BlockLayout, Model};

/// One sequence, positions counted from 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqInput {
    pub ids: Vec<u32>,
    pub local_pos: Vec<u32>,
    pub prefix_len: usize,
    pub pad: Vec<bool>,
    /// Distinct hidden-prefix patterns referenced by `query_set`.
    pub hidden_sets: Vec<Vec<bool>>,
    pub query_set: Vec<Option<usize>>,
}

impl SeqInput {
    /// Sequence view of a record. With `trim`, trailing padding is dropped;
    /// padded keys are never attended to, so logits at kept positions are
    /// unchanged.
    pub fn from_record(r: &TrajectoryRecord, prefix_masking: bool, trim: bool) -> Self {
        let len = if trim { r.used_len() } else { r.len() };
        let (hidden_sets, query_set) = if prefix_masking {
            (r.prefix_hidden(), r.query_steps()[..len].to_vec())
        } else {
            (Vec::new(), vec![None; len])
        };
        SeqInput {
            ids: r.ids[..len].to_vec(),
            local_pos: r.local_pos[..len].to_vec(),
            prefix_len: r.prefix_len,
            pad: r.pad_mask[..len].to_vec(),
            hidden_sets,
            query_set,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn hidden(&self, q: usize) -> Option<&[bool]> {
        self.query_set[q].map(|i| self.hidden_sets[i].as_slice())
    }

    pub fn mask(&self) -> AttentionMask {
        let s = self.len();
        let mut bits = vec![false; s * s];
        for q in 0..s {
            mask_row(q, self.prefix_len, &self.pad, self.hidden(q), &mut bits[q * s..(q + 1) * s]);
        }
        AttentionMask { seq_len: s, bits }
    }
}

/// Which positions of a record contribute to the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Targets {
    Stage1,
    Stage2,
}

impl Targets {
    pub fn positions(self, r: &TrajectoryRecord) -> Vec<usize> {
        let m = match self {
            Targets::Stage1 => &r.loss_mask_stage1,
            Targets::Stage2 => &r.loss_mask_stage2,
        };
        m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub count: usize,
    pub correct: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        self.loss_sum / self.count as f64
    }

    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }

    pub fn add(&mut self, o: LossStats) {
        self.loss_sum += o.loss_sum;
        self.count += o.count;
        self.correct += o.correct;
    }
}

/// Mean negative log-likelihood of `ids[p]` under `logits[p - 1]` over the
/// masked positions; `logits` is `[len, vocab]`. Returns `None` when the
/// mask selects nothing.
pub fn masked_ce_loss<T: Float>(logits: &[T], vocab: usize, ids: &[u32], mask: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for p in 1..ids.len() {
        if mask[p] {
            let row = &logits[(p - 1) * vocab..p * vocab];
            let (lse, _) = log_sum_exp(row);
            sum += lse - row[ids[p] as usize].to_f64().unwrap();
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

fn log_sum_exp<T: Float>(row: &[T]) -> (f64, usize) {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    let m = row[best].to_f64().unwrap();
    let s: f64 = row.iter().map(|&x| (x.to_f64().unwrap() - m).exp()).sum();
    (m + s.ln(), best)
}

pub(crate) fn rms_norm<T: Float>(x: &[T], g: &[T], eps: f64, y: &mut [T], inv: &mut [T]) {
    let d = g.len();
    let eps = T::f(eps);
    for (r, (xr, yr)) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / T::f(d as f64);
        let iv = T::one() / (ms + eps).sqrt();
        inv[r] = iv;
        for i in 0..d {
            yr[i] = xr[i] * iv * g[i];
        }
    }
}

/// Adds the input gradient of RMS norm into `dx` and the gain gradient into `dg`.
fn rms_norm_back<T: Float>(x: &[T], g: &[T], inv: &[T], dy: &[T], dx: &mut [T], dg: &mut [T]) {
    let d = g.len();
    let dd = T::f(d as f64);
    for r in 0..inv.len() {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let iv = inv[r];
        let mut dot = T::zero();
        for i in 0..d {
            dot += dyr[i] * g[i] * xr[i];
            dg[i] += dyr[i] * xr[i] * iv;
        }
        let c = dot * iv * iv * iv / dd;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += dyr[i] * g[i] * iv - xr[i] * c;
        }
    }
}

fn silu<T: Float>(a: T) -> T {
    a / (T::one() + (-a).exp())
}

/// Scores, softmax and weighted values for `m` queries against `s` keys.
/// `probs` receives `[heads, m, s]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    m: usize,
    s: usize,
    hq: usize,
    hkv: usize,
    dh: usize,
    mask: &[bool],
    probs: &mut [T],
    o: &mut [T],
) {
    let group = hq / hkv;
    let scale = T::f(1.0 / (dh as f64).sqrt());
    let (qw, kw) = (hq * dh, hkv * dh);
    for h in 0..hq {
        let kh = h / group;
        let p = &mut probs[h * m * s..(h + 1) * m * s];
        gemm(false, true, m, s, dh, scale, &q[h * dh..], qw, &k[kh * dh..], kw, T::zero(), p, s);
        for r in 0..m {
            let row = &mut p[r * s..(r + 1) * s];
            let mrow = &mask[r * s..(r + 1) * s];
            let mut mx = T::neg_infinity();
            for j in 0..s {
                if mrow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == T::neg_infinity() {
                row.iter_mut().for_each(|x| *x = T::zero());
                continue;
            }
            let mut sum = T::zero();
            for j in 0..s {
                row[j] = if mrow[j] { (row[j] - mx).exp() } else { T::zero() };
                sum += row[j];
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        gemm(false, false, m, dh, s, T::one(), p, s, &v[kh * dh..], kw, T::zero(), &mut o[h * dh..], qw);
    }
}

#[allow(clippy::too_many_arguments)]
fn attend_back<T: Float>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    d_o: &[T],
    m: usize,
    hq: usize,
    hkv: usize,
    dh: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
    scratch: &mut Vec<T>,
) {
    let s = m;
    let group = hq / hkv;
    let scale = T::f(1.0 / (dh as f64).sqrt());
    let (qw, kw) = (hq * dh, hkv * dh);
    scratch.resize(m * s, T::zero());
    for h in 0..hq {
        let kh = h / group;
        let p = &probs[h * m * s..(h + 1) * m * s];
        let dp = &mut scratch[..];
        gemm(false, true, m, s, dh, T::one(), &d_o[h * dh..], qw, &v[kh * dh..], kw, T::zero(), dp, s);
        gemm(true, false, s, dh, m, T::one(), p, s, &d_o[h * dh..], qw, T::one(), &mut dv[kh * dh..], kw);
        for r in 0..m {
            let pr = &p[r * s..(r + 1) * s];
            let dr = &mut dp[r * s..(r + 1) * s];
            let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
            for j in 0..s {
                dr[j] = pr[j] * (dr[j] - dot) * scale;
            }
        }
        gemm(false, false, m, dh, s, T::one(), dp, s, &k[kh * dh..], kw, T::zero(), &mut dq[h * dh..], qw);
        gemm(true, false, s, dh, m, T::one(), dp, s, &q[h * dh..], qw, T::one(), &mut dk[kh * dh..], kw);
    }
}

/// Activations of one block kept for the backward pass.
#[derive(Default)]
struct BlockActs<T> {
    x_in: Vec<T>,
    inv1: Vec<T>,
    n1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    o: Vec<T>,
    x_mid: Vec<T>,
    inv2: Vec<T>,
    n2: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    g: Vec<T>,
}

/// Sequences packed row-wise into one token matrix.
struct Packed {
    starts: Vec<usize>,
    /// Offset of each sequence's attention probabilities per block.
    prob_starts: Vec<usize>,
    masks: Vec<AttentionMask>,
    rows: usize,
}

impl<T: Float> Model<T> {
    fn check_inputs(&self, seqs: &[SeqInput]) -> Result<()> {
        let c = &self.config;
        for s in seqs {
            if s.len() > c.max_len {
                return Err(Error::Length { need: s.len(), max: c.max_len });
            }
            if s.local_pos.len() != s.len() || s.pad.len() != s.len() || s.query_set.len() != s.len() {
                return Err(Error::Shape("sequence fields differ in length".into()));
            }
            if let Some(&id) = s.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
                return Err(Error::Range(format!("token id {id} outside vocabulary")));
            }
            if let Some(&lp) = s.local_pos.iter().find(|&&p| p as usize >= c.max_len) {
                return Err(Error::Range(format!("local position {lp} outside table")));
            }
            if s.prefix_len > s.len() {
                return Err(Error::Shape("prefix longer than sequence".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn embed_into(&self, ids: &[u32], local: &[u32], x: &mut [T]) {
        let d = self.config.embed_dim;
        let te = &self.params[self.layout.tok_emb..];
        let le = &self.params[self.layout.loc_emb..];
        for (t, row) in x.chunks_exact_mut(d).enumerate() {
            let a = &te[ids[t] as usize * d..(ids[t] as usize + 1) * d];
            let b = &le[local[t] as usize * d..(local[t] as usize + 1) * d];
            for i in 0..d {
                row[i] = a[i] + b[i];
            }
        }
    }

    /// Norm plus query/key/value projections with rotary phase for `rows`
    /// tokens at global positions `pos`.
    pub(crate) fn qkv(&self, bl: &BlockLayout, x: &[T], pos: &[usize], n1: &mut [T], inv1: &mut [T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let c = &self.config;
        let (d, dh) = (c.embed_dim, c.head_dim());
        let rows = pos.len();
        let p = &self.params;
        rms_norm(x, &p[bl.attn_norm..bl.attn_norm + d], c.norm_eps, n1, inv1);
        let (qw, kw) = (c.q_heads * dh, c.kv_heads * dh);
        let mut q = vec![T::zero(); rows * qw];
        let mut k = vec![T::zero(); rows * kw];
        let mut v = vec![T::zero(); rows * kw];
        gemm(false, false, rows, qw, d, T::one(), n1, d, &p[bl.wq..], qw, T::zero(), &mut q, qw);
        gemm(false, false, rows, kw, d, T::one(), n1, d, &p[bl.wk..], kw, T::zero(), &mut k, kw);
        gemm(false, false, rows, kw, d, T::one(), n1, d, &p[bl.wv..], kw, T::zero(), &mut v, kw);
        for (r, &ps) in pos.iter().enumerate() {
            self.rope.apply(&mut q[r * qw..(r + 1) * qw], ps, c.q_heads, T::one());
            self.rope.apply(&mut k[r * kw..(r + 1) * kw], ps, c.kv_heads, T::one());
        }
        (q, k, v)
    }

    /// Output projection plus residual, then the gated feed-forward
    /// sublayer. Returns the block output and, when asked, its activations.
    #[allow(clippy::type_complexity)]
    pub(crate) fn block_tail(&self, bl: &BlockLayout, x_in: &[T], o: &[T], keep: bool) -> (Vec<T>, Option<(Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>)>) {
        let c = &self.config;
        let (d, f) = (c.embed_dim, c.ffn_dim);
        let qw = c.q_heads * c.head_dim();
        let rows = x_in.len() / d;
        let p = &self.params;
        let mut x_mid = x_in.to_vec();
        gemm(false, false, rows, d, qw, T::one(), o, qw, &p[bl.wo..], d, T::one(), &mut x_mid, d);
        let mut n2 = vec![T::zero(); rows * d];
        let mut inv2 = vec![T::zero(); rows];
        rms_norm(&x_mid, &p[bl.ffn_norm..bl.ffn_norm + d], c.norm_eps, &mut n2, &mut inv2);
        let mut a = vec![T::zero(); rows * f];
        let mut b = vec![T::zero(); rows * f];
        gemm(false, false, rows, f, d, T::one(), &n2, d, &p[bl.w1..], f, T::zero(), &mut a, f);
        gemm(false, false, rows, f, d, T::one(), &n2, d, &p[bl.w3..], f, T::zero(), &mut b, f);
        let g: Vec<T> = a.iter().zip(&b).map(|(&ai, &bi)| silu(ai) * bi).collect();
        let mut out = x_mid.clone();
        gemm(false, false, rows, d, f, T::one(), &g, f, &p[bl.w2..], d, T::one(), &mut out, d);
        let acts = keep.then_some((x_mid, inv2, n2, a, b, g));
        (out, acts)
    }

    fn pack(&self, seqs: &[SeqInput]) -> Packed {
        let hq = self.config.q_heads;
        let mut starts = Vec::with_capacity(seqs.len());
        let mut prob_starts = Vec::with_capacity(seqs.len());
        let (mut at, mut pat) = (0, 0);
        for s in seqs {
            starts.push(at);
            prob_starts.push(pat);
            at += s.len();
            pat += hq * s.len() * s.len();
        }
        Packed {
            starts,
            prob_starts,
            masks: seqs.iter().map(|s| s.mask()).collect(),
            rows: at,
        }
    }

    /// Runs every block; returns final hidden states `[rows, d]`.
    fn encode(&self, seqs: &[SeqInput], pk: &Packed, mut acts: Option<&mut Vec<BlockActs<T>>>) -> Vec<T> {
        let c = &self.config;
        let d = c.embed_dim;
        let dh = c.head_dim();
        let qw = c.q_heads * dh;
        let kw = c.kv_heads * dh;
        let rows = pk.rows;
        let mut x = vec![T::zero(); rows * d];
        let ids: Vec<u32> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let local: Vec<u32> = seqs.iter().flat_map(|s| s.local_pos.iter().copied()).collect();
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        self.embed_into(&ids, &local, &mut x);
        let total_probs = pk.prob_starts.last().map_or(0, |&s| s) + seqs.last().map_or(0, |s| c.q_heads * s.len() * s.len());
        for bl in &self.layout.blocks {
            let mut n1 = vec![T::zero(); rows * d];
            let mut inv1 = vec![T::zero(); rows];
            let (q, k, v) = self.qkv(bl, &x, &pos, &mut n1, &mut inv1);
            let mut o = vec![T::zero(); rows * qw];
            let mut probs = vec![T::zero(); total_probs];
            for (si, s) in seqs.iter().enumerate() {
                let (st, m) = (pk.starts[si], s.len());
                let ps = pk.prob_starts[si];
                attend(
                    &q[st * qw..(st + m) * qw],
                    &k[st * kw..(st + m) * kw],
                    &v[st * kw..(st + m) * kw],
                    m,
                    m,
                    c.q_heads,
                    c.kv_heads,
                    dh,
                    &pk.masks[si].bits,
                    &mut probs[ps..ps + c.q_heads * m * m],
                    &mut o[st * qw..(st + m) * qw],
                );
            }
            let keep = acts.is_some();
            let (out, tail) = self.block_tail(bl, &x, &o, keep);
            if let Some(store) = acts.as_deref_mut() {
                let (x_mid, inv2, n2, a, b, g) = tail.unwrap();
                store.push(BlockActs { x_in: std::mem::take(&mut x), inv1, n1, q, k, v, probs, o, x_mid, inv2, n2, a, b, g });
            }
            x = out;
        }
        x
    }

    /// Final norm and vocabulary projection for the given rows of `x`.
    fn project(&self, x: &[T], rows: &[usize]) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let c = &self.config;
        let (d, vsz) = (c.embed_dim, c.vocab_size);
        let gathered: Vec<T> = rows.iter().flat_map(|&r| x[r * d..(r + 1) * d].iter().copied()).collect();
        let mut nf = vec![T::zero(); rows.len() * d];
        let mut inv = vec![T::zero(); rows.len()];
        let fnm = self.layout.final_norm;
        rms_norm(&gathered, &self.params[fnm..fnm + d], c.norm_eps, &mut nf, &mut inv);
        let mut logits = vec![T::zero(); rows.len() * vsz];
        gemm(false, false, rows.len(), vsz, d, T::one(), &nf, d, &self.params[self.layout.out..], vsz, T::zero(), &mut logits, vsz);
        (logits, gathered, nf, inv)
    }

    /// Next-token logits at every position of every sequence, `[rows, vocab]`.
    pub fn forward_seqs(&self, seqs: &[SeqInput]) -> Result<Vec<Vec<T>>> {
        self.check_inputs(seqs)?;
        let pk = self.pack(seqs);
        let x = self.encode(seqs, &pk, None);
        let vsz = self.config.vocab_size;
        Ok(seqs
            .iter()
            .enumerate()
            .map(|(si, s)| {
                let rows: Vec<usize> = (pk.starts[si]..pk.starts[si] + s.len()).collect();
                let (logits, ..) = self.project(&x, &rows);
                debug_assert_eq!(logits.len(), rows.len() * vsz);
                logits
            })
            .collect())
    }

    /// Logits `[B, L, vocab]` over the untrimmed records of a batch.
    pub fn forward(&self, batch: &Batch) -> Result<Vec<T>> {
        let seqs: Vec<SeqInput> =
            batch.records.iter().map(|r| SeqInput::from_record(r, self.config.prefix_masking, false)).collect();
        Ok(self.forward_seqs(&seqs)?.concat())
    }

    /// Cross-entropy of `targets[i]` positions of sequence `i`. When `grad`
    /// is given, adds `grad_scale × ∂loss_sum/∂θ` into it.
    pub fn loss_and_grad(
        &self,
        seqs: &[SeqInput],
        targets: &[Vec<usize>],
        grad: Option<(&mut [T], f64)>,
    ) -> Result<LossStats> {
        self.check_inputs(seqs)?;
        if targets.len() != seqs.len() {
            return Err(Error::Shape("one target list per sequence".into()));
        }
        let c = &self.config;
        let (d, vsz) = (c.embed_dim, c.vocab_size);
        let pk = self.pack(seqs);
        let mut acts = Vec::new();
        let want = grad.is_some();
        let x = self.encode(seqs, &pk, want.then_some(&mut acts));

        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (si, s) in seqs.iter().enumerate() {
            for &p in &targets[si] {
                if p == 0 || p >= s.len() {
                    return Err(Error::Shape(format!("target position {p} outside sequence")));
                }
                rows.push(pk.starts[si] + p - 1);
                labels.push(s.ids[p] as usize);
            }
        }
        let mut stats = LossStats { count: rows.len(), ..Default::default() };
        if rows.is_empty() {
            return Ok(stats);
        }
        let (mut logits, gathered, nf, inv) = self.project(&x, &rows);
        for (r, &lab) in labels.iter().enumerate() {
            let row = &mut logits[r * vsz..(r + 1) * vsz];
            let (lse, best) = log_sum_exp(row);
            stats.loss_sum += lse - row[lab].to_f64().unwrap();
            stats.correct += (best == lab) as usize;
            if want {
                for (j, z) in row.iter_mut().enumerate() {
                    let pj = (z.to_f64().unwrap() - lse).exp();
                    *z = T::f(pj - (j == lab) as u8 as f64);
                }
            }
        }
        let Some((g, scale)) = grad else { return Ok(stats) };
        let scale = T::f(scale);
        let lay = &self.layout;
        let p = &self.params;
        let m = rows.len();

        // Vocabulary projection and final norm.
        let dlogits = logits;
        gemm(true, false, d, vsz, m, scale, &nf, d, &dlogits, vsz, T::one(), &mut g[lay.out..], vsz);
        let mut dnf = vec![T::zero(); m * d];
        gemm(false, true, m, d, vsz, scale, &dlogits, vsz, &p[lay.out..], vsz, T::zero(), &mut dnf, d);
        let mut dgathered = vec![T::zero(); m * d];
        let (gf_lo, gf_hi) = (lay.final_norm, lay.final_norm + d);
        {
            let mut dgf = vec![T::zero(); d];
            rms_norm_back(&gathered, &p[gf_lo..gf_hi], &inv, &dnf, &mut dgathered, &mut dgf);
            for i in 0..d {
                g[gf_lo + i] += dgf[i];
            }
        }
        let mut dx = vec![T::zero(); pk.rows * d];
        for (r, &row) in rows.iter().enumerate() {
            for i in 0..d {
                dx[row * d + i] += dgathered[r * d + i];
            }
        }

        let dh = c.head_dim();
        let (qw, kw, f) = (c.q_heads * dh, c.kv_heads * dh, c.ffn_dim);
        let n = pk.rows;
        let pos: Vec<usize> = seqs.iter().flat_map(|s| 0..s.len()).collect();
        let mut scratch = Vec::new();
        for (bl, a) in lay.blocks.iter().zip(acts.iter()).rev() {
            // Feed-forward sublayer.
            gemm(true, false, f, d, n, T::one(), &a.g, f, &dx, d, T::one(), &mut g[bl.w2..], d);
            let mut dgate = vec![T::zero(); n * f];
            gemm(false, true, n, f, d, T::one(), &dx, d, &p[bl.w2..], d, T::zero(), &mut dgate, f);
            let mut da = vec![T::zero(); n * f];
            let mut db = vec![T::zero(); n * f];
            for i in 0..n * f {
                let ai = a.a[i];
                let sig = T::one() / (T::one() + (-ai).exp());
                let sl = ai * sig;
                db[i] = dgate[i] * sl;
                da[i] = dgate[i] * a.b[i] * (sig + ai * sig * (T::one() - sig));
            }
            gemm(true, false, d, f, n, T::one(), &a.n2, d, &da, f, T::one(), &mut g[bl.w1..], f);
            gemm(true, false, d, f, n, T::one(), &a.n2, d, &db, f, T::one(), &mut g[bl.w3..], f);
            let mut dn2 = vec![T::zero(); n * d];
            gemm(false, true, n, d, f, T::one(), &da, f, &p[bl.w1..], f, T::zero(), &mut dn2, d);
            gemm(false, true, n, d, f, T::one(), &db, f, &p[bl.w3..], f, T::one(), &mut dn2, d);
            let mut dmid = dx.clone();
            let mut dg2 = vec![T::zero(); d];
            rms_norm_back(&a.x_mid, &p[bl.ffn_norm..bl.ffn_norm + d], &a.inv2, &dn2, &mut dmid, &mut dg2);
            for i in 0..d {
                g[bl.ffn_norm + i] += dg2[i];
            }

            // Attention sublayer.
            gemm(true, false, qw, d, n, T::one(), &a.o, qw, &dmid, d, T::one(), &mut g[bl.wo..], d);
            let mut d_o = vec![T::zero(); n * qw];
            gemm(false, true, n, qw, d, T::one(), &dmid, d, &p[bl.wo..], d, T::zero(), &mut d_o, qw);
            let mut dq = vec![T::zero(); n * qw];
            let mut dk = vec![T::zero(); n * kw];
            let mut dv = vec![T::zero(); n * kw];
            for (si, s) in seqs.iter().enumerate() {
                let (st, len) = (pk.starts[si], s.len());
                let ps = pk.prob_starts[si];
                attend_back(
                    &a.q[st * qw..(st + len) * qw],
                    &a.k[st * kw..(st + len) * kw],
                    &a.v[st * kw..(st + len) * kw],
                    &a.probs[ps..ps + c.q_heads * len * len],
                    &d_o[st * qw..(st + len) * qw],
                    len,
                    c.q_heads,
                    c.kv_heads,
                    dh,
                    &mut dq[st * qw..(st + len) * qw],
                    &mut dk[st * kw..(st + len) * kw],
                    &mut dv[st * kw..(st + len) * kw],
                    &mut scratch,
                );
            }
            for (r, &ps) in pos.iter().enumerate() {
                self.rope.apply(&mut dq[r * qw..(r + 1) * qw], ps, c.q_heads, -T::one());
                self.rope.apply(&mut dk[r * kw..(r + 1) * kw], ps, c.kv_heads, -T::one());
            }
            gemm(true, false, d, qw, n, T::one(), &a.n1, d, &dq, qw, T::one(), &mut g[bl.wq..], qw);
            gemm(true, false, d, kw, n, T::one(), &a.n1, d, &dk, kw, T::one(), &mut g[bl.wk..], kw);
            gemm(true, false, d, kw, n, T::one(), &a.n1, d, &dv, kw, T::one(), &mut g[bl.wv..], kw);
            let mut dn1 = vec![T::zero(); n * d];
            gemm(false, true, n, d, qw, T::one(), &dq, qw, &p[bl.wq..], qw, T::zero(), &mut dn1, d);
            gemm(false, true, n, d, kw, T::one(), &dk, kw, &p[bl.wk..], kw, T::one(), &mut dn1, d);
            gemm(false, true, n, d, kw, T::one(), &dv, kw, &p[bl.wv..], kw, T::one(), &mut dn1, d);
            let mut dg1 = vec![T::zero(); d];
            let mut dnext = dmid;
            rms_norm_back(&a.x_in, &p[bl.attn_norm..bl.attn_norm + d], &a.inv1, &dn1, &mut dnext, &mut dg1);
            for i in 0..d {
                g[bl.attn_norm + i] += dg1[i];
            }
            dx = dnext;
        }

        // Embedding tables.
        let mut r = 0;
        for s in seqs {
            for t in 0..s.len() {
                let te = lay.tok_emb + s.ids[t] as usize * d;
                let le = lay.loc_emb + s.local_pos[t] as usize * d;
                for i in 0..d {
                    g[te + i] += dx[r * d + i];
                    g[le + i] += dx[r * d + i];
                }
                r += 1;
            }
        }
        Ok(stats)
    }

    /// Stage loss over records; see [`Model::loss_and_grad`].
    pub fn record_loss(
        &self,
        records: &[&TrajectoryRecord],
        targets: Targets,
        grad: Option<(&mut [T], f64)>,
    ) -> Result<LossStats> {
        let seqs: Vec<SeqInput> =
            records.iter().map(|r| SeqInput::from_record(r, self.config.prefix_masking, true)).collect();
        let tg: Vec<Vec<usize>> = records.iter().map(|r| targets.positions(r)).collect();
        self.loss_and_grad(&seqs, &tg, grad)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::{build_trajectory, make_batch};
    use crate::experts::{solve_expert, trace_solution};
    use crate::model::ModelConfig;
    use crate::problems::{generate_instance, ProblemKind};
    use crate::tokenizer::{encode_prefix, PAD, VOCAB_SIZE};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn sample_record(kind: ProblemKind, n: usize, seed: u64, l: usize) -> TrajectoryRecord {
        let inst = generate_instance(kind, n, seed).unwrap();
        let ep = trace_solution(&inst, &solve_expert(&inst, 12).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        build_trajectory(kind, n, &ep, &encode_prefix(&inst).unwrap(), l, &mut rng).unwrap()
    }

    #[test]
    fn uniform_logits_loss() {
        let logits = vec![0.0f64; 3 * VOCAB_SIZE];
        let l = masked_ce_loss(&logits, VOCAB_SIZE, &[1, 2, 3], &[false, true, true]).unwrap();
        assert!((l - (VOCAB_SIZE as f64).ln()).abs() < 1e-12);
        assert!((l - 7.6024).abs() < 1e-4);
        assert!(masked_ce_loss(&logits, VOCAB_SIZE, &[1, 2, 3], &[false; 3]).is_none());
    }

    #[test]
    fn one_hot_logits_loss_vanishes() {
        let mut logits = vec![0.0f64; 2 * VOCAB_SIZE];
        logits[7] = 100.0;
        logits[VOCAB_SIZE + 9] = 100.0;
        let l = masked_ce_loss(&logits, VOCAB_SIZE, &[0, 7, 9], &[false, true, true]).unwrap();
        assert!(l < 1e-40);
    }

    #[test]
    fn trimmed_and_full_logits_agree() {
        let model = Model::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let r = sample_record(ProblemKind::Tsp, 5, 1, 64);
        let full = model.forward_seqs(&[SeqInput::from_record(&r, true, false)]).unwrap();
        let trim = model.forward_seqs(&[SeqInput::from_record(&r, true, true)]).unwrap();
        let used = r.used_len() * VOCAB_SIZE;
        for (a, b) in full[0][..used].iter().zip(&trim[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_ids_do_not_leak() {
        let model = Model::<f64>::init(ModelConfig::tiny(), 3).unwrap();
        let r = sample_record(ProblemKind::Tsp, 5, 1, 64);
        let mut seq = SeqInput::from_record(&r, true, false);
        let base = model.forward_seqs(&[seq.clone()]).unwrap();
        let last = seq.len() - 1;
        assert_eq!(seq.ids[last], PAD);
        seq.ids[last] = 7;
        let changed = model.forward_seqs(&[seq]).unwrap();
        let used = r.used_len() * VOCAB_SIZE;
        assert_eq!(base[0][..used], changed[0][..used]);
    }

    #[test]
    fn batch_order_permutes_outputs() {
        let model = Model::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let a = sample_record(ProblemKind::Tsp, 5, 1, 48);
        let b = sample_record(ProblemKind::Knapsack, 5, 2, 48);
        let ab = model.forward(&make_batch(vec![a.clone(), b.clone()]).unwrap()).unwrap();
        let ba = model.forward(&make_batch(vec![b, a]).unwrap()).unwrap();
        let half = 48 * VOCAB_SIZE;
        assert_eq!(ab[..half], ba[half..]);
        assert_eq!(ab[half..], ba[..half]);
        assert_eq!(ab.len(), 2 * 48 * VOCAB_SIZE);
    }

    #[test]
    fn loss_matches_dense_reference() {
        let model = Model::<f64>::init(ModelConfig::tiny(), 5).unwrap();
        let r = sample_record(ProblemKind::Knapsack, 6, 4, 64);
        let logits = model.forward_seqs(&[SeqInput::from_record(&r, true, true)]).unwrap();
        let len = r.used_len();
        let dense = masked_ce_loss(&logits[0], VOCAB_SIZE, &r.ids[..len], &r.loss_mask_stage2[..len]).unwrap();
        let stats = model.record_loss(&[&r], Targets::Stage2, None).unwrap();
        assert!((stats.mean() - dense).abs() < 1e-12);
        assert_eq!(stats.count, r.window_len());
    }

    #[test]
    fn out_of_vocab_id_rejected() {
        let model = Model::<f32>::init(ModelConfig::tiny(), 5).unwrap();
        let r = sample_record(ProblemKind::Tsp, 4, 4, 32);
        let mut s = SeqInput::from_record(&r, true, true);
        s.ids[0] = 5000;
        assert!(matches!(model.forward_seqs(&[s]), Err(Error::Range(_))));
    }

    fn grad_check(cfg: ModelConfig, targets: Targets, probes: usize, seed: u64) -> f64 {
        let mut model = Model::<f64>::init(cfg, seed).unwrap();
        let recs = [sample_record(ProblemKind::Tsp, 5, seed, 64), sample_record(ProblemKind::Cvrp, 4, seed, 64)];
        let refs: Vec<&TrajectoryRecord> = recs.iter().collect();
        let mut g = vec![0.0; model.num_params()];
        let stats = model.record_loss(&refs, targets, Some((&mut g, 1.0))).unwrap();
        assert!(stats.count > 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Probe parameters that actually receive gradient.
        let live: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-9).collect();
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let i = live[rand::Rng::gen_range(&mut rng, 0..live.len())];
            let h = 1e-5;
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = model.record_loss(&refs, targets, None).unwrap().loss_sum;
            model.params[i] = orig - h;
            let down = model.record_loss(&refs, targets, None).unwrap().loss_sum;
            model.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        assert!(grad_check(ModelConfig::tiny(), Targets::Stage2, 60, 1) < 1e-4);
        assert!(grad_check(ModelConfig::tiny(), Targets::Stage1, 60, 2) < 1e-4);
    }
}
