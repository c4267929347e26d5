//! Single-layer Elman network with ReLU hidden units and a softmax output.
//!
//! `h' = relu(W_in[x] + W_rec h + b_h)`, `p = softmax(W_out h' + b_out)`.
//! `w_in` and `w_out` are stored one row per token (`V x H`), `w_rec` as
//! `H x H` with row `i` feeding hidden unit `i`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use super::vocab::{Token, Vocab};
use super::SeqError;

pub trait Real: Float + FromPrimitive + Debug + Default + Send + Sync + 'static {
    const BYTES: usize;
    fn put(self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite constant")
    }

    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const BYTES: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f32::from_le_bytes(b.try_into().unwrap())
    }
}

impl Real for f64 {
    const BYTES: usize = 8;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get(b: &[u8]) -> Self {
        f64::from_le_bytes(b.try_into().unwrap())
    }
}

pub const BLOCK_NAMES: [&str; 5] = ["w_in", "w_rec", "w_out", "b_h", "b_out"];

#[derive(Debug, Clone, PartialEq)]
pub struct Rnn<T> {
    pub vocab: Vocab,
    pub hidden: usize,
    /// `w_in, w_rec, w_out, b_h, b_out`, flat row-major.
    pub blocks: [Vec<T>; 5],
}

/// Gradient (or optimizer state) with the same shapes as [`Rnn::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T>(pub [Vec<T>; 5]);

impl<T: Real> Grads<T> {
    pub fn zeros_like(m: &Rnn<T>) -> Self {
        Grads(m.blocks.clone().map(|b| vec![T::zero(); b.len()]))
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        self.0.iter_mut().flatten().for_each(|x| *x = *x * s);
    }
}

/// Activations of one forward step, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct StepRec<T> {
    pub tok: usize,
    pub target: usize,
    pub h_prev: Vec<T>,
    pub h: Vec<T>,
    /// Inverted-dropout multipliers on the path from `h` to the output.
    pub mask: Option<Vec<T>>,
    pub probs: Vec<T>,
}

/// Dot product with eight independent accumulators so it vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    acc.iter().fold(tail, |s, &x| s + x)
}

/// `y += a * x`.
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

pub(crate) fn softmax<T: Real>(z: &mut [T]) {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in z.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    for x in z.iter_mut() {
        *x = *x / s;
    }
}

impl<T: Real> Rnn<T> {
    pub fn zeros(vocab: Vocab, hidden: usize) -> Self {
        let v = vocab.len();
        Self {
            vocab,
            hidden,
            blocks: [
                vec![T::zero(); v * hidden],
                vec![T::zero(); hidden * hidden],
                vec![T::zero(); v * hidden],
                vec![T::zero(); hidden],
                vec![T::zero(); v],
            ],
        }
    }

    /// Weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`, biases zero.
    pub fn random<R: Rng>(vocab: Vocab, hidden: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(vocab, hidden);
        let r = 1.0 / (hidden as f64).sqrt();
        for b in &mut m.blocks[..3] {
            b.iter_mut().for_each(|x| *x = T::of(rng.gen_range(-r..=r)));
        }
        m
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn shape(&self, block: usize) -> (usize, usize) {
        let (v, h) = (self.vocab.len(), self.hidden);
        [(v, h), (h, h), (v, h), (1, h), (1, v)][block]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|x| x.is_finite())
    }

    pub fn token_id(&self, t: Token) -> Result<usize, SeqError> {
        self.vocab.id(t).ok_or(SeqError::UnknownToken(t.to_string()))
    }

    fn hidden_step(&self, tok: usize, h_prev: &[T]) -> Vec<T> {
        let hd = self.hidden;
        let [w_in, w_rec, _, b_h, _] = &self.blocks;
        let row = &w_in[tok * hd..(tok + 1) * hd];
        (0..hd)
            .map(|i| {
                let a = row[i] + b_h[i] + dot(&w_rec[i * hd..(i + 1) * hd], h_prev);
                a.max(T::zero())
            })
            .collect()
    }

    fn output(&self, h: &[T]) -> Vec<T> {
        let hd = self.hidden;
        let [_, _, w_out, _, b_out] = &self.blocks;
        let mut z: Vec<T> = (0..self.vocab.len())
            .map(|k| b_out[k] + dot(&w_out[k * hd..(k + 1) * hd], h))
            .collect();
        softmax(&mut z);
        z
    }

    /// One inference step from hidden state `h` on token id `tok`.
    pub fn step_id(&self, tok: usize, h: &[T]) -> (Vec<T>, Vec<T>) {
        let h2 = self.hidden_step(tok, h);
        (self.output(&h2), h2)
    }

    pub fn step(&self, tok: Token, h: &[T]) -> Result<(Vec<T>, Vec<T>), SeqError> {
        Ok(self.step_id(self.token_id(tok)?, h))
    }

    pub(crate) fn forward(&self, tok: usize, target: usize, h_prev: Vec<T>, mask: Option<Vec<T>>) -> StepRec<T> {
        let h = self.hidden_step(tok, &h_prev);
        let probs = match &mask {
            Some(m) => self.output(&h.iter().zip(m).map(|(&a, &b)| a * b).collect::<Vec<_>>()),
            None => self.output(&h),
        };
        StepRec {
            tok,
            target,
            h_prev,
            h,
            mask,
            probs,
        }
    }

    /// Accumulates into `g` the gradient of `scale * sum(CE)` over
    /// `recs[loss_from..]`, backpropagating through all of `recs`.
    pub(crate) fn backward(&self, recs: &[StepRec<T>], loss_from: usize, scale: T, g: &mut Grads<T>) {
        let (v, hd) = (self.vocab.len(), self.hidden);
        let [_, w_rec, w_out, _, _] = &self.blocks;
        let mut dh_next = vec![T::zero(); hd];
        let mut dz = vec![T::zero(); v];
        for (t, r) in recs.iter().enumerate().rev() {
            let mut dh = std::mem::take(&mut dh_next);
            if t >= loss_from {
                for k in 0..v {
                    dz[k] = r.probs[k] * scale;
                }
                dz[r.target] = dz[r.target] - scale;
                let ones;
                let m = match &r.mask {
                    Some(m) => m.as_slice(),
                    None => {
                        ones = vec![T::one(); hd];
                        &ones
                    }
                };
                let [_, _, gw_out, _, gb_out] = &mut g.0;
                for k in 0..v {
                    gb_out[k] = gb_out[k] + dz[k];
                    let row = &mut gw_out[k * hd..(k + 1) * hd];
                    let wrow = &w_out[k * hd..(k + 1) * hd];
                    let d = dz[k];
                    for (((gw, dhi), (&w, &hm)), &hv) in row.iter_mut().zip(dh.iter_mut()).zip(wrow.iter().zip(m)).zip(&r.h) {
                        *gw = *gw + d * hv * hm;
                        *dhi = *dhi + d * w * hm;
                    }
                }
            }
            // Through the ReLU.
            for i in 0..hd {
                if r.h[i] <= T::zero() {
                    dh[i] = T::zero();
                }
            }
            let [gw_in, gw_rec, _, gb_h, _] = &mut g.0;
            let grow = &mut gw_in[r.tok * hd..(r.tok + 1) * hd];
            let mut next = vec![T::zero(); hd];
            for i in 0..hd {
                let da = dh[i];
                if da == T::zero() {
                    continue;
                }
                grow[i] = grow[i] + da;
                gb_h[i] = gb_h[i] + da;
                let gr = &mut gw_rec[i * hd..(i + 1) * hd];
                let wr = &w_rec[i * hd..(i + 1) * hd];
                axpy(gr, da, &r.h_prev);
                axpy(&mut next, da, wr);
            }
            dh_next = next;
        }
    }

    /// Mean next-token cross-entropy over `ids`, starting from a zero state.
    pub fn sequence_loss(&self, ids: &[usize]) -> f64 {
        if ids.len() < 2 {
            return 0.0;
        }
        let mut h = vec![T::zero(); self.hidden];
        let mut total = 0.0;
        for w in ids.windows(2) {
            let (p, h2) = self.step_id(w[0], &h);
            total -= p[w[1]].f64().max(f64::MIN_POSITIVE).ln();
            h = h2;
        }
        total / (ids.len() - 1) as f64
    }

    /// Loss and exact gradient over the whole sequence, no dropout.
    pub fn loss_and_grads(&self, ids: &[usize]) -> (f64, Grads<T>) {
        let mut g = Grads::zeros_like(self);
        if ids.len() < 2 {
            return (0.0, g);
        }
        let mut h = vec![T::zero(); self.hidden];
        let mut recs = Vec::with_capacity(ids.len() - 1);
        for w in ids.windows(2) {
            let r = self.forward(w[0], w[1], h, None);
            h = r.h.clone();
            recs.push(r);
        }
        let n = recs.len();
        let loss = recs
            .iter()
            .map(|r| -r.probs[r.target].f64().max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        self.backward(&recs, 0, T::one() / T::of(n as f64), &mut g);
        (loss, g)
    }

    /// Greedy decoding from `start`. Stops after `max_steps` tokens or when
    /// the model predicts the start of the augmentation section.
    pub fn generate(&self, start: Token, max_steps: usize) -> Result<Vec<Token>, SeqError> {
        let mut tok = self.token_id(start)?;
        let mut h = vec![T::zero(); self.hidden];
        let mut out = Vec::new();
        while out.len() < max_steps {
            let (p, h2) = self.step_id(tok, &h);
            h = h2;
            tok = argmax(&p);
            let t = self.vocab.token(tok);
            if t == Token::AugBegin {
                break;
            }
            out.push(t);
        }
        Ok(out)
    }

    /// Like [`Rnn::generate`] but sampling from `p^(1/temperature)`.
    pub fn sample<R: Rng>(&self, start: Token, max_steps: usize, temperature: f64, rng: &mut R) -> Result<Vec<Token>, SeqError> {
        let mut tok = self.token_id(start)?;
        let mut h = vec![T::zero(); self.hidden];
        let mut out = Vec::new();
        while out.len() < max_steps {
            let (p, h2) = self.step_id(tok, &h);
            h = h2;
            let w: Vec<f64> = p.iter().map(|x| x.f64().powf(1.0 / temperature)).collect();
            let total: f64 = w.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            tok = w.len() - 1;
            for (i, x) in w.iter().enumerate() {
                if u < *x {
                    tok = i;
                    break;
                }
                u -= x;
            }
            let t = self.vocab.token(tok);
            if t == Token::AugBegin {
                break;
            }
            out.push(t);
        }
        Ok(out)
    }
}

/// First index of the largest value.
pub fn argmax<T: Real>(p: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Grads<T>,
    v: Grads<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &Rnn<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Grads::zeros_like(model),
            v: Grads::zeros_like(model),
        }
    }

    pub fn update(&mut self, model: &mut Rnn<T>, g: &Grads<T>) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let eps = T::of(self.eps);
        for b in 0..5 {
            let (w, gb, m, v) = (&mut model.blocks[b], &g.0[b], &mut self.m.0[b], &mut self.v.0[b]);
            for i in 0..w.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * gb[i];
                v[i] = b2 * v[i] + (T::one() - b2) * gb[i] * gb[i];
                w[i] = w[i] - step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab(n: u32) -> Vocab {
        Vocab::new((0..n).map(Token::Call))
    }

    #[test]
    fn zero_model_is_uniform() {
        let m: Rnn<f64> = Rnn::zeros(vocab(5), 3);
        let (p, h) = m.step(Token::Call(2), &[0.0; 3]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        assert_eq!(h, vec![0.0; 3]);
        assert!(matches!(m.step(Token::Call(9), &[0.0; 3]), Err(SeqError::UnknownToken(_))));
    }

    #[test]
    fn softmax_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m: Rnn<f32> = Rnn::random(vocab(7), 9, &mut rng);
        let mut h = vec![0.0f32; 9];
        for t in [0, 3, 6, 1] {
            let (p, h2) = m.step(Token::Call(t), &h).unwrap();
            let s: f64 = p.iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6 && p.iter().all(|&x| x >= 0.0));
            h = h2;
        }
        let mut big = vec![1000.0f64, -1000.0, 999.0];
        softmax(&mut big);
        assert!((big.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m: Rnn<f64> = Rnn::random(vocab(4), 6, &mut rng);
        assert!(m.generate(Token::Call(0), 0).unwrap().is_empty());
        let a = m.generate(Token::Call(0), 20).unwrap();
        assert_eq!(a, m.generate(Token::Call(0), 20).unwrap());
        assert_eq!(a.len(), 20);
    }
}
