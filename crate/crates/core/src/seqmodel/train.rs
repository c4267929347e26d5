use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{Precision, RnnModel};
use super::rnn::{Adam, Grads, Real, Rnn};
use super::vocab::{Token, Vocab};
use super::SeqError;
use crate::augment::UnifiedProfile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    /// Steps between parameter updates; `None` picks 4, 32 or 64 from the
    /// corpus size.
    pub batch_size: Option<usize>,
    /// How far back each update propagates.
    pub bptt_window: usize,
    pub hidden: usize,
    pub seed: u64,
    pub precision: Precision,
    pub clip_norm: f64,
    /// Upper bound on the spectral norm of `W_rec`, enforced after every
    /// update. Keeps the ReLU recurrence from blowing up on long inputs.
    pub max_recurrent_norm: Option<f64>,
    /// Stop once the loss moved less than 1e-4 for three epochs running.
    pub early_stop: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.001,
            dropout: 0.2,
            batch_size: None,
            bptt_window: 64,
            hidden: 1000,
            seed: 0,
            precision: Precision::F32,
            clip_norm: 5.0,
            max_recurrent_norm: Some(1.0),
            early_stop: false,
        }
    }
}

impl TrainConfig {
    pub fn batch_for(&self, corpus_len: usize) -> usize {
        self.batch_size.unwrap_or(match corpus_len {
            0..=50 => 4,
            51..=1000 => 32,
            _ => 64,
        })
    }

    fn validate(&self) -> Result<(), SeqError> {
        let ok = self.epochs > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.dropout)
            && self.batch_size != Some(0)
            && self.bptt_window > 0
            && self.hidden > 0
            && self.clip_norm > 0.0
            && self.max_recurrent_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(SeqError::Config(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Dropout-free mean cross-entropy after each epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub batch_size: usize,
    pub corpus_tokens: usize,
}

/// Tokens of the flattened profile, in stream order.
pub fn corpus(p: &UnifiedProfile) -> Vec<Token> {
    p.events().into_iter().map(Token::from).collect()
}

pub fn train(p: &UnifiedProfile, cfg: &TrainConfig) -> Result<(RnnModel, TrainReport), SeqError> {
    train_tokens(Vocab::new(p.vocabulary()), &corpus(p), cfg)
}

pub fn train_tokens(vocab: Vocab, tokens: &[Token], cfg: &TrainConfig) -> Result<(RnnModel, TrainReport), SeqError> {
    cfg.validate()?;
    if tokens.len() < 2 {
        return Err(SeqError::DegenerateCorpus(tokens.len()));
    }
    let ids = tokens
        .iter()
        .map(|&t| vocab.id(t).ok_or(SeqError::UnknownToken(t.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match cfg.precision {
        Precision::F32 => {
            let (m, r) = fit::<f32>(vocab, &ids, cfg);
            (RnnModel::F32(m), r)
        }
        Precision::F64 => {
            let (m, r) = fit::<f64>(vocab, &ids, cfg);
            (RnnModel::F64(m), r)
        }
    })
}

/// Truncated BPTT: an update every `batch` steps, each propagating through
/// the last `bptt_window` steps. The hidden state carries across updates
/// and resets at each epoch.
fn fit<T: Real>(vocab: Vocab, ids: &[usize], cfg: &TrainConfig) -> (Rnn<T>, TrainReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model: Rnn<T> = Rnn::random(vocab, cfg.hidden, &mut rng);
    let mut opt = Adam::new(&model, cfg.learning_rate);
    let batch = cfg.batch_for(ids.len());
    let keep = T::of(1.0 / (1.0 - cfg.dropout));
    let mut losses: Vec<f64> = Vec::with_capacity(cfg.epochs);
    let mut probe = vec![T::one(); cfg.hidden];
    for _ in 0..cfg.epochs {
        let mut h = vec![T::zero(); cfg.hidden];
        let mut history = VecDeque::with_capacity(cfg.bptt_window + 1);
        let mut pending = 0;
        for t in 0..ids.len() - 1 {
            let mask = (cfg.dropout > 0.0).then(|| {
                (0..cfg.hidden)
                    .map(|_| if rng.gen::<f64>() < cfg.dropout { T::zero() } else { keep })
                    .collect()
            });
            let rec = model.forward(ids[t], ids[t + 1], h, mask);
            h = rec.h.clone();
            history.push_back(rec);
            if history.len() > cfg.bptt_window {
                history.pop_front();
            }
            pending += 1;
            if pending == batch || t + 2 == ids.len() {
                let recs = history.make_contiguous();
                let from = recs.len().saturating_sub(pending);
                let mut g = Grads::zeros_like(&model);
                model.backward(recs, from, T::one() / T::of(pending as f64), &mut g);
                let n = g.norm();
                if n > cfg.clip_norm {
                    g.scale(T::of(cfg.clip_norm / n));
                }
                opt.update(&mut model, &g);
                if let Some(cap) = cfg.max_recurrent_norm {
                    cap_spectral_norm(&mut model.blocks[1], cfg.hidden, &mut probe, cap);
                }
                pending = 0;
            }
        }
        losses.push(model.sequence_loss(ids));
        if cfg.early_stop && plateaued(&losses) {
            break;
        }
    }
    let final_loss = *losses.last().unwrap();
    (
        model,
        TrainReport {
            epoch_losses: losses,
            final_loss,
            batch_size: batch,
            corpus_tokens: ids.len(),
        },
    )
}

/// Scales the `n x n` matrix `w` down so its largest singular value is at
/// most `cap`. The estimate comes from a few power iterations on `w^T w`
/// warm-started from `u`, which is updated in place.
pub fn cap_spectral_norm<T: Real>(w: &mut [T], n: usize, u: &mut [T], cap: f64) {
    let norm = |x: &[T]| x.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
    let mut sigma = 0.0;
    for _ in 0..3 {
        let un = norm(u);
        if un == 0.0 || !un.is_finite() {
            u.iter_mut().for_each(|x| *x = T::one());
            return;
        }
        let x: Vec<T> = (0..n)
            .map(|i| w[i * n..(i + 1) * n].iter().zip(u.iter()).fold(T::zero(), |s, (&a, &b)| s + a * b))
            .collect();
        sigma = norm(&x) / un;
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            for (yj, &a) in y.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                *yj = *yj + a * x[i];
            }
        }
        let yn = norm(&y);
        if yn == 0.0 {
            return;
        }
        for (ui, yi) in u.iter_mut().zip(y) {
            *ui = T::of(yi.f64() / yn);
        }
    }
    if sigma > cap {
        let s = T::of(cap / sigma);
        w.iter_mut().for_each(|x| *x = *x * s);
    }
}

fn plateaued(l: &[f64]) -> bool {
    l.len() >= 4 && l[l.len() - 4..].windows(2).all(|w| (w[0] - w[1]).abs() < 1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(hidden: usize) -> TrainConfig {
        TrainConfig {
            hidden,
            ..Default::default()
        }
    }

    #[test]
    fn spectral_cap() {
        // diag(3, 0.5) is capped to spectral norm 1.
        let mut w = vec![3.0f64, 0.0, 0.0, 0.5];
        let mut u = vec![1.0, 1.0];
        for _ in 0..5 {
            cap_spectral_norm(&mut w, 2, &mut u, 1.0);
        }
        assert!((w[0] - 1.0).abs() < 1e-6, "{w:?}");
        let mut small = vec![0.2f64, 0.1, 0.0, 0.3];
        let before = small.clone();
        cap_spectral_norm(&mut small, 2, &mut [1.0, 1.0], 1.0);
        assert_eq!(small, before);
    }

    #[test]
    fn batch_rule() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_for(50), c.batch_for(51), c.batch_for(1000), c.batch_for(1001)), (4, 32, 32, 64));
    }

    #[test]
    fn rejects_bad_input() {
        let v = Vocab::new([Token::Call(0), Token::Call(1)]);
        assert!(matches!(train_tokens(v.clone(), &[Token::Call(0)], &small(4)), Err(SeqError::DegenerateCorpus(1))));
        let bad = TrainConfig {
            dropout: 1.0,
            ..small(4)
        };
        assert!(matches!(train_tokens(v.clone(), &[Token::Call(0); 3], &bad), Err(SeqError::Config(_))));
        assert!(matches!(train_tokens(v, &[Token::Call(7); 3], &small(4)), Err(SeqError::UnknownToken(_))));
    }

    #[test]
    fn training_is_reproducible() {
        let v = Vocab::new((0..3).map(Token::Call));
        let toks: Vec<Token> = (0..40).map(|i| Token::Call(i % 3)).collect();
        let cfg = TrainConfig { epochs: 3, ..small(8) };
        let (a, ra) = train_tokens(v.clone(), &toks, &cfg).unwrap();
        let (b, rb) = train_tokens(v, &toks, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn learns_two_state_pattern() {
        let v = Vocab::new([Token::Call(0), Token::Call(1), Token::AugBegin, Token::AugEnd]);
        let toks: Vec<Token> = (0..400).map(|i| Token::Call(i % 2)).collect();
        let (m, r) = train_tokens(v, &toks, &small(32)).unwrap();
        assert!(r.final_loss < 0.05, "{:?}", r.epoch_losses);
        let out = m.generate(Token::Call(0), 120).unwrap();
        assert_eq!(out.len(), 120);
        for (i, t) in out.iter().enumerate() {
            assert_eq!(*t, Token::Call(((i + 1) % 2) as u32));
        }
    }
}
