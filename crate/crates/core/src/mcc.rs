//! Meaning consistency: sentence pooling, the triplet contrastive loss and
//! triplet sampling over object identities.

use candle_core::{Tensor, D};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Dataset, SampleRef};
use crate::error::{Error, Result};
use crate::nn::ops::masked_mean;

/// Two expressions of one object plus an expression of another object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub p1: SampleRef,
    pub p2: SampleRef,
    pub n: SampleRef,
}

/// Mean over valid word positions: `(S, L, C)` with mask `(S, L)` → `(S, C)`.
pub fn sentence_feature(words: &Tensor, mask: &Tensor) -> Result<Tensor> {
    masked_mean(words, mask)
}

fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / (na * nb)?)?)
}

/// Mean triplet loss over rows of `(T, C)` sentence features. Cosines are
/// divided by `temperature` before exponentiation.
pub fn mcc_loss(p1: &Tensor, p2: &Tensor, n: &Tensor, temperature: f64) -> Result<Tensor> {
    for t in [p1, p2, n] {
        let min: f64 = t.sqr()?.sum(D::Minus1)?.min_all()?.to_dtype(candle_core::DType::F64)?.to_scalar()?;
        if min == 0.0 {
            return Err(Error::Degenerate("sentence feature with zero norm".into()));
        }
    }
    let inv = 1.0 / temperature;
    let c12 = (cosine_rows(p1, p2)? * inv)?;
    let c1n = (cosine_rows(p1, n)? * inv)?;
    let c2n = (cosine_rows(p2, n)? * inv)?;
    let m = c1n.maximum(&c2n)?.detach();
    let lse = ((c1n - &m)?.exp()? + (c2n - &m)?.exp()?)?.log()? + m;
    Ok((lse? - c12)?.mean_all()?)
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("sentence feature with zero norm".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Loss for one triplet of plain vectors at unit temperature.
pub fn mcc_loss_values(p1: &[f64], p2: &[f64], n: &[f64]) -> Result<f64> {
    if p1.len() != p2.len() || p1.len() != n.len() {
        return Err(Error::Argument("sentence features differ in width".into()));
    }
    Ok(mcc_loss_from_cosines(cosine(p1, p2)?, cosine(p1, n)?, cosine(p2, n)?))
}

/// `-c12 + log(exp(c1n) + exp(c2n))` with a shifted log-sum-exp.
pub fn mcc_loss_from_cosines(c12: f64, c1n: f64, c2n: f64) -> f64 {
    let m = c1n.max(c2n);
    -c12 + m + ((c1n - m).exp() + (c2n - m).exp()).ln()
}

#[derive(Debug, Clone, Default)]
pub struct TripletSample {
    pub triplets: Vec<Triplet>,
    /// Scenes skipped for lack of a positive pair or any negative.
    pub skipped: usize,
}

/// One triplet per scene in `scenes`: an object with at least two
/// expressions supplies the positives; the negative is an expression of a
/// different object in the same scene, or of any object in another batch
/// scene when the scene has none.
pub fn sample_triplets<R: Rng>(dataset: &Dataset, scenes: &[usize], rng: &mut R) -> TripletSample {
    let mut out = TripletSample::default();
    for &s in scenes {
        let scene = &dataset.scenes[s];
        let anchors: Vec<usize> = (0..scene.instances.len())
            .filter(|&i| scene.instances[i].expressions.len() >= 2)
            .collect();
        let Some(&anchor) = anchors.choose(rng) else {
            out.skipped += 1;
            continue;
        };
        let mut pair: Vec<usize> = (0..scene.instances[anchor].expressions.len()).collect();
        pair.shuffle(rng);
        let p1 = SampleRef { scene: s, instance: anchor, expression: pair[0] };
        let p2 = SampleRef { scene: s, instance: anchor, expression: pair[1] };

        let mut pool: Vec<SampleRef> = Vec::new();
        for (i, inst) in scene.instances.iter().enumerate() {
            if i != anchor && inst.object_key != scene.instances[anchor].object_key {
                pool.extend((0..inst.expressions.len()).map(|e| SampleRef { scene: s, instance: i, expression: e }));
            }
        }
        if pool.is_empty() {
            for &o in scenes.iter().filter(|&&o| o != s) {
                for (i, inst) in dataset.scenes[o].instances.iter().enumerate() {
                    if inst.object_key != scene.instances[anchor].object_key {
                        pool.extend((0..inst.expressions.len()).map(|e| SampleRef { scene: o, instance: i, expression: e }));
                    }
                }
            }
        }
        match pool.choose(rng) {
            Some(&n) => out.triplets.push(Triplet { p1, p2, n }),
            None => out.skipped += 1,
        }
    }
    out
}
