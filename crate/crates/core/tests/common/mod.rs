#![allow(dead_code)]

pub mod brute;
pub mod checks;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg_core::nn::ParamStore;

/// Central-difference step. Smaller steps let roundoff in `f` dominate for
/// near-zero gradients.
pub const STEP: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

pub fn var(shape: &[usize], seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Var::from_tensor(&Tensor::from_vec(values, shape, &Device::Cpu).unwrap()).unwrap()
}

pub fn tensor(shape: &[usize], seed: u64) -> Tensor {
    var(shape, seed).as_tensor().clone()
}

/// Random linear readout turning any tensor into a scalar.
pub fn readout(t: &Tensor, seed: u64) -> Tensor {
    let r = tensor(t.dims(), seed ^ 0x5eed);
    (t * r).unwrap().sum_all().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Largest relative error between reverse-mode gradients and central
/// differences over up to `per_var` sampled entries of every variable.
pub fn max_relative_error(vars: &[Var], f: &dyn Fn() -> Tensor, per_var: usize, seed: u64) -> f64 {
    let loss = f();
    let grads = loss.backward().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for v in vars {
        let analytic = match grads.get(v.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; v.elem_count()],
        };
        let shape = v.dims().to_vec();
        let base = v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let picks: Vec<usize> = if base.len() <= per_var {
            (0..base.len()).collect()
        } else {
            (0..per_var).map(|_| rng.gen_range(0..base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                v.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                scalar(&f())
            };
            let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            v.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn store_vars(ps: &ParamStore) -> Vec<Var> {
    ps.params().values().map(|p| p.var.clone()).collect()
}

/// Gradient checks of every differentiable component; each entry reports
/// the worst relative error over `seeds` seeds.
pub mod suite {
    use super::*;
    use refseg_core::cmd::BatLevel;
    use refseg_core::decoder::{attention_mask_bias, predict, DecoderLayer};
    use refseg_core::matching::{bce_loss, dice_loss};
    use refseg_core::mcc::mcc_loss;
    use refseg_core::nn::{Linear, MultiHeadAttention, ParamGroup};
    use refseg_core::nn::ops::sigmoid;
    use refseg_core::prior::QueryInit;
    use refseg_core::text::{TextEncoder, TokenBatch};
    use refseg_core::visual::VisualEncoder;

    pub const PER_VAR: usize = 6;

    pub fn mha(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let attn = MultiHeadAttention::new(&mut ps, "a", 8, 2, ParamGroup::Head).unwrap();
        let q = var(&[2, 3, 8], seed + 1);
        let k = var(&[2, 5, 8], seed + 2);
        let v = var(&[2, 5, 8], seed + 3);
        let mut vars = store_vars(&ps);
        vars.extend([q.clone(), k.clone(), v.clone()]);
        let f = || readout(&attn.forward(q.as_tensor(), k.as_tensor(), v.as_tensor(), None).unwrap(), seed);
        max_relative_error(&vars, &f, PER_VAR, seed)
    }

    pub fn bat_level(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let level = BatLevel::new(&mut ps, "l", 8, 2).unwrap();
        let visual = var(&[1, 4, 4, 8], seed + 1);
        let words = var(&[1, 3, 8], seed + 2);
        let prev = var(&[1, 2, 2, 8], seed + 3);
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &Device::Cpu).unwrap();
        let mut vars = store_vars(&ps);
        vars.extend([visual.clone(), words.clone(), prev.clone()]);
        let f = || {
            let s = level.forward(visual.as_tensor(), words.as_tensor(), &mask, Some(prev.as_tensor())).unwrap();
            (readout(&s.visual, seed) + readout(&s.words, seed + 7)).unwrap()
        };
        max_relative_error(&vars, &f, PER_VAR, seed)
    }

    pub fn mcc(seed: u64) -> f64 {
        let a = var(&[3, 8], seed);
        let b = var(&[3, 8], seed + 1);
        let n = var(&[3, 8], seed + 2);
        let f = || mcc_loss(a.as_tensor(), b.as_tensor(), n.as_tensor(), 1.0).unwrap();
        max_relative_error(&[a.clone(), b.clone(), n.clone()], &f, 24, seed)
    }

    pub fn dice(seed: u64) -> f64 {
        let x = var(&[2, 4, 4], seed);
        let g = tensor(&[2, 4, 4], seed + 1).ge(0.0).unwrap().to_dtype(DType::F64).unwrap();
        let f = || dice_loss(&sigmoid(x.as_tensor()).unwrap(), &g).unwrap().sum_all().unwrap();
        max_relative_error(&[x.clone()], &f, 32, seed)
    }

    pub fn bce(seed: u64) -> f64 {
        let x = var(&[2, 4, 4], seed);
        let x3 = || (x.as_tensor() * 3.0).unwrap();
        let g = tensor(&[2, 4, 4], seed + 1).ge(0.0).unwrap().to_dtype(DType::F64).unwrap();
        let f = || bce_loss(&x3(), &g).unwrap().sum_all().unwrap();
        max_relative_error(&[x.clone()], &f, 32, seed)
    }

    pub fn init_queries(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let init = QueryInit::new(&mut ps, 17, 8).unwrap();
        let heat = tensor(&[2, 17], seed + 1);
        let text = var(&[2, 8], seed + 2);
        let mut vars = store_vars(&ps);
        vars.push(text.clone());
        let f = || readout(&init.forward(Some(&heat), text.as_tensor(), 5).unwrap(), seed);
        let plain = || init.forward(Some(&heat), text.as_tensor(), 5).unwrap().sum_all().unwrap();
        max_relative_error(&vars, &f, PER_VAR, seed).max(max_relative_error(&vars, &plain, PER_VAR, seed + 9))
    }

    pub fn decoder_layer(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let layer = DecoderLayer::new(&mut ps, "d", 8, 2).unwrap();
        let q = var(&[1, 3, 8], seed + 1);
        let memory = var(&[1, 4, 4, 8], seed + 2);
        let prev = (tensor(&[1, 3, 8, 8], seed + 3) * 4.0).unwrap();
        let bias = attention_mask_bias(&prev, 4, 4).unwrap();
        let mut vars = store_vars(&ps);
        vars.extend([q.clone(), memory.clone()]);
        let f = || readout(&layer.forward(q.as_tensor(), memory.as_tensor(), Some(&bias)).unwrap().0, seed);
        max_relative_error(&vars, &f, PER_VAR, seed)
    }

    pub fn predict_heads(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let head = Linear::new(&mut ps, "c", 8, 1, ParamGroup::Head).unwrap();
        let q = var(&[1, 3, 8], seed + 1);
        let finest = var(&[1, 4, 4, 8], seed + 2);
        let mut vars = store_vars(&ps);
        vars.extend([q.clone(), finest.clone()]);
        let f = || {
            let p = predict(&head, q.as_tensor(), finest.as_tensor()).unwrap();
            (readout(&p.mask_logits, seed) + readout(&p.probs().unwrap(), seed + 3)).unwrap()
        };
        max_relative_error(&vars, &f, PER_VAR, seed)
    }

    pub fn text_encoder(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let enc = TextEncoder::new(&mut ps, 10, 8, 2, false).unwrap();
        let batch = TokenBatch::new(&[vec![2, 5, 3], vec![4, 9]], DType::F64).unwrap();
        let f = || readout(&enc.forward(&batch).unwrap(), seed);
        max_relative_error(&store_vars(&ps), &f, PER_VAR, seed)
    }

    pub fn visual_encoder(seed: u64) -> f64 {
        let mut ps = ParamStore::new(DType::F64, seed);
        let enc = VisualEncoder::new(&mut ps, 8).unwrap();
        let x = tensor(&[1, 32, 32, 3], seed + 1).abs().unwrap();
        let f = || {
            let v = enc.forward(&x).unwrap();
            let mut total = readout(&v.maps[0], seed);
            for (i, m) in v.maps.iter().enumerate().skip(1) {
                total = (total + readout(m, seed + i as u64)).unwrap();
            }
            total
        };
        max_relative_error(&store_vars(&ps), &f, 3, seed)
    }

    pub type Check = (&'static str, fn(u64) -> f64);

    pub const PRIMARY: [Check; 8] = [
        ("mha", mha),
        ("bat_level", bat_level),
        ("mcc_loss", mcc),
        ("dice_loss", dice),
        ("bce_loss", bce),
        ("init_queries", init_queries),
        ("decoder_layer", decoder_layer),
        ("predict", predict_heads),
    ];

    pub const EXTRA: [Check; 2] = [("text_encoder", text_encoder), ("visual_encoder", visual_encoder)];
}
