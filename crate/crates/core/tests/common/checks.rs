//! Check routines shared by the integration tests and the acceptance
//! binary. Each returns `Err` with a human-readable reason on failure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use refseg_core::backend::{EmbeddingBackend, MockBackend, PATCH};
use refseg_core::checkpoint::{load_checkpoint, save_checkpoint};
use refseg_core::config::RunConfig;
use refseg_core::data::{direct_parse, generate_dataset, lexicon, Dataset, GenerationConfig, Mask, Shape};
use refseg_core::matching::hungarian;
use refseg_core::mcc::{mcc_loss_from_cosines, mcc_loss_values};
use refseg_core::metrics;
use refseg_core::model::{Model, PriorCache};
use refseg_core::prior::compute_heatmap;
use refseg_core::text::{build_prompt, extract_main_object, DependencyParse, Head, Token};
use refseg_core::train::{train, TrainData, TrainOptions};

use super::brute;
use super::suite::Check;

pub type Outcome = Result<String, String>;

pub const GRADIENT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const GRADIENT_TOLERANCE: f64 = 1e-4;

/// Worst relative error of every check over all seeds.
pub fn gradient_suite(checks: &[Check]) -> Outcome {
    let mut worst_overall: f64 = 0.0;
    let mut failures = Vec::new();
    for (name, check) in checks {
        let worst = GRADIENT_SEEDS.iter().map(|&s| check(s)).fold(0.0, f64::max);
        worst_overall = worst_overall.max(worst);
        if !(worst < GRADIENT_TOLERANCE) {
            failures.push(format!("{name}: {worst:.2e}"));
        }
    }
    if failures.is_empty() {
        Ok(format!("{} components x {} seeds, worst relative error {worst_overall:.2e}", checks.len(), GRADIENT_SEEDS.len()))
    } else {
        Err(failures.join(", "))
    }
}

/// Integer-valued matrices make sums exact and ties common, so the tie rule
/// is exercised as well as optimality.
pub fn random_cost_matrix(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let integers = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            (0..n)
                .map(|_| if integers { rng.gen_range(0..5) as f64 } else { rng.gen_range(-10.0..10.0) })
                .collect()
        })
        .collect()
}

pub fn hungarian_oracle(matrices: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..matrices {
        let n = 1 + k % 6;
        let cost = random_cost_matrix(&mut rng, n);
        let (perm, best) = brute::assignment(&cost);
        let got = hungarian(&cost).map_err(|e| e.to_string())?;
        let cols: Vec<usize> = got.pairs.iter().map(|&(_, c)| c).collect();
        let total: f64 = got.pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        if total != best || cols != perm {
            return Err(format!("matrix {k} ({n}x{n}): got {cols:?} cost {total}, brute force {perm:?} cost {best}"));
        }
    }
    Ok(format!("{matrices} matrices up to 6x6 match permutation enumeration"))
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.gen_range(0.0..1.0);
    let data = (0..h * w).map(|_| rng.gen_bool(density)).collect();
    Mask::from_vec(h, w, data).unwrap()
}

/// Every metric on random 8x8 masks against the pixel-set versions.
pub fn metric_oracle(cases: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (8, 8);
    let mut ious = Vec::new();
    for k in 0..cases {
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let (pa, pb) = (brute::pixels(&a), brute::pixels(&b));
        let got = metrics::iou(&a, &b).unwrap();
        if got != brute::iou(&pa, &pb) {
            return Err(format!("case {k}: iou {got} vs {}", brute::iou(&pa, &pb)));
        }
        ious.push(got);
        if metrics::boundary(&a) != Mask::from_fn(h, w, |y, x| brute::boundary(&pa, h, w).contains(&(y, x))) {
            return Err(format!("case {k}: boundary pixels differ"));
        }
        let r = rng.gen_range(0..3);
        let f = metrics::boundary_f(&a, &b, r).unwrap();
        if f != brute::boundary_f(&pa, &pb, h, w, r) {
            return Err(format!("case {k}: boundary F {f} vs {} at radius {r}", brute::boundary_f(&pa, &pb, h, w, r)));
        }
        let preds: Vec<Mask> = (0..rng.gen_range(1..4)).map(|_| random_mask(&mut rng, h, w)).collect();
        let pp: Vec<_> = preds.iter().map(brute::pixels).collect();
        let oc = metrics::oc_iou(&a, &preds).unwrap();
        if oc != brute::oc_iou(&pa, &pp) {
            return Err(format!("case {k}: oc_iou {oc} vs {}", brute::oc_iou(&pa, &pp)));
        }
    }
    for (t, p) in metrics::precision_at(&ious, &metrics::THRESHOLDS).unwrap() {
        if p != brute::precision(&ious, t) {
            return Err(format!("Pr@{t}: {p} vs {}", brute::precision(&ious, t)));
        }
    }
    Ok(format!("{cases} random 8x8 cases: iou, boundary, boundary F, oc_iou, Pr@X identical"))
}

/// GT {a,b}, predictions {a,b,c} and {a} give 1/3.
pub fn oc_iou_example() -> Outcome {
    let set = |cells: &[usize]| Mask::from_fn(1, 3, |_, x| cells.contains(&x));
    let got = metrics::oc_iou(&set(&[0, 1]), &[set(&[0, 1, 2]), set(&[0])]).unwrap();
    if got == 1.0 / 3.0 {
        Ok("hand example gives exactly 1/3".into())
    } else {
        Err(format!("hand example gives {got}"))
    }
}

pub fn mcc_closed_form() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let cases = [
        ("identical features", mcc_loss_values(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0]).unwrap(), ln2),
        ("opposite negative", mcc_loss_values(&[1.0, 2.0], &[2.0, 4.0], &[-1.0, -2.0]).unwrap(), ln2 - 2.0),
        ("equal cosines", mcc_loss_from_cosines(0.3, 0.3, 0.3), ln2),
        ("lower extreme", mcc_loss_from_cosines(1.0, -1.0, -1.0), ln2 - 2.0),
        ("upper extreme", mcc_loss_from_cosines(-1.0, 1.0, 1.0), 2.0 + ln2),
    ];
    for (name, got, want) in cases {
        if (got - want).abs() > 1e-9 {
            return Err(format!("{name}: {got} vs {want}"));
        }
    }
    Ok("log 2, log 2 - 2 and 2 + log 2 reproduced within 1e-9".into())
}

pub fn mcc_bounds(triplets: usize, seed: u64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ln2 = std::f64::consts::LN_2;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for k in 0..triplets {
        let dim = rng.gen_range(2..16);
        let mut v = || (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (a, b, n) = (v(), v(), v());
        let loss = mcc_loss_values(&a, &b, &n).map_err(|e| e.to_string())?;
        if !(ln2 - 2.0 - 1e-12..=2.0 + ln2 + 1e-12).contains(&loss) {
            return Err(format!("triplet {k}: loss {loss} outside [log2 - 2, 2 + log2]"));
        }
        lo = lo.min(loss);
        hi = hi.max(loss);
    }
    Ok(format!("{triplets} random triplets within bounds (observed {lo:.3} to {hi:.3})"))
}

fn tree(rows: &[(&str, &str, u32, &str)]) -> DependencyParse {
    let tokens = rows
        .iter()
        .map(|&(form, upos, head, rel)| Token::new(form, upos, Head::from(head), rel))
        .collect();
    DependencyParse::new(tokens).unwrap()
}

/// Random valid tree over `len` tokens; nouns appear only if `with_noun`.
pub fn random_tree(rng: &mut ChaCha8Rng, len: usize, with_noun: bool) -> DependencyParse {
    const OTHER: [&str; 6] = ["VERB", "ADJ", "DET", "ADP", "ADV", "PRON"];
    let root = rng.gen_range(0..len);
    // attach each token to an earlier-placed one in a random order: acyclic
    let mut placed = vec![root];
    let mut heads = vec![Head::Root; len];
    let mut rest: Vec<usize> = (0..len).filter(|&i| i != root).collect();
    while !rest.is_empty() {
        let i = rest.swap_remove(rng.gen_range(0..rest.len()));
        heads[i] = Head::Token(placed[rng.gen_range(0..placed.len())]);
        placed.push(i);
    }
    let noun_at = if with_noun { Some(rng.gen_range(0..len)) } else { None };
    let tokens = (0..len)
        .map(|i| {
            let upos = if Some(i) == noun_at {
                "NOUN"
            } else if with_noun && rng.gen_bool(0.3) {
                "PROPN"
            } else {
                OTHER[rng.gen_range(0..OTHER.len())]
            };
            let rel = if heads[i] == Head::Root { "root" } else { "dep" };
            Token::new(&format!("w{i}"), upos, heads[i], rel)
        })
        .collect();
    DependencyParse::new(tokens).unwrap()
}

pub fn extractor_suite() -> Outcome {
    let mut checked = 0;
    for color in lexicon::PALETTE.iter() {
        for shape in Shape::ALL {
            let parse = direct_parse(color.name, shape.noun());
            let got = extract_main_object(&parse);
            let want = format!("the {} {}", color.name, shape.noun());
            if got.rolled_back || got.phrase != want || !got.phrase.ends_with(shape.noun()) {
                return Err(format!("direct template {want:?} gave {got:?}"));
            }
            checked += 1;
        }
    }
    let bull = tree(&[
        ("the", "DET", 2, "det"),
        ("bull", "NOUN", 0, "root"),
        ("running", "VERB", 2, "acl"),
        ("in", "ADP", 6, "case"),
        ("the", "DET", 6, "det"),
        ("field", "NOUN", 3, "obl"),
    ]);
    let got = extract_main_object(&bull);
    if got.phrase != "the bull" || got.rolled_back {
        return Err(format!("bull example gave {got:?}"));
    }
    if build_prompt(&got.phrase).ok().as_deref() != Some("A Photo of the bull") {
        return Err("prompt for the bull".into());
    }
    let man = tree(&[("man", "NOUN", 2, "nsubj"), ("wearing", "VERB", 0, "root"), ("a", "DET", 4, "det"), ("hat", "NOUN", 2, "obj")]);
    let got = extract_main_object(&man);
    if got.phrase != "man" || got.rolled_back {
        return Err(format!("root-verb example gave {got:?}"));
    }
    let closest = tree(&[("closest", "ADJ", 0, "root"), ("to", "ADP", 3, "case"), ("us", "PRON", 1, "obl")]);
    let got = extract_main_object(&closest);
    if got.phrase != "closest to us" || !got.rolled_back {
        return Err(format!("no-noun example gave {got:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for k in 0..500 {
        let with_noun = k % 2 == 0;
        let len = rng.gen_range(1..8);
        let parse = random_tree(&mut rng, len, with_noun);
        let got = extract_main_object(&parse);
        if got.rolled_back == with_noun {
            return Err(format!("random tree {k}: rollback {} with nouns present = {with_noun}", got.rolled_back));
        }
    }
    Ok(format!("{checked} direct templates, three worked examples, 500 random trees"))
}

/// Unique-color samples whose prompt names the color and whose heatmap
/// argmax patch overlaps the target's bounding box, with the sample count.
pub fn prior_localization(dataset: &Dataset, backend: &dyn EmbeddingBackend) -> (usize, usize) {
    let (mut hits, mut total) = (0, 0);
    for scene in &dataset.scenes {
        let tokens = backend.embed_image(&scene.scene_id, &scene.image).unwrap();
        for inst in &scene.instances {
            if scene.instances.iter().filter(|o| o.color == inst.color).count() != 1 {
                continue;
            }
            let [x0, y0, x1, y1] = inst.mask.bbox().unwrap();
            for expr in &inst.expressions {
                let prompt = build_prompt(&extract_main_object(&expr.parse).phrase).unwrap();
                // a prompt without its color word cannot single out the target
                if !prompt.split_whitespace().any(|w| lexicon::color_word(&w.to_lowercase()).is_some()) {
                    continue;
                }
                let text = backend.embed_text(&prompt).unwrap();
                total += 1;
                let Ok(heat) = compute_heatmap(&tokens, &text) else { continue };
                let (gy, gx) = heat.argmax();
                let (py0, px0) = (gy * PATCH, gx * PATCH);
                if py0 < y1 && py0 + PATCH > y0 && px0 < x1 && px0 + PATCH > x0 {
                    hits += 1;
                }
            }
        }
    }
    (hits, total)
}

pub fn prior_localization_check(scenes: usize, seed: u64) -> Outcome {
    let ds = generate_dataset(&GenerationConfig { scenes, ..Default::default() }, seed).unwrap();
    let (hits, total) = prior_localization(&ds, &MockBackend::default());
    let rate = hits as f64 / total.max(1) as f64;
    let msg = format!("{hits}/{total} unique-color samples localized ({:.1}%)", 100.0 * rate);
    if total > 0 && rate >= 0.9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

pub fn tiny_config(iterations: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.dim = 16;
    c.model.heads = 2;
    c.model.decoder_layers = 3;
    c.train.iterations = iterations;
    c.train.batch_scenes = 2;
    c.train.val_every = 0;
    c.seed = 5;
    c
}

pub fn tiny_data(scenes: usize, seed: u64) -> (Dataset, PriorCache) {
    let ds = generate_dataset(&GenerationConfig { scenes, ..Default::default() }, seed).unwrap();
    let cache = PriorCache::build(&ds, &MockBackend::default()).unwrap();
    (ds, cache)
}

/// Two runs with one seed log identical losses; a checkpoint reload
/// reproduces forward outputs bit for bit.
pub fn determinism_check(iterations: usize) -> Outcome {
    let config = tiny_config(iterations);
    let (ds, cache) = tiny_data(6, 2);
    let data = TrainData { train: &ds, train_priors: &cache, val: &ds, val_priors: &cache };
    let opts = TrainOptions { out_dir: None, progress: None };
    let a = train(&config, &data, &opts).map_err(|e| e.to_string())?;
    let b = train(&config, &data, &opts).map_err(|e| e.to_string())?;
    let losses = |o: &refseg_core::train::TrainOutcome| -> Vec<u64> {
        o.log.iter().map(|r| r.loss.total.to_bits()).collect()
    };
    if losses(&a) != losses(&b) {
        return Err("repeated fixed-seed runs logged different losses".into());
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(dir.path(), &a.model, &config, iterations, None, None).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let refs = ds.samples();
    let forward_bits = |m: &Model| -> Vec<u32> {
        let batch = m.dataset_batch(&ds, &refs[..refs.len().min(8)], &cache).unwrap();
        let out = m.forward(&batch).unwrap();
        let last = out.decoder.last();
        let mut bits: Vec<u32> = last.mask_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        bits.extend(last.prob_logits.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    if forward_bits(&a.model) != forward_bits(&loaded.model) {
        return Err("checkpoint reload changed forward outputs".into());
    }
    Ok(format!("{iterations}-iteration runs identical; checkpoint forward bit-identical"))
}
