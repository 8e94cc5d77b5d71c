//! Independent reference implementations on explicit pixel sets.

use std::collections::HashSet;

use refseg_core::data::Mask;

pub type Pixels = HashSet<(usize, usize)>;

pub fn pixels(m: &Mask) -> Pixels {
    let mut s = HashSet::new();
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(y, x) {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn iou(a: &Pixels, b: &Pixels) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        1.0
    } else {
        a.intersection(b).count() as f64 / union as f64
    }
}

pub fn precision(ious: &[f64], t: f64) -> f64 {
    ious.iter().filter(|&&v| v > t).count() as f64 / ious.len() as f64
}

pub fn oc_iou(gt: &Pixels, preds: &[Pixels]) -> f64 {
    let mut inter = gt.clone();
    let mut union = gt.clone();
    for p in preds {
        inter = inter.intersection(p).copied().collect();
        union = union.union(p).copied().collect();
    }
    if union.is_empty() {
        1.0
    } else {
        inter.len() as f64 / union.len() as f64
    }
}

pub fn boundary(s: &Pixels, h: usize, w: usize) -> Pixels {
    s.iter()
        .copied()
        .filter(|&(y, x)| {
            let out = |dy: isize, dx: isize| {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize || !s.contains(&(ny as usize, nx as usize))
            };
            out(-1, 0) || out(1, 0) || out(0, -1) || out(0, 1)
        })
        .collect()
}

fn near(p: (usize, usize), set: &Pixels, r: usize) -> bool {
    set.iter().any(|&(y, x)| {
        let dy = y as isize - p.0 as isize;
        let dx = x as isize - p.1 as isize;
        (dy * dy + dx * dx) as usize <= r * r
    })
}

pub fn boundary_f(pred: &Pixels, gt: &Pixels, h: usize, w: usize, r: usize) -> f64 {
    let (bp, bg) = (boundary(pred, h, w), boundary(gt, h, w));
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let p = bp.iter().filter(|&&q| near(q, &bg, r)).count() as f64 / bp.len() as f64;
    let rc = bg.iter().filter(|&&q| near(q, &bp, r)).count() as f64 / bg.len() as f64;
    if p + rc == 0.0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    }
}

/// Minimum over all permutations, with the lexicographically first optimum.
pub fn assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(r, &col)| cost[r][col]).sum();
        if best.as_ref().map_or(true, |(_, b)| c < *b) {
            best = Some((perm.clone(), c));
        }
        // next permutation in lexicographic order
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| perm[i] < perm[i + 1]) else { break };
        let j = (i + 1..n).rev().find(|&j| perm[j] > perm[i]).unwrap();
        perm.swap(i, j);
        perm[i + 1..].reverse();
    }
    best.unwrap()
}
