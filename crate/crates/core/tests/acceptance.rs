//! Acceptance gate. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any selected criterion fails.
//!
//! `HARMOSEG_ACCEPTANCE_ONLY=1,2,8` restricts the run to a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use harmoseg::adapt::{self, ExperimentResult, Strategy};
use harmoseg::experiment::{
    build_harmonizer, harmonize_all, make_plan, pretrain_source, run_plan, Cohorts, DomainGap, ExperimentConfig,
    HarmonizerKind, Run,
};
use harmoseg::harmonize::{profile_l1, quantile_profile};
use harmoseg::metrics::{self, Connectivity, MetricOptions};
use harmoseg::nifti;
use harmoseg::nn::{self, gradcheck, ModelCheckpoint, Provenance, SegNet, SegNetConfig};
use harmoseg::preprocess::Contrast;
use harmoseg::tensor::Tensor;
use harmoseg::types::{flat_index, LabelMask, Volume3D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const PAPER_PARAM_COUNT: usize = 28_672_897;
const FD_STEPS: [f64; 4] = [1e-4, 1e-5, 1e-6, 1e-7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check = Result<Outcome, String>;

fn report(id: u32, name: &str, start: Instant, budget: Option<Duration>, res: Check) -> bool {
    let el = start.elapsed();
    let (mut pass, mut detail) = match res {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(b) = budget {
        if el > b {
            pass = false;
            detail = format!("{detail}; over budget {:.0}s > {:.0}s", el.as_secs_f64(), b.as_secs_f64());
        }
    }
    println!("{} [{id:>2}] {name}: {detail} ({:.1}s)", if pass { "PASS" } else { "FAIL" }, el.as_secs_f64());
    pass
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. metric oracles

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    match rng.gen_range(0..10) {
        0 => vec![0; n * n * n],
        1 => {
            // a few blobs
            let mut m = vec![0u8; n * n * n];
            for _ in 0..rng.gen_range(1..6) {
                let c: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..n as f64));
                let r = rng.gen_range(0.8..3.5);
                for z in 0..n {
                    for y in 0..n {
                        for x in 0..n {
                            let d = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                            if d <= r * r {
                                m[flat_index([n; 3], x, y, z)] = 1;
                            }
                        }
                    }
                }
            }
            m
        }
        _ => {
            let p = rng.gen_range(0.01..0.35);
            (0..n * n * n).map(|_| u8::from(rng.gen_bool(p))).collect()
        }
    }
}

/// Union-find over explicit neighbour pairs.
struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut i = i;
        while self.0[i] != r {
            let next = self.0[i];
            self.0[i] = r;
            i = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Component root per voxel (`usize::MAX` for background).
fn oracle_components(m: &[u8], n: usize, max_nonzero: usize) -> Vec<usize> {
    let mut dsu = Dsu((0..m.len()).collect());
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let i = flat_index([n; 3], x, y, z);
                if m[i] == 0 {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nz = (dx != 0) as usize + (dy != 0) as usize + (dz != 0) as usize;
                            if nz == 0 || nz > max_nonzero {
                                continue;
                            }
                            let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if [a, b, c].iter().any(|&v| v < 0 || v >= n as i64) {
                                continue;
                            }
                            let j = flat_index([n; 3], a as usize, b as usize, c as usize);
                            if m[j] != 0 {
                                dsu.union(i, j);
                            }
                        }
                    }
                }
            }
        }
    }
    (0..m.len()).map(|i| if m[i] == 0 { usize::MAX } else { dsu.find(i) }).collect()
}

fn oracle_f1(pred: &[u8], gt: &[u8], n: usize, max_nonzero: usize, min_overlap: usize) -> (f64, f64, f64) {
    let frac_hit = |a: &[u8], b: &[u8], min_overlap: usize| -> Option<f64> {
        let roots = oracle_components(a, n, max_nonzero);
        let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, &r) in roots.iter().enumerate() {
            if r != usize::MAX {
                *hits.entry(r).or_default() += usize::from(b[i] != 0);
            }
        }
        (!hits.is_empty()).then(|| hits.values().filter(|&&h| h >= min_overlap).count() as f64 / hits.len() as f64)
    };
    // predicted components need only touch the truth
    let p = frac_hit(pred, gt, 1).unwrap_or(1.0);
    let r = frac_hit(gt, pred, min_overlap).unwrap_or(1.0);
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Exact Pearson r from integer sums.
fn oracle_pearson(x: &[u64], y: &[u64]) -> Option<f64> {
    let n = x.len() as i128;
    let sx: i128 = x.iter().map(|&v| v as i128).sum();
    let sy: i128 = y.iter().map(|&v| v as i128).sum();
    let sxy: i128 = x.iter().zip(y).map(|(&a, &b)| a as i128 * b as i128).sum();
    let sxx: i128 = x.iter().map(|&v| (v as i128).pow(2)).sum();
    let syy: i128 = y.iter().map(|&v| (v as i128).pow(2)).sum();
    let num = n * sxy - sx * sy;
    let (dx, dy) = (n * sxx - sx * sx, n * syy - sy * sy);
    (n >= 3 && dx > 0 && dy > 0).then(|| num as f64 / ((dx as f64).sqrt() * (dy as f64).sqrt()))
}

fn criterion_1() -> Check {
    let n = 16;
    let dims = [n; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE);
    let mut mismatches = Vec::new();
    let (mut gt_v, mut pr_v) = (Vec::new(), Vec::new());
    for k in 0..200 {
        let (a, b) = (random_mask(&mut rng, n), random_mask(&mut rng, n));
        let (pm, gm) = (
            LabelMask::from_data(dims, a.clone()).map_err(e2s)?,
            LabelMask::from_data(dims, b.clone()).map_err(e2s)?,
        );
        let inter = a.iter().zip(&b).filter(|(x, y)| **x == 1 && **y == 1).count();
        let (na, nb) = (a.iter().filter(|&&v| v == 1).count(), b.iter().filter(|&&v| v == 1).count());
        let want = if na + nb == 0 { 1.0 } else { 2.0 * inter as f64 / (na + nb) as f64 };
        let got = metrics::dice(&pm, &gm).map_err(e2s)?;
        if (got - want).abs() >= 1e-12 {
            mismatches.push(format!("pair {k}: dice {got} vs {want}"));
        }
        for (conn, max_nz) in [(Connectivity::Six, 1), (Connectivity::Eighteen, 2), (Connectivity::TwentySix, 3)] {
            let lib = metrics::connected_components(&pm, conn);
            let roots = oracle_components(&a, n, max_nz);
            // same partition: lib label <-> oracle root is a bijection
            let mut fwd: BTreeMap<u32, usize> = BTreeMap::new();
            let mut bwd: BTreeMap<usize, u32> = BTreeMap::new();
            let mut same = true;
            for (i, &r) in roots.iter().enumerate() {
                let l = lib.labels[i];
                if (r == usize::MAX) != (l == 0) {
                    same = false;
                    break;
                }
                if l == 0 {
                    continue;
                }
                same &= *fwd.entry(l).or_insert(r) == r && *bwd.entry(r).or_insert(l) == l;
            }
            if !same || lib.count() != bwd.len() {
                mismatches.push(format!("pair {k}: {}-connected components differ", conn.count()));
            }
            for min_overlap in [1, 3] {
                let opts = MetricOptions { connectivity: conn, min_overlap };
                let f = metrics::lesion_f1(&pm, &gm, opts).map_err(e2s)?;
                let (p, r, f1) = oracle_f1(&a, &b, n, max_nz, min_overlap);
                if (f.precision - p).abs() >= 1e-12 || (f.recall - r).abs() >= 1e-12 || (f.f1 - f1).abs() >= 1e-12 {
                    mismatches.push(format!("pair {k}: lesion F1 {f:?} vs ({p}, {r}, {f1})"));
                }
            }
        }
        gt_v.push(nb as u64);
        pr_v.push(na as u64);
    }
    // correlation over the whole set and over groups of 10
    let mut groups = vec![(0, 200)];
    groups.extend((0..20).map(|g| (g * 10, g * 10 + 10)));
    for (lo, hi) in groups {
        let (x, y) = (&gt_v[lo..hi], &pr_v[lo..hi]);
        let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
        match (metrics::volume_correlation(&xf, &yf), oracle_pearson(x, y)) {
            (Ok(a), Some(b)) if (a - b).abs() < 1e-12 => {}
            (Err(_), None) => {}
            (a, b) => mismatches.push(format!("vc[{lo}..{hi}]: {a:?} vs {b:?}")),
        }
    }
    Ok(outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "200 pairs; dice, components (6/18/26), lesion F1 and VC match the brute-force oracles".to_string()
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    ))
}

// ---------------------------------------------------------------------------
// 2. gradients

fn criterion_2() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 200;
    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.3)))).collect();
    let p: Vec<f64> = z.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    // loss w.r.t. probabilities
    let (_, gp) = nn::compound_loss_grad(&p, &y);
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for i in 0..n {
        let mut a = p.clone();
        let mut b = p.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (nn::compound_loss(&a, &y) - nn::compound_loss(&b, &y)) / (2.0 * h);
        worst = worst.max(gradcheck::rel_error(gp[i], fd));
    }
    let loss_err = worst;
    // loss w.r.t. logits
    let (_, gz) = nn::loss_and_logit_grad(&z, &y);
    let mut logit_err: f64 = 0.0;
    for i in 0..n {
        let mut a = z.clone();
        let mut b = z.clone();
        a[i] += h;
        b[i] -= h;
        let fd = (nn::loss_and_logit_grad(&a, &y).0 - nn::loss_and_logit_grad(&b, &y).0) / (2.0 * h);
        logit_err = logit_err.max(gradcheck::rel_error(gz[i], fd));
    }
    // tiny end-to-end network, every parameter
    let cfg = SegNetConfig { channels: vec![2, 4], ..SegNetConfig::desk() };
    let net = SegNet::<f64>::build(cfg, 11).map_err(e2s)?;
    let dims = [8usize; 3];
    let v: usize = dims.iter().product();
    let input: Vec<f64> = (0..2 * v).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<f64> = (0..v).map(|_| f64::from(u8::from(rng.gen_bool(0.2)))).collect();
    let input = Tensor::new(vec![1, 2, 8, 8, 8], input).map_err(e2s)?;
    let rep = gradcheck::check_network(&net, &input, &labels, &FD_STEPS, 1).map_err(e2s)?;
    let pass = loss_err < 1e-4 && logit_err < 1e-4 && rep.max_rel_error < 1e-4;
    Ok(outcome(
        pass,
        format!(
            "max rel error: loss {loss_err:.1e}, logits {logit_err:.1e}, network {:.1e} over {} parameters (worst {})",
            rep.max_rel_error, rep.checked, rep.worst_param
        ),
    ))
}

// ---------------------------------------------------------------------------
// 3. architecture contract

fn closed_form_params(cin: usize, c: &[usize], blocks: usize) -> usize {
    let conv = |ci: usize, co: usize| co * ci * 27 + 2 * co;
    let mut n = 0;
    for (l, &cl) in c.iter().enumerate() {
        let mut ci = if l == 0 { cin } else { cl };
        if l > 0 {
            n += cl * c[l - 1] * 8 + cl;
        }
        for _ in 0..blocks {
            n += conv(ci, cl);
            ci = cl;
        }
    }
    for l in 0..c.len() - 1 {
        n += c[l + 1] * c[l] * 8 + c[l];
        let mut ci = 2 * c[l];
        for _ in 0..blocks {
            n += conv(ci, c[l]);
            ci = c[l];
        }
    }
    n + c[0] + 1
}

fn criterion_3() -> Check {
    let cfg = SegNetConfig::paper();
    let formula = closed_form_params(cfg.in_channels, &cfg.channels, cfg.blocks_per_level);
    let net = SegNet::<f32>::build(cfg.clone(), 3).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = vec![2, 2, 112, 112, 112];
    let data: Vec<f32> = (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(0.0..1.5)).collect();
    let input = Tensor::new(shape, data).map_err(e2s)?;
    let (logits, trace) = net.forward_traced(&input).map_err(e2s)?;
    let out_shape = logits.shape().to_vec();
    drop(logits);
    let bottleneck = *trace.last().ok_or("no trace")?;
    let ck = ModelCheckpoint::new(net, 0, Provenance { data_hash: "none".into(), seed: 3, label: "paper".into() });
    let bytes = ck.to_bytes();
    let back = ModelCheckpoint::from_bytes(&bytes).map_err(e2s)?;
    let bit_identical = back.to_bytes() == bytes
        && back.net.params().iter().zip(ck.net.params()).all(|(a, b)| {
            a.name == b.name && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    let count = ck.net.param_count();
    let pass = out_shape == [2, 1, 112, 112, 112]
        && bottleneck == [512, 7, 7, 7]
        && count == PAPER_PARAM_COUNT
        && formula == PAPER_PARAM_COUNT
        && bit_identical;
    Ok(outcome(
        pass,
        format!(
            "output {out_shape:?}, bottleneck {bottleneck:?}, {count} parameters (closed form {formula}), checkpoint {} bytes round-trip {}",
            bytes.len(),
            if bit_identical { "bit-identical" } else { "DIFFERS" }
        ),
    ))
}

// ---------------------------------------------------------------------------
// 4, 5, 6, 11: the phantom study

struct SeedStudy {
    gap: DomainGap,
    pretrain_time: Duration,
    strategies_time: Duration,
    oracle_time: Duration,
    one: ExperimentResult,
    zero: ExperimentResult,
    enriched: ExperimentResult,
    zero_oracle: ExperimentResult,
    /// Quantile-profile L1 to the target, per contrast: (unharmonized, histogram-matched).
    profiles: [(f64, f64); 2],
}

fn study_seed(seed: u64) -> Result<SeedStudy, String> {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    let raw = Cohorts::generate(&cfg).map_err(e2s)?;
    let pre = raw.preprocess().map_err(e2s)?;
    let t0 = Instant::now();
    let pt = pretrain_source(&cfg, &pre.source, None).map_err(e2s)?;
    let gap = DomainGap::measure(&cfg, &pt.best, &pre.heldout, &pre.target).map_err(e2s)?;
    let pretrain_time = t0.elapsed();

    let t1 = Instant::now();
    let hist = build_harmonizer(&cfg, HarmonizerKind::HistogramMatching, &pre.target).map_err(e2s)?;
    let src_h = harmonize_all(&hist, &raw.source).map_err(e2s)?;
    let run = |s: Strategy| -> Result<ExperimentResult, String> {
        let plan = make_plan(&cfg, s, &src_h, &hist, &pre.target).map_err(e2s)?;
        run_plan(&cfg, &plan, &pt.best, &src_h, &pre.target, None).map_err(e2s)
    };
    let one = run(Strategy::OneShot)?;
    let zero = run(Strategy::ZeroShot)?;
    let enriched = run(Strategy::HarmonizationEnriched)?;
    let strategies_time = t1.elapsed();

    let t2 = Instant::now();
    let orac = build_harmonizer(&cfg, HarmonizerKind::Oracle, &pre.target).map_err(e2s)?;
    let src_o = harmonize_all(&orac, &raw.source).map_err(e2s)?;
    let mut plan = make_plan(&cfg, Strategy::ZeroShot, &src_o, &orac, &pre.target).map_err(e2s)?;
    plan.label = "zero-shot-oracle".into();
    let zero_oracle = run_plan(&cfg, &plan, &pt.best, &src_o, &pre.target, None).map_err(e2s)?;
    let oracle_time = t2.elapsed();

    let mut profiles = [(0.0, 0.0); 2];
    for (k, c) in [Contrast::T1w, Contrast::Flair].into_iter().enumerate() {
        let q = cfg.n_quantiles;
        let target = quantile_profile(&pre.target, c, q).map_err(e2s)?;
        let before = quantile_profile(&pre.source, c, q).map_err(e2s)?;
        let after = quantile_profile(&src_h, c, q).map_err(e2s)?;
        profiles[k] = (profile_l1(&before, &target), profile_l1(&after, &target));
    }
    eprintln!(
        "seed {seed}: pretrain {:.0}s (best epoch {}), held-out {:.3} target {:.3}; strategies {:.0}s; one {:.3} zero {:.3} enriched {:.3} oracle {:.3}",
        pretrain_time.as_secs_f64(),
        pt.best_epoch,
        gap.heldout.mean_dsc(),
        gap.target.mean_dsc(),
        strategies_time.as_secs_f64(),
        one.best_epoch().map_or(f64::NAN, |a| a.mean_dsc),
        zero.best_epoch().map_or(f64::NAN, |a| a.mean_dsc),
        enriched.best_epoch().map_or(f64::NAN, |a| a.mean_dsc),
        zero_oracle.best_epoch().map_or(f64::NAN, |a| a.mean_dsc),
    );
    Ok(SeedStudy { gap, pretrain_time, strategies_time, oracle_time, one, zero, enriched, zero_oracle, profiles })
}

/// Seed-mean curve `(dsc, f1)` per epoch.
fn mean_curve(results: &[&ExperimentResult]) -> Vec<(usize, f64, f64)> {
    let epochs: Vec<usize> = results[0].aggregate.iter().map(|a| a.epoch).collect();
    epochs
        .into_iter()
        .map(|e| {
            let rows: Vec<_> = results.iter().filter_map(|r| r.at_epoch(e)).collect();
            let n = rows.len() as f64;
            (e, rows.iter().map(|a| a.mean_dsc).sum::<f64>() / n, rows.iter().map(|a| a.mean_f1).sum::<f64>() / n)
        })
        .collect()
}

/// Best seed-mean value over epochs ≥ 1, per metric.
fn best(curve: &[(usize, f64, f64)]) -> (f64, f64) {
    curve.iter().filter(|c| c.0 >= 1).fold((f64::MIN, f64::MIN), |(d, f), c| (d.max(c.1), f.max(c.2)))
}

fn criterion_4(studies: &[SeedStudy]) -> Check {
    let gaps: Vec<f64> = studies.iter().map(|s| s.gap.dsc_gap()).collect();
    let mean_src = studies.iter().map(|s| s.gap.heldout.mean_dsc()).sum::<f64>() / studies.len() as f64;
    let mean_tgt = studies.iter().map(|s| s.gap.target.mean_dsc()).sum::<f64>() / studies.len() as f64;
    let all = gaps.iter().all(|&g| g > 0.05);
    Ok(outcome(
        all,
        format!(
            "held-out source DSC {mean_src:.3} vs target {mean_tgt:.3}; per-seed gaps [{}] (need > 0.05 in every seed)",
            gaps.iter().map(|g| format!("{g:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn criterion_5(studies: &[SeedStudy]) -> Check {
    let curve = |f: fn(&SeedStudy) -> &ExperimentResult| mean_curve(&studies.iter().map(f).collect::<Vec<_>>());
    let (one, zero, enr) = (curve(|s| &s.one), curve(|s| &s.zero), curve(|s| &s.enriched));
    let base = (one[0].1, one[0].2);
    let (bo, bz, be) = (best(&one), best(&zero), best(&enr));
    let ordering = be.0 >= bo.0.max(bz.0) - 0.01 && be.1 >= bo.1.max(bz.1) - 0.01;
    let above = [bo, bz, be].iter().all(|b| b.0 > base.0 && b.1 > base.1);
    Ok(outcome(
        ordering && above,
        format!(
            "best seed-mean DSC/L-F1: enriched {:.3}/{:.3}, one-shot {:.3}/{:.3}, zero-shot {:.3}/{:.3}, pretrained {:.3}/{:.3}",
            be.0, be.1, bo.0, bo.1, bz.0, bz.1, base.0, base.1
        ),
    ))
}

fn criterion_6(studies: &[SeedStudy]) -> Check {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, get) in [
        ("one-shot", (|s: &SeedStudy| &s.one) as fn(&SeedStudy) -> &ExperimentResult),
        ("zero-shot", |s| &s.zero),
        ("enriched", |s| &s.enriched),
    ] {
        let ok = studies
            .iter()
            .filter(|s| {
                let r = get(s);
                match (r.at_epoch(5), r.at_epoch(20)) {
                    (Some(a), Some(b)) => (a.mean_dsc - b.mean_dsc).abs() <= 0.02,
                    _ => false,
                }
            })
            .count();
        pass &= ok >= 4;
        parts.push(format!("{name} {ok}/{}", studies.len()));
    }
    Ok(outcome(pass, format!("seeds with |DSC(5) - DSC(20)| <= 0.02: {}", parts.join(", "))))
}

fn criterion_11(studies: &[SeedStudy]) -> Check {
    let zero = best(&mean_curve(&studies.iter().map(|s| &s.zero).collect::<Vec<_>>()));
    let orac = best(&mean_curve(&studies.iter().map(|s| &s.zero_oracle).collect::<Vec<_>>()));
    let closer = studies.iter().all(|s| s.profiles.iter().all(|(before, after)| after < before));
    let worst = studies
        .iter()
        .flat_map(|s| s.profiles.iter().map(|(b, a)| a / b))
        .fold(0.0, f64::max);
    Ok(outcome(
        orac.0 >= zero.0 - 0.01 && closer,
        format!(
            "best seed-mean zero-shot DSC: oracle {:.3} vs histogram {:.3}; matched profiles closer to target in every seed and contrast: {closer} (worst after/before L1 ratio {worst:.3})",
            orac.0, zero.0
        ),
    ))
}

// ---------------------------------------------------------------------------
// 7, 8: plans

fn plan_fixture() -> Result<(ExperimentConfig, Cohorts, Cohorts), String> {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 8;
    cfg.phantom.shape = [24; 3];
    let raw = Cohorts::generate(&cfg).map_err(e2s)?;
    let pre = raw.preprocess().map_err(e2s)?;
    Ok((cfg, raw, pre))
}

fn criterion_7() -> Check {
    let (cfg, raw, pre) = plan_fixture()?;
    let mut checked = 0;
    for kind in [HarmonizerKind::HistogramMatching, HarmonizerKind::Oracle] {
        let h = build_harmonizer(&cfg, kind, &pre.target).map_err(e2s)?;
        let src = harmonize_all(&h, &raw.source).map_err(e2s)?;
        for sub in [&pre.target[..], &pre.target[..2], &pre.target[3..]] {
            let plan = make_plan(&cfg, Strategy::ZeroShot, &src, &h, sub).map_err(e2s)?;
            let targets: Vec<&String> = plan.target_ids.iter().collect();
            let leak = plan.folds.iter().any(|f| f.train_ids().any(|id| targets.contains(&id)));
            if leak || !plan.uses_no_target_labels() || plan.folds.iter().any(|f| !f.train_target.is_empty()) {
                return Ok(outcome(false, format!("target id in a zero-shot training pool ({kind:?})")));
            }
            checked += 1;
        }
    }
    // an enriched plan must be flagged as consuming labels
    let h = build_harmonizer(&cfg, HarmonizerKind::Oracle, &pre.target).map_err(e2s)?;
    let enr = make_plan(&cfg, Strategy::HarmonizationEnriched, &pre.source, &h, &pre.target).map_err(e2s)?;
    Ok(outcome(
        !enr.uses_no_target_labels(),
        format!("{checked} zero-shot plans: no target id in any training pool"),
    ))
}

fn criterion_8() -> Check {
    let (cfg, raw, pre) = plan_fixture()?;
    let h = build_harmonizer(&cfg, HarmonizerKind::HistogramMatching, &pre.target).map_err(e2s)?;
    let src = harmonize_all(&h, &raw.source).map_err(e2s)?;
    let mut problems = Vec::new();
    for (s, train) in [(Strategy::OneShot, 1), (Strategy::HarmonizationEnriched, 6)] {
        let p = make_plan(&cfg, s, &src, &h, &pre.target).map_err(e2s)?;
        p.validate().map_err(e2s)?;
        if p.folds.len() != 10 {
            problems.push(format!("{s:?}: {} folds", p.folds.len()));
        }
        for f in &p.folds {
            if f.train_ids().count() != train || f.test.len() != 9 {
                problems.push(format!("{s:?}: fold sizes {}/{}", f.train_ids().count(), f.test.len()));
            }
        }
        for id in &p.target_ids {
            if p.folds.iter().filter(|f| f.test.contains(id)).count() != 9 {
                problems.push(format!("{s:?}: {id} not tested 9 times"));
            }
        }
    }
    let cv = adapt::plan_target_cv(&pre.target, 0).map_err(e2s)?;
    cv.validate().map_err(e2s)?;
    let mut tested: Vec<&String> = cv.folds.iter().flat_map(|f| &f.test).collect();
    tested.sort();
    let mut all: Vec<&String> = cv.target_ids.iter().collect();
    all.sort();
    if cv.folds.len() != 2
        || cv.folds.iter().any(|f| (f.train_target.len(), f.val.len(), f.test.len()) != (4, 1, 5))
        || tested != all
        || cv.ft_epochs != 100
    {
        problems.push("target CV is not 2 × 4/1/5 over a partition for 100 epochs".into());
    }
    Ok(outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "one-shot 10 × (1, 9), enriched 10 × (6, 9), full coverage; target CV 2 × (4/1/5) partitioning the cohort".into()
        } else {
            problems.join("; ")
        },
    ))
}

// ---------------------------------------------------------------------------
// 9. determinism

fn criterion_9() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut csvs = Vec::new();
    for k in 0..2 {
        let mut cfg = ExperimentConfig::desk();
        cfg.seed = 9;
        cfg.run_root = Some(tmp.path().join(format!("r{k}")));
        cfg.pretrain.epochs = 2;
        cfg.finetune.epochs = 2;
        let run = Run::open(cfg).map_err(e2s)?;
        run.stage_phantom().map_err(e2s)?;
        run.stage_preprocess().map_err(e2s)?;
        run.stage_harmonize().map_err(e2s)?;
        run.stage_pretrain().map_err(e2s)?;
        let strategies = run.config.strategies.clone();
        run.stage_adapt(&strategies, None).map_err(e2s)?;
        run.stage_report().map_err(e2s)?;
        csvs.push(std::fs::read(run.path("report/aggregate.csv")).map_err(e2s)?);
    }
    let lines = String::from_utf8_lossy(&csvs[0]).lines().count();
    Ok(outcome(
        csvs[0] == csvs[1] && lines > 1,
        format!("two desk runs (seed 9, 2 pretrain + 2 fine-tune epochs): aggregate CSVs of {lines} lines are byte-identical: {}", csvs[0] == csvs[1]),
    ))
}

// ---------------------------------------------------------------------------
// 10. NIfTI

fn nibabel_check(dir: &Path, vol: &Volume3D, mask: &LabelMask) -> Result<String, String> {
    let script = r#"
import sys, numpy as np, nibabel as nib
v = nib.load(sys.argv[1]); m = nib.load(sys.argv[2])
a = np.asarray(v.dataobj); b = np.asarray(m.dataobj)
print(a.dtype, a.shape, float(a[0, 1, 2]), float(a.sum(dtype=np.float64)), int(b.sum()), " ".join(repr(float(x)) for x in v.affine.ravel()))
"#;
    let out = std::process::Command::new("python3")
        .arg("-c")
        .arg(script)
        .arg(dir.join("v.nii.gz"))
        .arg(dir.join("m.nii"))
        .output()
        .map_err(e2s)?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string());
    }
    let text = String::from_utf8_lossy(&out.stdout).trim().to_string();
    let f: Vec<&str> = text.split_whitespace().collect();
    let d = vol.dims();
    let shape = format!("({},", d[0]);
    let sum: f64 = vol.data().iter().map(|&v| f64::from(v)).sum();
    let aff: Vec<f64> = f[f.len() - 16..].iter().map(|s| s.parse().unwrap_or(f64::NAN)).collect();
    let want_aff: Vec<f64> = vol.affine().iter().flatten().map(|&v| f64::from(v)).collect();
    let ok = f[0] == "float32"
        && f[1] == shape
        && f[4].parse::<f64>().ok() == Some(f64::from(vol.get(0, 1, 2)))
        && (f[5].parse::<f64>().unwrap_or(f64::NAN) - sum).abs() <= 1e-6 * sum.abs().max(1.0)
        && f[6].parse::<usize>().ok() == Some(mask.count())
        && aff.iter().zip(&want_aff).all(|(a, b)| (a - b).abs() < 1e-5);
    if ok {
        Ok(format!("nibabel reads identical data and affine ({})", f[0]))
    } else {
        Err(format!("nibabel disagrees: {text}"))
    }
}

fn criterion_10() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut exact = true;
    let mut cases = 0;
    let mut last = None;
    for (k, dims) in [[7, 9, 5], [16, 16, 16], [1, 4, 33]].into_iter().enumerate() {
        let v: usize = dims.iter().product();
        let data: Vec<f32> = (0..v).map(|_| rng.gen_range(-1e4f32..1e4) * if rng.gen_bool(0.1) { 1e-30 } else { 1.0 }).collect();
        let spacing = [0.8, 1.0, 1.2 + k as f32];
        let mut affine = [[0f32; 4]; 4];
        for i in 0..3 {
            affine[i][i] = spacing[i] * if i == 1 { -1.0 } else { 1.0 };
            affine[i][3] = rng.gen_range(-90.0..90.0);
        }
        affine[3][3] = 1.0;
        let vol = Volume3D::new(dims, data, spacing, affine).map_err(e2s)?;
        let mask = LabelMask::new(dims, (0..v).map(|_| u8::from(rng.gen_bool(0.3))).collect(), spacing, affine).map_err(e2s)?;
        for name in ["v.nii", "v.nii.gz"] {
            let p = tmp.path().join(name);
            nifti::write_volume(&vol, &p).map_err(e2s)?;
            let back = nifti::read_volume(&p).map_err(e2s)?;
            exact &= back.dims() == dims
                && back.data().iter().zip(vol.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                && back.affine() == vol.affine();
            cases += 1;
        }
        for name in ["m.nii", "m.nii.gz"] {
            let p = tmp.path().join(name);
            nifti::write_mask(&mask, &p).map_err(e2s)?;
            exact &= nifti::read_mask(&p).map_err(e2s)?.data() == mask.data();
            cases += 1;
        }
        last = Some((vol, mask));
    }
    let (vol, mask) = last.expect("cases ran");
    let python_has_nibabel = std::process::Command::new("python3")
        .args(["-c", "import nibabel"])
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false);
    let external = if python_has_nibabel {
        nibabel_check(tmp.path(), &vol, &mask)
    } else {
        Ok("nibabel not installed here; external check skipped".into())
    };
    match external {
        Ok(note) => Ok(outcome(exact, format!("{cases} write/read cycles bit-exact: {exact}; {note}"))),
        Err(e) => Ok(outcome(false, format!("{cases} write/read cycles bit-exact: {exact}; {e}"))),
    }
}

// ---------------------------------------------------------------------------

fn main() {
    let only: Option<Vec<u32>> = std::env::var("HARMOSEG_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().map_or(true, |o| o.contains(&id));
    let mut passed = 0;
    let mut ran = 0;
    let mut tally = |ok: bool| {
        ran += 1;
        passed += usize::from(ok);
    };
    let min = |m: u64| Some(Duration::from_secs(60 * m));

    let simple: [(u32, &str, Option<Duration>, fn() -> Check); 3] = [
        (1, "metric oracle equivalence", min(1), criterion_1),
        (2, "gradient check", min(2), criterion_2),
        (3, "architecture contract", None, criterion_3),
    ];
    for (id, name, budget, f) in simple {
        if wanted(id) {
            let t = Instant::now();
            tally(report(id, name, t, budget, f()));
        }
    }

    if [4, 5, 6, 11].iter().any(|&i| wanted(i)) {
        let t = Instant::now();
        let studies: Result<Vec<SeedStudy>, String> = SEEDS.iter().map(|&s| study_seed(s)).collect();
        match studies {
            Ok(st) => {
                let pre: Duration = st.iter().map(|s| s.pretrain_time).sum();
                let strat: Duration = st.iter().map(|s| s.strategies_time).sum();
                let orac: Duration = st.iter().map(|s| s.oracle_time).sum();
                let timed = |id, name, budget: Duration, spent: Duration, res: Check| {
                    // the shared study is timed per stage, not by wall clock
                    let res = res.map(|mut o| {
                        o.detail = format!("{}; compute {:.0}s", o.detail, spent.as_secs_f64());
                        if spent > budget {
                            o.pass = false;
                            o.detail.push_str(&format!(" over budget {:.0}s", budget.as_secs_f64()));
                        }
                        o
                    });
                    report(id, name, Instant::now(), None, res)
                };
                if wanted(4) {
                    tally(timed(4, "domain gap", Duration::from_secs(30 * 60), pre, criterion_4(&st)));
                }
                if wanted(5) {
                    tally(timed(5, "strategy ordering", Duration::from_secs(120 * 60), pre + strat, criterion_5(&st)));
                }
                if wanted(6) {
                    tally(timed(6, "fast convergence", Duration::from_secs(120 * 60), pre + strat, criterion_6(&st)));
                }
                if wanted(11) {
                    tally(timed(11, "harmonizer quality ladder", Duration::from_secs(150 * 60), pre + strat + orac, criterion_11(&st)));
                }
            }
            Err(e) => {
                for (id, name) in [(4, "domain gap"), (5, "strategy ordering"), (6, "fast convergence"), (11, "harmonizer quality ladder")] {
                    if wanted(id) {
                        tally(report(id, name, t, None, Err(e.clone())));
                    }
                }
            }
        }
    }

    let rest: [(u32, &str, fn() -> Check); 4] = [
        (7, "zero-shot label hygiene", criterion_7),
        (8, "plan combinatorics", criterion_8),
        (9, "determinism", criterion_9),
        (10, "NIfTI round trip", criterion_10),
    ];
    for (id, name, f) in rest {
        if wanted(id) {
            let t = Instant::now();
            tally(report(id, name, t, None, f()));
        }
    }

    println!("acceptance: {passed}/{ran} criteria passed");
    if passed != ran {
        std::process::exit(1);
    }
}
