//! Oracle suites run by the `selftest` command.
//!
//! Each suite compares library code against a slow, obviously correct
//! re-implementation and reports the largest deviation it saw.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::association::{cycle_match, AssociationMap};
use crate::encoder::{Encoder, EncoderGrads};
use crate::error::Result;
use crate::eval::{map_from_embeddings, GalleryRule};
use crate::gradcheck::grad_check;
use crate::losses::{loss_id, loss_id_hist, loss_kd, loss_mkd, loss_total, IkdBatch, TermSwitches};
use crate::memory::{iku_merge, momentum_update, IdentityMemory};
use crate::seeding::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTerm {
    Id,
    IdHist,
    Kd,
    Mkd,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 5] = [LossTerm::Id, LossTerm::IdHist, LossTerm::Kd, LossTerm::Mkd, LossTerm::Total];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Id => "id",
            LossTerm::IdHist => "id_hist",
            LossTerm::Kd => "kd",
            LossTerm::Mkd => "mkd",
            LossTerm::Total => "total",
        }
    }
}

/// Scales the analytic feature gradient of one term by `1 + scale` before
/// it is checked. Used as a negative control.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientFault {
    pub term: LossTerm,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub struct SelftestOptions {
    pub seed: u64,
    pub match_trials: usize,
    pub map_trials: usize,
    pub grad_batches: usize,
    pub fault: Option<GradientFault>,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            match_trials: 1000,
            map_trials: 200,
            grad_batches: 50,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_error <= self.tolerance
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:>6} cases  max err {:>10.3e}  tol {:>8.1e}  {}",
            self.name,
            self.cases,
            self.max_error,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for msg in self.failures.iter().take(3) {
            write!(f, "\n    {msg}")?;
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

fn random_memory(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> IdentityMemory {
    IdentityMemory::from_rows(gaussian(rng, n, dim)).expect("gaussian rows are non-degenerate")
}

fn brute_mutual_argmax(cur: ArrayView2<f64>, hist: ArrayView2<f64>) -> Vec<Option<usize>> {
    let score = |i: usize, j: usize| cur.row(i).iter().zip(hist.row(j)).map(|(a, b)| a * b).sum::<f64>();
    let best_hist = |i: usize| {
        let mut b = 0;
        for j in 1..hist.nrows() {
            if score(i, j) > score(i, b) {
                b = j;
            }
        }
        b
    };
    let best_cur = |j: usize| {
        let mut b = 0;
        for i in 1..cur.nrows() {
            if score(i, j) > score(b, j) {
                b = i;
            }
        }
        b
    };
    (0..cur.nrows())
        .map(|i| {
            if hist.nrows() == 0 {
                return None;
            }
            let j = best_hist(i);
            (best_cur(j) == i).then_some(j)
        })
        .collect()
}

pub fn cycle_match_suite(opts: &SelftestOptions) -> Result<SuiteReport> {
    let mut rng = stream(opts.seed, Purpose::Oracle, 1);
    let mut failures = Vec::new();
    for t in 0..opts.match_trials {
        let dim = [8, 16, 64][t % 3];
        let n_c = rng.random_range(1..=200);
        let n_h = rng.random_range(0..=200);
        let cur = random_memory(&mut rng, n_c, dim);
        let hist = if n_h == 0 {
            IdentityMemory::empty(dim)
        } else {
            random_memory(&mut rng, n_h, dim)
        };
        let got = cycle_match(&cur, &hist)?;
        if got.as_slice() != brute_mutual_argmax(cur.rows(), hist.rows()).as_slice() {
            failures.push(format!("trial {t}: n_c={n_c} n_h={n_h} dim={dim} disagrees with brute force"));
        }
    }
    Ok(SuiteReport {
        name: "cycle_match".into(),
        cases: opts.match_trials,
        max_error: if failures.is_empty() { 0.0 } else { 1.0 },
        tolerance: 0.0,
        failures,
    })
}

/// AP computed from ranks: a relevant item's rank is one plus the number of
/// gallery items scoring strictly higher or equal with a lower index.
fn brute_map(emb: ArrayView2<f64>, cameras: &[usize], ids: &[usize]) -> Option<f64> {
    let n = emb.nrows();
    let sim = |a: usize, b: usize| emb.row(a).dot(&emb.row(b));
    let mut total = 0.0;
    let mut count = 0;
    for q in 0..n {
        let gallery: Vec<usize> = (0..n).filter(|&g| cameras[g] != cameras[q]).collect();
        let relevant: Vec<usize> = gallery.iter().copied().filter(|&g| ids[g] == ids[q]).collect();
        if relevant.is_empty() {
            continue;
        }
        let rank = |g: usize| {
            1 + gallery
                .iter()
                .filter(|&&h| sim(q, h) > sim(q, g) || (sim(q, h) == sim(q, g) && h < g))
                .count()
        };
        let mut ranks: Vec<usize> = relevant.iter().map(|&g| rank(g)).collect();
        ranks.sort_unstable();
        let ap: f64 = ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / r as f64).sum::<f64>();
        total += ap / relevant.len() as f64;
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

pub fn map_suite(opts: &SelftestOptions) -> Result<SuiteReport> {
    let mut rng = stream(opts.seed, Purpose::Oracle, 2);
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for t in 0..opts.map_trials {
        let n = rng.random_range(4..=30);
        let n_ids = rng.random_range(1..=6);
        let n_cams = rng.random_range(2..=4);
        let dim = rng.random_range(2..=6);
        // Even trials use small integer vectors, whose dot products are
        // exact and tie often; odd trials use unit gaussian rows.
        let emb = if t % 2 == 0 {
            Array2::from_shape_simple_fn((n, dim), || rng.random_range(-2i32..=2) as f64)
        } else {
            let mut e = gaussian(&mut rng, n, dim);
            for mut row in e.rows_mut() {
                let norm = row.dot(&row).sqrt();
                row /= norm;
            }
            e
        };
        let mut cameras: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_cams)).collect();
        let mut ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..n_ids)).collect();
        // Items 0 and 1 form a cross-camera pair, so some query is valid.
        (cameras[0], cameras[1], ids[1]) = (0, 1, ids[0]);
        let expected = brute_map(emb.view(), &cameras, &ids);
        let got = map_from_embeddings(emb.view(), &cameras, &ids, GalleryRule::CrossCamera).ok();
        match (expected, got) {
            (Some(e), Some(g)) => {
                cases += 1;
                worst = worst.max((e - g).abs());
            }
            (None, None) => {}
            (e, g) => failures.push(format!("trial {t}: oracle {e:?} vs library {g:?}")),
        }
    }
    Ok(SuiteReport {
        name: "map".into(),
        cases,
        max_error: worst,
        tolerance: 1e-12,
        failures,
    })
}

struct GradProblem {
    encoder: Encoder,
    inputs: Array2<f64>,
    hist_embedding: Array2<f64>,
    hist_middle: [Array2<f64>; 2],
    labels: Vec<usize>,
    hist_labels: Vec<Option<usize>>,
    gates: Vec<f64>,
    current: IdentityMemory,
    historical: IdentityMemory,
    tau: f64,
}

const GRAD_WIDTHS: [usize; 5] = [6, 7, 7, 7, 5];

fn grad_problem(rng: &mut ChaCha8Rng) -> Result<GradProblem> {
    let encoder = Encoder::new(&GRAD_WIDTHS, rng)?;
    let old = Encoder::new(&GRAD_WIDTHS, rng)?;
    let b = rng.random_range(2..=8);
    let inputs = gaussian(rng, b, GRAD_WIDTHS[0]);
    let hist = old.forward_batch(inputs.view())?;
    let (n_c, n_h) = (4, 5);
    let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..n_c)).collect();
    let hist_labels: Vec<Option<usize>> = (0..b)
        .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0..n_h)))
        .collect();
    let gates = hist_labels.iter().map(|h| if h.is_some() { 1.0 } else { 0.0 }).collect();
    Ok(GradProblem {
        hist_embedding: hist.embedding().to_owned(),
        hist_middle: [hist.middle(0).to_owned(), hist.middle(1).to_owned()],
        current: random_memory(rng, n_c, GRAD_WIDTHS[4]),
        historical: random_memory(rng, n_h, GRAD_WIDTHS[4]),
        encoder,
        inputs,
        labels,
        hist_labels,
        gates,
        tau: 0.05,
    })
}

/// Value and parameter gradient of `term` at `encoder` on problem `p`.
fn term_objective(
    p: &GradProblem,
    encoder: &Encoder,
    term: LossTerm,
    fault: Option<GradientFault>,
) -> Result<(f64, EncoderGrads)> {
    let trace = encoder.forward_batch(p.inputs.view())?;
    let emb = trace.embedding();
    let hist_mid = [p.hist_middle[0].view(), p.hist_middle[1].view()];
    let (value, mut g_emb, mut g_mid): (f64, Array2<f64>, Option<[Array2<f64>; 2]>) = match term {
        LossTerm::Id => {
            let t = loss_id(emb, &p.labels, &p.current, p.tau)?;
            (t.value, t.grad, None)
        }
        LossTerm::IdHist => {
            let t = loss_id_hist(emb, &p.hist_labels, &p.historical, p.tau)?;
            (t.value, t.grad, None)
        }
        LossTerm::Kd => {
            let t = loss_kd(emb, p.hist_embedding.view(), &p.gates)?;
            (t.value, t.grad, None)
        }
        LossTerm::Mkd => {
            let (v, g) = loss_mkd([trace.middle(0), trace.middle(1)], hist_mid, &p.gates)?;
            (v, Array2::zeros(emb.raw_dim()), Some(g))
        }
        LossTerm::Total => {
            let out = loss_total(
                &IkdBatch {
                    embedding: emb,
                    middle: [trace.middle(0), trace.middle(1)],
                    hist_embedding: p.hist_embedding.view(),
                    hist_middle: hist_mid,
                    labels: &p.labels,
                    hist_labels: &p.hist_labels,
                    distill_gates: &p.gates,
                    current_memory: &p.current,
                    historical_memory: &p.historical,
                    tau: p.tau,
                },
                TermSwitches::ALL,
            )?;
            (out.breakdown.total, out.grad_embedding, out.grad_middle)
        }
    };
    if let Some(f) = fault.filter(|f| f.term == term) {
        g_emb *= 1.0 + f.scale;
        if let Some(g) = g_mid.as_mut() {
            g[0] *= 1.0 + f.scale;
            g[1] *= 1.0 + f.scale;
        }
    }
    let mid_views = g_mid.as_ref().map(|g| [g[0].view(), g[1].view()]);
    let grads = encoder.backward(&trace, g_emb.view(), mid_views)?;
    Ok((value, grads))
}

/// Finite-difference check of one loss term composed through the encoder.
pub fn gradient_suite(opts: &SelftestOptions, term: LossTerm) -> Result<SuiteReport> {
    let mut rng = stream(opts.seed, Purpose::Oracle, 3);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let tolerance = 1e-6;
    for t in 0..opts.grad_batches {
        let p = grad_problem(&mut rng)?;
        let err = grad_check(&p.encoder, |e| {
            // With the fault injected only the analytic side is wrong; the
            // value used for finite differences stays exact.
            let (v, g) = term_objective(&p, e, term, opts.fault)?;
            Ok((v, g))
        })?;
        if err > tolerance {
            failures.push(format!("loss term {} batch {t}: relative error {err:.3e}", term.name()));
        }
        worst = worst.max(err);
    }
    Ok(SuiteReport {
        name: format!("grad {}", term.name()),
        cases: opts.grad_batches,
        max_error: worst,
        tolerance,
        failures,
    })
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

pub fn memory_suite(opts: &SelftestOptions) -> Result<SuiteReport> {
    let mut rng = stream(opts.seed, Purpose::Oracle, 4);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut cases = 0;
    let max_diff = |a: ArrayView2<f64>, b: ArrayView2<f64>| {
        a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    for t in 0..200 {
        let dim = rng.random_range(2..=12);
        let n_h = rng.random_range(0..=10);
        let n_c = rng.random_range(1..=10);
        let omega = [0.0, 1.0, 0.1, rng.random::<f64>()][t % 4];
        let lambda = [0.0, 1.0, 0.25, rng.random::<f64>()][t % 4];

        let mut mem = random_memory(&mut rng, n_c, dim);
        let before = mem.rows().to_owned();
        let idx = rng.random_range(0..n_c);
        let f = unit(Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal)));
        momentum_update(&mut mem, idx, f.view(), omega)?;
        let expected = unit(&before.row(idx) * omega + &f * (1.0 - omega));
        let mut want = before.clone();
        want.row_mut(idx).assign(&expected);
        worst = worst.max(max_diff(mem.rows(), want.view()));
        for r in (0..n_c).filter(|&r| r != idx) {
            if mem.row(r) != before.row(r) {
                failures.push(format!("trial {t}: momentum update touched row {r}"));
            }
        }

        let hist = if n_h == 0 {
            IdentityMemory::empty(dim)
        } else {
            random_memory(&mut rng, n_h, dim)
        };
        let mut free: Vec<usize> = (0..n_h).collect();
        let matches: Vec<Option<usize>> = (0..n_c)
            .map(|_| {
                if free.is_empty() || rng.random_bool(0.4) {
                    None
                } else {
                    Some(free.swap_remove(rng.random_range(0..free.len())))
                }
            })
            .collect();
        let assoc = AssociationMap::new(matches.clone());
        let merged = iku_merge(&hist, &mem, &assoc, lambda)?;
        let unmatched: Vec<usize> = (0..n_c).filter(|&i| matches[i].is_none()).collect();
        if merged.len() != n_h + unmatched.len() {
            failures.push(format!("trial {t}: merged length {} != {}", merged.len(), n_h + unmatched.len()));
            continue;
        }
        let mut want = Array2::zeros((n_h + unmatched.len(), dim));
        for j in 0..n_h {
            want.row_mut(j).assign(&hist.row(j));
        }
        for (i, m) in matches.iter().enumerate() {
            if let Some(j) = m {
                want.row_mut(*j).assign(&unit(&hist.row(*j) * lambda + &mem.row(i) * (1.0 - lambda)));
            }
        }
        for (k, &i) in unmatched.iter().enumerate() {
            want.row_mut(n_h + k).assign(&mem.row(i));
        }
        worst = worst.max(max_diff(merged.rows(), want.view()));
        cases += 1;
    }
    Ok(SuiteReport {
        name: "memory".into(),
        cases,
        max_error: worst,
        tolerance: 1e-12,
        failures,
    })
}

/// Every suite, in a fixed order.
pub fn run_selftest(opts: &SelftestOptions) -> Result<Vec<SuiteReport>> {
    let mut reports = vec![cycle_match_suite(opts)?, map_suite(opts)?, memory_suite(opts)?];
    for term in LossTerm::ALL {
        reports.push(gradient_suite(opts, term)?);
    }
    Ok(reports)
}
