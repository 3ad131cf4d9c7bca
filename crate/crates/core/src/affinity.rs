//! Exemplar selection by affinity propagation over a layer's filters.
//!
//! Filters are compared by negative squared Euclidean distance; each filter's
//! self-similarity (its *preference*) is `beta` times the median of its own
//! weights. Responsibilities and availabilities are then exchanged for a fixed
//! number of damped rounds, after which every filter picks the candidate that
//! maximizes `r(i, j) + a(i, j)`. Filters that pick themselves are the
//! exemplars, i.e. the filters that survive pruning.
//!
//! Two details differ from the textbook algorithm and are deliberate:
//!
//! * self-responsibility is `s(i, i) - max_{i' != i} s(i, i')`, independent of
//!   the availabilities, so it is constant across rounds;
//! * all ties resolve to the lowest index, self column included, and no noise
//!   is injected into the similarities. Results are therefore reproducible
//!   bit for bit and do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::FilterMatrix;

/// Damping used when none is given.
pub const DEFAULT_DAMPING: f64 = 0.5;
/// Number of message-passing rounds used when none is given.
pub const DEFAULT_ITERATIONS: usize = 200;
/// Rounds of unchanged assignments after which the optional early exit fires.
pub const EARLY_EXIT_WINDOW: usize = 20;

/// Dense `n x n` similarity matrix, row-major. The diagonal holds preferences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    s: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn from_dense(n: usize, s: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::dim("similarity matrix must be non-empty"));
        }
        if s.len() != n * n {
            return Err(Error::dim(format!(
                "{n}x{n} similarity matrix needs {} values, got {}",
                n * n,
                s.len()
            )));
        }
        if let Some(v) = s.iter().find(|v| v.is_nan()) {
            return Err(Error::Parameter(format!("similarity contains {v}")));
        }
        Ok(Self { n, s })
    }

    /// Parses whitespace-separated rows, one matrix row per non-blank line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::Parameter(format!("line {}: `{tok}` is not a number", lineno + 1))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push((lineno + 1, row));
        }
        let n = rows.len();
        let mut s = Vec::with_capacity(n * n);
        for (lineno, row) in rows {
            if row.len() != n {
                return Err(Error::dim(format!(
                    "line {lineno}: expected {n} columns for a square matrix, got {}",
                    row.len()
                )));
            }
            s.extend(row);
        }
        Self::from_dense(n, s)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.n + j]
    }

    pub fn preference(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.s[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.s
    }
}

/// Median with the even-length convention of averaging the two central values.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Rows per cache tile when computing similarities.
const SIMILARITY_TILE: usize = 32;

/// Similarities between the rows of `m`, with `beta * median(row)` on the
/// diagonal. `beta` must lie in `(0, 1]`.
pub fn build_similarity(m: &FilterMatrix, beta: f64) -> Result<SimilarityMatrix> {
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(Error::Parameter(format!("beta must be in (0, 1], got {beta}")));
    }
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("filter weights must be finite".into()));
    }
    let n = m.rows();
    // Upper triangle only, in square tiles so both row blocks stay in cache;
    // each pair is still one `squared_distance` call, so tiling does not
    // change any value. Mirroring keeps the matrix exactly symmetric.
    let blocks: Vec<usize> = (0..n).step_by(SIMILARITY_TILE).collect();
    let upper: Vec<Vec<f64>> = blocks
        .par_iter()
        .map(|&i0| {
            let i1 = (i0 + SIMILARITY_TILE).min(n);
            let mut tile = vec![0.0; (i1 - i0) * n];
            for j0 in (i0..n).step_by(SIMILARITY_TILE) {
                let j1 = (j0 + SIMILARITY_TILE).min(n);
                for i in i0..i1 {
                    let ri = m.row(i);
                    for j in j0.max(i + 1)..j1 {
                        tile[(i - i0) * n + j] = -squared_distance(ri, m.row(j));
                    }
                }
            }
            tile
        })
        .collect();
    let mut s = vec![0.0; n * n];
    for (&i0, tile) in blocks.iter().zip(&upper) {
        for (off, row) in tile.chunks_exact(n).enumerate() {
            let i = i0 + off;
            s[i * n + i] = beta * median(m.row(i));
            for j in (i + 1)..n {
                s[i * n + j] = row[j];
                s[j * n + i] = row[j];
            }
        }
    }
    SimilarityMatrix::from_dense(n, s)
}

/// Responsibility and availability matrices after `iteration` damped rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    n: usize,
    r: Vec<f64>,
    a: Vec<f64>,
    iteration: usize,
}

impl MessageState {
    /// All-zero messages.
    pub fn new(n: usize) -> Self {
        Self {
            n,
            r: vec![0.0; n * n],
            a: vec![0.0; n * n],
            iteration: 0,
        }
    }

    /// Builds a state from explicit messages, mainly for tests and tooling.
    pub fn from_parts(n: usize, r: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if r.len() != n * n || a.len() != n * n {
            return Err(Error::dim(format!("messages must both be {n}x{n}")));
        }
        Ok(Self {
            n,
            r,
            a,
            iteration: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn responsibilities(&self) -> &[f64] {
        &self.r
    }

    pub fn availabilities(&self) -> &[f64] {
        &self.a
    }

    #[inline]
    pub fn r(&self, i: usize, j: usize) -> f64 {
        self.r[i * self.n + j]
    }

    #[inline]
    pub fn a(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    /// One round: raw responsibilities, damping, raw availabilities, damping.
    ///
    /// Raw responsibilities depend only on availabilities and vice versa, so
    /// each matrix is damped in place.
    pub fn step(&mut self, s: &SimilarityMatrix, damping: f64) -> Result<()> {
        self.check(s)?;
        let n = self.n;
        let a = &self.a;
        for_each_row_scratch(&mut self.r, n, |i, row, raw| {
            responsibility_row(i, s.row(i), &a[i * n..(i + 1) * n], raw);
            blend(row, raw, damping);
        });
        let (positive, diag) = column_terms(&self.r, n);
        let r = &self.r;
        for_each_row_scratch(&mut self.a, n, |i, row, raw| {
            availability_row(i, &r[i * n..(i + 1) * n], &positive, &diag, raw);
            blend(row, raw, damping);
        });
        self.iteration += 1;
        Ok(())
    }

    fn check(&self, s: &SimilarityMatrix) -> Result<()> {
        if s.n() != self.n {
            return Err(Error::dim(format!(
                "similarity is {0}x{0} but messages are {1}x{1}",
                s.n(),
                self.n
            )));
        }
        Ok(())
    }

    /// Each filter's preferred candidate, `argmax_j r(i, j) + a(i, j)`, lowest
    /// index on ties.
    pub fn choices(&self) -> Vec<usize> {
        (0..self.n)
            .map(|i| argmax_by(0..self.n, |j| self.r(i, j) + self.a(i, j)))
            .collect()
    }
}

/// Below this many filters a round is cheaper than handing rows to the pool.
const PARALLEL_ROWS: usize = 64;

/// Runs `f(i, row)` over the rows of an `n x n` matrix. Every row is written
/// by exactly one call, so the result does not depend on scheduling.
fn for_each_row(out: &mut [f64], n: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if n < PARALLEL_ROWS {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Like [`for_each_row`], also lending `f` a scratch row.
fn for_each_row_scratch(
    out: &mut [f64],
    n: usize,
    f: impl Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
) {
    if n < PARALLEL_ROWS {
        let mut scratch = vec![0.0; n];
        out.chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| f(i, row, &mut scratch));
    } else {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each_init(|| vec![0.0; n], |scratch, (i, row)| f(i, row, scratch));
    }
}

/// `prev <- damping * prev + (1 - damping) * raw`, elementwise.
#[inline]
fn blend(prev: &mut [f64], raw: &[f64], damping: f64) {
    for (p, &x) in prev.iter_mut().zip(raw) {
        *p = damping * *p + (1.0 - damping) * x;
    }
}

/// First index attaining the maximum of `score` over `candidates`.
fn argmax_by(candidates: impl Iterator<Item = usize>, score: impl Fn(usize) -> f64) -> usize {
    let mut best = None::<(usize, f64)>;
    for j in candidates {
        let v = score(j);
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((j, v)),
        }
    }
    best.expect("non-empty candidate set").0
}

/// Raw (undamped) responsibilities for the current availabilities.
///
/// Off the diagonal, `r(i, j) = s(i, j) - max_{j' != j} (a(i, j') + s(i, j'))`
/// where `j'` also ranges over `i`. On the diagonal,
/// `r(i, i) = s(i, i) - max_{i' != i} s(i, i')`; for `n = 1` that maximum is
/// over an empty set and the result is `+inf`.
pub fn update_responsibilities(s: &SimilarityMatrix, state: &MessageState) -> Result<Vec<f64>> {
    state.check(s)?;
    let n = state.n;
    let mut out = vec![0.0; n * n];
    for_each_row(&mut out, n, |i, row| {
        responsibility_row(i, s.row(i), &state.a[i * n..(i + 1) * n], row)
    });
    Ok(out)
}

/// Largest value, `-inf` for an empty slice. Four independent lanes keep
/// the reduction vectorizable; inputs are never NaN.
#[inline]
fn max_of(xs: &[f64]) -> f64 {
    let mut lanes = [f64::NEG_INFINITY; 4];
    let chunks = xs.chunks_exact(4);
    let tail = chunks.remainder();
    for c in chunks {
        for k in 0..4 {
            lanes[k] = if c[k] > lanes[k] { c[k] } else { lanes[k] };
        }
    }
    let mut m = lanes[0].max(lanes[1]).max(lanes[2].max(lanes[3]));
    for &x in tail {
        m = m.max(x);
    }
    m
}

/// Writes the raw responsibilities of row `i` into `out`.
///
/// Every column first gets the off-diagonal rule against the overall best,
/// then the two exceptions are patched: the best column itself (against the
/// runner-up) and the diagonal. Keeping the bulk pass branch-free lets it
/// vectorize.
#[inline]
fn responsibility_row(i: usize, srow: &[f64], arow: &[f64], out: &mut [f64]) {
    // Best and runner-up of a + s over all columns. On a tie the runner-up
    // equals the best, so which tied column counts as best does not matter.
    for ((o, &a), &s) in out.iter_mut().zip(arow).zip(srow) {
        *o = a + s;
    }
    let best = max_of(out);
    let best_j = out.iter().position(|&v| v == best).unwrap_or(0);
    let second = max_of(&out[..best_j]).max(max_of(&out[best_j + 1..]));
    // Best s over off-diagonal columns, for the self-responsibility.
    let best_other = max_of(&srow[..i]).max(max_of(&srow[i + 1..]));
    for (o, &s) in out.iter_mut().zip(srow) {
        *o = s - best;
    }
    out[best_j] = srow[best_j] - second;
    out[i] = srow[i] - best_other;
}

/// Raw (undamped) availabilities for the current responsibilities.
///
/// Off the diagonal, `a(i, j) = min(0, r(j, j) + sum_{i' not in {i, j}} max(0, r(i', j)))`;
/// on it, `a(j, j) = sum_{i' != j} max(0, r(i', j))`.
pub fn update_availabilities(state: &MessageState) -> Result<Vec<f64>> {
    let n = state.n;
    if state.r.len() != n * n || state.a.len() != n * n {
        return Err(Error::dim("message matrices are not square"));
    }
    let (positive, diag) = column_terms(&state.r, n);
    let mut out = vec![0.0; n * n];
    for_each_row(&mut out, n, |i, row| {
        availability_row(i, &state.r[i * n..(i + 1) * n], &positive, &diag, row)
    });
    Ok(out)
}

/// Per column `j`: the sum of `max(0, r(i, j))` over `i != j`, accumulated in
/// row order so the result does not depend on scheduling, and `r(j, j)`.
fn column_terms(r: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut positive = vec![0.0; n];
    for (i, row) in r.chunks_exact(n).enumerate() {
        for (j, (sum, &v)) in positive.iter_mut().zip(row).enumerate() {
            if j != i {
                *sum += v.max(0.0);
            }
        }
    }
    let diag = (0..n).map(|j| r[j * n + j]).collect();
    (positive, diag)
}

/// Writes the raw availabilities of row `i` into `out`: the off-diagonal
/// rule everywhere, then the diagonal patched.
#[inline]
fn availability_row(i: usize, rrow: &[f64], positive: &[f64], diag: &[f64], out: &mut [f64]) {
    let cols = out.iter_mut().zip(rrow).zip(positive.iter().zip(diag));
    for ((o, &r), (&p, &d)) in cols {
        *o = (d + p - r.max(0.0)).min(0.0);
    }
    out[i] = positive[i];
}

/// Settings for [`run_ap`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApOptions {
    /// Weight of the previous message in the damped update, in `[0, 1]`.
    pub damping: f64,
    /// Number of rounds; always run in full unless `early_exit` is set.
    pub iterations: usize,
    /// Stop once assignments are unchanged for [`EARLY_EXIT_WINDOW`] rounds.
    pub early_exit: bool,
}

impl Default for ApOptions {
    fn default() -> Self {
        Self {
            damping: DEFAULT_DAMPING,
            iterations: DEFAULT_ITERATIONS,
            early_exit: false,
        }
    }
}

impl ApOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::Parameter(format!(
                "damping must be in [0, 1], got {}",
                self.damping
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Parameter("iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Filter-to-exemplar assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarResult {
    /// `exemplar_of[i]` is the exemplar representing filter `i`.
    pub exemplar_of: Vec<usize>,
    /// Sorted indices of the filters that represent themselves.
    pub exemplars: Vec<usize>,
    /// Rounds actually run.
    pub iterations: usize,
}

impl ExemplarResult {
    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }
}

/// Turns final messages into an assignment.
///
/// Filters that choose themselves are exemplars. A filter whose choice is not
/// an exemplar is moved to the exemplar with the highest `r + a` in its row.
/// If no filter chooses itself, the one with the highest `r(i, i) + a(i, i)`
/// becomes the only exemplar.
pub fn extract_exemplars(state: &MessageState) -> ExemplarResult {
    let n = state.n;
    let choices = state.choices();
    let mut exemplars: Vec<usize> = (0..n).filter(|&i| choices[i] == i).collect();
    if exemplars.is_empty() {
        exemplars.push(argmax_by(0..n, |i| state.r(i, i) + state.a(i, i)));
    }
    let mut is_exemplar = vec![false; n];
    for &e in &exemplars {
        is_exemplar[e] = true;
    }
    let exemplar_of = (0..n)
        .map(|i| {
            if is_exemplar[i] {
                i
            } else if is_exemplar[choices[i]] {
                choices[i]
            } else {
                argmax_by(exemplars.iter().copied(), |e| state.r(i, e) + state.a(i, e))
            }
        })
        .collect();
    ExemplarResult {
        exemplar_of,
        exemplars,
        iterations: state.iteration,
    }
}

/// Runs damped message passing on `s` and extracts the exemplars.
pub fn run_ap(s: &SimilarityMatrix, opts: &ApOptions) -> Result<ExemplarResult> {
    run_ap_observed(s, opts, |_| {})
}

/// Like [`run_ap`], calling `observe` with the state after every round.
pub fn run_ap_observed(
    s: &SimilarityMatrix,
    opts: &ApOptions,
    mut observe: impl FnMut(&MessageState),
) -> Result<ExemplarResult> {
    opts.validate()?;
    let n = s.n();
    if n == 1 {
        return Ok(ExemplarResult {
            exemplar_of: vec![0],
            exemplars: vec![0],
            iterations: 0,
        });
    }
    let mut state = MessageState::new(n);
    let mut last = Vec::new();
    let mut stable = 0;
    for _ in 0..opts.iterations {
        state.step(s, opts.damping)?;
        observe(&state);
        if opts.early_exit {
            let choices = state.choices();
            if choices == last {
                stable += 1;
                if stable >= EARLY_EXIT_WINDOW {
                    break;
                }
            } else {
                stable = 0;
                last = choices;
            }
        }
    }
    Ok(extract_exemplars(&state))
}

/// Similarity, message passing and extraction for one layer.
pub fn select_exemplars(m: &FilterMatrix, beta: f64, opts: &ApOptions) -> Result<ExemplarResult> {
    run_ap(&build_similarity(m, beta)?, opts)
}
