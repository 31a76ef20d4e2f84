//! Sequential and chunked parallel evaluation of the diagonal recurrence
//! `x_t = a_t ⊙ x_{t-1} + b_t`.
//!
//! The parallel form treats each step as an affine map `(a, b)` and
//! composes maps with
//!
//! ```text
//! (a1, b1) ∘ (a2, b2) = (a1 ⊙ a2, a2 ⊙ b1 + b2)      // apply 1, then 2
//! ```
//!
//! which is associative with identity `(1, 0)`. Chunks are reduced
//! independently, the chunk aggregates are exclusive-scanned with a
//! Blelloch up-sweep/down-sweep, and each chunk is then replayed from its
//! carry-in state. The combine order depends only on `chunk`, never on the
//! number of workers, so results are bit-identical across thread counts.

use super::SsmError;
use crate::numerics::NumericFormat;
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub struct ScanElement {
    /// Decay (diagonal of Ā_t).
    pub a: Vec<f64>,
    /// Drive (B̄_t u_t).
    pub b: Vec<f64>,
}

impl ScanElement {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Self {
        assert_eq!(a.len(), b.len(), "decay and drive lengths differ");
        Self { a, b }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            a: vec![1.0; d],
            b: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// `self ∘ next`: apply `self` first, then `next`.
    pub fn then(&self, next: &ScanElement) -> ScanElement {
        self.then_in(next, NumericFormat::Fp64)
    }

    /// Composition with every elementary product and sum rounded to `fmt`.
    pub fn then_in(&self, next: &ScanElement, fmt: NumericFormat) -> ScanElement {
        let d = self.dim();
        let mut out = ScanElement {
            a: vec![0.0; d],
            b: vec![0.0; d],
        };
        for j in 0..d {
            out.a[j] = fmt.quantize(self.a[j] * next.a[j]);
            out.b[j] = fmt.quantize(fmt.quantize(next.a[j] * self.b[j]) + next.b[j]);
        }
        out
    }

    /// Apply this map to a state.
    pub fn apply(&self, x: &[f64], fmt: NumericFormat) -> Vec<f64> {
        x.iter()
            .zip(self.a.iter().zip(&self.b))
            .map(|(x, (a, b))| step(*a, *x, *b, fmt))
            .collect()
    }
}

#[inline]
fn step(a: f64, x: f64, b: f64, fmt: NumericFormat) -> f64 {
    fmt.quantize(fmt.quantize(a * x) + b)
}

fn check(elements: &[ScanElement], x0: &[f64]) -> Result<usize, SsmError> {
    if elements.is_empty() {
        return Err(SsmError::EmptySequence);
    }
    let d = x0.len();
    if let Some((t, e)) = elements
        .iter()
        .enumerate()
        .find(|(_, e)| e.a.len() != d || e.b.len() != d)
    {
        return Err(SsmError::ShapeMismatch(format!(
            "scan element {t} has length {}/{}, state has length {d}",
            e.a.len(),
            e.b.len()
        )));
    }
    Ok(d)
}

/// Reference left-to-right evaluation in FP64. Returns the `T × d` states.
pub fn scan_sequential(elements: &[ScanElement], x0: &[f64]) -> Result<Tensor, SsmError> {
    scan_sequential_in(elements, x0, NumericFormat::Fp64)
}

/// Left-to-right evaluation with every product and sum rounded to `fmt`.
pub fn scan_sequential_in(elements: &[ScanElement], x0: &[f64], fmt: NumericFormat) -> Result<Tensor, SsmError> {
    let d = check(elements, x0)?;
    let mut states = Tensor::zeros2(elements.len(), d);
    replay(elements, x0, fmt, states.data_mut());
    Ok(states)
}

fn replay(elements: &[ScanElement], x0: &[f64], fmt: NumericFormat, out: &mut [f64]) {
    let d = x0.len();
    let mut prev = x0.to_vec();
    for (e, row) in elements.iter().zip(out.chunks_mut(d)) {
        for j in 0..d {
            row[j] = step(e.a[j], prev[j], e.b[j], fmt);
        }
        prev.copy_from_slice(row);
    }
}

/// Chunked parallel scan in FP64; same contract as [`scan_sequential`].
pub fn scan_parallel(elements: &[ScanElement], x0: &[f64], chunk: usize) -> Result<Tensor, SsmError> {
    scan_parallel_in(elements, x0, chunk, NumericFormat::Fp64)
}

/// Chunked parallel scan with every elementary operation rounded to `fmt`.
///
/// Chunk work is dispatched on the current rayon pool; see [`with_workers`].
pub fn scan_parallel_in(
    elements: &[ScanElement],
    x0: &[f64],
    chunk: usize,
    fmt: NumericFormat,
) -> Result<Tensor, SsmError> {
    let d = check(elements, x0)?;
    if chunk == 0 {
        return Err(SsmError::InvalidParams("chunk size must be positive".into()));
    }
    let t = elements.len();
    let mut states = Tensor::zeros2(t, d);
    if t <= chunk {
        replay(elements, x0, fmt, states.data_mut());
        return Ok(states);
    }

    // Up-sweep inside each chunk: fold its elements into one affine map.
    let aggregates: Vec<ScanElement> = elements
        .par_chunks(chunk)
        .map(|c| c.iter().skip(1).fold(c[0].clone(), |acc, e| acc.then_in(e, fmt)))
        .collect();

    let prefixes = blelloch_exclusive(aggregates, d, fmt);

    // Down-sweep: replay each chunk from its carry-in state.
    states
        .data_mut()
        .par_chunks_mut(chunk * d)
        .zip(elements.par_chunks(chunk))
        .zip(prefixes.par_iter())
        .for_each(|((out, c), prefix)| {
            let carry = prefix.apply(x0, fmt);
            replay(c, &carry, fmt, out);
        });
    Ok(states)
}

/// Work-efficient exclusive scan of chunk aggregates.
///
/// Returns, for each chunk `k`, the composition of chunks `0..k`
/// (identity for `k = 0`).
fn blelloch_exclusive(mut tree: Vec<ScanElement>, d: usize, fmt: NumericFormat) -> Vec<ScanElement> {
    let n = tree.len();
    let size = n.next_power_of_two();
    tree.resize(size, ScanElement::identity(d));

    // Up-sweep: node r accumulates its left sibling subtree.
    let mut stride = 1;
    while stride < size {
        let step = stride * 2;
        let updates: Vec<(usize, ScanElement)> = (0..size / step)
            .into_par_iter()
            .map(|k| {
                let l = k * step + stride - 1;
                let r = k * step + step - 1;
                (r, tree[l].then_in(&tree[r], fmt))
            })
            .collect();
        for (r, e) in updates {
            tree[r] = e;
        }
        stride = step;
    }

    // Down-sweep: push prefixes back towards the leaves.
    tree[size - 1] = ScanElement::identity(d);
    let mut stride = size / 2;
    while stride >= 1 {
        let step = stride * 2;
        let updates: Vec<(usize, ScanElement, usize, ScanElement)> = (0..size / step)
            .into_par_iter()
            .map(|k| {
                let l = k * step + stride - 1;
                let r = k * step + step - 1;
                let parent = &tree[r];
                (l, parent.clone(), r, parent.then_in(&tree[l], fmt))
            })
            .collect();
        for (l, left, r, right) in updates {
            tree[l] = left;
            tree[r] = right;
        }
        stride /= 2;
    }
    tree.truncate(n);
    tree
}

/// Run `f` on a dedicated rayon pool with `workers` threads.
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: usize, f: F) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_elements(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<ScanElement> {
        (0..t)
            .map(|_| {
                ScanElement::new(
                    (0..d).map(|_| rng.random_range(0.0..=1.0)).collect(),
                    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
            })
            .collect()
    }

    /// x_t = (∏_{s≤t} a_s) x0 + Σ_{s≤t} (∏_{r=s+1..t} a_r) b_s, evaluated term by term.
    fn unrolled(elements: &[ScanElement], x0: &[f64]) -> Vec<Vec<f64>> {
        let d = x0.len();
        (0..elements.len())
            .map(|t| {
                (0..d)
                    .map(|j| {
                        let mut x = x0[j] * (0..=t).map(|s| elements[s].a[j]).product::<f64>();
                        for s in 0..=t {
                            let tail: f64 = (s + 1..=t).map(|r| elements[r].a[j]).product();
                            x += tail * elements[s].b[j];
                        }
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn memoryless_and_counter() {
        let zeros: Vec<ScanElement> = (0..5)
            .map(|t| ScanElement::new(vec![0.0; 2], vec![t as f64, -(t as f64)]))
            .collect();
        let s = scan_sequential(&zeros, &[9.0, 9.0]).unwrap();
        for t in 0..5 {
            assert_eq!(s.row(t), &[t as f64, -(t as f64)]);
        }
        let ones: Vec<ScanElement> = (0..7).map(|_| ScanElement::new(vec![1.0], vec![1.0])).collect();
        let s = scan_sequential(&ones, &[0.0]).unwrap();
        for t in 0..7 {
            assert_eq!(s.row(t), &[(t + 1) as f64]);
        }
    }

    #[test]
    fn matches_unrolled_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let elems = random_elements(&mut rng, 4, 2);
        let x0 = [0.3, -1.2];
        let s = scan_sequential(&elems, &x0).unwrap();
        let oracle = unrolled(&elems, &x0);
        for t in 0..4 {
            for j in 0..2 {
                assert!((s.at(t, j) - oracle[t][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_sequence_errors() {
        let err = scan_sequential(&[], &[0.0]).unwrap_err();
        assert_eq!(err.to_string(), "empty sequence");
        assert!(scan_parallel(&[], &[0.0], 4).is_err());
    }

    #[test]
    fn composition_is_associative() {
        // Dyadic inputs with short mantissas make every product and sum exact.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut dyadic = |lo: i32, hi: i32| rng.random_range(lo..=hi) as f64 / 16.0;
        for _ in 0..200 {
            let e: Vec<ScanElement> = (0..3)
                .map(|_| {
                    ScanElement::new(
                        (0..4).map(|_| dyadic(0, 16)).collect(),
                        (0..4).map(|_| dyadic(-32, 32)).collect(),
                    )
                })
                .collect();
            let left = e[0].then(&e[1]).then(&e[2]);
            let right = e[0].then(&e[1].then(&e[2]));
            assert_eq!(left, right);
        }
        // General reals agree to rounding.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let e = random_elements(&mut rng, 3, 4);
            let left = e[0].then(&e[1]).then(&e[2]);
            let right = e[0].then(&e[1].then(&e[2]));
            for j in 0..4 {
                assert!((left.a[j] - right.a[j]).abs() <= 2.0 * f64::EPSILON);
                assert!((left.b[j] - right.b[j]).abs() <= 8.0 * f64::EPSILON);
            }
        }
    }

    #[test]
    fn single_element_parallel_equals_sequential() {
        let e = vec![ScanElement::new(vec![0.25, 0.5], vec![1.0, 2.0])];
        let x0 = [4.0, -2.0];
        assert!(scan_parallel(&e, &x0, 1)
            .unwrap()
            .bit_eq(&scan_sequential(&e, &x0).unwrap()));
    }

    #[test]
    fn parallel_matches_sequential_for_awkward_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for &t in &[2usize, 3, 5, 17, 64, 100] {
            for &chunk in &[1usize, 2, 3, 7, 16] {
                let elems = random_elements(&mut rng, t, 3);
                let x0 = [0.5, -0.25, 1.0];
                let a = scan_sequential(&elems, &x0).unwrap();
                let b = scan_parallel(&elems, &x0, chunk).unwrap();
                let scale = a.max_abs().max(1e-300);
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() / scale < 1e-12, "t={t} chunk={chunk}");
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let elems = random_elements(&mut rng, 333, 4);
        let x0 = [0.0; 4];
        let one = with_workers(1, || scan_parallel_in(&elems, &x0, 8, NumericFormat::Bf16).unwrap());
        let four = with_workers(4, || scan_parallel_in(&elems, &x0, 8, NumericFormat::Bf16).unwrap());
        assert!(one.bit_eq(&four));
    }
}
