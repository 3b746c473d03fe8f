//! CTC probability machinery: path probabilities, the collapse map, the
//! forward-backward negative log-likelihood with its gradient, and a
//! brute-force path enumerator used as an oracle.
//!
//! All numerics are f64. The blank is always the last column of an
//! emission matrix.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Row-sum tolerance for in-memory emission matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Upper bound on `V^T` accepted by [`sequence_probability_bruteforce`].
pub const BRUTEFORCE_PATH_LIMIT: f64 = 1e7;

/// T x V row-stochastic matrix of per-frame token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionMatrix {
    probs: Array2<f64>,
}

impl EmissionMatrix {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        let (t, v) = probs.dim();
        if t < 1 || v < 2 {
            return Err(Error::InvalidEmission(format!(
                "need T >= 1 and V >= 2, got {t} x {v}"
            )));
        }
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidEmission(format!("row {i} has entries outside [0, 1]")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidEmission(format!("row {i} sums to {sum}")));
            }
        }
        Ok(EmissionMatrix { probs })
    }

    /// Row-wise softmax of real-valued scores.
    pub fn from_logits(logits: ArrayView2<'_, f64>) -> Result<Self> {
        let mut probs = log_softmax(logits);
        probs.mapv_inplace(f64::exp);
        Self::new(probs)
    }

    /// Accepts probabilities that went through 32-bit storage: rows must sum
    /// to one within `tolerance`, and are renormalised in f64.
    pub fn from_stored(mut probs: Array2<f64>, tolerance: f64) -> Result<Self> {
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > tolerance || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidEmission(format!("row {i} sums to {sum}")));
            }
            row /= sum;
        }
        Self::new(probs)
    }

    /// Uniform rows, mostly useful in tests.
    pub fn uniform(frames: usize, width: usize) -> Result<Self> {
        Self::new(Array2::from_elem((frames, width), 1.0 / width as f64))
    }

    /// One-hot rows spelling `path`.
    pub fn one_hot(path: &[TokenId], width: usize) -> Result<Self> {
        let mut probs = Array2::zeros((path.len(), width));
        for (t, &k) in path.iter().enumerate() {
            if k >= width {
                return Err(Error::UnknownToken(format!("id {k}")));
            }
            probs[[t, k]] = 1.0;
        }
        Self::new(probs)
    }

    pub fn frames(&self) -> usize {
        self.probs.nrows()
    }

    pub fn width(&self) -> usize {
        self.probs.ncols()
    }

    pub fn blank_id(&self) -> TokenId {
        self.width() - 1
    }

    pub fn probs(&self) -> ArrayView2<'_, f64> {
        self.probs.view()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.probs.row(t)
    }

    pub fn get(&self, t: usize, k: TokenId) -> f64 {
        self.probs[[t, k]]
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.probs
    }
}

/// Frame-aligned token sequence over the alphabet including blank.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Path(pub Vec<TokenId>);

impl Path {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }
}

/// Blank-free label sequence. Adjacent repeats are legitimate.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct LabelSequence(Vec<TokenId>);

impl LabelSequence {
    pub fn new(labels: Vec<TokenId>, blank_id: TokenId) -> Result<Self> {
        if let Some(pos) = labels.iter().position(|&k| k == blank_id) {
            return Err(Error::BlankInLabelSequence(pos));
        }
        Ok(LabelSequence(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }

    /// Minimum frame count that can spell this sequence: one frame per label
    /// plus a separating blank between each pair of equal neighbours.
    pub fn required_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }
}

pub fn path_probability(e: &EmissionMatrix, p: &Path) -> Result<f64> {
    if p.len() != e.frames() {
        return Err(Error::Shape(format!(
            "path has {} frames, emissions have {}",
            p.len(),
            e.frames()
        )));
    }
    let mut prob = 1.0;
    for (t, &k) in p.0.iter().enumerate() {
        if k >= e.width() {
            return Err(Error::UnknownToken(format!("id {k}")));
        }
        prob *= e.get(t, k);
    }
    Ok(prob)
}

/// Merges adjacent repeats, then removes blanks.
pub fn collapse(path: &[TokenId], blank_id: TokenId) -> LabelSequence {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if prev != Some(k) && k != blank_id {
            out.push(k);
        }
        prev = Some(k);
    }
    LabelSequence(out)
}

/// Sums the probability of every path that collapses to `l`.
pub fn sequence_probability_bruteforce(e: &EmissionMatrix, l: &LabelSequence) -> Result<f64> {
    let (t, v) = (e.frames(), e.width());
    let paths = (v as f64).powi(t as i32);
    if paths > BRUTEFORCE_PATH_LIMIT {
        return Err(Error::TooLargeForOracle {
            paths,
            limit: BRUTEFORCE_PATH_LIMIT,
        });
    }
    if let Some(pos) = l.0.iter().position(|&k| k == e.blank_id()) {
        return Err(Error::BlankInLabelSequence(pos));
    }
    let mut path = vec![0; t];
    let mut total = 0.0;
    loop {
        if collapse(&path, e.blank_id()) == *l {
            total += path.iter().enumerate().map(|(i, &k)| e.get(i, k)).product::<f64>();
        }
        // odometer increment
        let mut i = t;
        loop {
            if i == 0 {
                return Ok(total);
            }
            i -= 1;
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
        }
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Forward-backward lattice over the blank-interleaved label sequence.
struct Lattice {
    states: usize,
    log_alpha: Vec<f64>,
    log_beta: Vec<f64>,
    log_prob: f64,
}

fn extended_label(labels: &[TokenId], blank: TokenId, s: usize) -> TokenId {
    if s.is_multiple_of(2) {
        blank
    } else {
        labels[s / 2]
    }
}

fn validate_labels(labels: &LabelSequence, frames: usize, width: usize) -> Result<()> {
    let blank = width - 1;
    for (pos, &k) in labels.0.iter().enumerate() {
        if k == blank {
            return Err(Error::BlankInLabelSequence(pos));
        }
        if k >= width {
            return Err(Error::UnknownToken(format!("id {k}")));
        }
    }
    let required = labels.required_frames();
    if required > frames {
        return Err(Error::InfeasibleAlignment { required, frames });
    }
    Ok(())
}

/// `log_probs` is T x V with the blank in the last column.
fn run_lattice(log_probs: ArrayView2<'_, f64>, labels: &[TokenId], with_beta: bool) -> Lattice {
    let (frames, width) = log_probs.dim();
    let blank = width - 1;
    let states = 2 * labels.len() + 1;
    let ext = |s| extended_label(labels, blank, s);
    // s-2 -> s skip allowed for a label state whose label differs from the previous one
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && ext(s) != ext(s - 2);

    let mut alpha = vec![f64::NEG_INFINITY; frames * states];
    alpha[0] = log_probs[[0, blank]];
    if states > 1 {
        alpha[1] = log_probs[[0, ext(1)]];
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * states);
        let prev = &prev[(t - 1) * states..];
        for s in 0..states {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = acc + log_probs[[t, ext(s)]];
        }
    }
    let last = (frames - 1) * states;
    let mut log_prob = alpha[last + states - 1];
    if states > 1 {
        log_prob = log_add(log_prob, alpha[last + states - 2]);
    }

    let mut beta = Vec::new();
    if with_beta {
        beta = vec![f64::NEG_INFINITY; frames * states];
        beta[last + states - 1] = 0.0;
        if states > 1 {
            beta[last + states - 2] = 0.0;
        }
        for t in (0..frames - 1).rev() {
            let (cur, next) = beta.split_at_mut((t + 1) * states);
            let cur = &mut cur[t * states..];
            for s in 0..states {
                let mut acc = next[s] + log_probs[[t + 1, ext(s)]];
                if s + 1 < states {
                    acc = log_add(acc, next[s + 1] + log_probs[[t + 1, ext(s + 1)]]);
                }
                if s + 2 < states && can_skip(s + 2) {
                    acc = log_add(acc, next[s + 2] + log_probs[[t + 1, ext(s + 2)]]);
                }
                cur[s] = acc;
            }
        }
    }
    Lattice {
        states,
        log_alpha: alpha,
        log_beta: beta,
        log_prob,
    }
}

/// `-ln p(l | x)` via the forward recursion. Returns `+inf` when every
/// feasible alignment has zero probability.
pub fn ctc_neg_log_likelihood(e: &EmissionMatrix, l: &LabelSequence) -> Result<f64> {
    validate_labels(l, e.frames(), e.width())?;
    let log_probs = e.probs().mapv(f64::ln);
    Ok(-run_lattice(log_probs.view(), &l.0, false).log_prob)
}

/// Loss and its gradient with respect to the pre-softmax scores.
pub fn ctc_loss_and_gradient(logits: ArrayView2<'_, f64>, l: &LabelSequence) -> Result<(f64, Array2<f64>)> {
    let (frames, width) = logits.dim();
    if frames < 1 || width < 2 {
        return Err(Error::Shape(format!("need T >= 1 and V >= 2, got {frames} x {width}")));
    }
    validate_labels(l, frames, width)?;
    let log_probs = log_softmax(logits);
    let lattice = run_lattice(log_probs.view(), &l.0, true);
    if !lattice.log_prob.is_finite() {
        return Err(Error::ZeroProbability);
    }
    let blank = width - 1;
    let mut grad = log_probs.mapv(f64::exp);
    for t in 0..frames {
        let base = t * lattice.states;
        for s in 0..lattice.states {
            let occ = lattice.log_alpha[base + s] + lattice.log_beta[base + s] - lattice.log_prob;
            if occ > f64::NEG_INFINITY {
                grad[[t, extended_label(&l.0, blank, s)]] -= occ.exp();
            }
        }
    }
    Ok((-lattice.log_prob, grad))
}

pub fn ctc_gradient(logits: ArrayView2<'_, f64>, l: &LabelSequence) -> Result<Array2<f64>> {
    ctc_loss_and_gradient(logits, l).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Array2<f64> {
        Array2::from_shape_fn((t, v), |_| rng.random_range(-2.0..2.0))
    }

    fn labels(v: &[TokenId]) -> LabelSequence {
        LabelSequence(v.to_vec())
    }

    #[test]
    fn uniform_path_probability() {
        let e = EmissionMatrix::uniform(2, 3).unwrap();
        for p in [[0, 0], [1, 2], [2, 1]] {
            let prob = path_probability(&e, &Path(p.to_vec())).unwrap();
            assert!((prob - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn one_hot_path_probability() {
        let q = vec![0, 2, 1, 1];
        let e = EmissionMatrix::one_hot(&q, 3).unwrap();
        assert_eq!(path_probability(&e, &Path(q)).unwrap(), 1.0);
        assert_eq!(path_probability(&e, &Path(vec![0, 2, 1, 0])).unwrap(), 0.0);
    }

    #[test]
    fn random_path_probability_matches_hand_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = EmissionMatrix::from_logits(random_logits(&mut rng, 5, 4).view()).unwrap();
        let p = Path(vec![3, 0, 0, 2, 1]);
        let probs = e.probs();
        let hand = probs[[0, 3]] * probs[[1, 0]] * probs[[2, 0]] * probs[[3, 2]] * probs[[4, 1]];
        assert!((path_probability(&e, &p).unwrap() - hand).abs() < 1e-15);
    }

    #[test]
    fn path_probability_errors() {
        let e = EmissionMatrix::uniform(2, 3).unwrap();
        assert!(matches!(path_probability(&e, &Path(vec![0])), Err(Error::Shape(_))));
        assert!(matches!(path_probability(&e, &Path(vec![0, 3])), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn emission_validation() {
        assert!(EmissionMatrix::new(array![[1.0]]).is_err());
        assert!(EmissionMatrix::new(array![[0.5, 0.6]]).is_err());
        assert!(EmissionMatrix::new(array![[1.5, -0.5]]).is_err());
        assert!(EmissionMatrix::new(Array2::zeros((0, 3))).is_err());
        assert!(EmissionMatrix::new(array![[0.5, 0.5]]).is_ok());
    }

    #[test]
    fn collapse_rules() {
        let (a, b, c, blank) = (0, 1, 2, 3);
        assert!(collapse(&[blank, blank, blank], blank).is_empty());
        assert_eq!(collapse(&[a, a, blank, a], blank).as_slice(), &[a, a]);
        assert_eq!(collapse(&[a, blank, b, b, c], blank).as_slice(), &[a, b, c]);
    }

    #[test]
    fn bruteforce_small_cases() {
        let e = EmissionMatrix::new(array![[0.3, 0.7]]).unwrap();
        let p = sequence_probability_bruteforce(&e, &labels(&[0])).unwrap();
        assert!((p - 0.3).abs() < 1e-15);

        let e = EmissionMatrix::new(array![[0.6, 0.4], [0.2, 0.8]]).unwrap();
        let p = sequence_probability_bruteforce(&e, &labels(&[0])).unwrap();
        let hand = 0.6 * 0.2 + 0.6 * 0.8 + 0.4 * 0.2;
        assert!((p - hand).abs() < 1e-15);
    }

    #[test]
    fn bruteforce_guard() {
        let e = EmissionMatrix::uniform(12, 4).unwrap();
        assert!(matches!(
            sequence_probability_bruteforce(&e, &labels(&[0])),
            Err(Error::TooLargeForOracle { .. })
        ));
    }

    #[test]
    fn bruteforce_label_sets_partition_paths() {
        // T=4, V=3: enumerate every collapsible label sequence over {0, 1}
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = EmissionMatrix::from_logits(random_logits(&mut rng, 4, 3).view()).unwrap();
        let mut total = 0.0;
        for len in 0..=4u32 {
            for code in 0..2usize.pow(len) {
                let l: Vec<TokenId> = (0..len).map(|i| (code >> i) & 1).collect();
                total += sequence_probability_bruteforce(&e, &labels(&l)).unwrap();
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_valid_path_has_zero_loss() {
        // l = [a, a] spelled as a, blank, a
        let e = EmissionMatrix::one_hot(&[0, 0, 2, 0], 3).unwrap();
        let loss = ctc_neg_log_likelihood(&e, &labels(&[0, 0])).unwrap();
        assert_eq!(loss, 0.0);
        let loss = ctc_neg_log_likelihood(&e, &labels(&[0])).unwrap();
        assert_eq!(loss, f64::INFINITY);
    }

    #[test]
    fn repeat_needs_separating_blank() {
        let e = EmissionMatrix::uniform(2, 3).unwrap();
        assert!(matches!(
            ctc_neg_log_likelihood(&e, &labels(&[0, 0])),
            Err(Error::InfeasibleAlignment { required: 3, frames: 2 })
        ));
        assert!(ctc_neg_log_likelihood(&e, &labels(&[0, 1])).unwrap().is_finite());
    }

    #[test]
    fn empty_label_sequence_is_all_blank() {
        let e = EmissionMatrix::new(array![[0.2, 0.8], [0.5, 0.5]]).unwrap();
        let loss = ctc_neg_log_likelihood(&e, &LabelSequence::default()).unwrap();
        assert!((loss + (0.8f64 * 0.5).ln()).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_bruteforce() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = EmissionMatrix::from_logits(random_logits(&mut rng, 6, 4).view()).unwrap();
        let l = labels(&[1, 0, 1]);
        let brute = sequence_probability_bruteforce(&e, &l).unwrap();
        let loss = ctc_neg_log_likelihood(&e, &l).unwrap();
        assert!(((-loss).exp() - brute).abs() < 1e-12);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = random_logits(&mut rng, 7, 5);
        let g = ctc_gradient(logits.view(), &labels(&[0, 3, 3])).unwrap();
        for row in g.rows() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = random_logits(&mut rng, 6, 4);
        let l = labels(&[2, 0]);
        let g = ctc_gradient(logits.view(), &l).unwrap();
        let h = 1e-5;
        let loss_at = |x: &Array2<f64>| ctc_loss_and_gradient(x.view(), &l).unwrap().0;
        let mut worst: f64 = 0.0;
        for idx in ndarray::indices(logits.dim()) {
            let mut plus = logits.clone();
            plus[idx] += h;
            let mut minus = logits.clone();
            minus[idx] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            worst = worst.max((fd - g[idx]).abs());
        }
        assert!(worst <= 1e-6, "max abs diff {worst}");
    }

    #[test]
    fn gradient_vanishes_at_delta_optimum() {
        // path 1, blank, 0, 0 spells [1, 0]
        let path = [1, 3, 0, 0];
        let mut logits = Array2::zeros((4, 4));
        for (t, &k) in path.iter().enumerate() {
            logits[[t, k]] = 25.0;
        }
        let g = ctc_gradient(logits.view(), &labels(&[1, 0])).unwrap();
        let max = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(max <= 1e-6, "{max}");
    }

    #[test]
    fn loss_gradient_agree_on_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = random_logits(&mut rng, 5, 3);
        let l = labels(&[0, 1]);
        let e = EmissionMatrix::from_logits(logits.view()).unwrap();
        let a = ctc_neg_log_likelihood(&e, &l).unwrap();
        let (b, _) = ctc_loss_and_gradient(logits.view(), &l).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}
