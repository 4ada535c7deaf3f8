//! Loss kernels with hand-derived gradients: the soft-margin triplet loss,
//! the IOU-ratio assignment loss for semi-positive references, the offset
//! regression loss, and their weighted combination over a batch.
//!
//! Every batch term is a mean (over triplets, over semi-positive pairs, over
//! offset predictions) so magnitudes do not depend on batch size. Gradients are
//! returned with respect to the raw, pre-normalization encoder outputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embed::{dot, normalize_backward, norm};
use crate::error::{Error, Result};

/// Similarities with magnitude at or below this make the IOU ratio undefined.
pub const SIMILARITY_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub w_triplet: f64,
    pub w_iou: f64,
    pub w_offset: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 10.0, w_triplet: 1.0, w_iou: 1.0, w_offset: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        for w in [self.w_triplet, self.w_iou, self.w_offset] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::InvalidConfig(format!("loss weights must be non-negative, got {w}")));
            }
        }
        Ok(())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletTerm {
    pub loss: f64,
    pub d_pos_grad: f64,
    pub d_neg_grad: f64,
}

pub fn triplet_loss(d_pos: f64, d_neg: f64, cfg: &LossConfig) -> TripletTerm {
    let z = cfg.alpha * (d_pos - d_neg);
    let g = cfg.alpha * sigmoid(z);
    TripletTerm { loss: softplus(z), d_pos_grad: g, d_neg_grad: -g }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TripletDirection {
    /// Ground view anchors; positive is its aerial partner, negative another pair's aerial.
    GroundAnchor,
    /// Aerial view anchors; positive is its ground partner, negative another pair's ground.
    AerialAnchor,
}

/// Indices into a batch of matched pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub negative: usize,
    pub direction: TripletDirection,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletSet(pub Vec<Triplet>);

impl TripletSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Triplet> {
        self.0.iter()
    }
}

/// Every (anchor, negative) ordered pair in both view directions: `2N(N-1)` triplets.
pub fn build_exhaustive_triplets(n: usize) -> TripletSet {
    let mut out = Vec::with_capacity(2 * n * n.saturating_sub(1));
    for direction in [TripletDirection::GroundAnchor, TripletDirection::AerialAnchor] {
        for anchor in 0..n {
            for negative in (0..n).filter(|&j| j != anchor) {
                out.push(Triplet { anchor, negative, direction });
            }
        }
    }
    TripletSet(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouPairLabel {
    iou_pos: f64,
    iou_semi: f64,
}

impl IouPairLabel {
    pub fn new(iou_pos: f64, iou_semi: f64) -> Result<Self> {
        if !(0.0 < iou_semi && iou_semi <= iou_pos && iou_pos <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "IOU label needs 0 < semi <= pos <= 1, got pos {iou_pos}, semi {iou_semi}"
            )));
        }
        Ok(Self { iou_pos, iou_semi })
    }

    pub fn iou_pos(&self) -> f64 {
        self.iou_pos
    }

    pub fn iou_semi(&self) -> f64 {
        self.iou_semi
    }

    pub fn target_ratio(&self) -> f64 {
        self.iou_semi / self.iou_pos
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IouTerm {
    pub loss: f64,
    pub s_pos_grad: f64,
    pub s_semi_grad: f64,
    /// The positive similarity was too close to zero; loss and gradients are zero.
    pub skipped: bool,
}

/// `(s_semi / s_pos - iou_semi / iou_pos)^2`.
pub fn iou_assignment_loss(s_pos: f64, s_semi: f64, label: &IouPairLabel) -> IouTerm {
    if s_pos.abs() <= SIMILARITY_EPS {
        return IouTerm { loss: 0.0, s_pos_grad: 0.0, s_semi_grad: 0.0, skipped: true };
    }
    let r = s_semi / s_pos - label.target_ratio();
    IouTerm {
        loss: r * r,
        s_pos_grad: -2.0 * r * s_semi / (s_pos * s_pos),
        s_semi_grad: 2.0 * r / s_pos,
        skipped: false,
    }
}

/// Ground-truth offset from the positive tile center, in meters divided by the tile side.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OffsetLabel {
    pub lat_norm: f64,
    pub lon_norm: f64,
}

/// Squared error on a `[lat, lon]` prediction, with its gradient.
pub fn offset_loss(pred: [f64; 2], truth: &OffsetLabel) -> (f64, [f64; 2]) {
    let e_lat = pred[0] - truth.lat_norm;
    let e_lon = pred[1] - truth.lon_norm;
    (e_lat * e_lat + e_lon * e_lon, [2.0 * e_lat, 2.0 * e_lon])
}

/// Softmax cross-entropy for the grid-classification offset head.
pub fn softmax_cross_entropy(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[class] - max);
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / sum - if i == class { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemiPair {
    /// Batch index of the query whose semi-positive tile this is.
    pub query: usize,
    pub aerial: Vec<f64>,
    pub label: IouPairLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum OffsetTarget {
    Regression { pred: [f64; 2], truth: OffsetLabel },
    Classification { logits: Vec<f64>, class: usize },
}

/// Raw encoder outputs and labels for one batch of `N` matched pairs.
#[derive(Clone, Debug, Default)]
pub struct HybridBatch {
    pub ground: Vec<Vec<f64>>,
    pub aerial: Vec<Vec<f64>>,
    pub semi: Vec<SemiPair>,
    pub offsets: Vec<OffsetTarget>,
    /// `(query, tile)` batch index pairs where tile `tile` covers query `query`;
    /// such pairs never serve as negatives for each other.
    pub covers: BTreeSet<(usize, usize)>,
    /// Treat every semi-positive as an additional positive in the triplet
    /// term instead of feeding the IOU term.
    pub semi_as_positive: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HybridOutput {
    pub total: f64,
    /// Unweighted mean of each term.
    pub triplet: f64,
    pub iou: f64,
    pub offset: f64,
    pub n_triplets: usize,
    pub n_iou_terms: usize,
    pub n_iou_skipped: usize,
    pub grad_ground: Vec<Vec<f64>>,
    pub grad_aerial: Vec<Vec<f64>>,
    pub grad_semi: Vec<Vec<f64>>,
    /// Gradient on each offset prediction (2 values for regression, one per logit otherwise).
    pub grad_offset: Vec<Vec<f64>>,
}

#[derive(Clone, Copy)]
enum Slot {
    Ground(usize),
    Aerial(usize),
    Semi(usize),
}

struct Units {
    ground: Vec<Vec<f64>>,
    aerial: Vec<Vec<f64>>,
    semi: Vec<Vec<f64>>,
}

impl Units {
    fn get(&self, s: Slot) -> &[f64] {
        match s {
            Slot::Ground(i) => &self.ground[i],
            Slot::Aerial(i) => &self.aerial[i],
            Slot::Semi(i) => &self.semi[i],
        }
    }

    fn get_mut(&mut self, s: Slot) -> &mut [f64] {
        match s {
            Slot::Ground(i) => &mut self.ground[i],
            Slot::Aerial(i) => &mut self.aerial[i],
            Slot::Semi(i) => &mut self.semi[i],
        }
    }
}

fn unit_vec(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Weighted sum of the mean triplet, IOU and offset terms with gradients with
/// respect to every raw embedding coordinate and every offset prediction.
pub fn hybrid_loss(batch: &HybridBatch, cfg: &LossConfig) -> Result<HybridOutput> {
    cfg.validate()?;
    let n = batch.ground.len();
    if batch.aerial.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} ground vs {} aerial embeddings", batch.aerial.len())));
    }
    let dim = batch.ground.first().map_or(0, Vec::len);
    let all = batch.ground.iter().chain(&batch.aerial).chain(batch.semi.iter().map(|s| &s.aerial));
    for v in all {
        if v.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: v.len() });
        }
    }
    if let Some(s) = batch.semi.iter().find(|s| s.query >= n) {
        return Err(Error::ShapeMismatch(format!("semi-positive refers to query {} of {n}", s.query)));
    }

    let units = Units {
        ground: batch.ground.iter().map(|v| unit_vec(v)).collect::<Result<_>>()?,
        aerial: batch.aerial.iter().map(|v| unit_vec(v)).collect::<Result<_>>()?,
        semi: batch.semi.iter().map(|s| unit_vec(&s.aerial)).collect::<Result<_>>()?,
    };
    let mut grads = Units {
        ground: vec![vec![0.0; dim]; n],
        aerial: vec![vec![0.0; dim]; n],
        semi: vec![vec![0.0; dim]; batch.semi.len()],
    };

    // (anchor, positive, negative)
    let mut triples: Vec<(Slot, Slot, Slot)> = Vec::new();
    for t in build_exhaustive_triplets(n).iter() {
        match t.direction {
            TripletDirection::GroundAnchor if !batch.covers.contains(&(t.anchor, t.negative)) => {
                triples.push((Slot::Ground(t.anchor), Slot::Aerial(t.anchor), Slot::Aerial(t.negative)));
            }
            TripletDirection::AerialAnchor if !batch.covers.contains(&(t.negative, t.anchor)) => {
                triples.push((Slot::Aerial(t.anchor), Slot::Ground(t.anchor), Slot::Ground(t.negative)));
            }
            _ => {}
        }
    }
    if batch.semi_as_positive {
        for (k, s) in batch.semi.iter().enumerate() {
            for j in (0..n).filter(|&j| j != s.query && !batch.covers.contains(&(s.query, j))) {
                triples.push((Slot::Ground(s.query), Slot::Semi(k), Slot::Aerial(j)));
            }
        }
    }

    let mut triplet_sum = 0.0;
    let tw = if triples.is_empty() { 0.0 } else { cfg.w_triplet / triples.len() as f64 };
    for &(a, p, q) in &triples {
        let (ua, up, uq) = (units.get(a), units.get(p), units.get(q));
        let diff_p: Vec<f64> = ua.iter().zip(up).map(|(x, y)| x - y).collect();
        let diff_n: Vec<f64> = ua.iter().zip(uq).map(|(x, y)| x - y).collect();
        let term = triplet_loss(dot(&diff_p, &diff_p), dot(&diff_n, &diff_n), cfg);
        triplet_sum += term.loss;
        let gp = 2.0 * tw * term.d_pos_grad;
        let gn = 2.0 * tw * term.d_neg_grad;
        axpy(grads.get_mut(a), gp, &diff_p);
        axpy(grads.get_mut(a), gn, &diff_n);
        axpy(grads.get_mut(p), -gp, &diff_p);
        axpy(grads.get_mut(q), -gn, &diff_n);
    }

    let mut iou_sum = 0.0;
    let mut skipped = 0;
    let iou_terms = if batch.semi_as_positive { 0 } else { batch.semi.len() };
    let iw = if iou_terms == 0 { 0.0 } else { cfg.w_iou / iou_terms as f64 };
    for (k, s) in batch.semi.iter().enumerate().take(iou_terms) {
        let i = s.query;
        let s_pos = dot(&units.ground[i], &units.aerial[i]);
        let s_semi = dot(&units.ground[i], &units.semi[k]);
        let term = iou_assignment_loss(s_pos, s_semi, &s.label);
        if term.skipped {
            skipped += 1;
            continue;
        }
        iou_sum += term.loss;
        let (gp, gs) = (iw * term.s_pos_grad, iw * term.s_semi_grad);
        axpy(&mut grads.ground[i], gp, &units.aerial[i]);
        axpy(&mut grads.ground[i], gs, &units.semi[k]);
        axpy(&mut grads.aerial[i], gp, &units.ground[i]);
        axpy(&mut grads.semi[k], gs, &units.ground[i]);
    }

    let mut offset_sum = 0.0;
    let ow = if batch.offsets.is_empty() { 0.0 } else { cfg.w_offset / batch.offsets.len() as f64 };
    let mut grad_offset = Vec::with_capacity(batch.offsets.len());
    for target in &batch.offsets {
        let (loss, g) = match target {
            OffsetTarget::Regression { pred, truth } => {
                let (l, g) = offset_loss(*pred, truth);
                (l, g.to_vec())
            }
            OffsetTarget::Classification { logits, class } => {
                if *class >= logits.len() {
                    return Err(Error::ShapeMismatch(format!("class {class} of {} logits", logits.len())));
                }
                softmax_cross_entropy(logits, *class)
            }
        };
        offset_sum += loss;
        grad_offset.push(g.into_iter().map(|x| ow * x).collect());
    }

    let mean = |sum: f64, count: usize| if count == 0 { 0.0 } else { sum / count as f64 };
    let triplet = mean(triplet_sum, triples.len());
    let iou = mean(iou_sum, iou_terms);
    let offset = mean(offset_sum, batch.offsets.len());
    let back = |raw: &[Vec<f64>], g: &[Vec<f64>]| -> Vec<Vec<f64>> {
        raw.iter().zip(g).map(|(r, g)| normalize_backward(r, g)).collect()
    };
    let semi_raw: Vec<Vec<f64>> = batch.semi.iter().map(|s| s.aerial.clone()).collect();

    Ok(HybridOutput {
        total: cfg.w_triplet * triplet + cfg.w_iou * iou + cfg.w_offset * offset,
        triplet,
        iou,
        offset,
        n_triplets: triples.len(),
        n_iou_terms: iou_terms,
        n_iou_skipped: skipped,
        grad_ground: back(&batch.ground, &grads.ground),
        grad_aerial: back(&batch.aerial, &grads.aerial),
        grad_semi: back(&semi_raw, &grads.semi),
        grad_offset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    // Values below come from evaluating the closed forms directly, e.g.
    // log1p(exp(-5)) = 0.006715348489118068.
    #[test]
    fn triplet_values() {
        let cfg = LossConfig::default();
        assert!((triplet_loss(0.3, 0.3, &cfg).loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((triplet_loss(0.0, 0.5, &cfg).loss - 0.006_715_348_489_118_068).abs() < 1e-12);
        assert!((triplet_loss(0.5, 0.0, &cfg).loss - 5.006_715_348_489_118).abs() < 1e-12);
        // Literal form overflows here; the stable one does not.
        let big = triplet_loss(100.0, 0.0, &cfg);
        assert!((big.loss - 1000.0).abs() < 1e-9);
        assert!((big.d_pos_grad - 10.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        for _ in 0..100 {
            let cfg = LossConfig { alpha: rng.random_range(0.5..20.0), ..Default::default() };
            let (dp, dn) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
            let t = triplet_loss(dp, dn, &cfg);
            let fp = (triplet_loss(dp + h, dn, &cfg).loss - triplet_loss(dp - h, dn, &cfg).loss) / (2.0 * h);
            let fn_ = (triplet_loss(dp, dn + h, &cfg).loss - triplet_loss(dp, dn - h, &cfg).loss) / (2.0 * h);
            assert!(rel_err(fp, t.d_pos_grad) < 1e-6, "{fp} vs {}", t.d_pos_grad);
            assert!(rel_err(fn_, t.d_neg_grad) < 1e-6);
        }
    }

    #[test]
    fn exhaustive_triplet_counts() {
        assert_eq!(build_exhaustive_triplets(2).len(), 4);
        assert_eq!(build_exhaustive_triplets(1).len(), 0);
        assert_eq!(build_exhaustive_triplets(0).len(), 0);
        assert_eq!(build_exhaustive_triplets(8).len(), 112);
        assert_eq!(build_exhaustive_triplets(5), build_exhaustive_triplets(5));
    }

    #[test]
    fn iou_values() {
        let label = IouPairLabel::new(49.0 / 79.0, 9.0 / 23.0).unwrap();
        let t = iou_assignment_loss(0.8, 0.4, &label);
        assert!((t.loss - 0.017_129_165_620_185_047).abs() < 1e-12, "{}", t.loss);
        let exact = iou_assignment_loss(0.5, 0.5 * label.target_ratio(), &label);
        assert!(exact.loss < 1e-30);
        let skip = iou_assignment_loss(1e-7, 0.3, &label);
        assert!(skip.skipped && skip.loss == 0.0 && skip.s_pos_grad == 0.0 && skip.s_semi_grad == 0.0);
        assert!(IouPairLabel::new(0.3, 0.5).is_err());
        assert!(IouPairLabel::new(1.2, 0.5).is_err());
        assert!(IouPairLabel::new(0.5, 0.0).is_err());
    }

    #[test]
    fn iou_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-6;
        for _ in 0..100 {
            let pos = rng.random_range(0.4..1.0);
            let label = IouPairLabel::new(pos, rng.random_range(0.1..pos)).unwrap();
            let sp = rng.random_range(0.2..1.0) * if rng.random_bool(0.2) { -1.0 } else { 1.0 };
            let ss = rng.random_range(-1.0..1.0);
            let t = iou_assignment_loss(sp, ss, &label);
            let f = |a: f64, b: f64| iou_assignment_loss(a, b, &label).loss;
            let gp = (f(sp + h, ss) - f(sp - h, ss)) / (2.0 * h);
            let gs = (f(sp, ss + h) - f(sp, ss - h)) / (2.0 * h);
            assert!(rel_err(gp, t.s_pos_grad) < 1e-5 || (gp - t.s_pos_grad).abs() < 1e-9);
            assert!(rel_err(gs, t.s_semi_grad) < 1e-5 || (gs - t.s_semi_grad).abs() < 1e-9);
        }
    }

    #[test]
    fn offset_values_and_gradient() {
        let zero = OffsetLabel::default();
        assert_eq!(offset_loss([0.0, 0.0], &zero).0, 0.0);
        assert!((offset_loss([0.1, -0.2], &zero).0 - 0.05).abs() < 1e-15);
        let truth = OffsetLabel { lat_norm: 0.07, lon_norm: -0.11 };
        let p = [0.2, 0.01];
        let (_, g) = offset_loss(p, &truth);
        let h = 1e-6;
        for k in 0..2 {
            let (mut a, mut b) = (p, p);
            a[k] += h;
            b[k] -= h;
            let fd = (offset_loss(a, &truth).0 - offset_loss(b, &truth).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = vec![0.3, -1.0, 2.0, 0.5];
        let (l, g) = softmax_cross_entropy(&logits, 2);
        assert!(l > 0.0);
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
        let h = 1e-6;
        for k in 0..4 {
            let (mut a, mut b) = (logits.clone(), logits.clone());
            a[k] += h;
            b[k] -= h;
            let fd = (softmax_cross_entropy(&a, 2).0 - softmax_cross_entropy(&b, 2).0) / (2.0 * h);
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> HybridBatch {
        let v = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let ground: Vec<_> = (0..n).map(|_| v(rng)).collect();
        // Aerial partners correlated with ground so positive similarities stay away from zero.
        let aerial: Vec<_> = ground
            .iter()
            .map(|g| g.iter().map(|x| x + 0.3 * rng.random_range(-1.0..1.0)).collect())
            .collect();
        let semi = (0..n)
            .map(|i| SemiPair {
                query: i,
                aerial: v(rng),
                label: IouPairLabel::new(0.6, 0.25).unwrap(),
            })
            .collect();
        let offsets = (0..n)
            .map(|_| OffsetTarget::Regression {
                pred: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)],
                truth: OffsetLabel { lat_norm: 0.1, lon_norm: -0.05 },
            })
            .collect();
        HybridBatch { ground, aerial, semi, offsets, ..Default::default() }
    }

    fn numeric_grad(batch: &HybridBatch, cfg: &LossConfig, get: impl Fn(&mut HybridBatch) -> &mut f64) -> f64 {
        let h = 1e-6;
        let mut b = batch.clone();
        *get(&mut b) += h;
        let up = hybrid_loss(&b, cfg).unwrap().total;
        *get(&mut b) -= 2.0 * h;
        let down = hybrid_loss(&b, cfg).unwrap().total;
        (up - down) / (2.0 * h)
    }

    #[test]
    fn hybrid_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = LossConfig { alpha: 2.0, ..Default::default() };
        for case in 0..5 {
            let mut batch = random_batch(&mut rng, 3, 4);
            batch.semi_as_positive = case % 2 == 1;
            if case == 2 {
                batch.covers.insert((0, 1));
            }
            let out = hybrid_loss(&batch, &cfg).unwrap();
            for i in 0..3 {
                for d in 0..4 {
                    let fd = numeric_grad(&batch, &cfg, |b| &mut b.ground[i][d]);
                    assert!(rel_err(fd, out.grad_ground[i][d]) < 1e-4 || (fd - out.grad_ground[i][d]).abs() < 1e-8);
                    let fd = numeric_grad(&batch, &cfg, |b| &mut b.aerial[i][d]);
                    assert!(rel_err(fd, out.grad_aerial[i][d]) < 1e-4 || (fd - out.grad_aerial[i][d]).abs() < 1e-8);
                    let fd = numeric_grad(&batch, &cfg, |b| &mut b.semi[i].aerial[d]);
                    assert!(rel_err(fd, out.grad_semi[i][d]) < 1e-4 || (fd - out.grad_semi[i][d]).abs() < 1e-8);
                }
                for k in 0..2 {
                    let fd = numeric_grad(&batch, &cfg, |b| match &mut b.offsets[i] {
                        OffsetTarget::Regression { pred, .. } => &mut pred[k],
                        OffsetTarget::Classification { .. } => unreachable!(),
                    });
                    assert!(rel_err(fd, out.grad_offset[i][k]) < 1e-4);
                }
            }
        }
    }

    #[test]
    fn hybrid_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let batch = random_batch(&mut rng, 4, 5);
        let out = hybrid_loss(&batch, &LossConfig::default()).unwrap();
        assert!((out.total - (out.triplet + out.iou + out.offset)).abs() < 1e-12);
        assert_eq!(out.n_triplets, 2 * 4 * 3);

        let trip_only = LossConfig { w_iou: 0.0, w_offset: 0.0, ..Default::default() };
        let bare = HybridBatch { ground: batch.ground.clone(), aerial: batch.aerial.clone(), ..Default::default() };
        let a = hybrid_loss(&batch, &trip_only).unwrap();
        let b = hybrid_loss(&bare, &LossConfig::default()).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        for (x, y) in a.grad_ground.iter().flatten().zip(b.grad_ground.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_is_zero() {
        let out = hybrid_loss(&HybridBatch::default(), &LossConfig::default()).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn covers_removes_triplets() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut batch = random_batch(&mut rng, 3, 4);
        batch.covers.insert((0, 1));
        batch.covers.insert((2, 0));
        // (0,1) drops ground-anchor 0 vs aerial 1 and aerial-anchor 1 vs ground 0; same for (2,0).
        assert_eq!(hybrid_loss(&batch, &LossConfig::default()).unwrap().n_triplets, 12 - 4);
    }

    proptest! {
        #[test]
        fn triplet_monotone(d in 0.0f64..4.0, e in 0.001f64..1.0) {
            let cfg = LossConfig::default();
            prop_assert!(triplet_loss(d + e, d, &cfg).loss > triplet_loss(d, d, &cfg).loss);
            prop_assert!(triplet_loss(d, d + e, &cfg).loss < triplet_loss(d, d, &cfg).loss);
            prop_assert!((triplet_loss(d, d, &cfg).loss - std::f64::consts::LN_2).abs() < 1e-12);
        }

        #[test]
        fn iou_loss_scale_invariant(sp in 0.1f64..1.0, ss in -1.0f64..1.0, c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
            let label = IouPairLabel::new(0.62, 0.2).unwrap();
            let a = iou_assignment_loss(sp, ss, &label).loss;
            let b = iou_assignment_loss(c * sp, c * ss, &label).loss;
            prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        }
    }
}
