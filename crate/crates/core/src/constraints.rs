//! Domain groundings: soft Dice, connectedness, volume similarity and
//! nesting, each in a differentiable training form and a hard evaluation
//! form, plus assembly of the four-formula knowledge base.
//!
//! Hard forms operate on argmax masks and return plain scalars. Soft forms
//! operate on class probabilities and return [`TruthValue`]s whose gradients
//! reach the model output; wherever a hard decision is structurally needed
//! (point-set membership, chord sampling) it is taken on detached argmax
//! masks and only the probability weights stay differentiable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::logic::{forall_pmean, KnowledgeBase, TruthValue};
use crate::rng::{derive_seed, stream};
use crate::scalar::{count, lit, Real};

/// Smoothing constant added to the Dice numerator and denominator.
const DICE_SMOOTHING: f64 = 1e-6;

/// Per-voxel class probabilities, shape `[C, H, W]`, softmax-normalized.
pub struct ClassProbs<T: Real> {
    probs: Tensor<T>,
    classes: usize,
    height: usize,
    width: usize,
}

impl<T: Real> ClassProbs<T> {
    /// Wraps a `[C, H, W]` tensor; every voxel's class column must sum to 1
    /// (within 1e-9, widened for low-precision scalars) with entries in
    /// `[0, 1]`.
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let shape = probs.shape().to_vec();
        if shape.len() != 3 || shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "class probabilities must be [C, H, W] with no empty axis, got {shape:?}"
            )));
        }
        let (classes, height, width) = (shape[0], shape[1], shape[2]);
        let tol = lit::<T>(1e-9).max(T::epsilon() * lit::<T>(16.0));
        let lo = -tol;
        let hi = T::one() + tol;
        {
            let d = probs.data();
            let plane = height * width;
            for v in 0..plane {
                let mut sum = T::zero();
                for c in 0..classes {
                    let p = d[c * plane + v];
                    if !(lo..=hi).contains(&p) {
                        return Err(Error::Domain {
                            op: "class_probs",
                            msg: format!("probability {p} outside [0, 1] at voxel {v}"),
                        });
                    }
                    sum = sum + p;
                }
                if (sum - T::one()).abs() > tol {
                    return Err(Error::Domain {
                        op: "class_probs",
                        msg: format!("class sum {sum} != 1 at voxel {v}"),
                    });
                }
            }
        }
        Ok(ClassProbs {
            probs,
            classes,
            height,
            width,
        })
    }

    /// Crisp one-hot probabilities from a label grid.
    pub fn from_labels(labels: &[u8], height: usize, width: usize, classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Contract(format!(
                "label grid has {} entries, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        let plane = height * width;
        let mut data = vec![T::zero(); classes * plane];
        for (v, &l) in labels.iter().enumerate() {
            if (l as usize) >= classes {
                return Err(Error::Contract(format!(
                    "label {l} at voxel {v} exceeds class count {classes}"
                )));
            }
            data[l as usize * plane + v] = T::one();
        }
        Self::new(Tensor::from_vec(&[classes, height, width], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Probability plane of one class.
    pub fn channel(&self, class_id: u8) -> Result<Tensor<T>> {
        self.probs.select_channel(class_id as usize)
    }

    /// Per-voxel argmax labels; ties resolve to the lowest class id.
    pub fn argmax_labels(&self) -> Vec<u8> {
        let d = self.probs.data();
        let plane = self.height * self.width;
        let mut out = vec![0u8; plane];
        for v in 0..plane {
            let mut best = d[v];
            let mut arg = 0u8;
            for c in 1..self.classes {
                let p = d[c * plane + v];
                if p > best {
                    best = p;
                    arg = c as u8;
                }
            }
            out[v] = arg;
        }
        out
    }
}

/// Boolean grid for one class, from argmax predictions or ground truth.
#[derive(Clone)]
pub struct HardMask {
    class_id: u8,
    height: usize,
    width: usize,
    voxels: Vec<bool>,
}

impl HardMask {
    pub fn from_labels(labels: &[u8], height: usize, width: usize, class_id: u8) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Contract(format!(
                "label grid has {} entries, expected {}x{}",
                labels.len(),
                height,
                width
            )));
        }
        Ok(HardMask {
            class_id,
            height,
            width,
            voxels: labels.iter().map(|&l| l == class_id).collect(),
        })
    }

    pub fn from_probs<T: Real>(probs: &ClassProbs<T>, class_id: u8) -> Self {
        let labels = probs.argmax_labels();
        HardMask {
            class_id,
            height: probs.height(),
            width: probs.width(),
            voxels: labels.iter().map(|&l| l == class_id).collect(),
        }
    }

    pub fn class_id(&self) -> u8 {
        self.class_id
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y < self.height && x < self.width && self.voxels[y * self.width + x]
    }

    /// Set voxels as `(y, x)` pairs in row-major order.
    pub fn points(&self) -> Vec<(usize, usize)> {
        let mut pts = Vec::with_capacity(self.count());
        for y in 0..self.height {
            for x in 0..self.width {
                if self.voxels[y * self.width + x] {
                    pts.push((y, x));
                }
            }
        }
        pts
    }
}

/// Volume tolerance, absolute or relative to the grid size.
#[derive(Debug, Clone, Copy)]
pub enum Epsilon<T> {
    /// Absolute voxel count.
    Voxels(T),
    /// Fraction of the total voxel count.
    VolumeFraction(T),
}

impl<T: Real> Epsilon<T> {
    /// Tolerance in voxels for a grid of `total_voxels` cells.
    pub fn resolve(&self, total_voxels: usize) -> T {
        match *self {
            Epsilon::Voxels(v) => v,
            Epsilon::VolumeFraction(f) => f * count::<T>(total_voxels),
        }
    }
}

/// Parameters shared by all groundings.
#[derive(Debug, Clone)]
pub struct ConstraintParams<T: Real> {
    /// Decay rate of connectedness in the squared region distance.
    pub gamma_c: T,
    /// Decay rate of volume similarity in the squared excess difference.
    pub gamma_v: T,
    /// Volume difference tolerated without penalty.
    pub epsilon: Epsilon<T>,
    /// Exponent applied to nearest-neighbor distances inside the Chamfer sum.
    pub chamfer_power: T,
    /// Chord pairs sampled per nesting test; exhaustive when it covers all
    /// pairs.
    pub nesting_pairs: usize,
    /// Interpolation points per chord, endpoints included.
    pub nesting_steps: usize,
    /// Exponent of the p-mean quantifier and of the nesting smooth maximum.
    pub quantifier_p: T,
    /// Base seed for the per-sample chord sampling streams.
    pub seed: u64,
}

impl<T: Real> Default for ConstraintParams<T> {
    fn default() -> Self {
        ConstraintParams {
            gamma_c: lit(1e-3),
            gamma_v: lit(1e-4),
            epsilon: Epsilon::VolumeFraction(lit(0.019)),
            chamfer_power: T::one(),
            nesting_pairs: 32,
            nesting_steps: 64,
            quantifier_p: lit(2.0),
            seed: 0,
        }
    }
}

impl<T: Real> ConstraintParams<T> {
    pub fn validate(&self) -> Result<()> {
        if self.gamma_c <= T::zero() || !self.gamma_c.is_finite() {
            return Err(Error::Parameter(format!(
                "gamma_c must be positive, got {}",
                self.gamma_c
            )));
        }
        if self.gamma_v <= T::zero() || !self.gamma_v.is_finite() {
            return Err(Error::Parameter(format!(
                "gamma_v must be positive, got {}",
                self.gamma_v
            )));
        }
        let eps = match self.epsilon {
            Epsilon::Voxels(v) | Epsilon::VolumeFraction(v) => v,
        };
        if eps < T::zero() || !eps.is_finite() {
            return Err(Error::Parameter(format!(
                "epsilon must be non-negative, got {eps}"
            )));
        }
        if self.chamfer_power < T::one() {
            return Err(Error::Parameter(format!(
                "chamfer power must be >= 1, got {}",
                self.chamfer_power
            )));
        }
        if self.nesting_pairs == 0 {
            return Err(Error::Parameter("nesting pair count must be >= 1".into()));
        }
        if self.nesting_steps < 2 {
            return Err(Error::Parameter(
                "nesting interpolation needs >= 2 points per chord".into(),
            ));
        }
        if self.quantifier_p < T::one() {
            return Err(Error::Parameter(format!(
                "quantifier exponent must be >= 1, got {}",
                self.quantifier_p
            )));
        }
        Ok(())
    }
}

/// Differentiable Dice loss averaged over the foreground classes:
/// `1 - mean_c (2*sum(p_c*t_c) + s) / (sum(p_c) + sum(t_c) + s)`.
pub fn soft_dice_loss<T: Real>(probs: &ClassProbs<T>, target_labels: &[u8]) -> Result<Tensor<T>> {
    let plane = probs.height() * probs.width();
    if target_labels.len() != plane {
        return Err(Error::ShapeMismatch {
            op: "soft_dice_loss",
            lhs: vec![probs.classes(), probs.height(), probs.width()],
            rhs: vec![target_labels.len()],
        });
    }
    if let Some(&bad) = target_labels.iter().find(|&&l| (l as usize) >= probs.classes()) {
        return Err(Error::Contract(format!(
            "target label {bad} exceeds class count {}",
            probs.classes()
        )));
    }
    let s = lit::<T>(DICE_SMOOTHING);
    let mut per_class = Vec::with_capacity(probs.classes() - 1);
    for c in 1..probs.classes() {
        let p = probs.channel(c as u8)?;
        let t: Vec<T> = target_labels
            .iter()
            .map(|&l| if l as usize == c { T::one() } else { T::zero() })
            .collect();
        let t_count = t.iter().filter(|&&v| v == T::one()).count();
        let t = Tensor::from_vec(&[probs.height(), probs.width()], t)?;
        let intersection = p.mul(&t)?.sum_all();
        let num = intersection.mul_scalar(lit(2.0)).add_scalar(s);
        // group as (sums) + s, like the numerator, so crisp perfect
        // overlap divides to exactly 1
        let den = p.sum_all().add_scalar(count::<T>(t_count)).add_scalar(s);
        per_class.push(num.div(&den)?);
    }
    let dice = Tensor::stack_scalars(&per_class)?.mean_all();
    Ok(dice.rsub_scalar(T::one()))
}

/// `||a - b||^p` computed as `(dy^2 + dx^2)^(p/2)`.
fn dist_pow<T: Real>(a: (usize, usize), b: (usize, usize), power: T) -> T {
    let dy = count::<T>(a.0.max(b.0)) - count::<T>(a.0.min(b.0));
    let dx = count::<T>(a.1.max(b.1)) - count::<T>(a.1.min(b.1));
    let d2 = dy * dy + dx * dx;
    d2.powf(power * lit(0.5))
}

fn min_dist_pow<T: Real>(p: (usize, usize), others: &[(usize, usize)], power: T) -> T {
    let mut best = T::infinity();
    for &q in others {
        let d = dist_pow(p, q, power);
        if d < best {
            best = d;
        }
    }
    best
}

/// Symmetric average nearest-neighbor distance between point sets:
/// `(1/|A|) sum_a min_b ||a-b||^p + (1/|B|) sum_b min_a ||b-a||^p`.
pub fn chamfer_distance<T: Real>(
    points_a: &[(usize, usize)],
    points_b: &[(usize, usize)],
    power: T,
) -> Result<T> {
    if power < T::one() {
        return Err(Error::Parameter(format!(
            "chamfer power must be >= 1, got {power}"
        )));
    }
    if points_a.is_empty() {
        return Err(Error::EmptyMask {
            role: "first chamfer operand",
        });
    }
    if points_b.is_empty() {
        return Err(Error::EmptyMask {
            role: "second chamfer operand",
        });
    }
    let mut term_a = T::zero();
    for &a in points_a {
        term_a = term_a + min_dist_pow(a, points_b, power);
    }
    let mut term_b = T::zero();
    for &b in points_b {
        term_b = term_b + min_dist_pow(b, points_a, power);
    }
    Ok(term_a / count::<T>(points_a.len()) + term_b / count::<T>(points_b.len()))
}

/// Connectedness truth `exp(-gamma_c * d^2)` on argmax masks; 0 when either
/// region is empty.
pub fn connectedness_hard<T: Real>(
    mask_a: &HardMask,
    mask_b: &HardMask,
    params: &ConstraintParams<T>,
) -> Result<T> {
    let pts_a = mask_a.points();
    let pts_b = mask_b.points();
    if pts_a.is_empty() || pts_b.is_empty() {
        return Ok(T::zero());
    }
    let d = chamfer_distance(&pts_a, &pts_b, params.chamfer_power)?;
    Ok((-params.gamma_c * d * d).exp())
}

/// Differentiable connectedness grounding.
///
/// Point sets come from the detached argmax masks; each point's constant
/// nearest-neighbor distance is weighted by the predicted probability of
/// the point's class, so the value matches [`connectedness_hard`] on crisp
/// probabilities while gradients flow through the weights. Either region
/// empty grounds to a vacuous 1: a constant 0 would dominate the formula
/// aggregation with no gradient toward recovery, whereas the overlap term
/// always pulls missing classes back. Reports use [`connectedness_hard`],
/// which scores missing regions as 0.
pub fn connectedness_grounding<T: Real>(
    mask_a: &HardMask,
    mask_b: &HardMask,
    probs: &ClassProbs<T>,
    params: &ConstraintParams<T>,
) -> Result<TruthValue<T>> {
    if mask_a.height() != probs.height()
        || mask_a.width() != probs.width()
        || mask_b.height() != probs.height()
        || mask_b.width() != probs.width()
    {
        return Err(Error::Contract(
            "connectedness masks and probabilities must share a grid".into(),
        ));
    }
    let pts_a = mask_a.points();
    let pts_b = mask_b.points();
    if pts_a.is_empty() || pts_b.is_empty() {
        return TruthValue::constant(T::one());
    }
    let d_soft = weighted_chamfer_term(&pts_a, &pts_b, mask_a.class_id(), probs, params)?.add(
        &weighted_chamfer_term(&pts_b, &pts_a, mask_b.class_id(), probs, params)?,
    )?;
    let truth = d_soft.mul(&d_soft)?.mul_scalar(-params.gamma_c).exp();
    TruthValue::new(truth)
}

/// `(1/|A|) sum_a w_a * min_b ||a-b||^p` with `w_a` the gathered class
/// probability at `a`.
fn weighted_chamfer_term<T: Real>(
    pts: &[(usize, usize)],
    others: &[(usize, usize)],
    class_id: u8,
    probs: &ClassProbs<T>,
    params: &ConstraintParams<T>,
) -> Result<Tensor<T>> {
    let plane = probs.height() * probs.width();
    let dists: Vec<T> = pts
        .iter()
        .map(|&p| min_dist_pow(p, others, params.chamfer_power))
        .collect();
    let indices: Vec<usize> = pts
        .iter()
        .map(|&(y, x)| class_id as usize * plane + y * probs.width() + x)
        .collect();
    let weights = probs.tensor().gather(&indices)?;
    let dists = Tensor::from_vec(&[pts.len()], dists)?;
    Ok(weights
        .mul(&dists)?
        .sum_all()
        .mul_scalar(T::one() / count::<T>(pts.len())))
}

/// Chord endpoints sampled from `points`: all unordered pairs when `pairs`
/// covers them, otherwise `pairs` random distinct-index draws.
fn sample_chords(
    points: &[(usize, usize)],
    pairs: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<((usize, usize), (usize, usize))> {
    let n = points.len();
    debug_assert!(n >= 2);
    let total = n * (n - 1) / 2;
    if pairs >= total {
        let mut out = Vec::with_capacity(total);
        for i in 0..n {
            for j in (i + 1)..n {
                out.push((points[i], points[j]));
            }
        }
        return out;
    }
    let mut out = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out.push((points[i], points[j]));
    }
    out
}

/// Grid cells visited by `steps`-point linear interpolation between chord
/// endpoints, rounded half-away-from-zero and clamped to the grid.
fn chord_cells(
    src: (usize, usize),
    dst: (usize, usize),
    steps: usize,
    height: usize,
    width: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let (y0, x0) = (src.0 as f64, src.1 as f64);
    let (dy, dx) = (dst.0 as f64 - y0, dst.1 as f64 - x0);
    let denom = (steps - 1).max(1) as f64;
    (0..steps).map(move |q| {
        let t = q as f64 / denom;
        let y = (y0 + t * dy).round();
        let x = (x0 + t * dx).round();
        let y = (y.max(0.0) as usize).min(height - 1);
        let x = (x.max(0.0) as usize).min(width - 1);
        (y, x)
    })
}

/// Chord-sampling nesting test on hard masks: true iff any interpolated
/// point of any sampled chord of `a` lands on a set voxel of `b`. Masks
/// with fewer than 2 set voxels are never nested.
pub fn nested_hard(a: &HardMask, b: &HardMask, pairs: usize, steps: usize, seed: u64) -> bool {
    debug_assert_eq!((a.height(), a.width()), (b.height(), b.width()));
    let points = a.points();
    if points.len() < 2 {
        return false;
    }
    let mut rng = stream(&[seed]);
    for (src, dst) in sample_chords(&points, pairs, &mut rng) {
        for (y, x) in chord_cells(src, dst, steps, a.height(), a.width()) {
            if b.contains(y, x) {
                return true;
            }
        }
    }
    false
}

/// Differentiable nesting score of `inner` within `outer`.
///
/// Chords are sampled from the detached argmax mask of `outer` (same seed,
/// same chords as [`nested_hard`]); the score is the smooth maximum (p-mean
/// with the quantifier exponent) of the predicted `inner` probability over
/// all interpolated points. An outer mask with fewer than 2 voxels scores 0.
pub fn nested_soft<T: Real>(
    probs: &ClassProbs<T>,
    outer: u8,
    inner: u8,
    params: &ConstraintParams<T>,
    seed: u64,
) -> Result<TruthValue<T>> {
    if outer == inner {
        return Err(Error::Parameter(format!(
            "nesting needs distinct classes, got {outer} for both"
        )));
    }
    if outer as usize >= probs.classes() || inner as usize >= probs.classes() {
        return Err(Error::Parameter(format!(
            "nesting classes ({outer}, {inner}) exceed class count {}",
            probs.classes()
        )));
    }
    let outer_mask = HardMask::from_probs(probs, outer);
    let points = outer_mask.points();
    if points.len() < 2 {
        return TruthValue::constant(T::zero());
    }
    let plane = probs.height() * probs.width();
    let mut rng = stream(&[seed]);
    let mut indices = Vec::new();
    for (src, dst) in sample_chords(&points, params.nesting_pairs, &mut rng) {
        for (y, x) in chord_cells(src, dst, params.nesting_steps, probs.height(), probs.width()) {
            indices.push(inner as usize * plane + y * probs.width() + x);
        }
    }
    let u = probs.tensor().gather(&indices)?;
    let p = params.quantifier_p;
    let score = u.powf(p)?.mean_all().powf(T::one() / p)?;
    TruthValue::new(score)
}

/// Differentiable voxel count: the probability mass of one class.
pub fn soft_voxel_count<T: Real>(probs: &ClassProbs<T>, class_id: u8) -> Result<Tensor<T>> {
    Ok(probs.channel(class_id)?.sum_all())
}

/// Volume-similarity truth `exp(-gamma_v * max(|c_a - c_b| - eps, 0)^2)`;
/// exactly 1 anywhere inside the tolerance band.
pub fn volume_similarity<T: Real>(
    count_a: &Tensor<T>,
    count_b: &Tensor<T>,
    total_voxels: usize,
    params: &ConstraintParams<T>,
) -> Result<TruthValue<T>> {
    if count_a.len() != 1 || count_b.len() != 1 {
        return Err(Error::Contract("volume counts must be scalars".into()));
    }
    if count_a.value() < T::zero() || count_b.value() < T::zero() {
        return Err(Error::Domain {
            op: "volume_similarity",
            msg: format!(
                "negative voxel count ({}, {})",
                count_a.value(),
                count_b.value()
            ),
        });
    }
    let eps = params.epsilon.resolve(total_voxels);
    // |a - b| as relu(a-b) + relu(b-a); kinks take the zero subgradient
    let diff = count_a
        .sub(count_b)?
        .relu()
        .add(&count_b.sub(count_a)?.relu())?;
    let excess = diff.add_scalar(-eps).clamp_min(T::zero());
    let truth = excess.mul(&excess)?.mul_scalar(-params.gamma_v).exp();
    TruthValue::new(truth)
}

/// Hard volume similarity on argmax voxel counts.
pub fn volume_similarity_hard<T: Real>(
    count_a: usize,
    count_b: usize,
    total_voxels: usize,
    params: &ConstraintParams<T>,
) -> T {
    let eps = params.epsilon.resolve(total_voxels);
    let diff = count::<T>(count_a.max(count_b)) - count::<T>(count_a.min(count_b));
    let excess = (diff - eps).max(T::zero());
    (-params.gamma_v * excess * excess).exp()
}

/// The four per-sample truths entering the knowledge base.
pub struct SampleTruths<T: Real> {
    pub dice: TruthValue<T>,
    pub connected: TruthValue<T>,
    pub sim_vol: TruthValue<T>,
    pub not_nested: TruthValue<T>,
}

/// Elementwise max through `a + relu(b - a)`, keeping gradients.
fn tensor_max<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.add(&b.sub(a)?.relu())
}

/// Grounds all four constraints for one prediction.
///
/// `chord_seed` fixes the nesting chord streams; both containment
/// directions draw from sub-streams so their chords are independent.
pub fn ground_sample<T: Real>(
    probs: &ClassProbs<T>,
    target_labels: &[u8],
    params: &ConstraintParams<T>,
    chord_seed: u64,
) -> Result<SampleTruths<T>> {
    let dice = TruthValue::new(soft_dice_loss(probs, target_labels)?.rsub_scalar(T::one()))?;
    let anterior = HardMask::from_probs(probs, 1);
    let posterior = HardMask::from_probs(probs, 2);
    let connected = connectedness_grounding(&anterior, &posterior, probs, params)?;
    let total = probs.height() * probs.width();
    let sim_vol = volume_similarity(
        &soft_voxel_count(probs, 1)?,
        &soft_voxel_count(probs, 2)?,
        total,
        params,
    )?;
    let fwd = nested_soft(probs, 1, 2, params, derive_seed(&[chord_seed, 1]))?;
    let bwd = nested_soft(probs, 2, 1, params, derive_seed(&[chord_seed, 2]))?;
    let nested = tensor_max(fwd.tensor(), bwd.tensor())?;
    let not_nested = TruthValue::new(nested.rsub_scalar(T::one()))?;
    Ok(SampleTruths {
        dice,
        connected,
        sim_vol,
        not_nested,
    })
}

/// Grounds a batch into the four-formula knowledge base.
///
/// `predict` maps a sample index to its class probabilities (normally the
/// model forward pass); `targets` are the matching label grids and `ids`
/// the stable sample identifiers seeding the chord streams together with
/// `params.seed` and `epoch`.
pub fn build_knowledge_base<T: Real>(
    predictions: &[ClassProbs<T>],
    targets: &[&[u8]],
    ids: &[u64],
    params: &ConstraintParams<T>,
    epoch: u64,
) -> Result<KnowledgeBase<T>> {
    if predictions.is_empty() {
        return Err(Error::Contract("knowledge base needs a non-empty batch".into()));
    }
    if predictions.len() != targets.len() || predictions.len() != ids.len() {
        return Err(Error::Contract(format!(
            "batch arity mismatch: {} predictions, {} targets, {} ids",
            predictions.len(),
            targets.len(),
            ids.len()
        )));
    }
    params.validate()?;
    let mut dice = Vec::with_capacity(predictions.len());
    let mut connected = Vec::with_capacity(predictions.len());
    let mut sim_vol = Vec::with_capacity(predictions.len());
    let mut not_nested = Vec::with_capacity(predictions.len());
    for ((probs, labels), &id) in predictions.iter().zip(targets).zip(ids) {
        let chord_seed = derive_seed(&[params.seed, id, epoch]);
        let truths = ground_sample(probs, labels, params, chord_seed)?;
        dice.push(truths.dice);
        connected.push(truths.connected);
        sim_vol.push(truths.sim_vol);
        not_nested.push(truths.not_nested);
    }
    let p = params.quantifier_p;
    let mut kb = KnowledgeBase::new(p)?;
    kb.add("phi_d", forall_pmean(&dice, p)?)?;
    kb.add("phi_c", forall_pmean(&connected, p)?)?;
    kb.add("phi_v", forall_pmean(&sim_vol, p)?)?;
    kb.add("phi_n", forall_pmean(&not_nested, p)?)?;
    Ok(kb)
}

/// Runs every soft grounding through central finite-difference checks on
/// `rounds` seeded random inputs. Logits are the checked parameters, so the
/// softmax invariant holds under perturbation; class margins are kept wide
/// enough that the detached argmax masks never flip.
pub fn grounding_suite<T: Real>(
    rounds: usize,
    base_seed: u64,
) -> Result<Vec<crate::autodiff::SuiteCase<T>>> {
    use crate::autodiff::{gradient_check, SuiteCase};

    type CaseFn<T> = fn(&mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>>;

    fn rand_unit<T: Real>(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> T {
        lit::<T>(lo + (hi - lo) * rng.random::<f64>())
    }

    /// Class layout with every class present and ~3-logit argmax margins.
    fn stable_logits<T: Real>(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Vec<T>, Vec<u8>) {
        let plane = h * w;
        let mut labels = vec![0u8; plane];
        for y in 0..h {
            for x in 0..w {
                // left third anterior, right third posterior, rest background
                labels[y * w + x] = if x < w / 3 {
                    1
                } else if x >= w - w / 3 {
                    2
                } else {
                    0
                };
            }
        }
        let mut logits = vec![T::zero(); 3 * plane];
        for (v, &l) in labels.iter().enumerate() {
            for c in 0..3usize {
                let base = if c == l as usize { 4.0 } else { 0.0 };
                logits[c * plane + v] = lit::<T>(base) + rand_unit(rng, -0.5, 0.5);
            }
        }
        (logits, labels)
    }

    fn probs_of<T: Real>(logits: &Tensor<T>) -> Result<ClassProbs<T>> {
        ClassProbs::new(logits.softmax(0)?)
    }

    fn case_forall<T: Real>(rng: &mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>> {
        let vals: Vec<Tensor<T>> = (0..5)
            .map(|_| Tensor::scalar_param(rand_unit(rng, 0.05, 0.95)))
            .collect();
        gradient_check(
            |ps: &[Tensor<T>]| {
                let truths: Vec<TruthValue<T>> = ps
                    .iter()
                    .map(|t| TruthValue::new(t.clone()))
                    .collect::<Result<_>>()?;
                Ok(forall_pmean(&truths, lit(2.0))?.tensor().clone())
            },
            &vals,
            lit(1e-5),
        )
    }

    fn case_kb_loss<T: Real>(rng: &mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>> {
        let vals: Vec<Tensor<T>> = (0..4)
            .map(|_| Tensor::scalar_param(rand_unit(rng, 0.05, 0.95)))
            .collect();
        gradient_check(
            |ps: &[Tensor<T>]| {
                let mut kb = KnowledgeBase::new(lit(2.0))?;
                for (i, t) in ps.iter().enumerate() {
                    kb.add(format!("f{i}"), TruthValue::new(t.clone())?)?;
                }
                kb.kb_loss()
            },
            &vals,
            lit(1e-5),
        )
    }

    fn case_dice<T: Real>(rng: &mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>> {
        let (logits, labels) = stable_logits::<T>(rng, 5, 6);
        let x = Tensor::param(&[3, 5, 6], logits)?;
        gradient_check(
            move |ps: &[Tensor<T>]| soft_dice_loss(&probs_of(&ps[0])?, &labels),
            &[x],
            lit(1e-5),
        )
    }

    fn case_connected<T: Real>(
        rng: &mut ChaCha8Rng,
    ) -> Result<crate::autodiff::GradCheckReport<T>> {
        let (logits, _) = stable_logits::<T>(rng, 5, 6);
        let x = Tensor::param(&[3, 5, 6], logits)?;
        let params = ConstraintParams::default();
        gradient_check(
            move |ps: &[Tensor<T>]| {
                let probs = probs_of(&ps[0])?;
                let a = HardMask::from_probs(&probs, 1);
                let b = HardMask::from_probs(&probs, 2);
                Ok(connectedness_grounding(&a, &b, &probs, &params)?
                    .tensor()
                    .clone())
            },
            &[x],
            lit(1e-5),
        )
    }

    fn case_simvol<T: Real>(rng: &mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>> {
        let (logits, _) = stable_logits::<T>(rng, 5, 7);
        let x = Tensor::param(&[3, 5, 7], logits)?;
        // narrow band so the excess branch is active and smooth
        let params = ConstraintParams::<T> {
            epsilon: Epsilon::Voxels(lit(0.25)),
            gamma_v: lit(0.01),
            ..ConstraintParams::default()
        };
        gradient_check(
            move |ps: &[Tensor<T>]| {
                let probs = probs_of(&ps[0])?;
                let ca = soft_voxel_count(&probs, 1)?;
                let cb = soft_voxel_count(&probs, 2)?;
                Ok(volume_similarity(&ca, &cb, 35, &params)?.tensor().clone())
            },
            &[x],
            lit(1e-5),
        )
    }

    fn case_nested<T: Real>(rng: &mut ChaCha8Rng) -> Result<crate::autodiff::GradCheckReport<T>> {
        let (logits, _) = stable_logits::<T>(rng, 5, 6);
        let x = Tensor::param(&[3, 5, 6], logits)?;
        let params = ConstraintParams::default();
        let seed = rng.random::<u64>();
        gradient_check(
            move |ps: &[Tensor<T>]| {
                let probs = probs_of(&ps[0])?;
                Ok(nested_soft(&probs, 1, 2, &params, seed)?.tensor().clone())
            },
            &[x],
            lit(1e-5),
        )
    }

    let cases: Vec<(&'static str, CaseFn<T>)> = vec![
        ("forall_pmean", case_forall::<T>),
        ("kb_loss", case_kb_loss::<T>),
        ("soft_dice_loss", case_dice::<T>),
        ("connectedness", case_connected::<T>),
        ("volume_similarity", case_simvol::<T>),
        ("nested_soft", case_nested::<T>),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (ci, (name, case)) in cases.iter().enumerate() {
        let mut worst = T::zero();
        let mut checked = 0usize;
        let mut skipped = 0usize;
        for round in 0..rounds {
            let mut rng = stream(&[base_seed, 101 + ci as u64, round as u64]);
            let rep = case(&mut rng)?;
            if rep.max_rel_err > worst {
                worst = rep.max_rel_err;
            }
            checked += rep.checked;
            skipped += rep.skipped_kinks;
        }
        out.push(SuiteCase {
            name,
            max_rel_err: worst,
            checked,
            skipped_kinks: skipped,
        });
    }
    Ok(out)
}
