//! Fuzzy real logic over `[0, 1]` truth values.
//!
//! Formulas ground into differentiable scalars. The universal quantifier is
//! a generalized-mean error aggregator: large deviations from truth 1
//! dominate as `p` grows. The same aggregator combines the formulas of a
//! knowledge base into one satisfaction level, whose complement is the loss
//! minimized during training.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{lit, Real};

/// Tolerance for floating-point drift just outside `[0, 1]`.
const RANGE_SLACK: f64 = 1e-9;

/// A differentiable scalar in `[0, 1]`.
#[derive(Clone)]
pub struct TruthValue<T: Real> {
    t: Tensor<T>,
}

impl<T: Real> TruthValue<T> {
    /// Wraps a scalar tensor, enforcing the `[0, 1]` range (with a small
    /// slack for accumulated rounding).
    pub fn new(t: Tensor<T>) -> Result<Self> {
        if t.len() != 1 {
            return Err(Error::Contract(format!(
                "truth value must be scalar, got shape {:?}",
                t.shape()
            )));
        }
        let v = t.value();
        if !v.is_finite() || v < lit::<T>(-RANGE_SLACK) || v > T::one() + lit::<T>(RANGE_SLACK) {
            return Err(Error::Domain {
                op: "truth_value",
                msg: format!("value {v} outside [0, 1]"),
            });
        }
        Ok(TruthValue { t })
    }

    /// Constant truth value outside any graph.
    pub fn constant(v: T) -> Result<Self> {
        Self::new(Tensor::scalar(v))
    }

    pub fn value(&self) -> T {
        self.t.value()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.t
    }

    /// Fuzzy negation `1 - t`.
    pub fn negate(&self) -> TruthValue<T> {
        TruthValue {
            t: self.t.rsub_scalar(T::one()),
        }
    }
}

/// Universal quantifier as a generalized-mean error:
/// `1 - ((1/n) * sum_i (1 - u_i)^p)^(1/p)`, `p >= 1`.
///
/// Equals `min` as `p -> inf` and the arithmetic mean at `p = 1`; it is
/// idempotent (all inputs equal `v` gives `v`) and monotone in every input.
pub fn forall_pmean<T: Real>(truths: &[TruthValue<T>], p: T) -> Result<TruthValue<T>> {
    if truths.is_empty() {
        return Err(Error::Contract(
            "universal quantifier over an empty domain".into(),
        ));
    }
    if p < T::one() {
        return Err(Error::Parameter(format!(
            "quantifier exponent must be >= 1, got {p}"
        )));
    }
    let stacked: Vec<Tensor<T>> = truths.iter().map(|t| t.t.clone()).collect();
    let u = Tensor::stack_scalars(&stacked)?;
    // clamp guards err >= 0 against values a rounding error above 1
    let err = u.rsub_scalar(T::one()).clamp_min(T::zero());
    let mean_err = if p == T::one() {
        err.mean_all()
    } else {
        err.powf(p)?.mean_all().powf(T::one() / p)?
    };
    TruthValue::new(mean_err.rsub_scalar(T::one()))
}

/// Named formulas whose joint satisfaction drives training. Formula names
/// are unique; the aggregation exponent is fixed at construction.
pub struct KnowledgeBase<T: Real> {
    formulas: Vec<(String, TruthValue<T>)>,
    agg_p: T,
}

impl<T: Real> KnowledgeBase<T> {
    pub fn new(agg_p: T) -> Result<Self> {
        if agg_p < T::one() {
            return Err(Error::Parameter(format!(
                "aggregation exponent must be >= 1, got {agg_p}"
            )));
        }
        Ok(KnowledgeBase {
            formulas: Vec::new(),
            agg_p,
        })
    }

    pub fn add(&mut self, name: impl Into<String>, truth: TruthValue<T>) -> Result<()> {
        let name = name.into();
        if self.formulas.iter().any(|(n, _)| *n == name) {
            return Err(Error::Contract(format!(
                "formula `{name}` already in the knowledge base"
            )));
        }
        self.formulas.push((name, truth));
        Ok(())
    }

    pub fn agg_p(&self) -> T {
        self.agg_p
    }

    /// Replaces the satisfaction-aggregator exponent; lets callers decouple
    /// the cross-formula aggregation from the per-formula quantifier.
    pub fn set_agg_p(&mut self, agg_p: T) -> Result<()> {
        if agg_p < T::one() {
            return Err(Error::Parameter(format!(
                "aggregation exponent must be >= 1, got {agg_p}"
            )));
        }
        self.agg_p = agg_p;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.formulas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.formulas.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TruthValue<T>> {
        self.formulas
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TruthValue<T>)> {
        self.formulas.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Joint satisfaction of all formulas; 1 iff every formula grounds to 1.
    pub fn sat_agg(&self) -> Result<TruthValue<T>> {
        if self.formulas.is_empty() {
            return Err(Error::Contract(
                "satisfaction of an empty knowledge base".into(),
            ));
        }
        let truths: Vec<TruthValue<T>> = self.formulas.iter().map(|(_, t)| t.clone()).collect();
        forall_pmean(&truths, self.agg_p)
    }

    /// Training loss `1 - sat_agg`; zero iff fully satisfied.
    pub fn kb_loss(&self) -> Result<Tensor<T>> {
        Ok(self.sat_agg()?.tensor().rsub_scalar(T::one()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tv(v: f64) -> TruthValue<f64> {
        TruthValue::constant(v).unwrap()
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(TruthValue::constant(-0.1f64).is_err());
        assert!(TruthValue::constant(1.1f64).is_err());
        assert!(TruthValue::constant(f64::NAN).is_err());
        assert!(TruthValue::constant(0.0f64).is_ok());
        assert!(TruthValue::constant(1.0f64).is_ok());
    }

    #[test]
    fn negate_complements() {
        assert_eq!(tv(0.25).negate().value(), 0.75);
        assert_eq!(tv(1.0).negate().value(), 0.0);
    }

    #[test]
    fn forall_known_value() {
        // inputs {1.0, 0.5}, p = 2: 1 - sqrt((0 + 0.25)/2)
        let out = forall_pmean(&[tv(1.0), tv(0.5)], 2.0).unwrap();
        assert!((out.value() - 0.6464466094067263).abs() < 1e-12);
    }

    #[test]
    fn forall_p1_is_arithmetic_mean() {
        let out = forall_pmean(&[tv(0.2), tv(0.4), tv(0.9)], 1.0).unwrap();
        assert!((out.value() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn forall_rejects_empty_and_bad_p() {
        assert!(forall_pmean::<f64>(&[], 2.0).is_err());
        assert!(forall_pmean(&[tv(0.5)], 0.5).is_err());
    }

    #[test]
    fn forall_idempotent() {
        for &v in &[0.0, 0.25, 0.5, 1.0] {
            for &n in &[1usize, 4, 16] {
                for &p in &[1.0, 2.0, 4.0] {
                    let truths: Vec<_> = (0..n).map(|_| tv(v)).collect();
                    let out = forall_pmean(&truths, p).unwrap().value();
                    assert!(
                        (out - v).abs() <= 1e-12,
                        "v={v} n={n} p={p} gave {out}"
                    );
                }
            }
        }
    }

    #[test]
    fn forall_gradient_flows_to_inputs() {
        let a = Tensor::scalar_param(0.9f64);
        let b = Tensor::scalar_param(0.4f64);
        let ta = TruthValue::new(a.clone()).unwrap();
        let tb = TruthValue::new(b.clone()).unwrap();
        let out = forall_pmean(&[ta, tb], 2.0).unwrap();
        out.tensor().backward().unwrap();
        let ga = a.grad().unwrap()[0];
        let gb = b.grad().unwrap()[0];
        assert!(ga > 0.0 && gb > 0.0, "satisfaction increases with inputs");
        assert!(gb > ga, "larger violation gets the larger pull");
    }

    #[test]
    fn forall_gradient_finite_at_full_truth() {
        // All inputs exactly 1: the p-root sits at its kink; the zero
        // subgradient keeps the result finite.
        let a = Tensor::scalar_param(1.0f64);
        let out = forall_pmean(&[TruthValue::new(a.clone()).unwrap()], 2.0).unwrap();
        out.tensor().backward().unwrap();
        assert!(a.grad().unwrap()[0].is_finite());
    }

    #[test]
    fn kb_loss_known_value() {
        let mut kb = KnowledgeBase::new(2.0).unwrap();
        kb.add("alpha", tv(1.0)).unwrap();
        kb.add("beta", tv(0.5)).unwrap();
        let loss = kb.kb_loss().unwrap().value();
        assert!((loss - 0.35355339059327373).abs() < 1e-12);
        assert!((kb.sat_agg().unwrap().value() + loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kb_full_satisfaction_is_exactly_zero_loss() {
        let mut kb = KnowledgeBase::new(2.0).unwrap();
        for name in ["a", "b", "c", "d"] {
            kb.add(name, tv(1.0)).unwrap();
        }
        assert_eq!(kb.kb_loss().unwrap().value(), 0.0);
        assert_eq!(kb.sat_agg().unwrap().value(), 1.0);
    }

    #[test]
    fn kb_rejects_duplicates_empty_and_bad_p() {
        assert!(KnowledgeBase::<f64>::new(0.5).is_err());
        let mut kb = KnowledgeBase::new(2.0).unwrap();
        assert!(kb.sat_agg().is_err(), "empty kb has no satisfaction");
        kb.add("alpha", tv(0.75)).unwrap();
        assert!(kb.add("alpha", tv(0.5)).is_err());
        assert_eq!(kb.get("alpha").unwrap().value(), 0.75);
        assert!(kb.get("gamma").is_none());
        assert_eq!(kb.len(), 1);
    }

    proptest! {
        #[test]
        fn forall_bounded_by_min_and_mean(
            vals in proptest::collection::vec(0.0f64..=1.0, 1..12),
            p in 1.0f64..8.0,
        ) {
            let truths: Vec<_> = vals.iter().map(|&v| tv(v)).collect();
            let out = forall_pmean(&truths, p).unwrap().value();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!((0.0..=1.0).contains(&out));
            prop_assert!(out >= lo - 1e-12 && out <= mean + 1e-12);
        }

        #[test]
        fn forall_monotone_in_each_input(
            vals in proptest::collection::vec(0.0f64..=1.0, 2..8),
            idx in 0usize..8,
            bump in 0.0f64..0.5,
            p in 1.0f64..6.0,
        ) {
            let idx = idx % vals.len();
            let truths: Vec<_> = vals.iter().map(|&v| tv(v)).collect();
            let base = forall_pmean(&truths, p).unwrap().value();
            let mut raised = vals.clone();
            raised[idx] = (raised[idx] + bump).min(1.0);
            let truths2: Vec<_> = raised.iter().map(|&v| tv(v)).collect();
            let after = forall_pmean(&truths2, p).unwrap().value();
            prop_assert!(after >= base - 1e-12);
        }
    }
}
