use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::scalar::{lit, Real};

use super::tensor::{no_grad, Tensor};

/// One coordinate of one parameter, compared against central differences.
#[derive(Debug, Clone)]
pub struct CoordCheck<T> {
    pub param: usize,
    pub coord: usize,
    pub analytic: T,
    pub numeric: T,
    pub rel_err: T,
    /// One-sided slopes disagreed: the coordinate sits near a kink and its
    /// `rel_err` is excluded from the report maximum.
    pub near_kink: bool,
}

/// Outcome of a [`gradient_check`] run.
#[derive(Debug, Clone)]
pub struct GradCheckReport<T> {
    pub checks: Vec<CoordCheck<T>>,
    /// Largest relative error over coordinates away from kinks.
    pub max_rel_err: T,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl<T: Real> GradCheckReport<T> {
    pub fn passes(&self, tol: T) -> bool {
        self.max_rel_err <= tol
    }

    /// The worst non-kink coordinate, if any coordinate was checked.
    pub fn worst(&self) -> Option<&CoordCheck<T>> {
        self.checks
            .iter()
            .filter(|c| !c.near_kink)
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
    }
}

/// Compares reverse-mode gradients of a scalar-valued function against
/// central finite differences, coordinate by coordinate.
///
/// `f` must be a pure function of `params` (same inputs, same output), and
/// every gradient-requiring leaf it touches must be listed in `params`.
/// Coordinates where the left and right one-sided slopes disagree by more
/// than 1% are flagged `near_kink` and excluded from `max_rel_err`.
pub fn gradient_check<T, F>(mut f: F, params: &[Tensor<T>], eps: T) -> Result<GradCheckReport<T>>
where
    T: Real,
    F: FnMut(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    for p in params {
        p.zero_grad();
    }
    let out = f(params)?;
    if out.len() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check target must be scalar, got shape {:?}",
            out.shape()
        )));
    }
    let f0 = out.value();
    if !f0.is_finite() {
        return Err(Error::Probe { coord: 0 });
    }
    out.backward()?;
    let analytic: Vec<Vec<T>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![T::zero(); p.len()]))
        .collect();

    let tiny = lit::<T>(1e-6);
    let kink_tol = lit::<T>(1e-2);
    let two = lit::<T>(2.0);
    let mut checks = Vec::new();
    let mut max_rel = T::zero();
    let mut skipped = 0usize;
    for (k, p) in params.iter().enumerate() {
        for j in 0..p.len() {
            let orig = p.data()[j];
            p.with_data_mut(|d| d[j] = orig + eps);
            let f_plus = no_grad(|| f(params))?.value();
            p.with_data_mut(|d| d[j] = orig - eps);
            let f_minus = no_grad(|| f(params))?.value();
            p.with_data_mut(|d| d[j] = orig);
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(Error::Probe { coord: j });
            }
            let numeric = (f_plus - f_minus) / (two * eps);
            let d_plus = (f_plus - f0) / eps;
            let d_minus = (f0 - f_minus) / eps;
            let slope_scale = T::one().max(d_plus.abs()).max(d_minus.abs());
            let near_kink = (d_plus - d_minus).abs() > kink_tol * slope_scale;
            let a = analytic[k][j];
            let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(tiny);
            if near_kink {
                skipped += 1;
            } else if rel_err > max_rel {
                max_rel = rel_err;
            }
            checks.push(CoordCheck {
                param: k,
                coord: j,
                analytic: a,
                numeric,
                rel_err,
                near_kink,
            });
        }
    }
    let checked = checks.len() - skipped;
    Ok(GradCheckReport {
        checks,
        max_rel_err: max_rel,
        checked,
        skipped_kinks: skipped,
    })
}

/// Aggregated result of one named suite case.
#[derive(Debug, Clone)]
pub struct SuiteCase<T> {
    pub name: &'static str,
    pub max_rel_err: T,
    pub checked: usize,
    pub skipped_kinks: usize,
}

fn uniform<T: Real>(rng: &mut impl Rng, lo: f64, hi: f64) -> T {
    lit::<T>(lo + (hi - lo) * rng.random::<f64>())
}

fn rand_vec<T: Real>(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

/// Runs every differentiable op through [`gradient_check`] on `rounds`
/// independently seeded random inputs, chosen away from the ops' kinks.
/// The returned cases report the worst relative error seen per op.
pub fn standard_suite<T: Real>(rounds: usize, base_seed: u64) -> Result<Vec<SuiteCase<T>>> {
    type CaseFn<T> = fn(&mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>>;
    let cases: Vec<(&'static str, CaseFn<T>)> = vec![
        ("arithmetic_chain", case_arithmetic::<T>),
        ("exp_ln", case_exp_ln::<T>),
        ("powf_fractional", case_powf::<T>),
        ("clamp_min_offset", case_clamp::<T>),
        ("relu_offset", case_relu::<T>),
        ("softmax_weighted", case_softmax::<T>),
        ("axis_reductions", case_axis::<T>),
        ("gather_stack_select", case_index_ops::<T>),
        ("conv2d_pad1", case_conv_s1::<T>),
        ("conv2d_stride2", case_conv_s2::<T>),
        ("conv_transpose2d", case_conv_t::<T>),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (ci, (name, case)) in cases.iter().enumerate() {
        let mut worst = T::zero();
        let mut checked = 0usize;
        let mut skipped = 0usize;
        for round in 0..rounds {
            let mut rng = stream(&[base_seed, ci as u64, round as u64]);
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

fn eps<T: Real>() -> T {
    lit::<T>(1e-5)
}

fn case_arithmetic<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let a = Tensor::param(&[6], rand_vec(rng, 6, -2.0, 2.0))?;
    let b = Tensor::param(&[6], rand_vec(rng, 6, 0.5, 2.5))?;
    gradient_check(
        |ps: &[Tensor<T>]| {
            let (a, b) = (&ps[0], &ps[1]);
            let t = a.mul(b)?.add(&a.div(b)?)?.sub(&b.neg())?;
            Ok(t.mul_scalar(lit(0.5)).add_scalar(lit(0.1)).sum_all())
        },
        &[a, b],
        eps(),
    )
}

fn case_exp_ln<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[5], rand_vec(rng, 5, -1.5, 1.5))?;
    gradient_check(
        |ps: &[Tensor<T>]| {
            let e = ps[0].exp().add_scalar(T::one());
            Ok(e.ln()?.mean_all())
        },
        &[x],
        eps(),
    )
}

fn case_powf<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[5], rand_vec(rng, 5, 0.2, 2.0))?;
    let e: T = uniform(rng, 0.5, 3.0);
    gradient_check(
        move |ps: &[Tensor<T>]| Ok(ps[0].powf(e)?.sum_all()),
        &[x],
        eps(),
    )
}

fn case_clamp<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    // Values kept >= 0.1 away from the clamp boundary at 0.3.
    let vals: Vec<T> = (0..6)
        .map(|_| {
            let side = rng.random::<bool>();
            if side {
                uniform(rng, 0.4, 1.5)
            } else {
                uniform(rng, -1.0, 0.2)
            }
        })
        .collect();
    let x = Tensor::param(&[6], vals)?;
    gradient_check(
        |ps: &[Tensor<T>]| Ok(ps[0].clamp_min(lit(0.3)).sum_all()),
        &[x],
        eps(),
    )
}

fn case_relu<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let vals: Vec<T> = (0..6)
        .map(|_| {
            let side = rng.random::<bool>();
            if side {
                uniform(rng, 0.1, 1.5)
            } else {
                uniform(rng, -1.5, -0.1)
            }
        })
        .collect();
    let x = Tensor::param(&[6], vals)?;
    gradient_check(
        |ps: &[Tensor<T>]| Ok(ps[0].relu().mul(&ps[0].relu())?.sum_all()),
        &[x],
        eps(),
    )
}

fn case_softmax<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[3, 4], rand_vec(rng, 12, -2.0, 2.0))?;
    let wvec = rand_vec::<T>(rng, 12, -1.0, 1.0);
    gradient_check(
        move |ps: &[Tensor<T>]| {
            let w = Tensor::from_vec(&[3, 4], wvec.clone())?;
            Ok(ps[0].softmax(0)?.mul(&w)?.sum_all())
        },
        &[x],
        eps(),
    )
}

fn case_axis<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[2, 3, 2], rand_vec(rng, 12, -2.0, 2.0))?;
    gradient_check(
        |ps: &[Tensor<T>]| {
            let s = ps[0].sum_axis(1)?;
            let m = ps[0].mean_axis(2)?.sum_axis(0)?;
            Ok(s.sum_all().add(&m.mean_all())?)
        },
        &[x],
        eps(),
    )
}

fn case_index_ops<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let a = Tensor::param(&[2, 2, 2], rand_vec(rng, 8, -1.0, 1.0))?;
    let b = Tensor::param(&[1, 2, 2], rand_vec(rng, 4, -1.0, 1.0))?;
    let s0 = Tensor::scalar_param(uniform(rng, -1.0, 1.0));
    let s1 = Tensor::scalar_param(uniform(rng, -1.0, 1.0));
    let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..4usize)).collect();
    gradient_check(
        move |ps: &[Tensor<T>]| {
            let cat = ps[0].concat_channels(&ps[1])?;
            let ch = cat.select_channel(2)?;
            let picked = ch.gather(&idx)?.sum_all();
            let stacked = Tensor::stack_scalars(&[ps[2].clone(), ps[3].clone()])?;
            Ok(picked.add(&stacked.mul(&stacked)?.sum_all())?)
        },
        &[a, b, s0, s1],
        eps(),
    )
}

fn conv_case<T: Real>(
    rng: &mut rand_chacha::ChaCha8Rng,
    stride: usize,
    pad: usize,
) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[2, 5, 5], rand_vec(rng, 50, -1.0, 1.0))?;
    let w = Tensor::param(&[3, 2, 3, 3], rand_vec(rng, 54, -0.5, 0.5))?;
    let b = Tensor::param(&[3], rand_vec(rng, 3, -0.2, 0.2))?;
    let ho = (5 + 2 * pad - 3) / stride + 1;
    let mvec = rand_vec::<T>(rng, 3 * ho * ho, -1.0, 1.0);
    let shape = vec![3, ho, ho];
    gradient_check(
        move |ps: &[Tensor<T>]| {
            let y = ps[0].conv2d(&ps[1], &ps[2], stride, pad)?;
            let m = Tensor::from_vec(&shape, mvec.clone())?;
            Ok(y.mul(&m)?.sum_all())
        },
        &[x, w, b],
        eps(),
    )
}

fn case_conv_s1<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    conv_case(rng, 1, 1)
}

fn case_conv_s2<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    conv_case(rng, 2, 1)
}

fn case_conv_t<T: Real>(rng: &mut rand_chacha::ChaCha8Rng) -> Result<GradCheckReport<T>> {
    let x = Tensor::param(&[2, 4, 4], rand_vec(rng, 32, -1.0, 1.0))?;
    let w = Tensor::param(&[2, 3, 2, 2], rand_vec(rng, 24, -0.5, 0.5))?;
    let b = Tensor::param(&[3], rand_vec(rng, 3, -0.2, 0.2))?;
    let mvec = rand_vec::<T>(rng, 3 * 8 * 8, -1.0, 1.0);
    gradient_check(
        move |ps: &[Tensor<T>]| {
            let y = ps[0].conv_transpose2d(&ps[1], &ps[2], 2)?;
            let m = Tensor::from_vec(&[3, 8, 8], mvec.clone())?;
            Ok(y.mul(&m)?.sum_all())
        },
        &[x, w, b],
        eps(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_matches() {
        let x = Tensor::param(&[3], vec![0.5f64, -1.0, 2.0]).unwrap();
        let rep = gradient_check(
            |ps: &[Tensor<f64>]| Ok(ps[0].mul(&ps[0])?.sum_all()),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(rep.passes(1e-6), "max rel err {}", rep.max_rel_err);
        assert_eq!(rep.skipped_kinks, 0);
    }

    #[test]
    fn kink_coordinates_are_flagged() {
        // relu at exactly 0 has disagreeing one-sided slopes.
        let x = Tensor::param(&[2], vec![0.0f64, 1.0]).unwrap();
        let rep = gradient_check(|ps: &[Tensor<f64>]| Ok(ps[0].relu().sum_all()), &[x], 1e-5)
            .unwrap();
        assert_eq!(rep.skipped_kinks, 1);
        assert!(rep.checks[0].near_kink);
        assert!(!rep.checks[1].near_kink);
    }

    #[test]
    fn suite_smoke_single_round() {
        let cases = standard_suite::<f64>(1, 42).unwrap();
        assert_eq!(cases.len(), 11);
        for c in &cases {
            assert!(
                c.max_rel_err <= 1e-3,
                "{} failed with {}",
                c.name,
                c.max_rel_err
            );
            assert!(c.checked > 0);
        }
    }
}
