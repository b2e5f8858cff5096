//! Scalar flux functions `f: R -> R^d` and the space-time flux `F(v) = (f(v), v)`.
//!
//! Every flux carries its first and second derivative. The first derivative
//! enters the residual `d_t u + f'(u) . grad_x u`; the second is needed when
//! that residual is differentiated with respect to the network parameters.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type ScalarMap<S> = Arc<dyn Fn(S) -> S + Send + Sync>;

/// A scalar function of a space-time point `(x_1, .., x_d, t)`.
pub type Field<S> = Arc<dyn Fn(&[S]) -> S + Send + Sync>;

/// One spatial component of a flux together with its derivatives.
#[derive(Clone)]
pub struct FluxComponent<S> {
    pub f: ScalarMap<S>,
    pub f_prime: ScalarMap<S>,
    pub f_second: ScalarMap<S>,
}

impl<S> FluxComponent<S> {
    pub fn new(
        f: impl Fn(S) -> S + Send + Sync + 'static,
        f_prime: impl Fn(S) -> S + Send + Sync + 'static,
        f_second: impl Fn(S) -> S + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Arc::new(f),
            f_prime: Arc::new(f_prime),
            f_second: Arc::new(f_second),
        }
    }
}

/// A named flux with `dim` spatial components. Immutable and cheap to clone.
#[derive(Clone)]
pub struct FluxModel<S> {
    name: String,
    components: Vec<FluxComponent<S>>,
}

impl<S> fmt::Debug for FluxModel<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FluxModel")
            .field("name", &self.name)
            .field("dim", &self.components.len())
            .finish()
    }
}

/// Identifiers accepted by [`make_flux`].
pub const FLUX_NAMES: [&str; 5] = [
    "burgers1d",
    "cubic",
    "buckley_leverett",
    "sine_flux",
    "burgers2d",
];

impl<S: Scalar> FluxModel<S> {
    /// User-defined flux entering through the same interface as the catalog.
    pub fn custom(name: impl Into<String>, components: Vec<FluxComponent<S>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Parameter("flux needs at least one component".into()));
        }
        Ok(Self {
            name: name.into(),
            components,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Spatial dimension `d`.
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[FluxComponent<S>] {
        &self.components
    }

    #[inline]
    pub fn f_comp(&self, i: usize, u: S) -> S {
        (self.components[i].f)(u)
    }

    #[inline]
    pub fn f_prime_comp(&self, i: usize, u: S) -> S {
        (self.components[i].f_prime)(u)
    }

    #[inline]
    pub fn f_second_comp(&self, i: usize, u: S) -> S {
        (self.components[i].f_second)(u)
    }

    pub fn f(&self, u: S) -> Vec<S> {
        self.components.iter().map(|c| (c.f)(u)).collect()
    }

    pub fn f_prime(&self, u: S) -> Vec<S> {
        self.components.iter().map(|c| (c.f_prime)(u)).collect()
    }

    /// `max |f_i'(u)|` over all components, sampled densely on `[lo, hi]`.
    pub fn max_wave_speed(&self, lo: S, hi: S) -> S {
        let n = 2000;
        let mut best = S::zero();
        for k in 0..=n {
            let u = lo + (hi - lo) * S::of(k as f64 / n as f64);
            for c in &self.components {
                best = best.max((c.f_prime)(u).abs());
            }
        }
        best
    }
}

/// Looks up a catalog flux by identifier.
pub fn make_flux<S: Scalar>(name: &str) -> Result<FluxModel<S>> {
    let half = S::of(0.5);
    let components = match name {
        "burgers1d" => vec![burgers(half)],
        "burgers2d" => vec![burgers(half), burgers(half)],
        "cubic" => {
            let third = S::of(1.0 / 3.0);
            vec![FluxComponent::new(
                move |u: S| third * u * u * u,
                |u: S| u * u,
                |u: S| u + u,
            )]
        }
        "buckley_leverett" => vec![buckley_leverett()],
        "sine_flux" => {
            let pi = S::PI();
            vec![FluxComponent::new(
                move |u: S| (pi * u).sin(),
                move |u: S| pi * (pi * u).cos(),
                move |u: S| -pi * pi * (pi * u).sin(),
            )]
        }
        other => return Err(Error::UnknownFlux(other.to_string())),
    };
    Ok(FluxModel {
        name: name.to_string(),
        components,
    })
}

fn burgers<S: Scalar>(half: S) -> FluxComponent<S> {
    FluxComponent::new(move |u: S| half * u * u, |u: S| u, |_| S::one())
}

// f = u^2 / D, D = u^2 + (1-u)^2 / 2 = 1.5u^2 - u + 0.5, min D = 1/3 at u = 1/3.
fn buckley_leverett<S: Scalar>() -> FluxComponent<S> {
    fn denom<S: Scalar>(u: S) -> (S, S) {
        (S::of(1.5) * u * u - u + S::of(0.5), S::of(3.0) * u - S::one())
    }
    FluxComponent::new(
        |u: S| u * u / denom(u).0,
        |u: S| {
            let (d, dp) = denom(u);
            (S::of(2.0) * u * d - u * u * dp) / (d * d)
        },
        |u: S| {
            let (d, dp) = denom(u);
            let two = S::of(2.0);
            let numer_p = two * u * d - u * u * dp;
            (two * d - u * u * S::of(3.0)) / (d * d) - two * dp * numer_p / (d * d * d)
        },
    )
}

/// `F(u) = (f_1(u), ..., f_d(u), u)`; the last component is `u` itself.
pub fn eval_spacetime_flux<S: Scalar>(model: &FluxModel<S>, u: S) -> Vec<S> {
    let mut out = model.f(u);
    out.push(u);
    out
}
