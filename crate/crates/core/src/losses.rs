//! Imitation loss, softplus barrier on the plan's control points, and their
//! sum.

use crate::policy::{CoefficientVector, FeatureVector, N_OUTPUTS};
use crate::splines::KnotVector;

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A loss value and its gradient with respect to the six coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossEval {
    pub value: f64,
    pub grad: [f64; N_OUTPUTS],
}

impl std::ops::Add for LossEval {
    type Output = LossEval;
    fn add(self, o: LossEval) -> LossEval {
        LossEval {
            value: self.value + o.value,
            grad: std::array::from_fn(|k| self.grad[k] + o.grad[k]),
        }
    }
}

/// `||a - a*||^2`.
pub fn imitation_loss(a: &CoefficientVector, a_star: &CoefficientVector) -> LossEval {
    let mut value = 0.0;
    let mut grad = [0.0; N_OUTPUTS];
    for k in 0..N_OUTPUTS {
        let d = a.0[k] - a_star.0[k];
        value += d * d;
        grad[k] = 2.0 * d;
    }
    LossEval { value, grad }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierConfig {
    /// Penalty weight.
    pub k: f64,
    /// Vehicle track width, meters.
    pub track_width: f64,
    pub horizon_s: f64,
    pub knots: KnotVector,
}

impl BarrierConfig {
    pub const DEFAULT_K: f64 = 1000.0;
    pub const DEFAULT_TRACK: f64 = 1.8;

    pub fn new(horizon_s: f64) -> Self {
        Self {
            k: Self::DEFAULT_K,
            track_width: Self::DEFAULT_TRACK,
            horizon_s,
            knots: KnotVector::cubic_bezier(),
        }
    }

    /// Lead extrapolation times of the three free control points.
    pub fn control_times(&self) -> [f64; 3] {
        let t = self.knots.greville_times(self.horizon_s);
        [t[1], t[2], t[3]]
    }
}

/// Per-constraint softplus arguments for control points 1..=3. A point
/// satisfies a constraint when its argument is `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierArguments {
    pub left: [f64; 3],
    pub right: [f64; 3],
    pub collision: [f64; 3],
}

impl BarrierArguments {
    pub fn new(f: &FeatureVector, a: &CoefficientVector, cfg: &BarrierConfig) -> Self {
        let half = 0.5 * cfg.track_width;
        let times = cfg.control_times();
        let mut out = Self {
            left: [0.0; 3],
            right: [0.0; 3],
            collision: [0.0; 3],
        };
        for i in 0..3 {
            let p = a.point(i + 1);
            out.left[i] = p.y - (f.left_boundary(p.x) - half);
            out.right[i] = -p.y + (f.right_boundary(p.x) + half);
            out.collision[i] = p.x - (f.d_lead + f.v_lead * times[i]);
        }
        out
    }

    pub fn lane_satisfied(&self) -> bool {
        self.left.iter().chain(&self.right).all(|z| *z <= 0.0)
    }
}

/// The three groups of barrier terms, each already multiplied by `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierTerms {
    pub left: f64,
    pub right: f64,
    pub collision: f64,
}

impl BarrierTerms {
    pub fn total(&self) -> f64 {
        self.left + self.right + self.collision
    }
}

pub fn barrier_terms(
    f: &FeatureVector,
    a: &CoefficientVector,
    cfg: &BarrierConfig,
) -> BarrierTerms {
    let z = BarrierArguments::new(f, a, cfg);
    let sum = |zs: [f64; 3]| cfg.k * zs.iter().map(|z| softplus(*z)).sum::<f64>();
    BarrierTerms {
        left: sum(z.left),
        right: sum(z.right),
        collision: sum(z.collision),
    }
}

/// Lane-keeping and collision barrier `I(o, a)` with its gradient.
pub fn barrier(f: &FeatureVector, a: &CoefficientVector, cfg: &BarrierConfig) -> LossEval {
    let z = BarrierArguments::new(f, a, cfg);
    let mut value = 0.0;
    let mut grad = [0.0; N_OUTPUTS];
    for i in 0..3 {
        let x = a.0[2 * i];
        let (ix, iy) = (2 * i, 2 * i + 1);

        value += softplus(z.left[i]) + softplus(z.right[i]) + softplus(z.collision[i]);

        let sl = sigmoid(z.left[i]);
        grad[iy] += sl;
        grad[ix] -= sl * (f.c1l + 2.0 * f.c2l * x);

        let sr = sigmoid(z.right[i]);
        grad[iy] -= sr;
        grad[ix] += sr * (f.c1r + 2.0 * f.c2r * x);

        grad[ix] += sigmoid(z.collision[i]);
    }
    LossEval {
        value: cfg.k * value,
        grad: grad.map(|g| cfg.k * g),
    }
}

/// `L + I`; with no barrier this is plain behavioral cloning.
pub fn safe_loss(
    f: &FeatureVector,
    a: &CoefficientVector,
    a_star: &CoefficientVector,
    barrier_cfg: Option<&BarrierConfig>,
) -> LossEval {
    let imitation = imitation_loss(a, a_star);
    match barrier_cfg {
        Some(cfg) => imitation + barrier(f, a, cfg),
        None => imitation,
    }
}
