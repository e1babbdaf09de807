//! Shallow planning network: 9 driving features to the 6 free spline
//! coefficients, with hand-written reverse mode and an Adam optimizer.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::splines::{BSpline2D, KnotVector};

pub const N_FEATURES: usize = 9;
pub const N_HIDDEN: usize = 64;
pub const N_OUTPUTS: usize = 6;

const W1: usize = 0;
const B1: usize = W1 + N_HIDDEN * N_FEATURES;
const W2: usize = B1 + N_HIDDEN;
const B2: usize = W2 + N_OUTPUTS * N_HIDDEN;
pub const N_PARAMS: usize = B2 + N_OUTPUTS;

/// Network input: quadratic lane boundary fits in the ego frame plus ego and
/// lead longitudinal state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub c0l: f64,
    pub c1l: f64,
    pub c2l: f64,
    pub c0r: f64,
    pub c1r: f64,
    pub c2r: f64,
    pub v_x: f64,
    pub v_lead: f64,
    pub d_lead: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [
            self.c0l,
            self.c1l,
            self.c2l,
            self.c0r,
            self.c1r,
            self.c2r,
            self.v_x,
            self.v_lead,
            self.d_lead,
        ]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        Self {
            c0l: a[0],
            c1l: a[1],
            c2l: a[2],
            c0r: a[3],
            c1r: a[4],
            c2r: a[5],
            v_x: a[6],
            v_lead: a[7],
            d_lead: a[8],
        }
    }

    pub fn left_boundary(&self, x: f64) -> f64 {
        self.c0l + self.c1l * x + self.c2l * x * x
    }

    pub fn right_boundary(&self, x: f64) -> f64 {
        self.c0r + self.c1r * x + self.c2r * x * x
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature".into()));
        }
        if self.d_lead <= 0.0 || self.v_x < 0.0 || self.c0l <= self.c0r {
            return Err(Error::NonFinite(format!("inconsistent features {self:?}")));
        }
        Ok(())
    }
}

/// `(ax1, ay1, ax2, ay2, ax3, ay3)`: the three free control points, meters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoefficientVector(pub [f64; N_OUTPUTS]);

impl CoefficientVector {
    pub fn from_points(points: [Vec2; 3]) -> Self {
        Self([
            points[0].x,
            points[0].y,
            points[1].x,
            points[1].y,
            points[2].x,
            points[2].y,
        ])
    }

    /// Control point `i` in `1..=3`.
    pub fn point(&self, i: usize) -> Vec2 {
        Vec2::new(self.0[2 * (i - 1)], self.0[2 * (i - 1) + 1])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Prepends the fixed origin control point.
    pub fn to_spline(&self, horizon_s: f64, knots: &KnotVector) -> Result<BSpline2D> {
        let cps = vec![Vec2::ZERO, self.point(1), self.point(2), self.point(3)];
        BSpline2D::new(knots.clone(), cps, horizon_s)
    }

    pub fn from_spline(spline: &BSpline2D) -> Result<Self> {
        let cps = spline.control_points();
        if cps.len() != 4 {
            return Err(Error::InvalidSpline(format!(
                "{} control points, expected 4",
                cps.len()
            )));
        }
        Ok(Self::from_points([cps[1], cps[2], cps[3]]))
    }
}

/// Affine maps around the network: inputs are standardized, outputs are
/// multiplied by a per-coefficient scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_mean: [f64; N_FEATURES],
    pub input_scale: [f64; N_FEATURES],
    pub output_scale: [f64; N_OUTPUTS],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            input_mean: [0.0; N_FEATURES],
            input_scale: [1.0; N_FEATURES],
            output_scale: [1.0; N_OUTPUTS],
        }
    }
}

impl Normalization {
    /// Mean/standard deviation of the features and root-mean-square of the
    /// targets. Constant columns get a unit scale.
    pub fn fit<'a>(
        samples: impl IntoIterator<Item = (&'a FeatureVector, &'a CoefficientVector)>,
    ) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; N_FEATURES];
        let mut sum2 = [0.0; N_FEATURES];
        let mut out2 = [0.0; N_OUTPUTS];
        for (f, a) in samples {
            n += 1;
            for (j, v) in f.to_array().into_iter().enumerate() {
                sum[j] += v;
                sum2[j] += v * v;
            }
            for (j, v) in a.0.iter().enumerate() {
                out2[j] += v * v;
            }
        }
        if n == 0 {
            return Self::default();
        }
        let nf = n as f64;
        let mut norm = Self::default();
        for j in 0..N_FEATURES {
            let mean = sum[j] / nf;
            let var = (sum2[j] / nf - mean * mean).max(0.0);
            norm.input_mean[j] = mean;
            norm.input_scale[j] = scale_or_unit(var.sqrt(), mean);
        }
        for j in 0..N_OUTPUTS {
            let rms = (out2[j] / nf).sqrt();
            norm.output_scale[j] = if rms > 1e-6 { rms } else { 1.0 };
        }
        norm
    }
}

fn scale_or_unit(std: f64, mean: f64) -> f64 {
    if std > 1e-9 * mean.abs().max(1.0) {
        std
    } else {
        1.0
    }
}

/// 9 -> 64 (tanh) -> 6 (linear) network with fixed normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNetwork {
    params: Vec<f64>,
    norm: Normalization,
}

/// Intermediate values of one forward pass.
struct Activations {
    input: [f64; N_FEATURES],
    hidden: [f64; N_HIDDEN],
    output: [f64; N_OUTPUTS],
}

/// Gradients of a scalar loss with respect to all parameters and to the raw
/// (unnormalized) features.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub features: [f64; N_FEATURES],
}

impl PolicyNetwork {
    /// Weights uniform in `±1/sqrt(fan_in)`, zero biases, identity
    /// normalization.
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; N_PARAMS];
        let b1 = 1.0 / (N_FEATURES as f64).sqrt();
        for w in &mut params[W1..B1] {
            *w = rng.gen_range(-b1..b1);
        }
        let b2 = 1.0 / (N_HIDDEN as f64).sqrt();
        for w in &mut params[W2..B2] {
            *w = rng.gen_range(-b2..b2);
        }
        Self {
            params,
            norm: Normalization::default(),
        }
    }

    pub fn zeros() -> Self {
        Self {
            params: vec![0.0; N_PARAMS],
            norm: Normalization::default(),
        }
    }

    pub fn from_parts(params: Vec<f64>, norm: Normalization) -> Result<Self> {
        if params.len() != N_PARAMS {
            return Err(Error::format(
                "checkpoint",
                format!("{} parameters, expected {N_PARAMS}", params.len()),
            ));
        }
        if norm
            .input_scale
            .iter()
            .chain(&norm.output_scale)
            .any(|s| !(*s > 0.0))
        {
            return Err(Error::format(
                "checkpoint",
                "normalization scales must be positive",
            ));
        }
        Ok(Self { params, norm })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) {
        self.norm = norm;
    }

    pub fn normalize(&self, f: &FeatureVector) -> [f64; N_FEATURES] {
        let raw = f.to_array();
        std::array::from_fn(|j| (raw[j] - self.norm.input_mean[j]) / self.norm.input_scale[j])
    }

    /// Hidden pre-activations for normalized input `x`.
    pub fn hidden_preactivations(&self, x: &[f64; N_FEATURES]) -> [f64; N_HIDDEN] {
        let p = &self.params;
        std::array::from_fn(|h| {
            let row = &p[W1 + h * N_FEATURES..W1 + (h + 1) * N_FEATURES];
            p[B1 + h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        })
    }

    fn activations(&self, f: &FeatureVector) -> Activations {
        let input = self.normalize(f);
        let pre = self.hidden_preactivations(&input);
        let hidden = pre.map(f64::tanh);
        let p = &self.params;
        let output = std::array::from_fn(|o| {
            let row = &p[W2 + o * N_HIDDEN..W2 + (o + 1) * N_HIDDEN];
            p[B2 + o] + row.iter().zip(&hidden).map(|(w, v)| w * v).sum::<f64>()
        });
        Activations {
            input,
            hidden,
            output,
        }
    }

    pub fn forward(&self, f: &FeatureVector) -> Result<CoefficientVector> {
        if f.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input".into()));
        }
        let act = self.activations(f);
        Ok(CoefficientVector(std::array::from_fn(|o| {
            self.norm.output_scale[o] * act.output[o]
        })))
    }

    /// Reverse-mode gradient of a loss whose derivative with respect to the
    /// network output is `dl_da`.
    pub fn backward(&self, f: &FeatureVector, dl_da: &[f64; N_OUTPUTS]) -> Result<Gradients> {
        if dl_da
            .iter()
            .chain(f.to_array().iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("backward input".into()));
        }
        let act = self.activations(f);
        let p = &self.params;
        let mut g = vec![0.0; N_PARAMS];
        let d_out: [f64; N_OUTPUTS] = std::array::from_fn(|o| dl_da[o] * self.norm.output_scale[o]);
        let mut d_hidden = [0.0; N_HIDDEN];
        for o in 0..N_OUTPUTS {
            g[B2 + o] = d_out[o];
            for h in 0..N_HIDDEN {
                g[W2 + o * N_HIDDEN + h] = d_out[o] * act.hidden[h];
                d_hidden[h] += d_out[o] * p[W2 + o * N_HIDDEN + h];
            }
        }
        let mut d_input = [0.0; N_FEATURES];
        for h in 0..N_HIDDEN {
            let d_pre = d_hidden[h] * (1.0 - act.hidden[h] * act.hidden[h]);
            g[B1 + h] = d_pre;
            for j in 0..N_FEATURES {
                g[W1 + h * N_FEATURES + j] = d_pre * act.input[j];
                d_input[j] += d_pre * p[W1 + h * N_FEATURES + j];
            }
        }
        let features = std::array::from_fn(|j| d_input[j] / self.norm.input_scale[j]);
        Ok(Gradients {
            params: g,
            features,
        })
    }

    /// Line-oriented text checkpoint. Floats use Rust's shortest round-trip
    /// representation, so `load(save(net)) == net` bit for bit.
    pub fn to_checkpoint(&self, meta: &[(&str, String)]) -> String {
        let mut s = String::from("safeil-policy v1\n");
        let _ = writeln!(s, "shape {N_FEATURES} {N_HIDDEN} {N_OUTPUTS}");
        for (k, v) in meta {
            let _ = writeln!(s, "meta {k} {v}");
        }
        write_floats(&mut s, "input_mean", &self.norm.input_mean);
        write_floats(&mut s, "input_scale", &self.norm.input_scale);
        write_floats(&mut s, "output_scale", &self.norm.output_scale);
        write_floats(&mut s, "w1", &self.params[W1..B1]);
        write_floats(&mut s, "b1", &self.params[B1..W2]);
        write_floats(&mut s, "w2", &self.params[W2..B2]);
        write_floats(&mut s, "b2", &self.params[B2..]);
        s
    }

    /// Parses a checkpoint, returning the network and its `meta` entries.
    pub fn from_checkpoint(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut lines = text.lines();
        if lines.next() != Some("safeil-policy v1") {
            return Err(Error::format(
                "checkpoint",
                "missing `safeil-policy v1` header",
            ));
        }
        let mut meta = Vec::new();
        let mut params = vec![0.0; N_PARAMS];
        let mut norm = Normalization::default();
        let mut seen = 0u8;
        for line in lines {
            let mut it = line.split_whitespace();
            let Some(key) = it.next() else { continue };
            let rest: Vec<&str> = it.collect();
            match key {
                "shape" => {
                    let expect = [N_FEATURES, N_HIDDEN, N_OUTPUTS].map(|v| v.to_string());
                    if rest != expect.iter().map(String::as_str).collect::<Vec<_>>() {
                        return Err(Error::format(
                            "checkpoint",
                            format!("shape mismatch: {}", rest.join(" ")),
                        ));
                    }
                }
                "meta" if rest.len() >= 2 => meta.push((rest[0].to_string(), rest[1..].join(" "))),
                "input_mean" => read_floats(&rest, &mut norm.input_mean, key, &mut seen, 0)?,
                "input_scale" => read_floats(&rest, &mut norm.input_scale, key, &mut seen, 1)?,
                "output_scale" => read_floats(&rest, &mut norm.output_scale, key, &mut seen, 2)?,
                "w1" => read_floats(&rest, &mut params[W1..B1], key, &mut seen, 3)?,
                "b1" => read_floats(&rest, &mut params[B1..W2], key, &mut seen, 4)?,
                "w2" => read_floats(&rest, &mut params[W2..B2], key, &mut seen, 5)?,
                "b2" => read_floats(&rest, &mut params[B2..], key, &mut seen, 6)?,
                other => {
                    return Err(Error::format(
                        "checkpoint",
                        format!("unknown entry `{other}`"),
                    ))
                }
            }
        }
        if seen != 0x7f {
            return Err(Error::format("checkpoint", "missing parameter block"));
        }
        Ok((Self::from_parts(params, norm)?, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        Self::from_checkpoint(&std::fs::read_to_string(path)?)
    }
}

fn write_floats(s: &mut String, key: &str, vals: &[f64]) {
    s.push_str(key);
    for v in vals {
        let _ = write!(s, " {v}");
    }
    s.push('\n');
}

fn read_floats(tokens: &[&str], out: &mut [f64], key: &str, seen: &mut u8, bit: u8) -> Result<()> {
    if tokens.len() != out.len() {
        return Err(Error::format(
            "checkpoint",
            format!(
                "`{key}` has {} values, expected {}",
                tokens.len(),
                out.len()
            ),
        ));
    }
    for (o, t) in out.iter_mut().zip(tokens) {
        *o = t
            .parse()
            .map_err(|_| Error::format("checkpoint", format!("bad number `{t}` in `{key}`")))?;
    }
    *seen |= 1 << bit;
    Ok(())
}

/// First and second moment estimates for [`adam_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of all network parameters.
pub fn adam_step(net: &mut PolicyNetwork, grads: &[f64], state: &mut AdamState, lr: f64) {
    adam_update(&mut net.params, grads, state, lr);
}

pub(crate) fn adam_update(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len(), "gradient shape");
    assert_eq!(params.len(), state.m.len(), "optimizer state shape");
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}
