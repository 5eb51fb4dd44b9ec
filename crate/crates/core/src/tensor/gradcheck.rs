use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per input tensor (all of them when the tensor is smaller).
    pub samples_per_input: usize,
    pub seed: u64,
    /// Denominator floor as a fraction of the largest sampled gradient magnitude.
    pub floor_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            samples_per_input: 24,
            seed: 0,
            floor_fraction: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// finite differences on a random coordinate sample of every input.
///
/// Relative error per coordinate is `|g - g_fd| / max(|g|, |g_fd|, floor)`
/// where `floor = floor_fraction * max |g|` over the sample.
pub fn gradient_check<F>(inputs: &[Tensor], f: F, tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let root = f(&mut tape, &vars)?;
        let v = tape.value(root);
        if v.len() != 1 {
            return Err(Error::shape("gradient_check: function must return a scalar"));
        }
        if !v.data()[0].is_finite() {
            return Err(Error::NonFinite("gradient_check objective".into()));
        }
        Ok(v.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        if n == 0 {
            continue;
        }
        let k = opts.samples_per_input.min(n);
        for j in sample(&mut rng, n, k) {
            coords.push((i, j));
        }
    }

    let mut pairs = Vec::with_capacity(coords.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(i, j) in &coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + opts.step;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - opts.step;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let fd = (plus - minus) / (2.0 * opts.step);
        pairs.push((analytic[i].data()[j], fd));
    }

    let scale = pairs.iter().fold(0.0f64, |m, (a, _)| m.max(a.abs()));
    let floor = (opts.floor_fraction * scale).max(f64::MIN_POSITIVE);
    let mut max_rel = 0.0f64;
    let mut worst = None;
    for (&(i, j), (a, fd)) in coords.iter().zip(&pairs) {
        let denom = a.abs().max(fd.abs()).max(floor);
        let rel = (a - fd).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
            worst = Some((i, j));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked: coords.len(),
        tolerance,
        passed: max_rel < tolerance,
        worst,
    })
}
