//! Central finite-difference gradient checking.
//!
//! The numeric side only ever runs forward passes, so it is independent of
//! the backward rules it validates.

use super::{Graph, Tensor, TensorError, Var};

/// Analytic gradient (via `backward`) and numeric gradient (central
/// differences with step `h`) of a scalar function of `inputs`.
pub struct GradientPair {
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradientPair {
    /// Norm-wise relative error for each input:
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_errors(&self, floor: f64) -> Vec<f64> {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| {
                let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
                diff / na.max(nn).max(floor)
            })
            .collect()
    }

    pub fn max_relative_error(&self, floor: f64) -> f64 {
        self.relative_errors(floor).into_iter().fold(0.0, f64::max)
    }
}

fn evaluate<F>(inputs: &[Tensor], build: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    g.value(out).item().ok_or_else(|| TensorError::NonScalarLoss(g.shape(out).to_vec()))
}

/// Compares `backward` against central differences for every element of
/// every input. `build` must return a scalar.
pub fn gradient_pair<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradientPair, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic = vars.iter().map(|&v| grads.tensor(&g, v).into_data()).collect();

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut d = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = evaluate(&probe, &build)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = evaluate(&probe, &build)?;
            probe[i].data_mut()[j] = orig;
            d.push((plus - minus) / (2.0 * h));
        }
        numeric.push(d);
    }
    Ok(GradientPair { analytic, numeric })
}
