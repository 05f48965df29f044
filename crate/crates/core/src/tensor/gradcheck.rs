use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric|` divided by the largest gradient
    /// magnitude of the same input, over all checked inputs.
    pub max_rel_error: f64,
    /// Number of scalar coordinates perturbed.
    pub checked: usize,
}

/// Checks the gradient of the scalar built by `objective` with respect to
/// every input marked `requires_grad`, in `f64`.
///
/// At most `max_coords` coordinates per input are perturbed (evenly strided),
/// which keeps checks of large convolutions cheap.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, max_coords: usize, objective: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |point: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
        let out = objective(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = objective(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::config("grad_check objective must be scalar"));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut point = inputs.to_vec();
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        if !input.requires_grad {
            continue;
        }
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(*var).unwrap_or(&zeros);
        let stride = input.numel().div_ceil(max_coords.max(1));
        let mut max_dev = 0.0f64;
        let mut scale = 0.0f64;
        for j in (0..input.numel()).step_by(stride.max(1)) {
            let orig = point[i].data()[j];
            point[i].data_mut()[j] = orig + h;
            let up = eval(&point)?;
            point[i].data_mut()[j] = orig - h;
            let down = eval(&point)?;
            point[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            max_dev = max_dev.max((analytic[j] - numeric).abs());
            scale = scale.max(analytic[j].abs()).max(numeric.abs());
            checked += 1;
        }
        if scale > 0.0 {
            worst = worst.max(max_dev / scale);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        checked,
    })
}
