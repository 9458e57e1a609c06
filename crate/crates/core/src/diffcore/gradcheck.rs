use super::graph::{Graph, NodeId, Tensors};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of the scalar `output` against central
/// finite differences with step `eps`, over every coordinate of every input
/// declared with `requires_grad`.
///
/// Returns `max |g_ad - g_fd| / max(1, |g_fd|)`. The graph is left evaluated
/// at the unperturbed point.
pub fn check_gradient(graph: &mut Graph, output: NodeId, inputs: &Tensors, eps: f64) -> Result<f64> {
    graph.bind_matching(inputs);
    graph.forward()?;
    let analytic = graph.backward(output)?;
    let mut worst: f64 = 0.0;
    for (name, grad) in &analytic {
        let base = graph
            .bound_value(name)
            .cloned()
            .ok_or_else(|| Error::UnboundInput(name.clone()))?;
        for k in 0..base.numel() {
            let mut probe = base.clone();
            probe.data_mut()[k] = base.data()[k] + eps;
            graph.bind(name, probe.clone())?;
            graph.forward()?;
            let up = graph.value(output).unwrap().item();
            probe.data_mut()[k] = base.data()[k] - eps;
            graph.bind(name, probe)?;
            graph.forward()?;
            let down = graph.value(output).unwrap().item();
            let fd = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
        graph.bind(name, base)?;
    }
    graph.forward()?;
    Ok(worst)
}
