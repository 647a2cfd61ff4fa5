use crate::autodiff::{Element, Graph, Var};
use crate::error::Result;

/// Mean over the batch of `−log softmax(logits)[label]` (one-hot targets).
pub fn cross_entropy<E: Element>(g: &mut Graph<E>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Cross-entropy plus `lambda1 · ‖W_fc‖²_F`, where `W_fc` is the classifier
/// weight matrix (bias excluded). With `lambda1 == 0` the graph is plain
/// cross-entropy, so values and gradients match it bit for bit.
pub fn final_loss<E: Element>(
    g: &mut Graph<E>,
    logits: Var,
    labels: &[usize],
    w_fc: Var,
    lambda1: f64,
) -> Result<Var> {
    let ce = cross_entropy(g, logits, labels)?;
    if lambda1 == 0.0 {
        return Ok(ce);
    }
    let norm = g.sum_squares(w_fc);
    let penalty = g.scale(norm, E::of_f64(lambda1));
    g.add(ce, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    #[test]
    fn penalty_value_and_gradient() {
        let mut g = Graph::<f32>::new();
        let logits = g.constant(Tensor::from_vec(&[1, 2], vec![0.3, -0.2]).unwrap());
        let w = g.param(Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[1]).unwrap();
        let total = final_loss(&mut g, logits, &[1], w, 0.01).unwrap();
        let diff = g.value(total).data()[0] - g.value(ce).data()[0];
        assert!((diff - 0.25).abs() < 1e-6);

        let mut g = Graph::<f32>::new();
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        let w = g.param(Tensor::from_vec(&[2, 2], vec![1., 2., 2., 1.]).unwrap());
        let l = final_loss(&mut g, logits, &[0], w, 0.1).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(w).unwrap();
        for (a, b) in grad.iter().zip([0.2, 0.4, 0.4, 0.2]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_lambda_is_bit_identical() {
        let mut g = Graph::<f32>::new();
        let logits =
            g.constant(Tensor::from_vec(&[2, 3], vec![0.1, 2.5, -1.0, 3.3, 0.0, 0.7]).unwrap());
        let w = g.param(Tensor::from_vec(&[1, 3], vec![9., -8., 7.]).unwrap());
        let ce = cross_entropy(&mut g, logits, &[1, 0]).unwrap();
        let fl = final_loss(&mut g, logits, &[1, 0], w, 0.0).unwrap();
        assert_eq!(
            g.value(ce).data()[0].to_bits(),
            g.value(fl).data()[0].to_bits()
        );
    }
}
