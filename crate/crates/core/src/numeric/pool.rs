use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Per-channel spatial mean: `(C, H, W) -> (C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 3 {
        return shape_err(format!("global_avg_pool expects (C,H,W), got {:?}", input.shape()));
    }
    let c = input.dim(0);
    let plane = input.dim(1) * input.dim(2);
    let means = input
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(&[c, 1, 1], means)?.ensure_finite("global_avg_pool")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel() {
        let t = Tensor::full(&[1, 3, 3], 0.25);
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[0.25]);
    }

    #[test]
    fn two_by_two_channel() {
        let t = Tensor::new(&[1, 2, 2], vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&t).unwrap().data(), &[1.0]);
    }

    #[test]
    fn channels_are_independent() {
        let t = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, -1.0, 0.0]).unwrap();
        let p = global_avg_pool(&t).unwrap();
        assert_eq!(p.shape(), &[2, 1, 1]);
        assert_eq!(p.data(), &[2.0, -0.5]);
    }

    #[test]
    fn rejects_wrong_rank() {
        assert!(global_avg_pool(&Tensor::zeros(&[4, 4])).is_err());
    }
}
