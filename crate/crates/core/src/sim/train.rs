//! Local adapter training: full-batch gradient descent on the MSE surrogate
//! over the LoRA factors only, with the pruned backbone frozen.

use crate::backbone::{mse_weight_gradients, Backbone, Batch};
use crate::error::{Error, Result};
use crate::lora::{materialize, LoraAdapter};
use crate::matrix::{matmul_nt, matmul_tn, DenseMatrix};

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// Keep `A` fixed and train `B` only.
    pub freeze_a: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Gradients of the loss with respect to one adapter's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGradients {
    pub b: DenseMatrix,
    pub a: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adapters: Vec<LoraAdapter>,
    /// Loss before the first step and after every step: `steps + 1` entries.
    pub trace: Vec<f64>,
}

fn check_adapters(backbone: &Backbone, adapters: &[LoraAdapter]) -> Result<()> {
    if adapters.len() != backbone.layers().len() {
        return Err(Error::Input(format!(
            "{} adapters for {} layers",
            adapters.len(),
            backbone.layers().len()
        )));
    }
    for (layer, ad) in backbone.layers().iter().zip(adapters) {
        if ad.layer_name() != layer.name {
            return Err(Error::Input(format!(
                "adapter `{}` supplied for layer `{}`",
                ad.layer_name(),
                layer.name
            )));
        }
        if (ad.d_out(), ad.d_in()) != layer.weight.shape() {
            return Err(Error::Shape {
                op: "local_train",
                left: layer.weight.shape(),
                right: (ad.d_out(), ad.d_in()),
            });
        }
    }
    Ok(())
}

fn adapted_weights(backbone: &Backbone, adapters: &[LoraAdapter]) -> Result<Vec<DenseMatrix>> {
    backbone
        .layers()
        .iter()
        .zip(adapters)
        .map(|(l, ad)| l.weight.add(&materialize(ad)))
        .collect()
}

/// Backbone with every adapter merged into its layer.
pub fn adapted_backbone(backbone: &Backbone, adapters: &[LoraAdapter]) -> Result<Backbone> {
    check_adapters(backbone, adapters)?;
    backbone.with_weights(adapted_weights(backbone, adapters)?)
}

/// Loss and factor gradients at the current adapters:
/// `∂L/∂B = s · G · Aᵀ` and `∂L/∂A = s · Bᵀ · G` where `G = ∂L/∂W`.
pub fn loss_and_gradients(
    backbone: &Backbone,
    adapters: &[LoraAdapter],
    batch: &Batch,
) -> Result<(f64, Vec<FactorGradients>)> {
    check_adapters(backbone, adapters)?;
    let weights = adapted_weights(backbone, adapters)?;
    let refs: Vec<&DenseMatrix> = weights.iter().collect();
    let (loss, grads) = mse_weight_gradients(&refs, batch)?;
    let factor_grads = adapters
        .iter()
        .zip(&grads)
        .map(|(ad, g)| {
            let s = ad.scaling();
            Ok(FactorGradients {
                b: matmul_nt(g, ad.a())?.scale(s),
                a: matmul_tn(ad.b(), g)?.scale(s),
            })
        })
        .collect::<Result<_>>()?;
    Ok((loss, factor_grads))
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LOSS {
        return Err(Error::Training { step, loss });
    }
    Ok(())
}

/// Run `cfg.steps` steps of full-batch gradient descent. The backbone is
/// only read.
pub fn local_train(
    backbone: &Backbone,
    adapters: &[LoraAdapter],
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_adapters(backbone, adapters)?;
    if batch.inputs.cols() != backbone.d_in() || batch.targets.cols() != backbone.d_out() {
        return Err(Error::Shape {
            op: "local_train batch",
            left: (backbone.d_in(), backbone.d_out()),
            right: (batch.inputs.cols(), batch.targets.cols()),
        });
    }
    let mut current: Vec<LoraAdapter> = adapters.to_vec();
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    let lr = cfg.learning_rate;
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_gradients(backbone, &current, batch)?;
        check_loss(step, loss)?;
        trace.push(loss);
        current = current
            .iter()
            .zip(&grads)
            .map(|(ad, g)| {
                let b = ad.b().sub(&g.b.scale(lr))?;
                let a = if cfg.freeze_a {
                    ad.a().clone()
                } else {
                    ad.a().sub(&g.a.scale(lr))?
                };
                Ok(ad.with_factors(b, a))
            })
            .collect::<Result<_>>()?;
    }
    let weights = adapted_weights(backbone, &current)?;
    let refs: Vec<&DenseMatrix> = weights.iter().collect();
    let pred = crate::backbone::forward_weights(&refs, &batch.inputs)?;
    let final_loss = crate::backbone::mse(&pred, &batch.targets)?;
    check_loss(cfg.steps, final_loss)?;
    trace.push(final_loss);
    log::debug!(
        "trained {} adapters for {} steps: loss {:.6e} -> {:.6e}",
        current.len(),
        cfg.steps,
        trace[0],
        final_loss
    );
    Ok(TrainOutcome {
        adapters: current,
        trace,
    })
}

/// Merge trained adapters and report the loss on `batch`.
pub fn adapted_loss(backbone: &Backbone, adapters: &[LoraAdapter], batch: &Batch) -> Result<f64> {
    let model = adapted_backbone(backbone, adapters)?;
    crate::backbone::mse(&model.forward(&batch.inputs)?, &batch.targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Layer;
    use crate::lora::init_adapter;
    use crate::rng;

    fn chain(seed: u64) -> Backbone {
        let mut r = rng::stream(seed, 1);
        let w1 = rng::gaussian(&mut r, 4, 3, 0.5);
        let w2 = rng::gaussian(&mut r, 2, 4, 0.5);
        Backbone::chain(Layer::new("fc1", w1), Layer::new("fc2", w2)).unwrap()
    }

    fn batch(seed: u64, n: usize, d_in: usize, d_out: usize) -> Batch {
        let mut r = rng::stream(seed, 2);
        Batch::new(rng::gaussian(&mut r, n, d_in, 1.0), rng::gaussian(&mut r, n, d_out, 1.0)).unwrap()
    }

    fn random_adapter(name: &str, d_out: usize, d_in: usize, rank: usize, seed: u64) -> LoraAdapter {
        let mut r = rng::stream(seed, 3);
        LoraAdapter::new(
            name,
            rng::gaussian(&mut r, d_out, rank, 0.5),
            rng::gaussian(&mut r, rank, d_in, 0.5),
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_returns_adapters_unchanged() {
        let bb = chain(1);
        let ads = vec![
            init_adapter("fc1", 4, 3, 2, 4.0, 1).unwrap(),
            init_adapter("fc2", 2, 4, 2, 4.0, 2).unwrap(),
        ];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            steps: 0,
            freeze_a: false,
        };
        let out = local_train(&bb, &ads, &batch(1, 5, 3, 2), &cfg).unwrap();
        assert_eq!(out.adapters, ads);
        assert_eq!(out.trace.len(), 1);
    }

    #[test]
    fn trace_length_and_frozen_factors() {
        let bb = chain(2);
        let before = bb.clone();
        let ads = vec![random_adapter("fc1", 4, 3, 2, 1), random_adapter("fc2", 2, 4, 2, 2)];
        let cfg = TrainConfig {
            learning_rate: 0.01,
            steps: 7,
            freeze_a: true,
        };
        let out = local_train(&bb, &ads, &batch(2, 6, 3, 2), &cfg).unwrap();
        assert_eq!(out.trace.len(), 8);
        assert_eq!(bb, before);
        for (old, new) in ads.iter().zip(&out.adapters) {
            assert_eq!(old.a(), new.a());
            assert_ne!(old.b(), new.b());
        }
    }

    #[test]
    fn divergence_reports_step() {
        let bb = chain(3);
        let ads = vec![random_adapter("fc1", 4, 3, 2, 1), random_adapter("fc2", 2, 4, 2, 2)];
        let cfg = TrainConfig {
            learning_rate: 50.0,
            steps: 200,
            freeze_a: false,
        };
        match local_train(&bb, &ads, &batch(3, 6, 3, 2), &cfg).unwrap_err() {
            Error::Training { step, .. } => assert!(step > 0 && step <= 200),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_adapters_rejected() {
        let bb = chain(4);
        let ads = vec![random_adapter("fc1", 4, 3, 2, 1)];
        let cfg = TrainConfig {
            learning_rate: 0.1,
            steps: 1,
            freeze_a: false,
        };
        assert!(local_train(&bb, &ads, &batch(4, 3, 3, 2), &cfg).is_err());
        let swapped = vec![random_adapter("fc2", 4, 3, 2, 1), random_adapter("fc1", 2, 4, 2, 2)];
        assert!(local_train(&bb, &swapped, &batch(4, 3, 3, 2), &cfg).is_err());
    }
}
