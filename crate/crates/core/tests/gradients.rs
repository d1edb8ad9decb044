//! End-to-end finite-difference check of the training objective.

use ldh_core::autograd::Graph;
use ldh_core::dataset_io::ImageTensor;
use ldh_core::distortions::DistortionSpec;
use ldh_core::networks::{Models, NetworkConfig};
use ldh_core::training::{build_loss, LossConfig, LossWeights, Phase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;

struct Instance {
    models: Models<f64>,
    secrets: Vec<ImageTensor>,
    covers: Vec<ImageTensor>,
    phase: Phase,
    noise: Option<DistortionSpec>,
}

impl Instance {
    fn new(phase: Phase, noise: Option<DistortionSpec>) -> Self {
        let models = Models::<f64>::init(NetworkConfig::new(2, 2, 8), 21).unwrap();
        // One noisy pair. Each extra image adds LeakyReLU and max-pool kinks
        // that a 1e-3 probe can straddle.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images: Vec<ImageTensor> = (0..2)
            .map(|_| {
                ImageTensor::new(8, 8, (0..192).map(|_| rng.random::<f32>()).collect()).unwrap()
            })
            .collect();
        Self {
            models,
            secrets: images[..1].to_vec(),
            covers: images[1..].to_vec(),
            phase,
            noise,
        }
    }

    fn weights(&self) -> LossWeights {
        match self.phase {
            Phase::Pretrain => LossWeights::PRETRAIN,
            Phase::Cotrain => LossWeights::COTRAIN,
        }
    }

    fn loss(&self, models: &Models<f64>) -> f64 {
        let mut g = Graph::new();
        let s: Vec<&ImageTensor> = self.secrets.iter().collect();
        let c: Vec<&ImageTensor> = self.covers.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vars = build_loss(
            &mut g,
            models,
            &s,
            &c,
            self.phase,
            self.weights(),
            LossConfig::default(),
            self.noise.as_ref(),
            &mut rng,
        )
        .unwrap();
        g.value(vars.total).to_scalar()
    }

    /// Fraction of sampled coordinates whose analytic and numeric
    /// derivatives agree within 1% relative error.
    fn agreement(&self, samples: usize) -> (f64, usize) {
        let mut g = Graph::new();
        let s: Vec<&ImageTensor> = self.secrets.iter().collect();
        let c: Vec<&ImageTensor> = self.covers.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vars = build_loss(
            &mut g,
            &self.models,
            &s,
            &c,
            self.phase,
            self.weights(),
            LossConfig::default(),
            self.noise.as_ref(),
            &mut rng,
        )
        .unwrap();
        let grads = g.backward(vars.total);
        let analytic: Vec<_> = grads.params().map(|(id, t)| (id, t.clone())).collect();

        let total: usize = analytic.iter().map(|(_, t)| t.len()).sum();
        let mut pick = ChaCha8Rng::seed_from_u64(7);
        let mut ok = 0;
        for _ in 0..samples {
            let mut k = pick.random_range(0..total);
            let mut entry = 0;
            while k >= analytic[entry].1.len() {
                k -= analytic[entry].1.len();
                entry += 1;
            }
            let (id, grad) = &analytic[entry];
            let mut plus = self.models.clone();
            plus.params.get_mut(*id).data_mut()[k] += EPS;
            let mut minus = self.models.clone();
            minus.params.get_mut(*id).data_mut()[k] -= EPS;
            let numeric = (self.loss(&plus) - self.loss(&minus)) / (2.0 * EPS);
            let a = grad.data()[k];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            if (a - numeric).abs() / denom <= 0.01 {
                ok += 1;
            }
        }
        (ok as f64 / samples as f64, analytic.len())
    }
}

#[test]
fn instance_is_small() {
    let inst = Instance::new(Phase::Cotrain, None);
    assert!(
        inst.models.params.count() <= 2000,
        "{}",
        inst.models.params.count()
    );
}

#[test]
fn cotrain_gradient_matches_finite_differences() {
    let inst = Instance::new(Phase::Cotrain, None);
    let (rate, groups) = inst.agreement(200);
    assert_eq!(
        groups,
        inst.models.params.len(),
        "every parameter receives a gradient"
    );
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn pretrain_gradient_skips_locator() {
    let inst = Instance::new(Phase::Pretrain, None);
    let (rate, groups) = inst.agreement(200);
    let locate = inst
        .models
        .params
        .ids()
        .filter(|&id| inst.models.params.name(id).starts_with("locate."))
        .count();
    assert_eq!(groups, inst.models.params.len() - locate);
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn gradients_through_noise_layers() {
    for noise in [
        DistortionSpec::dropout(),
        DistortionSpec::gaussian(),
        DistortionSpec::jpeg(),
    ] {
        let inst = Instance::new(Phase::Cotrain, Some(noise.clone()));
        let (rate, _) = inst.agreement(200);
        assert!(rate >= 0.95, "{noise}: agreement {rate}");
    }
}

#[test]
fn detached_locator_loss_only_reaches_the_locator() {
    let inst = Instance::new(Phase::Cotrain, None);
    let touched = |detach: bool| {
        let mut g = Graph::new();
        let s: Vec<&ImageTensor> = inst.secrets.iter().collect();
        let c: Vec<&ImageTensor> = inst.covers.iter().collect();
        let loss = LossConfig {
            detach_locator_input: detach,
            ..LossConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let vars = build_loss(
            &mut g,
            &inst.models,
            &s,
            &c,
            Phase::Cotrain,
            inst.weights(),
            loss,
            None,
            &mut rng,
        )
        .unwrap();
        let grads = g.backward(vars.locate.unwrap());
        let names: Vec<String> = grads
            .params()
            .filter(|(_, t)| t.data().iter().any(|&v| v != 0.0))
            .map(|(id, _)| inst.models.params.name(id).to_string())
            .collect();
        names
    };
    let joint = touched(false);
    assert!(joint.iter().any(|n| n.starts_with("hide.")));
    let detached = touched(true);
    assert!(!detached.is_empty());
    assert!(
        detached.iter().all(|n| n.starts_with("locate.")),
        "{detached:?}"
    );
}
