//! Capacity check: the default network memorizes a single synthetic sample
//! within 200 Adam steps.

use mpvconv::data::{generate_synthetic, SyntheticSpec};
use mpvconv::model::{cross_entropy, Adam};
use mpvconv::{normalize_coords, Mode, Mpvcnn, MpvcnnConfig, Tensor};

#[test]
fn default_model_overfits_one_sample_within_200_steps() {
    let set = generate_synthetic::<f32>(
        &SyntheticSpec {
            n_samples: 1,
            points_per_cloud: 64,
            noise_sigma: 0.02,
        },
        5,
    )
    .unwrap();
    let cloud = &set.samples[0];
    let norm = normalize_coords(cloud).unwrap();
    let n = cloud.num_points();
    let features = Tensor::<f32>::from_fn(&[1, 1, n], |off| norm.features.data()[off % n]);
    let coords = vec![norm.coords_hat.clone()];
    let labels: Vec<&[u32]> = vec![cloud.labels.as_deref().unwrap()];

    let mut model = Mpvcnn::<f32>::build(MpvcnnConfig::desk_scale(1, 2), 3).unwrap();
    let mut adam = Adam::new(0.001);
    let mut final_loss = f64::INFINITY;
    for step in 0..200 {
        let logits = model.forward_batch(&coords, &features, Mode::Train).unwrap();
        let (loss, grad) = cross_entropy(&logits, &labels).unwrap();
        assert!(loss.is_finite(), "loss diverged at step {step}");
        model.reset_gradients();
        model.backward(&grad).unwrap();
        adam.step(&mut model);
        final_loss = loss;
        if loss < 0.1 {
            println!("memorized after {step} steps, loss {loss:.4}");
            return;
        }
    }
    panic!("loss still {final_loss:.4} after 200 steps");
}
