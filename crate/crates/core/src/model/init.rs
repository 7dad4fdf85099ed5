use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LayerKind, NetworkSpec};
use crate::tensor::{BatchNorm, LayerParams, Tensor};

/// Fills every convolution with seeded random parameters.
///
/// Kernels are uniform in `±sqrt(3 / fan_in)` so activations keep a stable
/// scale through deep stacks; batchnorm statistics sit near identity.
pub fn randomize_params(mut spec: NetworkSpec, seed: u64) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in 0..spec.layers.len() {
        let LayerKind::Convolutional(conv) = &spec.layers[idx].kind else { continue };
        let c_in = spec.shape_of(spec.inputs_of(idx)[0])[0];
        let (o, k) = (conv.filters, conv.size);
        let bound = (3.0 / (c_in * k * k) as f32).sqrt();
        let weights: Vec<f32> = (0..o * c_in * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
        let weights = Tensor::new(vec![o, c_in, k, k], weights).expect("shape from spec");
        let mut uniform = |lo: f32, hi: f32| -> Vec<f32> { (0..o).map(|_| rng.gen_range(lo..hi)).collect() };
        let params = if conv.batch_normalize {
            let batchnorm = BatchNorm {
                scale: uniform(0.5, 1.5),
                shift: uniform(-0.1, 0.1),
                mean: uniform(-0.1, 0.1),
                variance: uniform(0.5, 1.5),
            };
            LayerParams::new(weights, vec![0.0; o], Some(batchnorm))
        } else {
            let bias = uniform(-0.1, 0.1);
            LayerParams::new(weights, bias, None)
        };
        spec.layers[idx].params = Some(params.expect("consistent by construction"));
    }
    spec
}

/// All kernels, biases and shifts zero; batchnorm statistics at identity.
pub fn zero_params(mut spec: NetworkSpec) -> NetworkSpec {
    for idx in 0..spec.layers.len() {
        let LayerKind::Convolutional(conv) = &spec.layers[idx].kind else { continue };
        let c_in = spec.shape_of(spec.inputs_of(idx)[0])[0];
        let o = conv.filters;
        let weights = Tensor::zeros(vec![o, c_in, conv.size, conv.size]);
        let batchnorm = conv.batch_normalize.then(|| BatchNorm {
            scale: vec![1.0; o],
            shift: vec![0.0; o],
            mean: vec![0.0; o],
            variance: vec![1.0; o],
        });
        spec.layers[idx].params = Some(LayerParams::new(weights, vec![0.0; o], batchnorm).expect("consistent by construction"));
    }
    spec
}
