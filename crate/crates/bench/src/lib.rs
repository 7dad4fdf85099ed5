//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yolocam_core::model::{parse_network_config, randomize_params, REFERENCE_TINY_YOLO_V3_CFG};
use yolocam_core::{NetworkSpec, Tensor};

/// The reference Tiny-YOLO-v3 topology with seeded random parameters.
pub fn reference_model(seed: u64) -> NetworkSpec {
    let spec = parse_network_config(REFERENCE_TINY_YOLO_V3_CFG).expect("bundled config parses");
    randomize_params(spec, seed)
}

/// Uniform `[0, 1)` tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).expect("shape matches length")
}

/// Random RGB input sized for `spec`.
pub fn random_image(spec: &NetworkSpec, seed: u64) -> Tensor {
    random_tensor(&spec.input_shape(), seed)
}
