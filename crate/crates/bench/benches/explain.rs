use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use yolocam_bench::{random_image, random_tensor, reference_model};
use yolocam_core::detector::forward;
use yolocam_core::gradcam::{compute_cam, select_target_layer};
use yolocam_core::model::LayerKind;
use yolocam_core::render::{apply_colormap, upscale_bilinear, Palette};
use yolocam_core::tensor::conv2d_forward;
use yolocam_core::{CamOptions, NeuronAddress};

fn convolutions(c: &mut Criterion) {
    let spec = reference_model(1);
    let mut group = c.benchmark_group("conv_forward");
    group.sample_size(20);
    // First layer (large plane, few channels) and the layer with most weights.
    let widest = (0..spec.layers.len())
        .filter_map(|i| Some((spec.layers[i].params.as_ref()?.weights.len(), i)))
        .max()
        .unwrap()
        .1;
    for index in [0, widest] {
        let LayerKind::Convolutional(conv) = &spec.layers[index].kind else { panic!("layer {index} is not a convolution") };
        let params = spec.layers[index].params.as_ref().unwrap();
        let input = random_tensor(&spec.shape_of(spec.inputs_of(index)[0]), 2);
        let id = format!("layer{index}_{}x{}_{}to{}", input.shape()[1], input.shape()[2], input.shape()[0], conv.filters);
        group.bench_with_input(BenchmarkId::from_parameter(id), &input, |b, x| {
            b.iter(|| conv2d_forward(black_box(x), params, conv.stride, conv.padding).unwrap())
        });
    }
    group.finish();
}

fn explanation(c: &mut Criterion) {
    let spec = reference_model(2024);
    let image = random_image(&spec, 9);
    let layer = select_target_layer(&spec, 0, None).unwrap();
    let neuron = NeuronAddress { layer_index: spec.head_conv(0).unwrap(), channel: 4, grid_y: 6, grid_x: 6 };
    let pass = forward(&spec, &image).unwrap();

    let mut group = c.benchmark_group("reference_416");
    group.sample_size(10);
    group.bench_function("forward", |b| b.iter(|| forward(&spec, black_box(&image)).unwrap()));
    group.bench_function("cam_from_cache", |b| {
        b.iter(|| compute_cam(&spec, &pass.cache, &neuron, layer, CamOptions::default()).unwrap())
    });
    group.bench_function("forward_and_cam", |b| {
        b.iter(|| {
            let pass = forward(&spec, black_box(&image)).unwrap();
            compute_cam(&spec, &pass.cache, &neuron, layer, CamOptions::default()).unwrap()
        })
    });
    group.finish();
}

fn rendering(c: &mut Criterion) {
    let map = random_tensor(&[13, 13], 5);
    let palette = Palette::jet();
    c.bench_function("upscale_and_colorize_416", |b| {
        b.iter(|| {
            let up = upscale_bilinear(black_box(map.data()), 13, 13, 416, 416).unwrap();
            apply_colormap(&up, 416, 416, &palette).unwrap()
        })
    });
}

criterion_group!(benches, convolutions, explanation, rendering);
criterion_main!(benches);
