//! Manual throughput probe for the convolution kernels (ignored by default).

use lcps_core::params::ConvParams;
use lcps_core::rng::{stream, uniform_range_f32};
use lcps_core::tensor::{Shape, Tensor};
use std::time::Instant;

#[test]
#[ignore]
fn conv_throughput() {
    let mut rng = stream(1, &["bench"]);
    // representative decoder layer at side 64: 32ch 16x16 -> like dec up conv
    let cases = [
        (8usize, 8usize, 64usize, 64usize),
        (16, 32, 32, 32),
        (32, 64, 16, 16),
    ];
    for (ic, oc, h, w) in cases {
        let input = Tensor::from_fn(Shape::new(8, ic, h, w).unwrap(), |_| {
            uniform_range_f32(&mut rng, -1.0, 1.0)
        });
        let kernels = Tensor::from_fn(Shape::new(oc, ic, 3, 3).unwrap(), |_| {
            uniform_range_f32(&mut rng, -0.2, 0.2)
        });
        let params = ConvParams::new(kernels, vec![0.01; oc], 1, 1).unwrap();
        let reps = 30;
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let out = lcps_core::ops::conv2d(&input, &params, None).unwrap();
            sink += out.data()[0];
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;
        let out = lcps_core::ops::conv2d(&input, &params, None).unwrap();
        let t1 = Instant::now();
        for _ in 0..reps {
            let (gi, _) = lcps_core::ops::conv2d_backward(&input, &params, None, &out).unwrap();
            sink += gi.data()[0];
        }
        let bwd = t1.elapsed().as_secs_f64() / reps as f64;
        let macs = 8.0 * (oc * ic * h * w * 9) as f64;
        println!(
            "conv {ic}->{oc} @{h}x{w}: fwd {:.3} ms ({:.2} GFLOP/s), bwd {:.3} ms ({:.2} GFLOP/s) [{sink}]",
            fwd * 1e3,
            2.0 * macs / fwd / 1e9,
            bwd * 1e3,
            2.0 * 2.0 * macs / bwd / 1e9
        );
    }
}
