use exembed::tensor::{Graph, Tensor};
use rand::SeedableRng;
use std::time::Instant;

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for (m, k, n) in [(192, 128, 128), (192, 128, 512), (512, 128, 512), (512, 512, 128)] {
        let a = Tensor::<f32>::randn(vec![m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(vec![k, n], 1.0, &mut rng);
        let reps = 200;
        let t0 = Instant::now();
        let mut sink = 0.0f32;
        for _ in 0..reps {
            let mut g: Graph<f32> = Graph::new();
            let va = g.leaf(a.clone());
            let vb = g.leaf(b.clone());
            let c = g.matmul(va, vb);
            sink += g.value(c).data()[0];
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
        println!("{m}x{k}x{n}: {gflops:.2} GFLOPS ({:.3} ms/op, sink {sink})", dt * 1000.0 / reps as f64);
    }
}
