use exembed::model::*;
use exembed::tensor::Graph;
use exembed::training::*;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let mut base = init_downstream_params(&cfg, 0);
    base.freeze_all();
    let ex = embedder_from_downstream(&cfg, &base);
    let tokens: Vec<u32> = (0..512).map(|i| (i % 250) as u32).collect();

    for k in [2usize, 8, 32] {
        let sample = TrainSample::new(tokens.clone(), k, 64).unwrap();
        let t0 = Instant::now();
        let reps = 5;
        for _ in 0..reps {
            let mut g: Graph<f32> = Graph::new();
            let (loss, _) = two_stream_loss(&mut g, &sample, &base, &ex, &cfg).unwrap();
            g.backward(loss).unwrap();
            let _ = g.param_grads("ex");
        }
        println!("two-stream k={k}: {:.0} ms/sample", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    }
}
