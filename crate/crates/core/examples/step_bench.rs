use exembed::model::*;
use exembed::tensor::Graph;
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::default();
    let params = init_downstream_params(&cfg, 0);
    let tokens: Vec<u32> = (0..192).map(|i| (i % 250) as u32).collect();
    let targets: Vec<u32> = tokens.iter().map(|t| (t + 1) % 250).collect();
    let mask = vec![true; 192];

    // forward only
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut g: Graph<f32> = Graph::new();
        let _ = forward_tokens(&mut g, &tokens, &params, &cfg, ForwardOpts::default()).unwrap();
    }
    println!("forward only: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);

    // forward + loss + backward
    let mut trainable = params.clone();
    trainable.set_trainable_all(true);
    let t0 = Instant::now();
    for _ in 0..20 {
        let mut g: Graph<f32> = Graph::new();
        let out = forward_tokens(&mut g, &tokens, &trainable, &cfg, ForwardOpts::default()).unwrap();
        let loss = g.softmax_ce_loss(out.logits, &targets, &mask).unwrap();
        g.backward(loss).unwrap();
    }
    println!("forward+backward: {:.1} ms", t0.elapsed().as_secs_f64() * 50.0);
}
