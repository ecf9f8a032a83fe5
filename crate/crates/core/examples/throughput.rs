//! Times training steps for a config: `cargo run --release --example throughput -- [key=value ...]`.

use std::time::Instant;

use pathstar::nnet::{Model, Trainer};
use pathstar::trainer::{make_batch, ExperimentSpec};

fn main() {
    pathstar::tune_allocator();
    let overrides: Vec<String> = std::env::args().skip(1).collect();
    let spec = ExperimentSpec::from_toml_with_overrides("train.batch = 256", &overrides).expect("valid overrides");
    let mut tr = Trainer::new(Model::<f32>::new(spec.model_config(), 0).unwrap(), spec.adam());
    let loss = spec.loss();
    let t0 = Instant::now();
    let batches: Vec<_> = (0..5).map(|i| make_batch(&spec, 0, i).into_seqs()).collect();
    let data = t0.elapsed().as_secs_f64() / 5.0;
    let t1 = Instant::now();
    for b in &batches {
        let m = tr.train_step(b, spec.train.lr, &loss, spec.train.micro_batch).unwrap();
        eprintln!("loss {:.4}", m.loss);
    }
    let step = t1.elapsed().as_secs_f64() / 5.0;
    let per_m = (data + step) * 1e6 / spec.train.batch as f64;
    println!("params {} | data {:.3}s/batch | step {:.3}s/batch | {:.1} min per 1M samples", tr.model.num_params(), data, step, per_m / 60.0);
}
