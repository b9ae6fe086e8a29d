use levitunet_core::data::{generate_synthetic_dataset, SyntheticSpec, Split, make_batches};
use levitunet_core::model::{Model, ModelConfig, Variant};
use levitunet_core::optim::AdamState;
use levitunet_core::train::train_step;
use std::time::Instant;

#[test]
fn step_timing() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { train_cases: 2, test_cases: 0, slices_per_case: 4, size: 128, num_classes: 3, seed: 1 };
    let manifest = generate_synthetic_dataset(dir.path(), &spec).unwrap();
    let records = manifest.load_records(Split::Train).unwrap();
    let batches = make_batches(&records, 4, 128, 3, 0).unwrap();
    let mut cfg = ModelConfig::new(Variant::L128s, 3);
    cfg.input_size = (128, 128);
    let mut model = Model::build(&cfg, 0).unwrap();
    let mut adam = AdamState::new(1e-3, 1e-4);
    // warmup
    train_step(&mut model, &batches[0], &mut adam).unwrap();
    let t0 = Instant::now();
    for _ in 0..3 {
        train_step(&mut model, &batches[0], &mut adam).unwrap();
    }
    let per_step = t0.elapsed().as_secs_f64() / 3.0;
    println!("TRAIN STEP (batch 4 @128): {:.2}s  -> 50-step epoch ~{:.1}s", per_step, per_step*50.0);

    let x = levitunet_core::tensor::Tensor::full(&[1,3,128,128], 0.4);
    let t1 = Instant::now();
    for _ in 0..3 { model.forward_eval(&x).unwrap(); }
    println!("EVAL FORWARD (batch 1 @128): {:.3}s", t1.elapsed().as_secs_f64()/3.0);
}
