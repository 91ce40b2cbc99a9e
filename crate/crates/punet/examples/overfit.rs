use punet::arch::{build_network, ArchitectureSpec};
use punet::data::{make_synthetic, stratified_split, Normalizer, Split};
use punet::optim::SgdConfig;
use punet::train::{evaluate, train, TrainConfig, VecSink};

fn main() {
    punet::util::configure_threads_from_env();
    let full = make_synthetic::<f32>(10, 200, 32, 2024).unwrap();
    let (train_ds, val_ds, test_ds) = stratified_split(&full, (0.75, 0.125, 0.125), 9).unwrap();
    println!("{} train, {} val, {} test", train_ds.len(), val_ds.len(), test_ds.len());
    let norm = Normalizer::fit(&train_ds);
    let spec = ArchitectureSpec::by_name("pure20", 10).unwrap();
    let mut net = build_network::<f32>(&spec).unwrap();
    net.init_parameters(7);
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 128,
        sgd: SgdConfig { lr: 0.01, momentum: 0.9, weight_decay: 0.001 },
        schedule: None,
        seed: 7,
        grad_clip: None,
    };
    let mut sink = VecSink::default();
    let t = std::time::Instant::now();
    let out = train(&mut net, &train_ds, &val_ds, &norm, &cfg, &mut sink).unwrap();
    let held_out = val_ds.concat(&test_ds, Split::Test).unwrap();
    let eval = evaluate(&net, &held_out, &norm, 128).unwrap();
    println!("elapsed {:.0}s", t.elapsed().as_secs_f64());
    for r in &out.metrics.epochs {
        println!("epoch {:2}: train_loss {:.4} val_acc {:.1}%", r.epoch, r.train_loss, r.val_acc);
    }
    println!("held-out top1 = {:.2}%, top5 = {:.2}%", eval.top1, eval.top5);
}
