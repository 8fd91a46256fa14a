// quick step-time benchmark at desk scale
use fca::runcfg::RunConfig;
use fca::train::Trainer;
use fca::model::params::TrainMode;
use std::time::Instant;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.mode = TrainMode::PretrainBase;
    cfg.steps = 10;
    cfg.checkpoint_every = 0;
    let mut tr = Trainer::new_pretrain(cfg.clone()).unwrap();
    let t0 = Instant::now();
    for _ in 0..6 { tr.step_once().unwrap(); }
    println!("pretrain step (batch {}): {:.3}s", cfg.batch, t0.elapsed().as_secs_f64() / 6.0);
    let base = tr.checkpoint();

    let mut fcfg = RunConfig::default();
    fcfg.steps = 10;
    fcfg.checkpoint_every = 0;
    let mut ft = Trainer::new_finetune(fcfg.clone(), &base).unwrap();
    let t0 = Instant::now();
    for _ in 0..4 { ft.step_once().unwrap(); }
    println!("fca step (batch {}): {:.3}s", fcfg.batch, t0.elapsed().as_secs_f64() / 4.0);

    let mut lcfg = RunConfig::default();
    lcfg.mode = TrainMode::Lora;
    lcfg.ftc = None;
    lcfg.steps = 10;
    lcfg.checkpoint_every = 0;
    let mut lt = Trainer::new_finetune(lcfg.clone(), &base).unwrap();
    let t0 = Instant::now();
    for _ in 0..4 { lt.step_once().unwrap(); }
    println!("lora step (batch {}): {:.3}s", lcfg.batch, t0.elapsed().as_secs_f64() / 4.0);

    // sampling cost: one 200-sample eval at steps=20 lambda=6
    use fca::eval::{predict_sample, EvalParams};
    use fca::data::gen_sample;
    let params = EvalParams::default();
    let dcfg = fcfg.data_config();
    let sample = gen_sample::<f32>(7, 2000, &dcfg).unwrap();
    let t0 = Instant::now();
    let _ = predict_sample(&ft.model, &sample, &params, 1).unwrap();
    println!("one sampled prediction (20 steps, cfg on): {:.3}s", t0.elapsed().as_secs_f64());
}
