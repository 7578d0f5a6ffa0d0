//! Times desk training steps: `time_step [steps] [key=value ...]`.

use fcf_core::training::{train_step, TrainState, Trainer};
use fcf_core::{FcfConfig, Preset};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: u64 = args.first().map_or(6, |a| a.parse().expect("step count"));
    let mut cfg = FcfConfig::preset(Preset::Desk);
    for kv in args.iter().skip(1) {
        let (k, v) = kv.split_once('=').expect("key=value");
        cfg.set(k, v).expect("override");
    }
    let mut s = TrainState::<f32>::new(&cfg).unwrap();
    let tr = Trainer::<f32>::from_config(&cfg).unwrap();
    println!("g params {} d params {}", s.gen.params.num_scalars(), s.dis.params.num_scalars());
    let l0 = tr.holdout_masked_l1(&s).unwrap();
    let start = std::time::Instant::now();
    for i in 0..steps {
        let b = tr.batch(&cfg, i).unwrap();
        let t = std::time::Instant::now();
        let m = train_step(&mut s, tr.extractor.as_ref(), &b).unwrap();
        if i % 50 == 0 || i + 1 == steps {
            println!("{i} {:.3}s d {:.4} g {:.4} rec {:.4}", t.elapsed().as_secs_f64(), m.d_total, m.g_total, m.g_rec.unwrap_or(0.0));
        }
    }
    println!("mean step {:.3}s", start.elapsed().as_secs_f64() / steps.max(1) as f64);
    println!("l1 {l0} -> {}", tr.holdout_masked_l1(&s).unwrap());
}
