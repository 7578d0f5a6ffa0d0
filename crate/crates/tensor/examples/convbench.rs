use fcf_tensor::{ConvOpts, Tape, Tensor};
use rand::SeedableRng;
fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for (c, hw) in [(16usize, 64usize), (32, 32), (64, 16), (128, 8)] {
        let x = Tensor::<f32>::randn(&[8, c, hw, hw], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[c, c, 3, 3], 0.1, &mut rng);
        let t0 = std::time::Instant::now();
        let n = 5;
        for _ in 0..n {
            let tape = Tape::new();
            let xv = tape.var(x.clone());
            let wv = tape.var(w.clone());
            let y = xv.conv2d(wv, ConvOpts::same(3)).square().sum_all();
            let _g = tape.grad(y, &[xv, wv], false);
        }
        let dt = t0.elapsed().as_secs_f64() / n as f64;
        let macs = 3.0 * 8.0 * (hw * hw * c * c * 9) as f64;
        println!("c={c} hw={hw}: {:.1} ms fwd+bwd, {:.1} GFLOP/s", dt * 1e3, 2.0 * macs / dt / 1e9);
    }
}
