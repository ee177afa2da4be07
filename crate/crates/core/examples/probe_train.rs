use sdalab_core::diffusion::dataset::gen_dataset;
use sdalab_core::diffusion::schedule::ScheduleSpec;
use sdalab_core::diffusion::train::{train, TrainConfig};
use sdalab_core::diffusion::unet::UNetSpec;
use sdalab_core::tensor::Tensor;

fn shrink(img: &Tensor<f32>, c: usize, side: usize) -> Tensor<f32> {
    let f = 32 / side;
    let mut out = Tensor::zeros(&[c, side, side]);
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                let mut acc = 0.0;
                for dy in 0..f { for dx in 0..f { acc += img.at3(ch, f*y+dy, f*x+dx); } }
                out.set3(ch, y, x, acc / (f*f) as f32);
            }
        }
    }
    out
}

fn main() {
    let side = 8usize;
    let base: usize = std::env::args().nth(1).map(|v| v.parse().unwrap()).unwrap_or(4);
    let lr: f64 = std::env::args().nth(2).map(|v| v.parse().unwrap()).unwrap_or(2e-3);
    let scenes: Vec<_> = gen_dataset(8, 42).unwrap().into_iter().map(|mut s| {
        s.image = shrink(&s.image, 3, side);
        let m = shrink(&s.mask, 1, side);
        s.mask = m.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        s
    }).collect();
    let spec = UNetSpec { image_side: side, base_ch: base, ch_mult: vec![1,2], norm_groups: 2,
        heads: 1, prompt_count: 5, prompt_seq: 4, prompt_dim: 6 };
    let cfg = TrainConfig { epochs: 200, batch_size: 8, lr, seed: 7 };
    let t0 = std::time::Instant::now();
    let (_, losses) = train(&scenes, &spec, ScheduleSpec::default(), &cfg).unwrap();
    println!("base {base} lr {lr}: t={:?}", t0.elapsed());
    for i in (0..200).step_by(20) {
        println!("  step {i:3}: {:.4}", losses[i]);
    }
    println!("  final: {:.4}  (mean last10 {:.4})", losses[199],
        losses[190..].iter().sum::<f64>()/10.0);
}
