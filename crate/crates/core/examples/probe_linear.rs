use rand::Rng;
use sdalab_core::diffusion::dataset::gen_dataset;
use sdalab_core::rng;
use sdalab_core::tensor::{Graph, Tensor};

fn main() {
    let scenes = gen_dataset(400, 21).unwrap();
    let n_in = 3 * 32 * 32;
    let mut r = rng::rng_for(1, 2, 3);
    let mut w = Tensor::from_fn(&[n_in, 20], |_| r.gen_range(-0.01f32..0.01));
    let mut m = vec![0.0f32; n_in * 20];
    let mut v = vec![0.0f32; n_in * 20];
    let lr = 3e-3f64;
    let mut t = 0u64;
    for epoch in 0..12 {
        for (i, s) in scenes.iter().enumerate().filter(|(i, _)| i % 5 != 0) {
            let _ = i;
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::new(vec![1, n_in], s.image.data().iter().map(|&p| 2.0*p-1.0).collect()).unwrap());
            let wid = g.leaf(w.clone(), true);
            let logits = g.matmul(x, wid).unwrap();
            let lp = g.log_softmax(logits, 1).unwrap();
            let oh = g.constant(Tensor::from_fn(&[1, 20], |j| if j == s.label() { 1.0 } else { 0.0 }));
            let picked = g.mul(lp, oh).unwrap();
            let nll = g.sum_all(picked);
            let loss = g.scale(nll, -1.0);
            g.backward(loss).unwrap();
            let grad = g.grad(wid).unwrap();
            t += 1;
            let b1 = 0.9f64; let b2 = 0.999f64;
            let lr_t = lr * (1.0 - b2.powf(t as f64)).sqrt() / (1.0 - b1.powf(t as f64));
            for j in 0..n_in*20 {
                let gg = grad.data()[j] as f64;
                m[j] = (b1 * m[j] as f64 + (1.0-b1)*gg) as f32;
                v[j] = (b2 * v[j] as f64 + (1.0-b2)*gg*gg) as f32;
                w.data_mut()[j] -= (lr_t * m[j] as f64 / ((v[j] as f64).sqrt() + 1e-8)) as f32;
            }
        }
        // held-out accuracy
        let mut correct = 0; let mut total = 0;
        for s in scenes.iter().enumerate().filter(|(i, _)| i % 5 == 0).map(|(_, s)| s) {
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::new(vec![1, n_in], s.image.data().iter().map(|&p| 2.0*p-1.0).collect()).unwrap());
            let wid = g.constant(w.clone());
            let logits = g.matmul(x, wid).unwrap();
            let d = g.value(logits).data();
            let pred = (0..20).max_by(|&a, &b| d[a].total_cmp(&d[b])).unwrap();
            if pred == s.label() { correct += 1; }
            total += 1;
        }
        println!("epoch {epoch}: held-out {:.3}", correct as f64 / total as f64);
    }
}
