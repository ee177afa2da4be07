use sdalab_core::diffusion::dataset::gen_dataset;
use sdalab_core::diffusion::features::train_feature_net;

fn main() {
    let scenes = gen_dataset(400, 21).unwrap();
    match train_feature_net(&scenes, 5) {
        Ok(net) => println!("ok acc {}", net.held_out_accuracy),
        Err(e) => println!("err {e}"),
    }
}
