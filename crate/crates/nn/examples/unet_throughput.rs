//! Times one train-mode forward/backward pass of the default U-Net.

use std::time::Instant;

use kpdet_nn::{Graph, Mode, Tensor, UNet, UNetConfig};

fn main() {
    let (w, h) = (192, 144);
    let mut model = UNet::<f32>::new(UNetConfig::default(), 0).unwrap();
    println!("parameters: {}", model.params().num_values());
    let data: Vec<f32> = (0..3 * 3 * w * h).map(|i| ((i * 7919) % 255) as f32 / 255.0).collect();
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 3, h, w], data.clone()).unwrap());
        let y = model.forward(&mut g, x, Mode::Train).unwrap();
        let loss = g.mean(y);
        let t1 = Instant::now();
        let mut params = model.params().clone();
        g.backward_into(loss, &mut params).unwrap();
        println!("forward {:?} backward {:?}", t1 - t0, t1.elapsed());
    }
}
