//! Hard concrete gate behaviour as log α moves: probability of a nonzero
//! gate, the Monte-Carlo mean of sampled gates, and the deterministic gate.

use mscn::gates::{uniform_noise, HardConcrete};

fn main() {
    let hc = HardConcrete::default();
    let u = uniform_noise(20_000, 1, 0);
    println!("log_alpha  p(z>0)  mc(z>0)  E[z]    z_eval");
    for la in [-4.0, -2.4, -1.0, 0.0, 1.0, 2.0, 4.0] {
        let z: Vec<f64> = u.iter().map(|&u| hc.sample_one(la, u)).collect();
        let nonzero = z.iter().filter(|&&z| z > 0.0).count() as f64 / z.len() as f64;
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        println!(
            "{la:9.1}  {:.4}  {nonzero:.4}   {mean:.4}  {:.4}",
            hc.prob_nonzero(la),
            hc.deterministic_one(la)
        );
    }
}
