#![allow(dead_code)]

pub mod fixtures;
pub mod gradcheck;
pub mod ot_oracle;
pub mod protocol_oracle;
pub mod scalar_model;

use rand::Rng;

/// Integer marginals with equal totals, divided by the total.
pub fn rational_marginals<R: Rng>(rng: &mut R, ns: usize, nd: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s_int: Vec<u32> = (0..ns).map(|_| rng.gen_range(1..=10)).collect();
    let short = (nd as u32).saturating_sub(s_int.iter().sum());
    s_int[0] += short;
    let total: u32 = s_int.iter().sum();
    // Split the same total into nd positive parts.
    let mut d_int = vec![1u32; nd];
    for _ in 0..total - nd as u32 {
        d_int[rng.gen_range(0..nd)] += 1;
    }
    let t = total as f64;
    let s = s_int.iter().map(|&x| x as f64 / t).collect();
    let d = d_int.iter().map(|&x| x as f64 / t).collect();
    (s, d)
}
