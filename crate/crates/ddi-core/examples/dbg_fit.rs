// temporary debug probe
use ddi_core::data::Dataset;
use ddi_core::propensity::{fit_multinomial_logistic, PropensityModelSpec};
use nalgebra::DMatrix;

fn main() {
    // intercept-only 4-class on a simple mixed dataset
    let n = 400;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut x = Vec::new();
    let mut state = 12345u64;
    let mut rnd = || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 11) as f64 / (1u64 << 53) as f64 };
    for i in 0..n {
        a.push(u8::from(rnd() < 0.5));
        b.push(u8::from(rnd() < 0.5));
        x.push(if i % 2 == 0 { 1.0 } else { -1.0 });
    }
    let d = Dataset::new(vec![0.0; n], a, b, DMatrix::from_column_slice(n, 1, &x), vec!["X1".into()]).unwrap();
    match fit_multinomial_logistic(&d, &PropensityModelSpec::intercept_only("m0")) {
        Ok(f) => println!("converged in {} iterations", f.iterations),
        Err(e) => println!("error: {e}"),
    }
}
