use herd_core::exact_small::*;
use herd_core::model::{JumpLaw, RateFunction};

fn main() {
    let w = RateFunction::exponential(1.0).unwrap();
    for (g_max, n) in [(26.0, 1024), (26.0, 2048), (26.0, 4096), (26.0, 8192), (36.0, 4096)] {
        let p = GapDensity::from_fn(g_max, n, |g: f64| {
            (-(g - 2.0) * (g - 2.0)).exp() + 0.5 * (-(g - 6.0) * (g - 6.0) / 4.0).exp()
        })
        .unwrap();
        let rhs = gap_master_rhs(&p, &w, &JumpLaw::ExponentialUnit).unwrap();
        println!("G={g_max} n={n}: defect {:.4e}", rhs.conservation_defect);
    }
    // smooth density vanishing at 0 for comparison
    for n in [2048usize, 4096, 8192] {
        let p = GapDensity::from_fn(26.0, n, |g: f64| g * g * (-g).exp()).unwrap();
        let rhs = gap_master_rhs(&p, &w, &JumpLaw::ExponentialUnit).unwrap();
        println!("g^2 e^-g n={n}: defect {:.4e}", rhs.conservation_defect);
    }
}
