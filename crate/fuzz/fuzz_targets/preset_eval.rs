//! A config followed by `\0` and raw bytes read as evaluation points. Built
//! presets must give finite, non-negative densities and a Hermitian kernel.

#![no_main]

use current_rdm::config::RunConfig;
use current_rdm::kernels::kernel_d;
use current_rdm::Vec3;
use libfuzzer_sys::fuzz_target;

fn points(bytes: &[u8]) -> Vec<Vec3> {
    bytes
        .chunks_exact(24)
        .take(8)
        .map(|c| {
            let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
            Vec3::new(f(0), f(1), f(2))
        })
        .filter(|r| r.iter().all(|x| x.is_finite() && x.abs() < 1e3))
        .collect()
}

fuzz_target!(|data: &[u8]| {
    let split = data.iter().position(|b| *b == 0).unwrap_or(data.len());
    let Ok(text) = std::str::from_utf8(&data[..split]) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_toml(text) else {
        return;
    };
    let (Ok(rho), Ok(kappa)) = (cfg.build_density(), cfg.build_kappa()) else {
        return;
    };
    let pts = points(data.get(split + 1..).unwrap_or(&[]));
    for r in &pts {
        let v = rho.eval(r);
        assert!(v.is_finite() && v >= 0.0, "density {v} at {r:?}");
    }
    let Ok(d) = kernel_d(&rho, &kappa, 0.5, 0.5, cfg.kernel.theta) else {
        return;
    };
    for r in &pts {
        for s in &pts {
            let (a, b) = (d.eval(r, s), d.eval(s, r).conj());
            if a.is_finite() && b.is_finite() {
                assert!((a - b).norm() <= 1e-12 * a.norm().max(1e-300), "{a} vs {b}");
            }
        }
    }
});
