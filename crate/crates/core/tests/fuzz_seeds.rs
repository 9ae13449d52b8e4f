//! Replays the checked-in fuzz seeds through the same properties the fuzz
//! targets assert, so seeds stay meaningful without a nightly toolchain.

use std::path::Path;

use current_rdm::config::RunConfig;
use current_rdm::kernels::kernel_d;
use current_rdm::Vec3;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fuzz/corpus")
        .join(target);
    let mut files: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds in {}", dir.display());
    files.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn config_seeds_round_trip() {
    let mut accepted = 0;
    for data in seeds("config_parse") {
        let Ok(cfg) = RunConfig::from_toml(std::str::from_utf8(&data).unwrap()) else {
            continue;
        };
        accepted += 1;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        cfg.build_kappa().unwrap();
        cfg.build_density().unwrap();
    }
    assert!(accepted >= 3);
}

#[test]
fn preset_seeds_evaluate() {
    for data in seeds("preset_eval") {
        let split = data.iter().position(|b| *b == 0).unwrap();
        let cfg = RunConfig::from_toml(std::str::from_utf8(&data[..split]).unwrap()).unwrap();
        let (rho, kappa) = (cfg.build_density().unwrap(), cfg.build_kappa().unwrap());
        let pts: Vec<Vec3> = data[split + 1..]
            .chunks_exact(24)
            .map(|c| {
                let f = |i: usize| f64::from_le_bytes(c[i * 8..i * 8 + 8].try_into().unwrap());
                Vec3::new(f(0), f(1), f(2))
            })
            .collect();
        assert_eq!(pts.len(), 4);
        let d = kernel_d(&rho, &kappa, 0.5, 0.5, cfg.kernel.theta).unwrap();
        for r in &pts {
            assert!(rho.eval(r) > 0.0);
            for s in &pts {
                assert!((d.eval(r, s) - d.eval(s, r).conj()).norm() <= 1e-12 * d.eval(r, s).norm());
            }
        }
    }
}
