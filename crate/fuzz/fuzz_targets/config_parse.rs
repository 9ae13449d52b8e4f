//! Arbitrary text through the config parser. Accepted configs must survive a
//! serialize/parse round trip and build their presets without panicking.

#![no_main]

use current_rdm::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = RunConfig::from_toml(text) else {
        return;
    };
    let again = RunConfig::from_toml(&cfg.to_toml()).expect("serialized config must parse");
    assert_eq!(cfg, again);
    let _ = cfg.build_kappa();
    if let Ok(rho) = cfg.build_density() {
        let _ = cfg.integration_box(&rho);
        let _ = cfg.sample_box(&rho);
        let _ = cfg.spectral_box(&rho);
    }
});
