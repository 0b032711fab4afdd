#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::harness::{parse_config, Scenario};
use mixoram::shuffle::Design;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(map) = parse_config(text) else { return };
    let mut sc = Scenario::new(Design::CascadeLayered, 16, 2, 0);
    for (k, v) in &map {
        if sc.set(k, v).is_err() {
            return;
        }
    }
    // a scenario that validates must yield a usable client configuration
    if sc.validate().is_ok() {
        let _ = sc.client_config().cell_len();
        let _ = sc.rounds();
    }
});
