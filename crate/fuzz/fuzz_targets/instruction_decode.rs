#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::wire::MixInstruction;

fuzz_target!(|data: &[u8]| {
    if let Ok(ins) = MixInstruction::decode(data) {
        let bytes = ins.encode();
        assert_eq!(MixInstruction::decode(&bytes).unwrap().encode(), bytes);
    }
});
