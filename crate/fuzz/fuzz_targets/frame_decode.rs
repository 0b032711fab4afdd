#![no_main]

use libfuzzer_sys::fuzz_target;
use mixoram::wire::Frame;

fuzz_target!(|data: &[u8]| {
    if let Ok((frame, used)) = Frame::decode(data) {
        assert!(used <= data.len());
        let bytes = frame.encode();
        let (again, n) = Frame::decode(&bytes).expect("re-encoded frame decodes");
        assert_eq!(n, bytes.len());
        assert_eq!(again.encode(), bytes);
    }
});
