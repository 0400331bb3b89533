#![no_main]

use bnshift::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::from_bnst(data) {
        // Whatever decodes must re-encode to the same bytes.
        assert_eq!(t.to_bnst(), data);
    }
});
