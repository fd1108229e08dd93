#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = svsplat::checkpoint::Checkpoint::from_bytes(data);
});
