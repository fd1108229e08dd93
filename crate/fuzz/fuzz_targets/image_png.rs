#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = svsplat::scene_io::ImageRgb::from_png_bytes(data);
});
