#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = radiomap::sidechannels::parse_geojson_buildings(text, 45.19, 5.71);
    }
});
