#![no_main]
use libfuzzer_sys::fuzz_target;
use radiomap::nas::{ArchGenome, Skeleton};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(genome) = serde_json::from_str::<ArchGenome>(text) {
            let _ = genome.validate(&Skeleton::default());
            let _ = genome.hash64();
        }
    }
});
