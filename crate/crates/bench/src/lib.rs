//! Benchmark fixtures.

use spectre_core::signal::{preprocess, synthesize_dataset, PreprocessConfig, SignalSegment, SynthConfig};

/// Preprocessed synthetic segments at the default shape.
pub fn segments(n: usize) -> Vec<SignalSegment> {
    let raw = synthesize_dataset(&SynthConfig { segments: n, ..SynthConfig::default() }).expect("synthesise");
    raw.iter().map(|s| preprocess(s, &PreprocessConfig::default()).expect("preprocess")).collect()
}
