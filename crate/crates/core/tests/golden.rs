//! Fixtures recorded from the implementation after its oracle suites passed.
//! Set `NUCLEUS_SSL_RECORD=1` to rewrite `tests/fixtures/golden.json`.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use nucleus_ssl::dataio::RgbImage;
use nucleus_ssl::embedder::{EncoderArch, EncoderConfig};
use nucleus_ssl::sampler::SamplerConfig;
use nucleus_ssl::synth::{generate_nth, generate_triplet_pool, SynthConfig};

#[derive(Debug, Serialize, Deserialize)]
struct Golden {
    /// toy-cnn, input 64, init seed 0, on the top-left 64x64 crop of synthetic image 0.
    toy_embedding_seed0: Vec<f64>,
    /// Entries of the default 500-triplet pool whose negative region holds strictly fewer nuclei.
    pool500_strict: usize,
}

fn fixture_path() -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", "golden.json"].iter().collect()
}

fn toy_embedding() -> Vec<f64> {
    let arch = EncoderArch::new(&EncoderConfig::toy()).unwrap();
    let params = arch.init_params();
    let (image, _) = generate_nth(&SynthConfig::default(), 0).unwrap();
    let patch: RgbImage = image.crop(0, 0, 64, 64).unwrap();
    arch.embed(&params, &patch).unwrap().into_vec()
}

fn pool_strict() -> usize {
    generate_triplet_pool(&SynthConfig::default(), &SamplerConfig::toy(), 500)
        .unwrap()
        .iter()
        .filter(|e| e.negative_count < e.positive_count)
        .count()
}

fn load() -> Golden {
    if std::env::var_os("NUCLEUS_SSL_RECORD").is_some() {
        let golden = Golden {
            toy_embedding_seed0: toy_embedding(),
            pool500_strict: pool_strict(),
        };
        std::fs::create_dir_all(fixture_path().parent().unwrap()).unwrap();
        std::fs::write(fixture_path(), serde_json::to_string_pretty(&golden).unwrap()).unwrap();
    }
    serde_json::from_str(&std::fs::read_to_string(fixture_path()).unwrap()).unwrap()
}

#[test]
fn toy_embedding_matches_recorded_vector() {
    let golden = load();
    let z = toy_embedding();
    assert_eq!(z.len(), 128);
    assert!(z.iter().all(|v| v.is_finite()));
    assert_eq!(z, toy_embedding());
    for (i, (a, b)) in z.iter().zip(&golden.toy_embedding_seed0).enumerate() {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "component {i}: {a} vs recorded {b}");
    }
}

#[test]
fn pool_strict_fraction_matches_recorded_count() {
    let golden = load();
    let strict = pool_strict();
    assert!(strict > 250, "strict inequality in only {strict}/500 entries");
    assert_eq!(strict, golden.pool500_strict);
}
