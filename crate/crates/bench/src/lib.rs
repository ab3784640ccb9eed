//! Fixtures shared by the criterion benches.

use ytune::store::{FeatureStore, StoreMode};
use ytune::{
    EncoderConfig, FeatureKey, FeatureRecord, FrozenEncoder, InitStrategy, LayerFeatures, Model,
    ModelSpec, Rng, TaskKind, TokenSequence,
};

pub fn encoder() -> FrozenEncoder {
    FrozenEncoder::new(EncoderConfig::default()).expect("default encoder config is valid")
}

/// A fixed pseudo-random input of `len` tokens.
pub fn tokens(len: usize, seed: u64) -> TokenSequence {
    let mut rng = Rng::new(seed);
    let vocab = EncoderConfig::default().vocab_size;
    TokenSequence::new((0..len).map(|_| 4 + rng.below(vocab - 4) as u32).collect())
        .expect("non-empty")
}

pub fn classifier(enc: &FrozenEncoder, classes: usize) -> Model {
    let mut spec = ModelSpec::new(
        TaskKind::Classification,
        (0..classes).map(|c| format!("c{c}")).collect(),
    );
    spec.init = InitStrategy::RandomUniform;
    Model::new(spec, enc, None).expect("valid model spec")
}

pub fn features(enc: &FrozenEncoder, model: &Model, x: &TokenSequence) -> LayerFeatures {
    LayerFeatures::select(
        enc.encode(x).expect("encodable input"),
        model.feature_mask(),
    )
}

/// A store holding `count` records of length `len` at `path`, with their keys.
pub fn filled_store(
    enc: &FrozenEncoder,
    model: &Model,
    path: &std::path::Path,
    count: usize,
    len: usize,
) -> Vec<FeatureKey> {
    let mut store = FeatureStore::open(path, StoreMode::Create).expect("store opens");
    (0..count as u64)
        .map(|i| {
            let x = tokens(len, i);
            let key = FeatureKey::new(enc.fingerprint(), &x, model.feature_mask());
            let rec =
                FeatureRecord::from_encoder_output(key, &enc.encode(&x).expect("encodable input"))
                    .expect("record");
            store.put(&rec).expect("put");
            key
        })
        .collect()
}
