use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomloc::store::{
    decode_embeddings, encode_embeddings, format_manifest, parse_manifest, read_embeddings, write_embeddings,
};
use tomloc::synth::{generate, SynthConfig};
use tomloc::EmbeddingMatrix;

#[test]
fn large_random_matrix_round_trips_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (count, dim) = (1000, 512);
    let values: Vec<f32> = (0..count * dim).map(|_| rng.gen_range(-1e3f32..1e3)).collect();
    let ids = (0..count).map(|i| format!("frame-{i}")).collect();
    let m = EmbeddingMatrix::new(dim, ids, values).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.tle");
    let written = write_embeddings(&m, &path).unwrap();
    assert_eq!(written, std::fs::metadata(&path).unwrap().len());
    let back = read_embeddings(&path).unwrap();
    assert_eq!(back.ids(), m.ids());
    assert!(back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn truncation_anywhere_is_an_error() {
    let m = EmbeddingMatrix::from_rows(3, [("a", vec![1.0, 2.0, 3.0]), ("bb", vec![4.0, 5.0, 6.0])]).unwrap();
    let bytes = encode_embeddings(&m).unwrap();
    for cut in 0..bytes.len() {
        assert!(decode_embeddings(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_embeddings(&extra).is_err());
}

#[test]
fn synthetic_manifest_round_trips() {
    let s = generate(&SynthConfig {
        videos: 5,
        questions_per_video: 2,
        frames: 30,
        dim: 4,
        ..Default::default()
    })
    .unwrap();
    let text = format_manifest(&s.corpus).unwrap();
    assert_eq!(parse_manifest(&text).unwrap(), s.corpus);
}

fn matrices() -> impl Strategy<Value = EmbeddingMatrix> {
    (1usize..6, 0usize..6).prop_flat_map(|(dim, count)| {
        (
            prop::collection::hash_set("[a-zA-Z0-9_é-]{0,12}", count),
            prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), dim * count),
        )
            .prop_map(move |(ids, values)| {
                let ids: Vec<String> = ids.into_iter().collect();
                let values = values[..ids.len() * dim].to_vec();
                EmbeddingMatrix::new(dim, ids, values).unwrap()
            })
    })
}

proptest! {
    #[test]
    fn encode_decode_identity(m in matrices()) {
        let bytes = encode_embeddings(&m).unwrap();
        let back = decode_embeddings(&bytes).unwrap();
        prop_assert_eq!(back.ids(), m.ids());
        prop_assert!(back.values().iter().zip(m.values()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(encode_embeddings(&back).unwrap(), bytes);
    }

    #[test]
    fn decoder_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut hdr = b"TLE1\x01\x00\x00\x00".to_vec();
        hdr.extend(bytes);
        let _ = decode_embeddings(&hdr);
    }
}
