use crswin_core::model::{decode_checkpoint, encode_checkpoint, CrSwin2Vt, ModelConfig};
use crswin_core::volume_io::{
    decode_nifti, decode_raw, encode_nifti, encode_raw, generate_synthetic, LabelAlphabet,
    LabelMask, NiftiDatatype, NiftiImage, Volume,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CASES: usize = 1000;

/// Flips, overwrites, truncates or extends a valid encoding.
fn mutate(rng: &mut ChaCha8Rng, valid: &[u8]) -> Vec<u8> {
    let mut b = valid.to_vec();
    match rng.random_range(0..5) {
        0 => {
            let n = rng.random_range(0..b.len());
            b.truncate(n);
        }
        1 => {
            for _ in 0..rng.random_range(1..8) {
                let i = rng.random_range(0..b.len());
                b[i] ^= 1 << rng.random_range(0..8);
            }
        }
        2 => {
            // header region, where lengths and dims live
            let i = rng.random_range(0..b.len().min(360));
            let v: u8 = rng.random();
            b[i] = v;
        }
        3 => {
            let extra = rng.random_range(1..64);
            b.extend((0..extra).map(|_| rng.random::<u8>()));
        }
        _ => {
            let n = rng.random_range(0..600);
            b = (0..n).map(|_| rng.random()).collect();
        }
    }
    b
}

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 3] {
    std::array::from_fn(|_| rng.random_range(1..=6))
}

fn random_nifti(rng: &mut ChaCha8Rng) -> NiftiImage {
    let dims = random_dims(rng);
    let n = dims.iter().product();
    let dt = [
        NiftiDatatype::U8,
        NiftiDatatype::I16,
        NiftiDatatype::I32,
        NiftiDatatype::F32,
        NiftiDatatype::F64,
    ][rng.random_range(0..5)];
    let raw: Vec<f64> = (0..n)
        .map(|_| match dt {
            NiftiDatatype::U8 => rng.random_range(0..=255) as f64,
            NiftiDatatype::I16 => rng.random_range(i16::MIN..=i16::MAX) as f64,
            NiftiDatatype::I32 => rng.random_range(i32::MIN..=i32::MAX) as f64,
            NiftiDatatype::F32 => rng.random_range(-1e6f32..1e6) as f64,
            NiftiDatatype::F64 => rng.random_range(-1e9..1e9),
        })
        .collect();
    let spacing = std::array::from_fn(|_| rng.random_range(0.25f32..3.0) as f64);
    NiftiImage::from_values(dims, spacing, dt, raw).unwrap()
}

fn random_case(rng: &mut ChaCha8Rng) -> (Volume, LabelMask) {
    let dims = random_dims(rng);
    let n: usize = dims.iter().product();
    let channels = (0..rng.random_range(1..=4))
        .map(|_| (0..n).map(|_| rng.random::<f32>() * 100.0).collect())
        .collect();
    let spacing = std::array::from_fn(|_| rng.random_range(0.5..2.0));
    let volume = Volume::new(
        format!("case{}", rng.random::<u16>()),
        dims,
        spacing,
        channels,
    )
    .unwrap();
    let labels = (0..n)
        .map(|_| [0u8, 1, 2, 3][rng.random_range(0..4)])
        .collect();
    (
        volume,
        LabelMask::new(dims, labels, LabelAlphabet::Internal).unwrap(),
    )
}

#[test]
fn nifti_round_trips_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let img = random_nifti(&mut rng);
        let back = decode_nifti(&encode_nifti(&img).unwrap()).unwrap();
        assert_eq!(back.header.dim, img.header.dim, "case {i}");
        assert_eq!(back.header.datatype, img.header.datatype);
        assert_eq!(back.grid().unwrap(), img.grid().unwrap());
        assert_eq!(back.spacing(), img.spacing());
        let same = back
            .raw
            .iter()
            .zip(&img.raw)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same && back.raw.len() == img.raw.len(), "case {i}");
    }
}

#[test]
fn raw_round_trips_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let (v, m) = random_case(&mut rng);
        let (v2, m2) = decode_raw(&encode_raw(&v, &m).unwrap()).unwrap();
        assert_eq!(v2, v);
        assert_eq!(m2, m);
    }
    let (v, m) = generate_synthetic(3, [16, 16, 16], 0.05).unwrap();
    let (v2, m2) = decode_raw(&encode_raw(&v, &m).unwrap()).unwrap();
    assert_eq!((v2, m2), (v, m));
}

#[test]
fn checkpoint_round_trips_bit_exact() {
    let config = ModelConfig::tiny();
    let model = CrSwin2Vt::new(config.clone()).unwrap();
    let params = model.init_params(4);
    let ck = decode_checkpoint(&encode_checkpoint(&config, &params)).unwrap();
    assert_eq!(ck.config, config);
    for (a, b) in ck.params.entries().iter().zip(params.entries()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn nifti_decoder_rejects_garbage_without_panicking() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..CASES {
        let img = random_nifti(&mut rng);
        let bytes = mutate(&mut rng, &encode_nifti(&img).unwrap());
        let _ = decode_nifti(&bytes);
    }
}

#[test]
fn raw_decoder_rejects_garbage_without_panicking() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..CASES {
        let (v, m) = random_case(&mut rng);
        let bytes = mutate(&mut rng, &encode_raw(&v, &m).unwrap());
        if let Ok((v2, m2)) = decode_raw(&bytes) {
            assert_eq!(
                v2.channels.iter().map(Vec::len).max(),
                Some(v2.dims.iter().product())
            );
            assert_eq!(m2.dims, v2.dims);
        }
    }
}

#[test]
fn checkpoint_decoder_rejects_garbage_without_panicking() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let config = ModelConfig::tiny();
    let model = CrSwin2Vt::new(config.clone()).unwrap();
    let valid = encode_checkpoint(&config, &model.init_params(0));
    for _ in 0..CASES {
        let bytes = mutate(&mut rng, &valid);
        let _ = decode_checkpoint(&bytes);
    }
}

#[test]
fn truncations_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = random_nifti(&mut rng);
    let bytes = encode_nifti(&img).unwrap();
    for cut in [0, 4, 100, 347, 351, bytes.len() - 1] {
        assert!(decode_nifti(&bytes[..cut]).is_err(), "nifti cut {cut}");
    }
    let (v, m) = random_case(&mut rng);
    let bytes = encode_raw(&v, &m).unwrap();
    for cut in [0, 3, 8, 20, bytes.len() - 1] {
        assert!(decode_raw(&bytes[..cut]).is_err(), "raw cut {cut}");
    }
    let config = ModelConfig::tiny();
    let bytes = encode_checkpoint(
        &config,
        &CrSwin2Vt::new(config.clone()).unwrap().init_params(0),
    );
    for cut in [0, 4, 12, 50, bytes.len() - 1] {
        assert!(
            decode_checkpoint(&bytes[..cut]).is_err(),
            "checkpoint cut {cut}"
        );
    }
}
