use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tokenalign::cache::{read_cache, write_cache, CacheRecord};
use tokenalign::error::{CacheCheck, Error};
use tokenalign::tensor::{MaskVector, Matrix, Real};

fn random_records<T: Real>(n: usize, seed: u64) -> Vec<CacheRecord<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (r, c) = (rng.random_range(1..12), rng.random_range(1..12));
            let data = (0..r * c).map(|_| T::lit(rng.random_range(-1e4..1e4))).collect();
            let mask = rng.random_bool(0.5).then(|| MaskVector::new((0..r).map(|_| rng.random_bool(0.5) as u8).collect()).unwrap());
            let label: Vec<u8> = (0..rng.random_range(0..20)).map(|_| rng.random()).collect();
            CacheRecord::new(Matrix::from_vec(r, c, data).unwrap(), mask, [format!("{i}:").into_bytes(), label].concat())
        })
        .collect()
}

fn same_bits<T: Real>(a: &[CacheRecord<T>], b: &[CacheRecord<T>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.label == y.label
                && x.mask == y.mask
                && x.matrix.shape() == y.matrix.shape()
                && x.matrix.as_slice().iter().zip(y.matrix.as_slice()).all(|(u, v)| u.as_f64().to_bits() == v.as_f64().to_bits())
        })
}

#[test]
fn thousand_records_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let p32 = dir.path().join("a.vesc");
    let p64 = dir.path().join("b.vesc");
    let r32 = random_records::<f32>(1000, 1);
    let r64 = random_records::<f64>(1000, 2);
    write_cache(&r32, &p32).unwrap();
    write_cache(&r64, &p64).unwrap();
    assert!(same_bits(&read_cache::<f32>(&p32).unwrap(), &r32));
    assert!(same_bits(&read_cache::<f64>(&p64).unwrap(), &r64));
}

#[test]
fn truncating_one_byte_is_a_bounds_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.vesc");
    write_cache(&random_records::<f64>(1000, 3), &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
    match read_cache::<f64>(&p) {
        Err(Error::Cache { check: CacheCheck::Bounds, path, .. }) => assert_eq!(path, p),
        other => panic!("expected a bounds rejection, got {other:?}"),
    }
}

#[test]
fn single_unmasked_1x1_record_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.vesc");
    let r = vec![CacheRecord::new(Matrix::from_vec(1, 1, vec![-0.0f64]).unwrap(), None, Vec::new())];
    write_cache(&r, &p).unwrap();
    assert!(same_bits(&read_cache::<f64>(&p).unwrap(), &r));
}
