use ecn_tensor::checkpoint::peek_dtype;
use ecn_tensor::{adam_step, AdamConfig, AdamState, Checkpoint, CheckpointError, DType, ParamGrads, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sample<T: ecn_tensor::Real>(seed: u64) -> Checkpoint<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    params.insert("embed.table", Tensor::randn([7, 3], 1.0, &mut rng));
    params.insert("bias", Tensor::randn([3], 1.0, &mut rng));
    params.insert("scalar", Tensor::randn(Vec::<usize>::new(), 1.0, &mut rng));
    params.insert("conv", Tensor::randn([2, 3, 4], 1.0, &mut rng));
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let mut grads = ParamGrads::for_store(&params);
    for id in params.ids() {
        grads.accumulate(id, &Tensor::randn(params.get(id).shape().to_vec(), 1.0, &mut rng));
    }
    adam_step(&mut params, &grads, &mut adam, 0.01).unwrap();
    Checkpoint {
        params,
        adam,
        metadata: r#"{"note":"ünïcode"}"#.to_string(),
    }
}

#[test]
fn round_trip_is_bitwise() {
    for seed in 0..5 {
        let ck = sample::<f64>(seed);
        assert_eq!(Checkpoint::<f64>::from_bytes(&ck.to_bytes()).unwrap(), ck);
        let ck = sample::<f32>(seed);
        assert_eq!(Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap(), ck);
    }
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let ck = sample::<f32>(3);
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::<f32>::load(&path).unwrap(), ck);
    assert_eq!(peek_dtype(&path).unwrap(), DType::F32);
    assert!(!dir.path().join("model.ckpt.tmp").exists());
}

#[test]
fn every_truncation_is_a_parse_error() {
    let bytes = sample::<f64>(1).to_bytes();
    for len in 0..bytes.len() {
        match Checkpoint::<f64>::from_bytes(&bytes[..len]) {
            Err(CheckpointError::Parse { offset, .. }) => assert!(offset <= len),
            other => panic!("prefix of {len} bytes gave {other:?}"),
        }
    }
}

#[test]
fn corruption_reports_offset() {
    let mut bytes = sample::<f64>(2).to_bytes();
    bytes[0] = b'X';
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(CheckpointError::Parse { offset: 0, .. })
    ));
    let mut bytes = sample::<f64>(2).to_bytes();
    let n = bytes.len();
    bytes[n - 3] = 1;
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(CheckpointError::Parse { .. })
    ));
    let mut bytes = sample::<f64>(2).to_bytes();
    bytes.push(0);
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
}

#[test]
fn wrong_precision_is_rejected() {
    let bytes = sample::<f32>(0).to_bytes();
    assert!(matches!(
        Checkpoint::<f64>::from_bytes(&bytes),
        Err(CheckpointError::DType { found: 4, .. })
    ));
}

#[test]
fn identical_runs_are_bitwise_identical() {
    assert_eq!(sample::<f32>(9).to_bytes(), sample::<f32>(9).to_bytes());
}
