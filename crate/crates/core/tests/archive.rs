use dpt_core::archive::{self, MAGIC};
use dpt_core::dpt_tensor::DType;
use dpt_core::{Dpt, DptConfig, DptError, Tensor};

fn toy() -> (DptConfig, Dpt<f32>) {
    let cfg = DptConfig::toy_seg();
    let model = Dpt::new(cfg.clone(), 3).unwrap();
    (cfg, model)
}

fn archive_message(r: dpt_core::Result<impl std::fmt::Debug>) -> String {
    match r {
        Err(DptError::Archive(m)) => m,
        other => panic!("expected an archive error, got {other:?}"),
    }
}

#[test]
fn save_load_save_is_byte_exact() {
    let (cfg, model) = toy();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.dptw");
    archive::save(model.params(), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    let loaded = archive::load::<f32>(&path, &model.plan()).unwrap();
    assert_eq!(&loaded, model.params());
    let again = Dpt::from_params(cfg, loaded).unwrap();
    assert_eq!(archive::encode(again.params()), first);
    assert_eq!(&first[..4], MAGIC);
}

#[test]
fn f64_archives_round_trip_too() {
    let model = Dpt::<f64>::new(DptConfig::toy(), 1).unwrap();
    let bytes = archive::encode(model.params());
    assert_eq!(archive::peek_dtype(&bytes).unwrap(), Some(DType::F64));
    let back = archive::decode::<f64>(&bytes, &model.plan()).unwrap();
    assert_eq!(archive::encode(&back), bytes);
}

#[test]
fn archive_holds_every_parameter_element() {
    let (_, model) = toy();
    let records = archive::decode_records(&archive::encode(model.params())).unwrap();
    let stored: usize = records.iter().map(|r| r.shape.iter().product::<usize>()).sum();
    assert_eq!(stored, model.params().num_stored());
    assert_eq!(records.len(), model.plan().len());
}

#[test]
fn truncation_anywhere_is_a_structured_error() {
    let (_, model) = toy();
    let bytes = archive::encode(model.params());
    for cut in [0, 3, 4, 11, 12, 20, bytes.len() / 2, bytes.len() - 1] {
        let msg = archive_message(archive::decode::<f32>(&bytes[..cut], &model.plan()));
        assert!(msg.contains("truncated"), "cut {cut}: {msg}");
    }
}

#[test]
fn wrong_shape_names_the_record() {
    let (_, model) = toy();
    let mut store = model.params().clone();
    store.insert("fusion.2.out.weight", Tensor::zeros(&[32, 32, 3, 3]), dpt_core::params::Kind::Learnable);
    let msg = archive_message(archive::decode::<f32>(&archive::encode(&store), &model.plan()));
    assert!(msg.contains("`fusion.2.out.weight`"), "{msg}");
}

#[test]
fn missing_and_extra_records_are_rejected() {
    let (cfg, model) = toy();
    // A depth config lacks the segmentation head and aux records.
    let depth_plan = dpt_core::model::plan(&DptConfig { head: dpt_core::Head::Depth, ..cfg.clone() });
    let msg = archive_message(archive::decode::<f32>(&archive::encode(model.params()), &depth_plan));
    assert!(msg.contains("unexpected record"), "{msg}");

    let depth_model = Dpt::<f32>::new(DptConfig { head: dpt_core::Head::Depth, ..cfg }, 0).unwrap();
    let msg = archive_message(archive::decode::<f32>(&archive::encode(depth_model.params()), &model.plan()));
    assert!(msg.contains("unexpected record") || msg.contains("missing record"), "{msg}");

    let mut plan_extra = model.plan();
    plan_extra.param("extra.tensor", &[3], dpt_core::params::Init::Zeros);
    let msg = archive_message(archive::decode::<f32>(&archive::encode(model.params()), &plan_extra));
    assert!(msg.contains("missing record `extra.tensor`"), "{msg}");
}

#[test]
fn dtype_mismatch_is_rejected() {
    let (_, model) = toy();
    let msg = archive_message(archive::decode::<f64>(&archive::encode(model.params()), &model.plan()));
    assert!(msg.contains("dtype"), "{msg}");
}

#[test]
fn corrupt_headers_are_rejected() {
    let (_, model) = toy();
    let mut bytes = archive::encode(model.params());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(archive_message(archive::decode_records(&bad_magic)).contains("magic"));

    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(archive_message(archive::decode_records(&trailing)).contains("trailing"));

    // Dtype byte of the first record sits after magic, count, name length
    // and name.
    let name_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    bytes[16 + name_len] = 99;
    assert!(archive_message(archive::decode_records(&bytes)).contains("unknown dtype"));
}

#[test]
fn duplicate_names_are_rejected() {
    let mut store = dpt_core::ParamStore::<f32>::default();
    store.insert("a", Tensor::zeros(&[2]), dpt_core::params::Kind::Learnable);
    let one = archive::encode(&store);
    // Splice the single record in twice and bump the count.
    let record = &one[12..];
    let mut twice = MAGIC.to_vec();
    twice.extend_from_slice(&2u64.to_le_bytes());
    twice.extend_from_slice(record);
    twice.extend_from_slice(record);
    assert!(archive_message(archive::decode_records(&twice)).contains("duplicate"));
}
