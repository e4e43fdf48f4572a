use stpc::checkpoint::{Checkpoint, MAGIC};
use stpc::segnet::{NetworkConfig, SegModel, TrainState};

fn state() -> TrainState {
    let cfg = NetworkConfig {
        widths: vec![6, 8],
        atoms: 3,
        atom_dim: 4,
        head_width: 5,
        ..NetworkConfig::default()
    };
    TrainState::new(SegModel::new(cfg).unwrap())
}

#[test]
fn file_round_trip_keeps_every_parameter() {
    let st = state();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.stpc");
    Checkpoint::from_state(&st).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_state().unwrap();
    assert_eq!(back.model.params(), st.model.params());
    assert_eq!(back.model.config(), st.model.config());
    assert_eq!(std::fs::read(&path).unwrap()[..5], MAGIC[..]);
}

#[test]
fn damaged_bytes_are_rejected() {
    let bytes = Checkpoint::from_state(&state()).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic).is_err());
    let mut version = bytes;
    version[5] = 99;
    assert!(Checkpoint::from_bytes(&version).is_err());
}
