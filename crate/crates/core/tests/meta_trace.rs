use jif::meta::{
    batched_restore_cost, decode_meta, encode_meta, parse_meta_tsv, replay_cost_estimate,
    to_meta_tsv, FdRecord, FdTable, ProcessMeta,
};
use jif::testkit::{random_meta, rng};
use jif::trace::{load_trace, parse_trace, write_trace, Access, AccessTrace};
use jif::MetaError;
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn meta_round_trip(seed in any::<u64>()) {
        let meta = random_meta(&mut rng(seed));
        let blob = encode_meta(&meta).unwrap();
        prop_assert_eq!(&decode_meta(&blob).unwrap(), &meta);
        prop_assert_eq!(&parse_meta_tsv(&to_meta_tsv(&meta)).unwrap(), &meta);
        prop_assert_eq!(batched_restore_cost(&meta), 1);
    }

    #[test]
    fn truncated_meta_is_rejected(seed in any::<u64>()) {
        let meta = random_meta(&mut rng(seed));
        let blob = encode_meta(&meta).unwrap();
        prop_assume!(blob.len() > 4);
        let cut = rng(seed ^ 1).random_range(0..blob.len());
        prop_assert!(decode_meta(&blob[..cut]).is_err());
        let mut longer = blob.clone();
        longer.push(0);
        prop_assert_eq!(decode_meta(&longer), Err(MetaError::TrailingBytes(1)));
    }
}

#[test]
fn replay_cost_of_descriptors() {
    let meta = ProcessMeta {
        fds: (0..10)
            .map(|fd_num| FdRecord {
                fd_num,
                path: format!("/data/{fd_num}"),
                ..Default::default()
            })
            .collect(),
        ..Default::default()
    };
    assert_eq!(replay_cost_estimate(&meta, 0), 40);
    assert_eq!(replay_cost_estimate(&meta, 3), 43);
    assert_eq!(batched_restore_cost(&meta), 1);
}

#[test]
fn lazy_resolution_happens_once() {
    for seed in 0..100 {
        let mut rng = rng(seed);
        let meta = random_meta(&mut rng);
        let mut table = FdTable::new(&meta);
        let mut used = std::collections::HashSet::new();
        for _ in 0..40 {
            let Some(fd) = meta.fds.get(rng.random_range(0..meta.fds.len().max(1))) else {
                break;
            };
            let triggered = table.use_fd(fd.fd_num).unwrap();
            assert_eq!(triggered, fd.lazy && used.insert(fd.fd_num));
        }
        assert_eq!(table.events().len(), used.len());
    }
}

#[test]
fn trace_round_trip() {
    let mut rng = rng(11);
    let trace: AccessTrace = (0..10_000)
        .map(|_| {
            let addr = rng.random_range(0..1u64 << 36) << 12;
            if rng.random_bool(0.3) {
                Access::write(addr)
            } else {
                Access::read(addr)
            }
        })
        .collect();
    assert_eq!(parse_trace(&trace.to_binary()).unwrap(), trace);
    assert_eq!(parse_trace(trace.to_text().as_bytes()).unwrap(), trace);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.bin");
    write_trace(&path, &trace).unwrap();
    assert_eq!(load_trace(&path).unwrap(), trace);

    assert_eq!(parse_trace(b"").unwrap(), AccessTrace::new());
    assert!(parse_trace(b"R 0x1001\n").is_err());
    assert!(parse_trace(b"X 0x1000\n").is_err());
}
