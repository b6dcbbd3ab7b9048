use super::*;
use crate::durable_log::DurableConfig;
use crate::file_layer::{ReadTuning, StorageView};
use crate::kv_cache::{CacheKind, CacheReplicaConfig, ReplicationConfig};

struct Cluster {
    data: KvCache,
    meta: KvCache,
    durable: DurableStore,
    rng: SimRng,
}

impl Cluster {
    fn new(seed: u64) -> Self {
        Self {
            data: KvCache::new(
                CacheKind::Data,
                3,
                ReplicationConfig::default(),
                CacheReplicaConfig::data_default(),
            ),
            meta: KvCache::new(
                CacheKind::Metadata,
                3,
                ReplicationConfig::default(),
                CacheReplicaConfig::metadata_default(),
            ),
            durable: DurableStore::new(DurableConfig::default()),
            rng: SimRng::new(seed),
        }
    }

    fn view(&mut self, now: SimTime) -> StorageView<'_> {
        StorageView {
            data: &mut self.data,
            meta: &mut self.meta,
            durable: &mut self.durable,
            rng: &mut self.rng,
            now,
            tuning: ReadTuning::default(),
        }
    }

    fn wctx(&mut self, now: SimTime) -> WriterCtx<'_> {
        WriterCtx {
            meta: &mut self.meta,
            durable: &mut self.durable,
            rng: &mut self.rng,
            now,
            geom: ChunkGeometry::default(),
        }
    }

    fn meta_of(&mut self, path: &str, now: SimTime) -> FileMeta {
        peek_lengths(&mut self.meta, &[path], now, &mut self.rng)[0]
    }
}

const PATH: &str = "/s/0/000001.data";

fn payload(n: usize) -> Vec<u8> {
    (0..n).map(|i| (i * 31 % 251) as u8).collect()
}

/// Upstream holds `bytes` durably and, chunked, in its data cache.
fn seeded_upstream(bytes: &[u8]) -> Cluster {
    let mut u = Cluster::new(1);
    let h = u.durable.open_writer(PATH);
    u.durable.append(&h, bytes).unwrap();
    let geom = ChunkGeometry::default();
    for (i, c) in bytes.chunks(geom.chunk_size as usize).enumerate() {
        u.data
            .put(
                CacheKey::chunk(PATH, i as u64),
                Bytes::copy_from_slice(c),
                1,
                0,
            )
            .unwrap();
    }
    let n = bytes.len() as u64;
    publish_length(&mut u.meta, PATH, RecordKind::CacheLen, n, 1, 0).unwrap();
    publish_length(&mut u.meta, PATH, RecordKind::DurableLen, n, 1, 0).unwrap();
    u
}

fn key(storage: Storage) -> OpKey {
    OpKey {
        op: OpId {
            path: PATH.into(),
            storage,
        },
        hop: Hop {
            up: ClusterId(0),
            down: ClusterId(1),
        },
    }
}

fn sends(acts: &[Action]) -> Vec<StreamMsg> {
    acts.iter()
        .filter_map(|a| match a {
            Action::Send { msg, .. } => Some(msg.clone()),
            _ => None,
        })
        .collect()
}

fn ended(acts: &[Action]) -> Option<EndReason> {
    acts.iter().find_map(|a| match a {
        Action::Ended(r) => Some(*r),
        _ => None,
    })
}

/// Drive one reader/writer pair to completion with instant delivery.
/// `reverse_data` delivers each poll's data messages in reverse order.
fn copy(storage: Storage, bytes: &[u8], reverse_data: bool) -> (Cluster, Vec<EndReason>) {
    let mut u = seeded_upstream(bytes);
    let mut d = Cluster::new(2);
    let cfg = ReaderConfig {
        max_delta_bytes: 5000,
        ..ReaderConfig::default()
    };
    let (mut reader, acts) = ReaderOp::start(key(storage), 7, cfg, 0);
    let open = sends(&acts).remove(0);
    let StreamMsg::Open { instance, key: k } = open else {
        panic!()
    };
    let (mut writer, wacts) =
        WriterOp::open(k, instance, 99, WriterConfig::default(), &mut d.wctx(0));
    let mut to_reader = sends(&wacts);
    let mut ends = Vec::new();
    let final_len = bytes.len() as u64;
    for step in 0..2000u64 {
        let now = step * 10;
        for m in to_reader.drain(..) {
            if let Some(r) = ended(&reader.on_msg(m, now)) {
                ends.push(r);
            }
        }
        if !reader.is_live() {
            break;
        }
        let meta = u.meta_of(PATH, now);
        let mut batch = Vec::new();
        for _ in 0..3 {
            let acts = reader.on_poll(&mut u.view(now), meta, Some(final_len));
            if let Some(r) = ended(&acts) {
                ends.push(r);
            }
            batch.extend(sends(&acts));
        }
        if reverse_data {
            batch.reverse();
        }
        let mut queue: Vec<Action> = Vec::new();
        for m in batch {
            queue.extend(writer.on_msg(m, &mut d.wctx(now)));
        }
        while let Some(a) = queue.pop() {
            match a {
                Action::Send { msg, .. } => to_reader.push(msg),
                Action::Put {
                    seq,
                    id,
                    key,
                    bytes,
                    version,
                } => {
                    let acks = d.data.put(key, bytes, version, now).unwrap_or(0);
                    queue.extend(writer.on_put_done(seq, id, acks, &mut d.wctx(now)));
                }
                Action::Ended(r) => ends.push(r),
                _ => {}
            }
        }
        if step % 10 == 0 {
            for a in writer.on_timer(WriterTimer::LockCheck, &mut d.wctx(now)) {
                if let Action::Send { msg, .. } = a {
                    to_reader.push(msg);
                }
            }
        }
    }
    (d, ends)
}

#[test]
fn durable_op_copies_file() {
    let bytes = payload(23_000);
    let (d, ends) = copy(Storage::Durable, &bytes, false);
    assert_eq!(d.durable.peek(PATH, 0, 1 << 20), &bytes[..]);
    assert!(ends.contains(&EndReason::Done));
    let m = d
        .meta
        .peek_newest(&CacheKey::record(PATH, RecordKind::DurableLen), 0)
        .unwrap();
    assert_eq!(crate::file_layer::decode_length(&m.bytes), Some(23_000));
}

#[test]
fn cache_op_copies_out_of_order() {
    let bytes = payload(23_000);
    let (d, ends) = copy(Storage::Cache, &bytes, true);
    let geom = ChunkGeometry::default();
    for (i, c) in bytes.chunks(geom.chunk_size as usize).enumerate() {
        let v = d
            .data
            .peek_newest(&CacheKey::chunk(PATH, i as u64), 0)
            .unwrap();
        assert_eq!(&v.bytes[..], c, "chunk {i}");
    }
    let m = d
        .meta
        .peek_newest(&CacheKey::record(PATH, RecordKind::CacheLen), 0)
        .unwrap();
    assert_eq!(crate::file_layer::decode_length(&m.bytes), Some(23_000));
    assert!(ends.contains(&EndReason::Done));
}

#[test]
fn start_position_rule() {
    let g = ChunkGeometry::default();
    assert_eq!(cache_start_position(Some(9000), 9000, g, 0), (8192, false));
    assert_eq!(cache_start_position(None, 9000, g, 1 << 20), (8192, true));
    assert_eq!(
        cache_start_position(Some(100), 1 << 20, g, 4096),
        (1 << 20, true)
    );
    assert_eq!(
        cache_start_position(Some(20_000), 9000, g, 0),
        (16_384, false)
    );
}

fn open_cache(
    d: &mut Cluster,
    inst: InstanceId,
    writer: u64,
    now: SimTime,
    cfg: WriterConfig,
) -> (WriterOp, Vec<Action>) {
    WriterOp::open(key(Storage::Cache), inst, writer, cfg, &mut d.wctx(now))
}

fn has_ready(acts: &[Action]) -> bool {
    sends(acts)
        .iter()
        .any(|m| matches!(m, StreamMsg::Ready { .. }))
}

#[test]
fn duel_poisons_old_writer() {
    let mut d = Cluster::new(3);
    let cfg = WriterConfig::default();
    let (mut old, a) = open_cache(&mut d, 1, 10, 0, cfg);
    assert!(has_ready(&a));
    let (mut new, a) = open_cache(&mut d, 2, 11, 20, cfg);
    assert!(!has_ready(&a), "contender must wait");
    let r = old.on_timer(WriterTimer::LockCheck, &mut d.wctx(100));
    assert_eq!(ended(&r), Some(EndReason::Poisoned));
    let a = new.on_timer(WriterTimer::LockRetry, &mut d.wctx(120));
    assert!(has_ready(&a));
    let rec = d
        .meta
        .lock_record(&CacheKey::record(PATH, RecordKind::Lock), 120)
        .unwrap();
    assert_eq!(rec.owner, new.lock_signature());
    assert!(!rec.poisoned);
}

#[test]
fn contender_seizes_after_delay() {
    let mut d = Cluster::new(4);
    let cfg = WriterConfig::default();
    let (_old, _) = open_cache(&mut d, 1, 10, 0, cfg);
    let (mut new, _) = open_cache(&mut d, 2, 11, 0, cfg);
    let mut t = 0;
    let mut ready = false;
    while t < 1000 && !ready {
        t += 100;
        // Keep the stream alive so only the lock matters.
        new.on_msg(StreamMsg::Heartbeat { instance: 2 }, &mut d.wctx(t));
        ready = has_ready(&new.on_timer(WriterTimer::LockRetry, &mut d.wctx(t)));
    }
    assert!(ready);
    assert_eq!(t, 500);
    let rec = d
        .meta
        .lock_record(&CacheKey::record(PATH, RecordKind::Lock), t)
        .unwrap();
    assert_eq!(rec.owner, new.lock_signature());
}

#[test]
fn no_poisoning_forces_dual_writers() {
    let mut d = Cluster::new(5);
    let cfg = WriterConfig {
        poisoning: false,
        ..WriterConfig::default()
    };
    let (mut old, _) = open_cache(&mut d, 1, 10, 0, cfg);
    let (_new, a) = open_cache(&mut d, 2, 11, 0, cfg);
    assert!(has_ready(&a));
    let r = old.on_timer(WriterTimer::LockCheck, &mut d.wctx(100));
    assert_eq!(ended(&r), None);
}

#[test]
fn durable_writer_is_superseded_by_newer_handle() {
    let mut d = Cluster::new(6);
    let cfg = WriterConfig::default();
    let (mut old, _) = WriterOp::open(key(Storage::Durable), 1, 10, cfg, &mut d.wctx(0));
    let data = |instance| StreamMsg::Data {
        instance,
        offset: 0,
        bytes: Bytes::from_static(b"abc"),
    };
    assert_eq!(ended(&old.on_msg(data(1), &mut d.wctx(1))), None);
    let (mut new, _) = WriterOp::open(key(Storage::Durable), 2, 11, cfg, &mut d.wctx(5));
    assert_eq!(
        ended(&old.on_msg(data(1), &mut d.wctx(6))),
        Some(EndReason::Superseded)
    );
    // Overlapping resend is trimmed, not duplicated.
    new.on_msg(data(2), &mut d.wctx(7));
    assert_eq!(d.durable.peek(PATH, 0, 100), b"abc");
}

#[test]
fn durable_gap_ends_op() {
    let mut d = Cluster::new(7);
    let (mut w, _) = WriterOp::open(
        key(Storage::Durable),
        1,
        10,
        WriterConfig::default(),
        &mut d.wctx(0),
    );
    let r = w.on_msg(
        StreamMsg::Data {
            instance: 1,
            offset: 10,
            bytes: Bytes::from_static(b"x"),
        },
        &mut d.wctx(1),
    );
    assert_eq!(ended(&r), Some(EndReason::Gap));
}

#[test]
fn silent_peer_breaks_stream() {
    let mut u = seeded_upstream(&payload(100));
    let (mut r, _) = ReaderOp::start(key(Storage::Durable), 1, ReaderConfig::default(), 0);
    let meta = u.meta_of(PATH, 0);
    assert_eq!(ended(&r.on_poll(&mut u.view(100), meta, None)), None);
    assert_eq!(
        ended(&r.on_poll(&mut u.view(151), meta, None)),
        Some(EndReason::StreamBroken)
    );
}

#[test]
fn resync_publishes_jump() {
    let mut d = Cluster::new(8);
    let h = d.durable.open_writer(PATH);
    d.durable.append(&h, &payload(1 << 20)).unwrap();
    let (w, a) = open_cache(&mut d, 1, 10, 0, WriterConfig::default());
    let start = sends(&a).iter().find_map(|m| match m {
        StreamMsg::Ready { start, .. } => Some(*start),
        _ => None,
    });
    assert_eq!(start, Some(1 << 20));
    assert_eq!(w.cache_progress(), Some((1 << 20, 1 << 20)));
    assert_eq!(d.meta_of(PATH, 0).cache_len, Some(1 << 20));
}
