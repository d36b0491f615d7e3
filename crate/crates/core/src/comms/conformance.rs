//! Backend conformance suite: every transport must pass the same checks for
//! FIFO order, exact payload round-trips, timeout semantics, and peer-close
//! detection. Drives echo peers from the manager side so process-backed
//! transports run the identical scenario.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use rand::{Rng, SeedableRng};

use super::{CommsError, ManagerComm, Message, Payload, UpdatePayload, WorkerComm};
use crate::schema::{CellValue, FieldSpec, RecordBatch};
use crate::tags::Tag;

/// Worker-side echo: bounce every message back to the manager unchanged
/// (routing flipped) until a stop tag arrives or the peer goes away.
pub fn echo_loop(comm: &mut WorkerComm) {
    loop {
        match comm.recv(None) {
            Ok(msg) if msg.tag.is_stop() => return,
            Ok(mut msg) => {
                msg.dest = msg.source;
                msg.source = comm.worker_id;
                if comm.send(msg).is_err() {
                    return;
                }
            }
            Err(_) => return,
        }
    }
}

fn random_message(rng: &mut impl Rng, dest: u32, seq: u64) -> Message {
    match rng.gen_range(0..3u8) {
        0 => Message::kill(dest, vec![seq, rng.gen()]),
        1 => {
            let n = rng.gen_range(1..4usize);
            let mut batch = RecordBatch::new(vec![
                FieldSpec::float_vec("x", 3),
                FieldSpec::int("k"),
                FieldSpec::boolean("flag"),
            ]);
            for _ in 0..n {
                let special = rng.gen_range(0..8u8);
                let x0 = match special {
                    0 => f64::NAN,
                    1 => f64::INFINITY,
                    2 => -0.0,
                    3 => f64::MIN_POSITIVE,
                    _ => rng.gen_range(-1e12..1e12),
                };
                batch
                    .push_row(vec![
                        CellValue::F64Arr(vec![x0, rng.gen(), rng.gen_range(-1e3..1e3)]),
                        CellValue::I64(rng.gen()),
                        CellValue::Bool(rng.gen()),
                    ])
                    .unwrap();
            }
            Message {
                tag: Tag::PersisUpdate,
                source: super::MANAGER_ID,
                dest,
                payload: Payload::Update(UpdatePayload { batch, cancel_ids: vec![seq] }),
            }
        }
        _ => Message {
            tag: Tag::PersisUpdate,
            source: super::MANAGER_ID,
            dest,
            payload: Payload::Update(UpdatePayload {
                batch: RecordBatch::default(),
                cancel_ids: vec![seq],
            }),
        },
    }
}

fn seq_of(msg: &Message) -> Option<u64> {
    match &msg.payload {
        Payload::Kill { sim_ids } => sim_ids.first().copied(),
        Payload::Update(u) => u.cancel_ids.first().copied(),
        _ => None,
    }
}

#[derive(Debug, Default)]
pub struct ConformanceReport {
    pub messages: usize,
}

/// Run the full conformance scenario against echo peers. `rounds` messages
/// go to each worker in waves; every echo must come back byte-identical and
/// in send order per worker.
pub fn run_suite(
    mgr: &ManagerComm,
    seed: u64,
    rounds: usize,
) -> Result<ConformanceReport, String> {
    let ids = mgr.worker_ids();
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut expected: BTreeMap<u32, VecDeque<(u64, Vec<u8>, Tag)>> =
        ids.iter().map(|&id| (id, VecDeque::new())).collect();
    let mut total = 0usize;
    let mut seq = 0u64;

    // Round-trip and per-pair FIFO, in waves to stay inside pipe buffers.
    const WAVE: usize = 16;
    let mut sent_in_round = 0;
    for _ in 0..rounds {
        for &id in &ids {
            let msg = random_message(&mut rng, id, seq);
            seq += 1;
            let body = msg.encode_body().map_err(|e| e.to_string())?;
            expected
                .get_mut(&id)
                .unwrap()
                .push_back((seq_of(&msg).unwrap(), body, msg.tag));
            mgr.send(msg).map_err(|e| format!("send: {e}"))?;
            total += 1;
        }
        sent_in_round += 1;
        if sent_in_round % WAVE == 0 {
            drain_expected(mgr, &mut expected)?;
        }
    }
    drain_expected(mgr, &mut expected)?;

    // Timeout semantics: nothing pending, short recv times out, and the
    // queue is intact afterwards (nothing consumed, nothing lost).
    match mgr.recv_any(Some(Duration::from_millis(20))) {
        Err(CommsError::Timeout) => {}
        other => return Err(format!("expected Timeout, got {other:?}")),
    }

    // Probe: non-destructive readiness.
    if !mgr.probe().is_empty() {
        return Err("probe nonempty after drain".into());
    }
    let probe_target = ids[0];
    let msg = random_message(&mut rng, probe_target, seq);
    let body = msg.encode_body().map_err(|e| e.to_string())?;
    mgr.send(msg).map_err(|e| format!("send: {e}"))?;
    total += 1;
    let deadline = std::time::Instant::now() + Duration::from_secs(5);
    loop {
        let ready = mgr.probe();
        if ready == vec![probe_target] {
            break;
        }
        if std::time::Instant::now() > deadline {
            return Err("probe never saw the pending echo".into());
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    if mgr.probe() != vec![probe_target] {
        return Err("probe consumed the message".into());
    }
    let echoed = mgr
        .recv_from(probe_target, Some(Duration::from_secs(5)))
        .map_err(|e| format!("recv after probe: {e}"))?;
    if echoed.encode_body().map_err(|e| e.to_string())? != body {
        return Err("probe echo mismatch".into());
    }
    if !mgr.probe().is_empty() {
        return Err("probe nonempty after recv".into());
    }

    // Shutdown: stop tags close the peers; recv then reports PeerClosed and
    // sends eventually fail.
    for &id in &ids {
        mgr.send(Message::stop(id)).map_err(|e| format!("send stop: {e}"))?;
    }
    for &id in &ids {
        match mgr.recv_from(id, Some(Duration::from_secs(10))) {
            Err(CommsError::PeerClosed) => {}
            other => return Err(format!("worker {id}: expected PeerClosed, got {other:?}")),
        }
    }
    let mut send_failed = false;
    for _ in 0..200 {
        if mgr.send(Message::kill(ids[0], vec![0])).is_err() {
            send_failed = true;
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    if !send_failed {
        return Err("send to closed peer never failed".into());
    }

    Ok(ConformanceReport { messages: total })
}

fn drain_expected(
    mgr: &ManagerComm,
    expected: &mut BTreeMap<u32, VecDeque<(u64, Vec<u8>, Tag)>>,
) -> Result<(), String> {
    while expected.values().any(|q| !q.is_empty()) {
        let msg = mgr
            .recv_any(Some(Duration::from_secs(10)))
            .map_err(|e| format!("recv: {e}"))?;
        let queue = expected
            .get_mut(&msg.source)
            .ok_or_else(|| format!("echo from unknown worker {}", msg.source))?;
        let (want_seq, want_body, want_tag) = queue
            .pop_front()
            .ok_or_else(|| format!("unexpected extra echo from {}", msg.source))?;
        if seq_of(&msg) != Some(want_seq) {
            return Err(format!(
                "FIFO violation from {}: got {:?}, want {}",
                msg.source,
                seq_of(&msg),
                want_seq
            ));
        }
        if msg.tag != want_tag {
            return Err(format!("tag changed in flight from {}", msg.source));
        }
        let body = msg.encode_body().map_err(|e| e.to_string())?;
        if body != want_body {
            return Err(format!("payload not byte-identical from {}", msg.source));
        }
    }
    Ok(())
}
