//! Benchmarks for the hot paths: history append/save/load, frame
//! encode/decode, and the resource-set scheduler.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};

use ens_core::comms::frame::{write_frame, FrameDecoder};
use ens_core::comms::{Message, UpdatePayload};
use ens_core::resources::{build_resource_sets, InventorySource, NodeInventory, ResourceTable};
use ens_core::schema::{CellValue, FieldSpec, RecordBatch, RecordSchema};
use ens_core::tags::CalcStatus;
use ens_core::HistoryStore;

fn sample_schema() -> RecordSchema {
    RecordSchema::union(
        &[FieldSpec::float_vec("x", 2)],
        &[FieldSpec::float("f")],
        &[],
    )
    .unwrap()
}

fn sample_batch(n: usize, seed: u64) -> RecordBatch {
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut batch = RecordBatch::new(vec![FieldSpec::float_vec("x", 2)]);
    for _ in 0..n {
        batch
            .push_row(vec![CellValue::F64Arr(vec![rng.gen(), rng.gen()])])
            .unwrap();
    }
    batch
}

fn bench_history(c: &mut Criterion) {
    let mut group = c.benchmark_group("history");
    for &rows in &[100usize, 1000] {
        group.bench_with_input(BenchmarkId::new("append", rows), &rows, |b, &rows| {
            let batch = sample_batch(rows, 1);
            b.iter(|| {
                let mut h = HistoryStore::new(sample_schema());
                h.append_batch(black_box(&batch), 1).unwrap()
            });
        });
        group.bench_with_input(BenchmarkId::new("save_load", rows), &rows, |b, &rows| {
            let mut h = HistoryStore::new(sample_schema());
            h.append_batch(&sample_batch(rows, 2), 1).unwrap();
            let out = RecordBatch::default();
            for i in 0..rows as u64 {
                h.mark_given(i, 2, i as f64).unwrap();
                h.update(i, &out, 0, CalcStatus::Completed).unwrap();
            }
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("bench.ensh");
            b.iter(|| {
                h.save(&path).unwrap();
                black_box(HistoryStore::load(&path).unwrap())
            });
        });
    }
    group.finish();
}

fn bench_frames(c: &mut Criterion) {
    let batch = sample_batch(50, 3);
    let msg = Message::update(1, 0, UpdatePayload { batch, cancel_ids: vec![1, 2, 3] });
    c.bench_function("frame_encode_decode_50_rows", |b| {
        b.iter(|| {
            let mut bytes = Vec::new();
            write_frame(&mut bytes, black_box(&msg)).unwrap();
            let mut dec = FrameDecoder::new();
            dec.push(&bytes);
            black_box(dec.next_frame().unwrap().unwrap())
        });
    });
}

fn bench_scheduler(c: &mut Criterion) {
    let inv = NodeInventory {
        nodes: (0..4).map(|i| (format!("node{i}"), 8)).collect(),
        source: InventorySource::Explicit,
    };
    let sets = build_resource_sets(&inv, 32).unwrap();
    c.bench_function("scheduler_assign_release_cycle", |b| {
        let mut table = ResourceTable::new(sets.clone());
        b.iter(|| {
            for worker in 1..=8u32 {
                let _ = table.assign(worker, (worker % 4 + 1) as usize);
            }
            for worker in 1..=8u32 {
                table.release(worker);
            }
        });
    });
}

criterion_group!(benches, bench_history, bench_frames, bench_scheduler);
criterion_main!(benches);
