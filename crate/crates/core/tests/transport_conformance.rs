//! The same conformance scenario on every backend: FIFO per pair, exact
//! payload round-trips, timeout semantics, peer-close detection. The TCP
//! backend additionally runs behind a byte-fragmenting proxy to prove frame
//! reassembly does not depend on read boundaries.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use ens_core::comms::conformance::{echo_loop, run_suite};
use ens_core::comms::{connect_tcp, listen_tcp, spawn_local_workers, start_inproc};

const ROUNDS: usize = 120;

#[test]
fn inproc_passes_conformance() {
    let (mgr, workers) = start_inproc(3).unwrap();
    let mut threads = Vec::new();
    for mut w in workers {
        threads.push(std::thread::spawn(move || echo_loop(&mut w)));
    }
    let report = run_suite(&mgr, 101, ROUNDS).unwrap();
    assert!(report.messages >= 3 * ROUNDS);
    for t in threads {
        t.join().unwrap();
    }
}

#[test]
fn local_processes_pass_conformance() {
    let cmd = vec![
        env!("CARGO_BIN_EXE_ens-worker").to_string(),
        "--stdio".into(),
        "--worker-id".into(),
        "{worker_id}".into(),
        "--echo".into(),
    ];
    let (mgr, mut procs) = spawn_local_workers(3, &cmd).unwrap();
    let report = run_suite(&mgr, 202, ROUNDS).unwrap();
    assert!(report.messages >= 3 * ROUNDS);
    let stragglers = procs.join(Duration::from_secs(5));
    assert!(stragglers.is_empty(), "killed workers: {stragglers:?}");
}

#[test]
fn tcp_passes_conformance() {
    let listener = listen_tcp("127.0.0.1:0", 3).unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let mut threads = Vec::new();
    for id in 1..=3u32 {
        let addr = addr.clone();
        threads.push(std::thread::spawn(move || {
            let mut comm = connect_tcp(&addr, id).unwrap();
            echo_loop(&mut comm);
        }));
    }
    let mgr = listener.accept_workers(Duration::from_secs(10)).unwrap();
    let report = run_suite(&mgr, 303, ROUNDS).unwrap();
    assert!(report.messages >= 3 * ROUNDS);
    for t in threads {
        t.join().unwrap();
    }
}

/// Forward bytes in tiny randomized chunks in both directions.
fn fragmenting_proxy(listen_on: TcpListener, upstream: String, seed: u64) {
    std::thread::spawn(move || {
        let mut next_seed = seed;
        for conn in listen_on.incoming() {
            let Ok(client) = conn else { return };
            let Ok(server) = TcpStream::connect(&upstream) else { return };
            next_seed = next_seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            pump_fragmented(client.try_clone().unwrap(), server.try_clone().unwrap(), next_seed);
            pump_fragmented(server, client, next_seed ^ 0xabcdef);
        }
    });
}

fn pump_fragmented(mut from: TcpStream, mut to: TcpStream, seed: u64) {
    std::thread::spawn(move || {
        let mut state = seed | 1;
        let mut buf = [0u8; 512];
        loop {
            let n = match from.read(&mut buf) {
                Ok(0) | Err(_) => {
                    let _ = to.shutdown(std::net::Shutdown::Write);
                    return;
                }
                Ok(n) => n,
            };
            let mut sent = 0;
            while sent < n {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let chunk = 1 + (state >> 33) as usize % 3; // 1..=3 bytes
                let end = (sent + chunk).min(n);
                if to.write_all(&buf[sent..end]).is_err() {
                    return;
                }
                let _ = to.flush();
                sent = end;
            }
        }
    });
}

#[test]
fn tcp_through_fragmenting_proxy_passes_conformance() {
    let listener = listen_tcp("127.0.0.1:0", 2).unwrap();
    let upstream = listener.local_addr().unwrap().to_string();
    let proxy_listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let proxy_addr = proxy_listener.local_addr().unwrap().to_string();
    fragmenting_proxy(proxy_listener, upstream, 7);

    let mut threads = Vec::new();
    for id in 1..=2u32 {
        let addr = proxy_addr.clone();
        threads.push(std::thread::spawn(move || {
            let mut comm = connect_tcp(&addr, id).unwrap();
            echo_loop(&mut comm);
        }));
    }
    let mgr = listener.accept_workers(Duration::from_secs(10)).unwrap();
    let report = run_suite(&mgr, 404, ROUNDS).unwrap();
    assert!(report.messages >= 2 * ROUNDS);
    for t in threads {
        t.join().unwrap();
    }
}
