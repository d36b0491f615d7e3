//! Standalone worker process with the built-in function registry. Spawned
//! by the local (pipe) launcher or pointed at a listening manager over TCP;
//! `--echo` turns it into a transport-conformance echo peer.

use std::process::ExitCode;

use ens_core::comms::{connect_tcp, conformance::echo_loop, stdio_worker_comm};
use ens_core::functions::builtin_registry;
use ens_core::worker::{run_stdio_worker, run_tcp_worker};

fn usage() -> ExitCode {
    eprintln!(
        "usage: ens-worker --stdio --worker-id K [--echo]\n       ens-worker --connect ADDR --worker-id K [--echo]"
    );
    ExitCode::from(64)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut stdio = false;
    let mut echo = false;
    let mut connect: Option<String> = None;
    let mut worker_id: Option<u32> = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--stdio" => stdio = true,
            "--echo" => echo = true,
            "--connect" => connect = it.next().cloned(),
            "--worker-id" => worker_id = it.next().and_then(|v| v.parse().ok()),
            _ => return usage(),
        }
    }
    let Some(worker_id) = worker_id else { return usage() };

    match (stdio, connect, echo) {
        (true, None, true) => match stdio_worker_comm(worker_id) {
            Ok(mut comm) => {
                echo_loop(&mut comm);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("worker {worker_id}: {e}");
                ExitCode::FAILURE
            }
        },
        (true, None, false) => {
            let registry = builtin_registry();
            match run_stdio_worker(worker_id, &registry) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("worker {worker_id}: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        (false, Some(addr), true) => match connect_tcp(&addr, worker_id) {
            Ok(mut comm) => {
                echo_loop(&mut comm);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("worker {worker_id}: {e}");
                ExitCode::FAILURE
            }
        },
        (false, Some(addr), false) => {
            let registry = builtin_registry();
            match run_tcp_worker(&addr, worker_id, &registry) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("worker {worker_id}: {e}");
                    ExitCode::FAILURE
                }
            }
        }
        _ => usage(),
    }
}
