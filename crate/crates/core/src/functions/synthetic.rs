//! Main body of the bundled synthetic application, shared by the standalone
//! binary and by harness executables that embed it as a subcommand. Runs for
//! `--duration` seconds writing heartbeat lines to `--outfile`, optionally
//! emitting the `PARTICLE LOST` marker at `--lost-at` seconds; it never
//! exits early on its own.

use std::io::Write;
use std::time::{Duration, Instant};

pub fn watchdog_app_main(args: &[String]) -> i32 {
    let mut duration: Option<f64> = None;
    let mut lost_at: Option<f64> = None;
    let mut outfile: Option<String> = None;
    let mut ignore_term = false;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--duration" => duration = it.next().and_then(|v| v.parse().ok()),
            "--lost-at" => lost_at = it.next().and_then(|v| v.parse().ok()),
            "--outfile" => outfile = it.next().cloned(),
            "--ignore-term" => ignore_term = true,
            _ => {
                eprintln!(
                    "usage: --duration S --outfile PATH [--lost-at S] [--ignore-term]"
                );
                return 64;
            }
        }
    }
    let (Some(duration), Some(outfile)) = (duration, outfile) else {
        eprintln!("usage: --duration S --outfile PATH [--lost-at S] [--ignore-term]");
        return 64;
    };
    if ignore_term {
        #[cfg(unix)]
        unsafe {
            libc::signal(libc::SIGTERM, libc::SIG_IGN);
        }
    }

    let mut out = match std::fs::File::create(&outfile) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("cannot open {outfile}: {e}");
            return 1;
        }
    };
    let started = Instant::now();
    let mut marker_written = lost_at.is_none();
    loop {
        let t = started.elapsed().as_secs_f64();
        if !marker_written && t >= lost_at.unwrap() {
            let _ = writeln!(out, "PARTICLE LOST");
            let _ = out.flush();
            marker_written = true;
        }
        if t >= duration {
            let _ = writeln!(out, "done t={t:.3}");
            let _ = out.flush();
            return 0;
        }
        let _ = writeln!(out, "heartbeat t={t:.3}");
        let _ = out.flush();
        std::thread::sleep(Duration::from_millis(20));
    }
}
