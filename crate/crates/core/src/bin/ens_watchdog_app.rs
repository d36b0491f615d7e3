//! Standalone synthetic watchdog application. See
//! `ens_core::functions::synthetic` for the behavior.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(ens_core::functions::synthetic::watchdog_app_main(&args));
}
