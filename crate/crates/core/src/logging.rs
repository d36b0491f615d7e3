//! Run logging: `ensemble.log` event lines and the per-call `libE_stats.txt`
//! appendix.
//!
//! Log line format: `<ISO8601> <LEVEL> <component>: <message>`. Levels order
//! DEBUG < INFO < MANAGER_WARNING < ERROR; the extra MANAGER_WARNING level
//! sits between a plain warning and an error and marks recoverable
//! coordination trouble.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogLevel {
    Debug,
    Info,
    ManagerWarning,
    Error,
}

impl LogLevel {
    pub fn name(&self) -> &'static str {
        match self {
            LogLevel::Debug => "DEBUG",
            LogLevel::Info => "INFO",
            LogLevel::ManagerWarning => "MANAGER_WARNING",
            LogLevel::Error => "ERROR",
        }
    }
}

impl std::str::FromStr for LogLevel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "DEBUG" => Ok(LogLevel::Debug),
            "INFO" => Ok(LogLevel::Info),
            "MANAGER_WARNING" => Ok(LogLevel::ManagerWarning),
            "ERROR" => Ok(LogLevel::Error),
            other => Err(format!("unknown log level '{other}'")),
        }
    }
}

pub struct EnsembleLogger {
    file: Option<Mutex<File>>,
    level: LogLevel,
}

impl EnsembleLogger {
    pub fn open(path: &Path, level: LogLevel) -> std::io::Result<EnsembleLogger> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EnsembleLogger { file: Some(Mutex::new(file)), level })
    }

    /// Logger that drops everything; embedded/test use.
    pub fn disabled() -> EnsembleLogger {
        EnsembleLogger { file: None, level: LogLevel::Error }
    }

    pub fn log(&self, level: LogLevel, component: &str, message: &str) {
        if level < self.level {
            return;
        }
        if let Some(file) = &self.file {
            let stamp = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
            let mut f = file.lock().unwrap();
            let _ = writeln!(f, "{stamp} {} {component}: {message}", level.name());
        }
    }

    pub fn debug(&self, component: &str, message: &str) {
        self.log(LogLevel::Debug, component, message);
    }

    pub fn info(&self, component: &str, message: &str) {
        self.log(LogLevel::Info, component, message);
    }

    pub fn manager_warning(&self, component: &str, message: &str) {
        self.log(LogLevel::ManagerWarning, component, message);
    }

    pub fn error(&self, component: &str, message: &str) {
        self.log(LogLevel::Error, component, message);
    }
}

/// Appends one line per concluded user-function call:
/// `Worker <id>: <sim|gen> sim_ids <list> Time: <secs.3f> Status: <name>`.
pub struct StatsFile {
    file: Option<Mutex<File>>,
}

impl StatsFile {
    pub fn open(path: &Path) -> std::io::Result<StatsFile> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StatsFile { file: Some(Mutex::new(file)) })
    }

    pub fn disabled() -> StatsFile {
        StatsFile { file: None }
    }

    pub fn append_call(
        &self,
        worker: u32,
        kind: &str,
        sim_ids: &[u64],
        seconds: f64,
        status: &str,
    ) {
        if let Some(file) = &self.file {
            let mut f = file.lock().unwrap();
            let _ = writeln!(
                f,
                "Worker {worker}: {kind} sim_ids {sim_ids:?} Time: {seconds:.3} Status: {status}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_ordering_and_filter() {
        assert!(LogLevel::Debug < LogLevel::Info);
        assert!(LogLevel::Info < LogLevel::ManagerWarning);
        assert!(LogLevel::ManagerWarning < LogLevel::Error);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.log");
        let logger = EnsembleLogger::open(&path, LogLevel::Info).unwrap();
        logger.debug("manager", "hidden");
        logger.manager_warning("manager", "worker 2 raised");
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("hidden"));
        assert!(text.contains(" MANAGER_WARNING manager: worker 2 raised"));
        // ISO8601 timestamp up front.
        let first = text.lines().next().unwrap();
        assert!(first.chars().nth(4) == Some('-') && first.contains('T'));
    }

    #[test]
    fn stats_line_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("libE_stats.txt");
        let stats = StatsFile::open(&path).unwrap();
        stats.append_call(3, "sim", &[4, 5], 0.1234, "COMPLETED");
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "Worker 3: sim sim_ids [4, 5] Time: 0.123 Status: COMPLETED\n");
    }
}
