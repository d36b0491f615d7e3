//! Worker-side application launcher: register executables once, then
//! submit/poll/wait/kill them as subprocess tasks from simulator functions.
//!
//! Tasks move along created -> waiting -> running -> {finished, failed,
//! killed}. Launch failures (exec errors) retry with doubling backoff;
//! a nonzero exit never retries. Kill signals from the manager are observed
//! between polls and take effect before state is reported.

use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::comms::WorkerComm;
use crate::resources::WorkerResources;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("application '{0}' already registered")]
    DuplicateApp(String),
    #[error("executable not found or not executable: {0}")]
    MissingExecutable(PathBuf),
    #[error("application '{0}' is not registered")]
    UnregisteredApp(String),
    #[error("launch failed after {attempts} attempts: {last_error}")]
    LaunchExhausted { attempts: u32, last_error: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct AppRegistration {
    pub app_name: String,
    pub executable: PathBuf,
    pub fixed_args: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub max_retries: u32,
    pub retry_backoff: Duration,
    pub kill_grace: Duration,
    /// Tokens prepended to every launched command line, restoring an MPI
    /// runner wrapper (e.g. `mpirun -n {procs}`) without autodetection.
    pub runner_prefix: Vec<String>,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        ExecutorConfig {
            max_retries: 2,
            retry_backoff: Duration::from_millis(500),
            kill_grace: Duration::from_secs(2),
            runner_prefix: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Created,
    Waiting,
    Running,
    Finished,
    Failed,
    Killed,
}

impl TaskState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, TaskState::Finished | TaskState::Failed | TaskState::Killed)
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskState::Created => "created",
            TaskState::Waiting => "waiting",
            TaskState::Running => "running",
            TaskState::Finished => "finished",
            TaskState::Failed => "failed",
            TaskState::Killed => "killed",
        }
    }
}

#[derive(Debug)]
struct TaskInner {
    id: u64,
    app_name: String,
    state: TaskState,
    return_code: Option<i32>,
    stdout_path: PathBuf,
    stderr_path: PathBuf,
    /// Seconds since executor creation (monotonic).
    submit_time: f64,
    start_time: Option<f64>,
    end_time: Option<f64>,
    retries: u32,
    os_pid: Option<u32>,
    child: Option<Child>,
}

/// Handle to one launched application.
#[derive(Debug, Clone)]
pub struct Task {
    inner: Arc<Mutex<TaskInner>>,
}

pub enum WaitOutcome {
    Terminal(TaskState),
    Timeout(TaskState),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchOutcome {
    CompletedClean,
    KilledOnMarker,
}

pub struct Executor {
    apps: Vec<AppRegistration>,
    cfg: ExecutorConfig,
    worker_id: u32,
    workdir: PathBuf,
    resources: WorkerResources,
    origin: Instant,
    next_id: u64,
    tasks: Vec<Task>,
    /// Set once a manager kill (or stop during a run) has been observed.
    kill_pending: bool,
    comm: Option<Rc<RefCell<WorkerComm>>>,
}

impl Executor {
    pub fn new(worker_id: u32, cfg: ExecutorConfig) -> Executor {
        Executor {
            apps: Vec::new(),
            cfg,
            worker_id,
            workdir: std::env::current_dir().unwrap_or_else(|_| PathBuf::from(".")),
            resources: WorkerResources::empty(worker_id),
            origin: Instant::now(),
            next_id: 0,
            tasks: Vec::new(),
            kill_pending: false,
            comm: None,
        }
    }

    /// Attach the worker's endpoint so kill signals are picked up between
    /// polls while a user function is running.
    pub fn attach_comm(&mut self, comm: Rc<RefCell<WorkerComm>>) {
        self.comm = Some(comm);
    }

    pub fn set_workdir(&mut self, dir: PathBuf) {
        self.workdir = dir;
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn set_resources(&mut self, resources: WorkerResources) {
        self.resources = resources;
    }

    pub fn resources(&self) -> &WorkerResources {
        &self.resources
    }

    pub fn clear_kill_flag(&mut self) {
        self.kill_pending = false;
    }

    fn now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64()
    }

    pub fn register_app(
        &mut self,
        name: &str,
        path: &Path,
        fixed_args: &[String],
    ) -> Result<(), ExecError> {
        if self.apps.iter().any(|a| a.app_name == name) {
            return Err(ExecError::DuplicateApp(name.to_string()));
        }
        if !is_executable(path) {
            return Err(ExecError::MissingExecutable(path.to_path_buf()));
        }
        self.apps.push(AppRegistration {
            app_name: name.to_string(),
            executable: path.to_path_buf(),
            fixed_args: fixed_args.to_vec(),
        });
        Ok(())
    }

    pub fn app(&self, name: &str) -> Option<&AppRegistration> {
        self.apps.iter().find(|a| a.app_name == name)
    }

    /// Launch a registered application. Returns as soon as the subprocess is
    /// up; completion is observed through poll/wait. Launch failures retry
    /// with doubling backoff up to `max_retries`.
    pub fn submit(
        &mut self,
        app_name: &str,
        app_args: &[String],
        num_procs: usize,
        stdout: &str,
        stderr: &str,
        env_from_resources: bool,
    ) -> Result<Task, ExecError> {
        let app = self
            .app(app_name)
            .ok_or_else(|| ExecError::UnregisteredApp(app_name.to_string()))?
            .clone();
        let stdout_path = self.workdir.join(stdout);
        let stderr_path = self.workdir.join(stderr);
        let submit_time = self.now();

        let mut argv: Vec<String> = Vec::new();
        argv.extend(self.cfg.runner_prefix.iter().cloned());
        argv.push(app.executable.to_string_lossy().into_owned());
        argv.extend(app.fixed_args.iter().cloned());
        argv.extend(app_args.iter().cloned());

        let mut attempt = 0u32;
        let mut backoff = self.cfg.retry_backoff;
        loop {
            let out = std::fs::File::create(&stdout_path)?;
            let err = std::fs::File::create(&stderr_path)?;
            let mut cmd = Command::new(&argv[0]);
            cmd.args(&argv[1..])
                .current_dir(&self.workdir)
                .stdin(Stdio::null())
                .stdout(Stdio::from(out))
                .stderr(Stdio::from(err))
                .env("ENS_NUM_PROCS", num_procs.to_string())
                .env("ENS_WORKER_ID", self.worker_id.to_string());
            if env_from_resources {
                let slots: Vec<String> =
                    self.resources.slots_on_node.iter().map(|s| s.to_string()).collect();
                cmd.env("ENS_VISIBLE_SLOTS", slots.join(","));
            }
            match cmd.spawn() {
                Ok(child) => {
                    let id = self.next_id;
                    self.next_id += 1;
                    let task = Task {
                        inner: Arc::new(Mutex::new(TaskInner {
                            id,
                            app_name: app.app_name.clone(),
                            state: TaskState::Running,
                            return_code: None,
                            stdout_path,
                            stderr_path,
                            submit_time,
                            start_time: Some(self.now()),
                            end_time: None,
                            retries: attempt,
                            os_pid: Some(child.id()),
                            child: Some(child),
                        })),
                    };
                    self.tasks.push(task.clone());
                    return Ok(task);
                }
                Err(e) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(ExecError::LaunchExhausted {
                            attempts: attempt + 1,
                            last_error: e.to_string(),
                        });
                    }
                    attempt += 1;
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }

    /// Check for a manager kill that arrived while user code is running.
    fn observe_kill(&mut self) -> bool {
        if self.kill_pending {
            return true;
        }
        if let Some(comm) = &self.comm {
            let (kills, stop_seen) = comm.borrow_mut().take_pending_kill();
            if !kills.is_empty() || stop_seen {
                self.kill_pending = true;
            }
        }
        self.kill_pending
    }

    /// True once the manager has asked for the current work to die. Pure
    /// function simulators poll this to honor kills without a subprocess.
    pub fn kill_requested(&mut self) -> bool {
        self.observe_kill()
    }

    /// Non-blocking state refresh. A pending manager kill is applied first.
    pub fn poll(&mut self, task: &Task) -> TaskState {
        if self.observe_kill() {
            let state = task.state();
            if !state.is_terminal() {
                self.kill(task, self.cfg.kill_grace);
            }
        }
        let now = self.now();
        let mut t = task.inner.lock().unwrap();
        poll_inner(&mut t, now);
        t.state
    }

    /// Block until the task is terminal or the timeout passes.
    pub fn wait(&mut self, task: &Task, timeout: Option<Duration>) -> WaitOutcome {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            let state = self.poll(task);
            if state.is_terminal() {
                return WaitOutcome::Terminal(state);
            }
            if let Some(d) = deadline {
                if Instant::now() >= d {
                    return WaitOutcome::Timeout(state);
                }
            }
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    /// Graceful terminate, escalating to a hard kill after `grace`.
    /// Idempotent; a terminal task is left untouched.
    pub fn kill(&mut self, task: &Task, grace: Duration) {
        let now = self.now();
        let mut t = task.inner.lock().unwrap();
        poll_inner(&mut t, now);
        if t.state.is_terminal() {
            return;
        }
        if let Some(child) = &mut t.child {
            terminate_gracefully(child, grace);
            let _ = child.wait();
            t.child = None;
        }
        t.state = TaskState::Killed;
        t.end_time = Some(self.now());
    }

    /// Incrementally scan an output file the task writes, killing the task
    /// the moment `marker` appears. A missing file reads as empty. Returns
    /// which way the run ended.
    pub fn watch_output_and_kill(
        &mut self,
        task: &Task,
        file: &Path,
        marker: &str,
        poll_interval: Duration,
    ) -> WatchOutcome {
        let path = if file.is_absolute() { file.to_path_buf() } else { self.workdir.join(file) };
        let mut offset = 0u64;
        let mut tail = String::new();
        loop {
            if scan_for_marker(&path, &mut offset, &mut tail, marker) {
                self.kill(task, self.cfg.kill_grace);
                return WatchOutcome::KilledOnMarker;
            }
            let state = self.poll(task);
            if state == TaskState::Killed {
                // Killed from outside the watch (manager signal).
                return WatchOutcome::KilledOnMarker;
            }
            if state.is_terminal() {
                return WatchOutcome::CompletedClean;
            }
            std::thread::sleep(poll_interval);
        }
    }

    /// Kill anything still running. Called when the worker winds down so no
    /// child outlives the ensemble.
    pub fn shutdown(&mut self) {
        let tasks: Vec<Task> = self.tasks.clone();
        for task in tasks {
            if !task.state().is_terminal() {
                self.kill(&task, Duration::from_millis(200));
            }
        }
        self.tasks.clear();
    }

    pub fn live_task_count(&self) -> usize {
        self.tasks.iter().filter(|t| !t.state().is_terminal()).count()
    }
}

impl Drop for Executor {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl Task {
    pub fn id(&self) -> u64 {
        self.inner.lock().unwrap().id
    }

    pub fn app_name(&self) -> String {
        self.inner.lock().unwrap().app_name.clone()
    }

    /// Last observed state (does not refresh; use `Executor::poll`).
    pub fn state(&self) -> TaskState {
        self.inner.lock().unwrap().state
    }

    pub fn return_code(&self) -> Option<i32> {
        self.inner.lock().unwrap().return_code
    }

    pub fn retries(&self) -> u32 {
        self.inner.lock().unwrap().retries
    }

    /// OS pid of the launched process, kept after reaping.
    pub fn os_pid(&self) -> Option<u32> {
        self.inner.lock().unwrap().os_pid
    }

    pub fn stdout_path(&self) -> PathBuf {
        self.inner.lock().unwrap().stdout_path.clone()
    }

    pub fn stderr_path(&self) -> PathBuf {
        self.inner.lock().unwrap().stderr_path.clone()
    }

    /// (submit, start, end) in seconds on the executor's clock.
    pub fn timestamps(&self) -> (f64, Option<f64>, Option<f64>) {
        let t = self.inner.lock().unwrap();
        (t.submit_time, t.start_time, t.end_time)
    }

    /// Wall-clock runtime, start to end, once terminal.
    pub fn runtime(&self) -> Option<f64> {
        let t = self.inner.lock().unwrap();
        match (t.start_time, t.end_time) {
            (Some(s), Some(e)) => Some(e - s),
            _ => None,
        }
    }
}

fn poll_inner(t: &mut TaskInner, now: f64) {
    if t.state.is_terminal() {
        return;
    }
    if let Some(child) = &mut t.child {
        match child.try_wait() {
            Ok(Some(status)) => {
                t.return_code = status.code();
                t.state = if status.success() { TaskState::Finished } else { TaskState::Failed };
                t.end_time = Some(now);
                t.child = None;
            }
            Ok(None) => {}
            Err(_) => {
                t.state = TaskState::Failed;
                t.end_time = Some(now);
                t.child = None;
            }
        }
    }
}

fn terminate_gracefully(child: &mut Child, grace: Duration) {
    #[cfg(unix)]
    {
        unsafe {
            libc::kill(child.id() as libc::pid_t, libc::SIGTERM);
        }
        let deadline = Instant::now() + grace;
        while Instant::now() < deadline {
            if matches!(child.try_wait(), Ok(Some(_))) {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
    let _ = child.kill();
}

fn is_executable(path: &Path) -> bool {
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        match std::fs::metadata(path) {
            Ok(meta) => meta.is_file() && meta.permissions().mode() & 0o111 != 0,
            Err(_) => false,
        }
    }
    #[cfg(not(unix))]
    {
        path.is_file()
    }
}

/// Read newly appended bytes and search for the marker, keeping enough tail
/// to catch markers split across reads.
fn scan_for_marker(path: &Path, offset: &mut u64, tail: &mut String, marker: &str) -> bool {
    use std::io::{Read, Seek, SeekFrom};
    let mut file = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(_) => return false, // not created yet
    };
    if file.seek(SeekFrom::Start(*offset)).is_err() {
        return false;
    }
    let mut chunk = String::new();
    if file.read_to_string(&mut chunk).is_err() {
        return false;
    }
    if chunk.is_empty() {
        return false;
    }
    *offset += chunk.len() as u64;
    tail.push_str(&chunk);
    let found = tail.contains(marker);
    if !found && tail.len() > marker.len() {
        let keep = tail.len() - (marker.len() - 1);
        tail.drain(..keep);
    }
    found
}

/// Write a tiny shell script and mark it executable. Test and scenario
/// plumbing for synthetic applications.
pub fn write_script(path: &Path, body: &str) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "#!/bin/sh")?;
    writeln!(f, "{body}")?;
    drop(f);
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o755))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn executor(dir: &Path) -> Executor {
        let mut ex = Executor::new(3, ExecutorConfig::default());
        ex.set_workdir(dir.to_path_buf());
        ex
    }

    #[test]
    fn register_validates() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        let app = dir.path().join("app.sh");
        write_script(&app, "exit 0").unwrap();
        ex.register_app("app", &app, &[]).unwrap();
        assert!(matches!(
            ex.register_app("app", &app, &[]),
            Err(ExecError::DuplicateApp(_))
        ));
        assert!(matches!(
            ex.register_app("ghost", &dir.path().join("missing"), &[]),
            Err(ExecError::MissingExecutable(_))
        ));
        assert!(matches!(
            ex.submit("ghost", &[], 1, "o", "e", false),
            Err(ExecError::UnregisteredApp(_))
        ));
    }

    #[test]
    fn finished_and_failed_states() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        let ok = dir.path().join("ok.sh");
        let bad = dir.path().join("bad.sh");
        write_script(&ok, "exit 0").unwrap();
        write_script(&bad, "exit 3").unwrap();
        ex.register_app("ok", &ok, &[]).unwrap();
        ex.register_app("bad", &bad, &[]).unwrap();

        let t1 = ex.submit("ok", &[], 1, "o1", "e1", false).unwrap();
        match ex.wait(&t1, Some(Duration::from_secs(5))) {
            WaitOutcome::Terminal(TaskState::Finished) => {}
            _ => panic!("unexpected state: {}", t1.state().name()),
        }
        assert_eq!(t1.return_code(), Some(0));

        let t2 = ex.submit("bad", &[], 1, "o2", "e2", false).unwrap();
        match ex.wait(&t2, Some(Duration::from_secs(5))) {
            WaitOutcome::Terminal(TaskState::Failed) => {}
            _ => panic!("expected failure"),
        }
        assert_eq!(t2.return_code(), Some(3));

        let (submit, start, end) = t1.timestamps();
        assert!(submit <= start.unwrap());
        assert!(start.unwrap() <= end.unwrap());
    }

    #[test]
    fn wait_timeout_then_kill() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        let slow = dir.path().join("slow.sh");
        write_script(&slow, "sleep 30").unwrap();
        ex.register_app("slow", &slow, &[]).unwrap();
        let t = ex.submit("slow", &[], 1, "o", "e", false).unwrap();
        match ex.wait(&t, Some(Duration::from_millis(100))) {
            WaitOutcome::Timeout(TaskState::Running) => {}
            _ => panic!("expected running timeout"),
        }
        let before = Instant::now();
        ex.kill(&t, Duration::from_secs(1));
        assert!(before.elapsed() < Duration::from_secs(2));
        assert_eq!(t.state(), TaskState::Killed);
        // Idempotent.
        ex.kill(&t, Duration::from_secs(1));
        assert_eq!(t.state(), TaskState::Killed);
    }

    #[test]
    fn kill_escalates_on_term_resistant_child() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        let stubborn = dir.path().join("stubborn.sh");
        write_script(&stubborn, "trap '' TERM\nsleep 30").unwrap();
        ex.register_app("stubborn", &stubborn, &[]).unwrap();
        let t = ex.submit("stubborn", &[], 1, "o", "e", false).unwrap();
        // Give the script a moment to install its trap.
        std::thread::sleep(Duration::from_millis(150));
        let before = Instant::now();
        ex.kill(&t, Duration::from_millis(300));
        let took = before.elapsed();
        assert_eq!(t.state(), TaskState::Killed);
        assert!(took >= Duration::from_millis(250), "killed too fast: {took:?}");
        assert!(took < Duration::from_secs(3));
    }

    #[test]
    fn env_from_resources_reaches_child() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        ex.set_resources(WorkerResources {
            worker_id: 3,
            set_ids: vec![0, 1],
            nodes: vec!["localhost".into()],
            slots_on_node: vec![0, 1, 2],
        });
        let app = dir.path().join("env.sh");
        write_script(&app, "printf '%s/%s/%s' \"$ENS_VISIBLE_SLOTS\" \"$ENS_NUM_PROCS\" \"$ENS_WORKER_ID\"")
            .unwrap();
        ex.register_app("env", &app, &[]).unwrap();
        let t = ex.submit("env", &[], 2, "out.txt", "err.txt", true).unwrap();
        ex.wait(&t, Some(Duration::from_secs(5)));
        let out = std::fs::read_to_string(dir.path().join("out.txt")).unwrap();
        assert_eq!(out, "0,1,2/2/3");
    }

    #[test]
    fn launch_retries_then_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = Executor::new(1, ExecutorConfig {
            max_retries: 3,
            retry_backoff: Duration::from_millis(250),
            ..Default::default()
        });
        ex.set_workdir(dir.path().to_path_buf());
        let app = dir.path().join("flaky.sh");
        write_script(&app, "exit 0").unwrap();
        ex.register_app("flaky", &app, &[]).unwrap();

        // Remove the execute bit so the first attempts fail to exec, then
        // restore it from another thread mid-backoff.
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&app, std::fs::Permissions::from_mode(0o644)).unwrap();
            let app2 = app.clone();
            let fixer = std::thread::spawn(move || {
                // attempts at ~0ms and ~250ms fail; fix before the ~750ms one
                std::thread::sleep(Duration::from_millis(400));
                std::fs::set_permissions(&app2, std::fs::Permissions::from_mode(0o755)).unwrap();
            });
            let t = ex.submit("flaky", &[], 1, "o", "e", false).unwrap();
            fixer.join().unwrap();
            assert_eq!(t.retries(), 2);
            ex.wait(&t, Some(Duration::from_secs(5)));
            assert_eq!(t.state(), TaskState::Finished);
        }
    }

    #[test]
    fn launch_exhausted_after_retries() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = Executor::new(1, ExecutorConfig {
            max_retries: 1,
            retry_backoff: Duration::from_millis(10),
            ..Default::default()
        });
        ex.set_workdir(dir.path().to_path_buf());
        let app = dir.path().join("never.sh");
        write_script(&app, "exit 0").unwrap();
        ex.register_app("never", &app, &[]).unwrap();
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            std::fs::set_permissions(&app, std::fs::Permissions::from_mode(0o644)).unwrap();
            match ex.submit("never", &[], 1, "o", "e", false) {
                Err(ExecError::LaunchExhausted { attempts: 2, .. }) => {}
                other => panic!("expected LaunchExhausted, got {other:?}"),
            }
        }
    }

    #[test]
    fn shutdown_reaps_running_children() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = executor(dir.path());
        let slow = dir.path().join("slow.sh");
        write_script(&slow, "sleep 30").unwrap();
        ex.register_app("slow", &slow, &[]).unwrap();
        let t = ex.submit("slow", &[], 1, "o", "e", false).unwrap();
        assert_eq!(ex.live_task_count(), 1);
        ex.shutdown();
        assert_eq!(t.state(), TaskState::Killed);
        assert_eq!(ex.live_task_count(), 0);
    }
}
