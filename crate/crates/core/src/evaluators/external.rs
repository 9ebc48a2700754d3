use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::protocol::{encode, parse_trainer_line, EngineMessage, TrainerMessage};
use super::{EarlyStop, EvalRequest, EvalResult, EvalStatus, Evaluator, EvaluatorError};

/// Lower bound for the adaptive timeout, so fast trainers still get time to
/// build the next model.
const MIN_ADAPTIVE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    /// Program and arguments.
    pub command: Vec<String>,
    /// Fixed per-evaluation timeout in seconds. Without it the limit is
    /// twice `max_epochs` times the slowest epoch seen so far.
    #[serde(default)]
    pub timeout_s: Option<f64>,
    /// Limit used before any epoch time has been observed.
    #[serde(default = "default_initial_timeout")]
    pub initial_timeout_s: f64,
}

fn default_initial_timeout() -> f64 {
    600.0
}

impl ExternalConfig {
    pub fn new(command: Vec<String>) -> Self {
        ExternalConfig {
            command,
            timeout_s: None,
            initial_timeout_s: default_initial_timeout(),
        }
    }
}

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

impl Running {
    fn kill(mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Drives a long-running trainer process over the line protocol. The
/// process is started lazily and restarted after a timeout or a bad line.
pub struct ExternalEvaluator {
    config: ExternalConfig,
    proc: Option<Running>,
    slowest_epoch: Option<Duration>,
    /// Raw lines that failed to parse, most recent last.
    pub rejected_lines: Vec<String>,
}

impl ExternalEvaluator {
    pub fn new(config: ExternalConfig) -> Self {
        ExternalEvaluator {
            config,
            proc: None,
            slowest_epoch: None,
            rejected_lines: Vec::new(),
        }
    }

    fn spawn(&self) -> Result<Running, EvaluatorError> {
        let (prog, args) = self.config.command.split_first().ok_or_else(|| EvaluatorError::Spawn {
            command: String::new(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
        })?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| EvaluatorError::Spawn {
                command: self.config.command.join(" "),
                source,
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Running {
            child,
            stdin,
            lines: rx,
        })
    }

    fn limit(&self, max_epochs: u32) -> Duration {
        if let Some(t) = self.config.timeout_s {
            return Duration::from_secs_f64(t);
        }
        match self.slowest_epoch {
            None => Duration::from_secs_f64(self.config.initial_timeout_s),
            Some(s) => (s * 2 * max_epochs).max(MIN_ADAPTIVE_TIMEOUT),
        }
    }

    fn send(&mut self, msg: &EngineMessage) -> Result<(), EvaluatorError> {
        let p = self.proc.as_mut().expect("process running");
        p.stdin.write_all(encode(msg).as_bytes())?;
        p.stdin.flush()?;
        Ok(())
    }

    fn crashed(&mut self) -> EvaluatorError {
        let status = self.proc.take().and_then(|mut p| {
            let _ = p.child.kill();
            p.child.wait().ok()
        });
        EvaluatorError::Crashed(status.map(|s| s.to_string()))
    }

    fn abandon(&mut self) {
        if let Some(p) = self.proc.take() {
            p.kill();
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        self.abandon();
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&mut self, req: &EvalRequest) -> Result<EvalResult, EvaluatorError> {
        if self.proc.is_none() {
            self.proc = Some(self.spawn()?);
        }
        let start = Instant::now();
        let request = EngineMessage::Evaluate {
            arch_id: req.arch_id,
            graph: req.graph.to_json_value(),
            max_epochs: req.max_epochs,
            seed: req.seed,
        };
        if self.send(&request).is_err() {
            return Err(self.crashed());
        }

        let mut stopper = EarlyStop::new(req.tau);
        let mut trace = Vec::new();
        let mut stopped = false;
        let mut last_event = start;
        loop {
            let elapsed = start.elapsed();
            let limit = self.limit(req.max_epochs);
            let Some(remaining) = limit.checked_sub(elapsed) else {
                self.abandon();
                let reason = format!("timeout after {:.1}s", limit.as_secs_f64());
                return Ok(EvalResult::failed(req.arch_id, reason, trace, elapsed.as_secs_f64()));
            };
            let line = match self.proc.as_ref().expect("running").lines.recv_timeout(remaining) {
                Ok(Ok(line)) => line,
                Ok(Err(_)) | Err(RecvTimeoutError::Disconnected) => return Err(self.crashed()),
                Err(RecvTimeoutError::Timeout) => continue,
            };
            let msg = match parse_trainer_line(&line) {
                Ok(m) => m,
                Err(e) => {
                    self.rejected_lines.push(line);
                    self.abandon();
                    return Ok(EvalResult::failed(
                        req.arch_id,
                        format!("parse: {}", e.reason),
                        trace,
                        start.elapsed().as_secs_f64(),
                    ));
                }
            };
            if msg.arch_id() != req.arch_id {
                continue;
            }
            match msg {
                TrainerMessage::Epoch {
                    epoch, val_metric, ..
                } => {
                    let now = Instant::now();
                    let dt = now - last_event;
                    last_event = now;
                    self.slowest_epoch = Some(self.slowest_epoch.map_or(dt, |s| s.max(dt)));
                    if stopped {
                        continue;
                    }
                    trace.push((epoch, val_metric));
                    if stopper.push(val_metric) || stopper.epochs() >= req.max_epochs {
                        stopped = true;
                        if self.send(&EngineMessage::Stop { arch_id: req.arch_id }).is_err() {
                            return Err(self.crashed());
                        }
                    }
                }
                TrainerMessage::Final { val_metric, .. } => {
                    if trace.is_empty() {
                        stopper.push(val_metric);
                        trace.push((1, val_metric));
                    }
                    return Ok(EvalResult {
                        arch_id: req.arch_id,
                        cost: stopper.cost(),
                        epoch_trace: trace,
                        status: EvalStatus::Ok,
                        elapsed_s: start.elapsed().as_secs_f64(),
                    });
                }
                TrainerMessage::Oom {
                    estimated_bytes, ..
                } => {
                    return Ok(EvalResult {
                        arch_id: req.arch_id,
                        cost: None,
                        epoch_trace: trace,
                        status: EvalStatus::Oom { estimated_bytes },
                        elapsed_s: start.elapsed().as_secs_f64(),
                    });
                }
                TrainerMessage::Error { message, .. } => {
                    return Ok(EvalResult::failed(
                        req.arch_id,
                        message,
                        trace,
                        start.elapsed().as_secs_f64(),
                    ));
                }
            }
        }
    }
}
