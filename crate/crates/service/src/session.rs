//! Labeling sessions and their append-only JSONL logs.
//!
//! Each session owns `<data_dir>/<session_id>.jsonl`. The first line is a
//! `created` event; every accepted label adds one `label` line. A line is
//! written and synced before the request that produced it is acknowledged,
//! so replaying the file rebuilds the exact in-memory state.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use pointsup::dataset::Dataset;
use pointsup::mask::BoundingBox;
use pointsup::sim::{
    simulate_instance, AnnotationMeta, LabeledPoint, NoiseMode, PointAnnotation, PointAnnotationFile, PointLabel,
    PointSource,
};
use serde::{Deserialize, Serialize};

use crate::error::{ServiceError, ServiceResult};

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// One point to label, in simulate order.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub task_id: usize,
    pub instance_id: u64,
    pub image_id: u64,
    pub category: String,
    /// Box the point was sampled from.
    pub bbox: BoundingBox,
    pub x: f64,
    pub y: f64,
    /// Ground-truth label at the point.
    pub truth: PointLabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Created {
        session_id: String,
        dataset_id: String,
        n_points: usize,
        seed: u64,
        created_at: u64,
    },
    Label {
        task_id: usize,
        label: PointLabel,
        elapsed_ms: f64,
        server_ts: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub dataset_id: String,
    pub n_points: usize,
    pub seed: u64,
    pub created_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub label: PointLabel,
    pub elapsed_ms: f64,
    pub server_ts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub labeled: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub task_id: usize,
    pub label: PointLabel,
    pub progress: Progress,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub labeled: usize,
    pub total: usize,
    pub mean_s_per_point: Option<f64>,
    pub agreement: Option<f64>,
}

/// Outcome of a label submission.
#[derive(Clone, Debug, PartialEq)]
pub enum Submitted {
    Appended(Ack),
    /// Same label for an already-labeled task; nothing was written.
    Duplicate(Ack),
}

impl Submitted {
    pub fn ack(&self) -> &Ack {
        match self {
            Submitted::Appended(a) | Submitted::Duplicate(a) => a,
        }
    }
}

pub fn log_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join(format!("{session_id}.jsonl"))
}

/// The task list for `(dataset, n_points, seed)`; instances without
/// foreground are skipped, as in simulation.
pub fn build_tasks(dataset: &Dataset, n_points: usize, seed: u64) -> ServiceResult<Vec<Task>> {
    let mut tasks = Vec::new();
    for inst in dataset.instances.iter().filter(|i| !i.mask.is_empty()) {
        let ann = simulate_instance(inst, n_points, seed)?;
        let bbox = inst.with_derived_bbox()?.bbox;
        for p in ann.points {
            tasks.push(Task {
                task_id: tasks.len(),
                instance_id: inst.instance_id,
                image_id: inst.image_id,
                category: inst.category.clone(),
                bbox,
                x: p.x,
                y: p.y,
                truth: p.label,
            });
        }
    }
    Ok(tasks)
}

pub struct Session {
    pub info: SessionInfo,
    pub tasks: Vec<Task>,
    pub labels: Vec<LabelRecord>,
    agree: usize,
    elapsed_total_ms: f64,
    log: File,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session")
            .field("info", &self.info)
            .field("cursor", &self.labels.len())
            .field("total", &self.tasks.len())
            .finish()
    }
}

fn write_line(file: &mut File, event: &LogEvent) -> ServiceResult<()> {
    let mut line = serde_json::to_vec(event)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

fn sync_dir(dir: &Path) {
    // directory fsync is best effort; not every platform supports it
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
}

impl Session {
    /// Creates the session and its log.
    pub fn create(data_dir: &Path, dataset: &Dataset, n_points: usize, seed: u64) -> ServiceResult<Self> {
        let tasks = build_tasks(dataset, n_points, seed)?;
        let info = SessionInfo {
            session_id: uuid::Uuid::new_v4().simple().to_string(),
            dataset_id: dataset.id.clone(),
            n_points,
            seed,
            created_at: now_ms(),
        };
        std::fs::create_dir_all(data_dir)?;
        let mut log = OpenOptions::new()
            .append(true)
            .create_new(true)
            .open(log_path(data_dir, &info.session_id))?;
        write_line(
            &mut log,
            &LogEvent::Created {
                session_id: info.session_id.clone(),
                dataset_id: info.dataset_id.clone(),
                n_points,
                seed,
                created_at: info.created_at,
            },
        )?;
        sync_dir(data_dir);
        Ok(Self {
            info,
            tasks,
            labels: Vec::new(),
            agree: 0,
            elapsed_total_ms: 0.0,
            log,
        })
    }

    /// Rebuilds a session from its log. A torn final line (no newline) is
    /// an unacknowledged write and is truncated away.
    pub fn replay(path: &Path, lookup: impl Fn(&str) -> Option<std::sync::Arc<Dataset>>) -> ServiceResult<Self> {
        let bytes = std::fs::read(path)?;
        let good_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        let mut lines = bytes[..good_len].split(|&b| b == b'\n').filter(|l| !l.is_empty());
        let corrupt = |msg: String| ServiceError::Corrupt(format!("{}: {msg}", path.display()));

        let first = lines.next().ok_or_else(|| corrupt("empty log".into()))?;
        let info = match serde_json::from_slice(first)? {
            LogEvent::Created {
                session_id,
                dataset_id,
                n_points,
                seed,
                created_at,
            } => SessionInfo {
                session_id,
                dataset_id,
                n_points,
                seed,
                created_at,
            },
            other => return Err(corrupt(format!("first event is {other:?}"))),
        };
        let dataset = lookup(&info.dataset_id).ok_or_else(|| ServiceError::UnknownDataset(info.dataset_id.clone()))?;
        let tasks = build_tasks(&dataset, info.n_points, info.seed)?;

        if good_len < bytes.len() {
            OpenOptions::new().write(true).open(path)?.set_len(good_len as u64)?;
        }
        let log = OpenOptions::new().append(true).open(path)?;
        let mut session = Self {
            info,
            tasks,
            labels: Vec::new(),
            agree: 0,
            elapsed_total_ms: 0.0,
            log,
        };
        for line in lines {
            match serde_json::from_slice(line)? {
                LogEvent::Label {
                    task_id,
                    label,
                    elapsed_ms,
                    server_ts,
                } => {
                    if task_id != session.cursor() || task_id >= session.tasks.len() {
                        return Err(corrupt(format!("label for task {task_id} at cursor {}", session.cursor())));
                    }
                    session.record(LabelRecord {
                        label,
                        elapsed_ms,
                        server_ts,
                    });
                }
                other => return Err(corrupt(format!("unexpected event {other:?}"))),
            }
        }
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.info.session_id
    }

    pub fn cursor(&self) -> usize {
        self.labels.len()
    }

    pub fn progress(&self) -> Progress {
        Progress {
            labeled: self.labels.len(),
            total: self.tasks.len(),
        }
    }

    pub fn next_task(&self) -> Option<&Task> {
        self.tasks.get(self.cursor())
    }

    fn record(&mut self, rec: LabelRecord) {
        if rec.label == self.tasks[self.labels.len()].truth {
            self.agree += 1;
        }
        self.elapsed_total_ms += rec.elapsed_ms;
        self.labels.push(rec);
    }

    fn ack(&self, task_id: usize, label: PointLabel) -> Ack {
        Ack {
            task_id,
            label,
            progress: Progress {
                labeled: task_id + 1,
                total: self.tasks.len(),
            },
        }
    }

    pub fn submit(&mut self, task_id: usize, label: PointLabel, elapsed_ms: f64) -> ServiceResult<Submitted> {
        if !(elapsed_ms.is_finite() && elapsed_ms >= 0.0) {
            return Err(ServiceError::Invalid(format!("elapsed_ms must be finite and >= 0, got {elapsed_ms}")));
        }
        let cursor = self.cursor();
        if task_id < cursor {
            let prior = self.labels[task_id].label;
            return if prior == label {
                Ok(Submitted::Duplicate(self.ack(task_id, label)))
            } else {
                Err(ServiceError::Conflict { task_id, cursor })
            };
        }
        if task_id > cursor || task_id >= self.tasks.len() {
            return Err(ServiceError::OutOfOrder { task_id, cursor });
        }
        let rec = LabelRecord {
            label,
            elapsed_ms,
            server_ts: now_ms(),
        };
        write_line(
            &mut self.log,
            &LogEvent::Label {
                task_id,
                label,
                elapsed_ms,
                server_ts: rec.server_ts,
            },
        )?;
        self.record(rec);
        Ok(Submitted::Appended(self.ack(task_id, label)))
    }

    pub fn stats(&self) -> Stats {
        let n = self.labels.len();
        Stats {
            labeled: n,
            total: self.tasks.len(),
            mean_s_per_point: (n > 0).then(|| self.elapsed_total_ms / n as f64 / 1000.0),
            agreement: (n > 0).then(|| self.agree as f64 / n as f64),
        }
    }

    fn meta(&self) -> AnnotationMeta {
        AnnotationMeta {
            n_points: self.info.n_points,
            seed: self.info.seed,
            noise_mode: NoiseMode::None,
            noise_rate: 0.0,
        }
    }

    /// Labeled points grouped per instance, in task order.
    pub fn annotations(&self) -> Vec<PointAnnotation> {
        let meta = self.meta();
        let mut out: Vec<PointAnnotation> = Vec::new();
        for (task, rec) in self.tasks.iter().zip(&self.labels) {
            let point = LabeledPoint {
                x: task.x,
                y: task.y,
                label: rec.label,
                source: PointSource::Human,
            };
            match out.last_mut() {
                Some(a) if a.instance_id == task.instance_id => a.points.push(point),
                _ => out.push(PointAnnotation {
                    instance_id: task.instance_id,
                    points: vec![point],
                    meta,
                }),
            }
        }
        out
    }

    pub fn export(&self) -> PointAnnotationFile {
        PointAnnotationFile::from_annotations(&self.info.dataset_id, self.meta(), Some(PointSource::Human), &self.annotations())
    }
}
