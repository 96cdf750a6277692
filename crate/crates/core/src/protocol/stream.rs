use std::collections::BTreeSet;

use crate::codec::VideoClip;
use crate::error::{CramError, Result};

/// One segment of the class-incremental stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: u32,
    pub classes: Vec<u32>,
    pub train: Vec<VideoClip>,
    pub eval: Vec<VideoClip>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Class sets pairwise disjoint, every clip labelled within its task.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(CramError::InvalidArgument("stream has no tasks".into()));
        }
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            if task.classes.is_empty() || task.train.is_empty() || task.eval.is_empty() {
                return Err(CramError::InvalidArgument(format!("task {} is empty", task.task_id)));
            }
            for &c in &task.classes {
                if !seen.insert(c) {
                    return Err(CramError::InvalidArgument(format!(
                        "class {c} appears in more than one task (task {})",
                        task.task_id
                    )));
                }
            }
            for clip in task.train.iter().chain(&task.eval) {
                if !task.classes.contains(&clip.label) || clip.task_id != task.task_id {
                    return Err(CramError::InvalidArgument(format!(
                        "clip {} (label {}, task {}) does not belong to task {}",
                        clip.clip_id, clip.label, clip.task_id, task.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Highest class id in the stream plus one.
    pub fn class_count(&self) -> usize {
        self.tasks
            .iter()
            .flat_map(|t| t.classes.iter())
            .max()
            .map_or(0, |&c| c as usize + 1)
    }
}
