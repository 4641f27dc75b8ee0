//! Thread/process hierarchy reconstruction.
//!
//! Nodes live in a map keyed by tid and refer to each other by tid. The
//! top level of the forest is the set of children of a synthetic session
//! root (tid 0): the profiled command plus any implicit nodes synthesized
//! for tids whose spawn was never observed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Exec, Exit, Pid, Spawn, StackId, Tid, Timestamp};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum TreeError {
    #[error("thread {0} spawned twice")]
    DuplicateTid(Tid),
    #[error("thread {tid} exits at {t} before its spawn at {spawn_t}")]
    ExitBeforeSpawn { tid: Tid, t: Timestamp, spawn_t: Timestamp },
    #[error("event at {t} for thread {tid} after its exit at {exit_t}")]
    EventAfterExit { tid: Tid, t: Timestamp, exit_t: Timestamp },
}

impl TreeError {
    pub fn code(&self) -> &'static str {
        match self {
            TreeError::DuplicateTid(_) => "DuplicateTid",
            TreeError::ExitBeforeSpawn { .. } => "ExitBeforeSpawn",
            TreeError::EventAfterExit { .. } => "EventAfterExit",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameChange {
    pub t: Timestamp,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessNode {
    pub tid: Tid,
    /// Unknown for implicit nodes that were never seen in a sample.
    pub pid: Option<Pid>,
    /// 0 when the node hangs directly off the session root.
    pub parent_tid: Tid,
    /// Initial name from the spawn, then one entry per exec.
    pub names: Vec<NameChange>,
    pub spawn_t: Option<Timestamp>,
    pub exit_t: Option<Timestamp>,
    pub spawn_sid: Option<StackId>,
    /// Children ordered by (spawn_t, tid) once finalized.
    pub children: Vec<Tid>,
    /// Synthesized for a tid that was referenced before being spawned.
    pub implicit: bool,
    /// No exit was observed; exit_t is the session end.
    pub open_ended: bool,
    /// No spawn was observed; spawn_t is the first time the tid was seen.
    pub spawn_inferred: bool,
}

impl ProcessNode {
    fn implicit(tid: Tid) -> Self {
        ProcessNode {
            tid,
            pid: None,
            parent_tid: 0,
            names: Vec::new(),
            spawn_t: None,
            exit_t: None,
            spawn_sid: None,
            children: Vec::new(),
            implicit: true,
            open_ended: false,
            spawn_inferred: false,
        }
    }

    /// Most recent name, if any.
    pub fn name(&self) -> Option<&str> {
        self.names.last().map(|n| n.name.as_str())
    }
}

/// Nodes created as a side effect of applying an event, in creation order.
pub type Created = Vec<Tid>;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forest {
    /// Children of the synthetic session root.
    pub roots: Vec<Tid>,
    pub nodes: BTreeMap<Tid, ProcessNode>,
    /// First observation time of every node; dropped by `finalize`.
    #[serde(skip)]
    first_seen: BTreeMap<Tid, Timestamp>,
}

impl Forest {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a finalized forest from its persisted parts.
    pub fn from_parts(roots: Vec<Tid>, nodes: BTreeMap<Tid, ProcessNode>) -> Self {
        Forest {
            roots,
            nodes,
            first_seen: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, tid: Tid) -> Option<&ProcessNode> {
        self.nodes.get(&tid)
    }

    /// Whether `tid` shares its pid with its parent, i.e. is a thread rather
    /// than a new process.
    pub fn is_thread(&self, tid: Tid) -> bool {
        let Some(node) = self.nodes.get(&tid) else {
            return false;
        };
        match (node.pid, self.nodes.get(&node.parent_tid).and_then(|p| p.pid)) {
            (Some(pid), Some(parent_pid)) => pid == parent_pid,
            _ => false,
        }
    }

    fn check_live(&self, tid: Tid, t: Timestamp) -> Result<(), TreeError> {
        if let Some(exit_t) = self.nodes.get(&tid).and_then(|n| n.exit_t) {
            return Err(TreeError::EventAfterExit { tid, t, exit_t });
        }
        Ok(())
    }

    fn ensure(&mut self, tid: Tid, t: Timestamp, created: &mut Created) {
        if !self.nodes.contains_key(&tid) {
            self.nodes.insert(tid, ProcessNode::implicit(tid));
            self.first_seen.insert(tid, t);
            self.roots.push(tid);
            created.push(tid);
        }
    }

    pub fn apply_spawn(&mut self, e: &Spawn) -> Result<Created, TreeError> {
        if self.nodes.contains_key(&e.tid) {
            return Err(TreeError::DuplicateTid(e.tid));
        }
        if e.parent_tid != 0 {
            self.check_live(e.parent_tid, e.t)?;
        }
        let mut created = Created::new();
        if e.parent_tid == 0 {
            self.roots.push(e.tid);
        } else {
            self.ensure(e.parent_tid, e.t, &mut created);
            self.nodes
                .get_mut(&e.parent_tid)
                .expect("parent ensured")
                .children
                .push(e.tid);
        }
        self.nodes.insert(
            e.tid,
            ProcessNode {
                tid: e.tid,
                pid: Some(e.pid),
                parent_tid: e.parent_tid,
                names: vec![NameChange {
                    t: e.t,
                    name: e.name.clone(),
                }],
                spawn_t: Some(e.t),
                exit_t: None,
                spawn_sid: e.sid,
                children: Vec::new(),
                implicit: false,
                open_ended: false,
                spawn_inferred: false,
            },
        );
        self.first_seen.insert(e.tid, e.t);
        created.push(e.tid);
        Ok(created)
    }

    pub fn apply_exec(&mut self, e: &Exec) -> Result<Created, TreeError> {
        self.check_live(e.tid, e.t)?;
        let mut created = Created::new();
        self.ensure(e.tid, e.t, &mut created);
        self.nodes
            .get_mut(&e.tid)
            .expect("node ensured")
            .names
            .push(NameChange {
                t: e.t,
                name: e.name.clone(),
            });
        Ok(created)
    }

    pub fn apply_exit(&mut self, e: &Exit) -> Result<Created, TreeError> {
        self.check_live(e.tid, e.t)?;
        if let Some(spawn_t) = self.nodes.get(&e.tid).and_then(|n| n.spawn_t) {
            if e.t < spawn_t {
                return Err(TreeError::ExitBeforeSpawn {
                    tid: e.tid,
                    t: e.t,
                    spawn_t,
                });
            }
        }
        let mut created = Created::new();
        self.ensure(e.tid, e.t, &mut created);
        self.nodes.get_mut(&e.tid).expect("node ensured").exit_t = Some(e.t);
        Ok(created)
    }

    /// Records any other timestamped activity of `tid` (samples, switches).
    pub fn observe(&mut self, tid: Tid, pid: Option<Pid>, t: Timestamp) -> Result<Created, TreeError> {
        self.check_live(tid, t)?;
        let mut created = Created::new();
        self.ensure(tid, t, &mut created);
        let node = self.nodes.get_mut(&tid).expect("node ensured");
        if node.pid.is_none() {
            node.pid = pid;
        }
        Ok(created)
    }

    /// Start of a node's lifetime: its spawn, or when it was first seen.
    pub fn start_of(&self, tid: Tid) -> Option<Timestamp> {
        let node = self.nodes.get(&tid)?;
        node.spawn_t.or_else(|| self.first_seen.get(&tid).copied())
    }

    /// Closes every open node at `session_end`, fills inferred spawn times
    /// and puts children in (spawn_t, tid) order.
    ///
    /// Returns the tids that were closed here, in tid order.
    pub fn finalize(&mut self, session_end: Timestamp) -> Vec<Tid> {
        let mut closed = Vec::new();
        let first_seen = std::mem::take(&mut self.first_seen);
        for node in self.nodes.values_mut() {
            if node.spawn_t.is_none() {
                node.spawn_t = Some(first_seen.get(&node.tid).copied().unwrap_or(0));
                node.spawn_inferred = true;
            }
            let start = node.spawn_t.unwrap_or(0);
            if node.exit_t.is_none() {
                node.exit_t = Some(session_end.max(start));
                node.open_ended = true;
                closed.push(node.tid);
            }
        }
        let order: BTreeMap<Tid, (Timestamp, Tid)> = self
            .nodes
            .values()
            .map(|n| (n.tid, (n.spawn_t.unwrap_or(0), n.tid)))
            .collect();
        let key = |tid: &Tid| order[tid];
        self.roots.sort_by_key(key);
        for node in self.nodes.values_mut() {
            node.children.sort_by_key(key);
        }
        closed
    }

    /// Tids in depth-first pre-order, roots first.
    pub fn preorder(&self) -> Vec<Tid> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<Tid> = self.roots.iter().rev().copied().collect();
        while let Some(tid) = stack.pop() {
            out.push(tid);
            if let Some(node) = self.nodes.get(&tid) {
                stack.extend(node.children.iter().rev().copied());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spawn(parent_tid: Tid, pid: Pid, tid: Tid, t: Timestamp, name: &str) -> Spawn {
        Spawn {
            parent_tid,
            pid,
            tid,
            t,
            sid: None,
            name: name.into(),
        }
    }

    #[test]
    fn thread_spawn_attaches_under_parent() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 100, 0, "work")).unwrap();
        f.apply_spawn(&spawn(100, 100, 101, 5, "work")).unwrap();
        assert_eq!(f.roots, vec![100]);
        assert_eq!(f.get(100).unwrap().children, vec![101]);
        assert!(f.is_thread(101));
        assert!(!f.is_thread(100));
    }

    #[test]
    fn unknown_parent_becomes_implicit_node() {
        let mut f = Forest::new();
        let created = f.apply_spawn(&spawn(999, 5, 5, 10, "child")).unwrap();
        assert_eq!(created, vec![999, 5]);
        let parent = f.get(999).unwrap();
        assert!(parent.implicit);
        assert_eq!(parent.children, vec![5]);
        assert_eq!(f.roots, vec![999]);
    }

    #[test]
    fn duplicate_tid_is_rejected() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 101, 0, "a")).unwrap();
        assert_eq!(
            f.apply_spawn(&spawn(0, 100, 101, 3, "b")),
            Err(TreeError::DuplicateTid(101))
        );
    }

    #[test]
    fn exec_appends_names() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 100, 0, "work")).unwrap();
        f.apply_exec(&Exec { tid: 100, t: 10, name: "child-prog".into() }).unwrap();
        f.apply_exec(&Exec { tid: 100, t: 20, name: "third".into() }).unwrap();
        let names: Vec<_> = f.get(100).unwrap().names.iter().map(|n| (n.t, n.name.as_str())).collect();
        assert_eq!(names, [(0, "work"), (10, "child-prog"), (20, "third")]);
    }

    #[test]
    fn exec_for_unknown_tid_creates_named_implicit_node() {
        let mut f = Forest::new();
        f.apply_exec(&Exec { tid: 200, t: 7, name: "child-prog".into() }).unwrap();
        let n = f.get(200).unwrap();
        assert!(n.implicit);
        assert_eq!(n.name(), Some("child-prog"));
    }

    #[test]
    fn exit_sets_lifetime_end() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 101, 5, "t")).unwrap();
        f.apply_exit(&Exit { tid: 101, t: 90 }).unwrap();
        let n = f.get(101).unwrap();
        assert_eq!((n.spawn_t, n.exit_t), (Some(5), Some(90)));
    }

    #[test]
    fn exit_before_spawn_is_rejected() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 101, 5, "t")).unwrap();
        assert_eq!(
            f.apply_exit(&Exit { tid: 101, t: 3 }),
            Err(TreeError::ExitBeforeSpawn { tid: 101, t: 3, spawn_t: 5 })
        );
    }

    #[test]
    fn activity_after_exit_is_rejected() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 101, 5, "t")).unwrap();
        f.apply_exit(&Exit { tid: 101, t: 90 }).unwrap();
        assert_eq!(
            f.observe(101, Some(100), 95),
            Err(TreeError::EventAfterExit { tid: 101, t: 95, exit_t: 90 })
        );
    }

    #[test]
    fn finalize_closes_open_nodes() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 100, 100, 0, "work")).unwrap();
        f.observe(300, Some(300), 40).unwrap();
        let closed = f.finalize(1000);
        assert_eq!(closed, vec![100, 300]);
        let root = f.get(100).unwrap();
        assert_eq!(root.exit_t, Some(1000));
        assert!(root.open_ended);
        let implicit = f.get(300).unwrap();
        assert_eq!(implicit.spawn_t, Some(40));
        assert!(implicit.spawn_inferred);
    }

    #[test]
    fn finalize_of_empty_forest_is_identity() {
        let mut f = Forest::new();
        assert!(f.finalize(1000).is_empty());
        assert_eq!(f, Forest::new());
    }

    #[test]
    fn children_ordered_by_spawn_then_tid() {
        let mut f = Forest::new();
        f.apply_spawn(&spawn(0, 1, 1, 0, "r")).unwrap();
        f.apply_spawn(&spawn(1, 1, 9, 20, "late")).unwrap();
        f.apply_spawn(&spawn(1, 1, 7, 10, "b")).unwrap();
        f.apply_spawn(&spawn(1, 1, 3, 10, "a")).unwrap();
        f.finalize(100);
        assert_eq!(f.get(1).unwrap().children, vec![3, 7, 9]);
        assert_eq!(f.preorder(), vec![1, 3, 7, 9]);
    }
}
