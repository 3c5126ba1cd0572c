//! Annotation ingestion, windowing and leave-one-out splits.
//!
//! The on-disk format is plain text, one annotation per line:
//!
//! ```text
//! # frame ped_id x y
//! 840 1 8.46 3.59
//! 850 1 8.02 3.70
//! ```
//!
//! Coordinates are world-frame meters. A scene registry is a directory with
//! one such file per scene; the scene name is the file stem.

mod cache;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use cache::{read_window_cache, write_window_cache, SceneWindows, CACHE_VERSION};

use crate::{Error, Result, Vec2, OBS_LEN, PRED_LEN};

/// Neighbors farther than this from the agent at the last observed frame are dropped.
pub const NEIGHBOR_RADIUS: f64 = 10.0;
/// Raw frames between consecutive annotated steps, for the ETH/UCY layout.
pub const DEFAULT_FRAME_STRIDE: i64 = 10;
/// Observed plus predicted steps a window needs.
pub const WINDOW_LEN: usize = OBS_LEN + PRED_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawAnnotation {
    pub frame: i64,
    pub ped_id: i64,
    pub pos: Vec2,
}

/// Parses an annotation file. Rows come back sorted by `(ped_id, frame)`.
pub fn parse_annotation_file(path: impl AsRef<Path>) -> Result<Vec<RawAnnotation>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Parses annotation text; `origin` only labels errors.
pub fn parse_annotations(text: &str, origin: &Path) -> Result<Vec<RawAnnotation>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(
                line_no,
                format!("expected 4 fields `frame ped_id x y`, found {}", fields.len()),
            ));
        }
        let frame = parse_integral(fields[0]).ok_or_else(|| err(line_no, format!("bad frame `{}`", fields[0])))?;
        let ped_id = parse_integral(fields[1]).ok_or_else(|| err(line_no, format!("bad ped_id `{}`", fields[1])))?;
        let x = parse_coord(fields[2]).ok_or_else(|| err(line_no, format!("bad x `{}`", fields[2])))?;
        let y = parse_coord(fields[3]).ok_or_else(|| err(line_no, format!("bad y `{}`", fields[3])))?;
        if let Some(first) = seen.insert((frame, ped_id), line_no) {
            return Err(err(
                line_no,
                format!("duplicate annotation for frame {frame}, ped {ped_id} (first on line {first})"),
            ));
        }
        out.push(RawAnnotation {
            frame,
            ped_id,
            pos: Vec2::new(x, y),
        });
    }
    out.sort_by_key(|a| (a.ped_id, a.frame));
    Ok(out)
}

// Some published variants of the benchmark write ids as `840.0`.
fn parse_integral(s: &str) -> Option<i64> {
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = s.parse().ok()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

fn parse_coord(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Observed track of one neighbor; `None` where it was not annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub ped_id: i64,
    pub track: [Option<Vec2>; OBS_LEN],
}

impl Neighbor {
    /// Position at the last observed step (always present for built windows).
    pub fn last(&self) -> Option<Vec2> {
        self.track[OBS_LEN - 1]
    }
}

/// One sample: 8 observed and 12 future positions plus neighbor context.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackletWindow {
    agent_id: i64,
    start_frame: i64,
    obs: [Vec2; OBS_LEN],
    fut: [Vec2; PRED_LEN],
    neighbors: Vec<Neighbor>,
    dt: f64,
}

impl TrackletWindow {
    pub fn new(
        agent_id: i64,
        start_frame: i64,
        obs: [Vec2; OBS_LEN],
        fut: [Vec2; PRED_LEN],
        neighbors: Vec<Neighbor>,
        dt: f64,
    ) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid(format!("window dt must be positive, got {dt}")));
        }
        if obs.iter().chain(fut.iter()).any(|p| !p.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite position in window of agent {agent_id}"
            )));
        }
        if neighbors.iter().any(|n| n.ped_id == agent_id) {
            return Err(Error::invalid(format!("agent {agent_id} listed as its own neighbor")));
        }
        if neighbors
            .iter()
            .flat_map(|n| n.track.iter().flatten())
            .any(|p| !p.is_finite())
        {
            return Err(Error::invalid("non-finite neighbor position"));
        }
        Ok(Self {
            agent_id,
            start_frame,
            obs,
            fut,
            neighbors,
            dt,
        })
    }

    pub fn agent_id(&self) -> i64 {
        self.agent_id
    }

    pub fn start_frame(&self) -> i64 {
        self.start_frame
    }

    pub fn obs(&self) -> &[Vec2; OBS_LEN] {
        &self.obs
    }

    pub fn fut(&self) -> &[Vec2; PRED_LEN] {
        &self.fut
    }

    pub fn neighbors(&self) -> &[Neighbor] {
        &self.neighbors
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn last_obs(&self) -> Vec2 {
        self.obs[OBS_LEN - 1]
    }

    /// Same window with every position shifted by `c`.
    pub fn translated(&self, c: Vec2) -> Self {
        self.map_positions(|p| p + c)
    }

    /// Same window rotated by `angle` radians about the origin.
    pub fn rotated(&self, angle: f64) -> Self {
        self.map_positions(|p| p.rotate(angle))
    }

    /// Same window with the neighbor list replaced (e.g. permuted).
    pub fn with_neighbors(&self, neighbors: Vec<Neighbor>) -> Result<Self> {
        Self::new(self.agent_id, self.start_frame, self.obs, self.fut, neighbors, self.dt)
    }

    fn map_positions(&self, f: impl Fn(Vec2) -> Vec2) -> Self {
        Self {
            obs: self.obs.map(&f),
            fut: self.fut.map(&f),
            neighbors: self
                .neighbors
                .iter()
                .map(|n| Neighbor {
                    ped_id: n.ped_id,
                    track: n.track.map(|p| p.map(&f)),
                })
                .collect(),
            ..self.clone()
        }
    }
}

/// Slides a 20-step window over every gap-free run of each pedestrian.
///
/// `frame_stride` is the number of raw frames between consecutive steps;
/// two annotations of one pedestrian belong to the same run only if their
/// frames differ by exactly that amount.
pub fn build_windows(annotations: &[RawAnnotation], dt: f64, frame_stride: i64) -> Result<Vec<TrackletWindow>> {
    if frame_stride <= 0 {
        return Err(Error::invalid(format!(
            "frame_stride must be positive, got {frame_stride}"
        )));
    }
    let mut by_ped: BTreeMap<i64, Vec<(i64, Vec2)>> = BTreeMap::new();
    let mut at_frame: BTreeMap<i64, Vec<(i64, Vec2)>> = BTreeMap::new();
    let mut lookup: HashMap<(i64, i64), Vec2> = HashMap::new();
    for a in annotations {
        by_ped.entry(a.ped_id).or_default().push((a.frame, a.pos));
        at_frame.entry(a.frame).or_default().push((a.ped_id, a.pos));
        lookup.insert((a.frame, a.ped_id), a.pos);
    }

    let mut windows = Vec::new();
    for (&ped, track) in by_ped.iter_mut() {
        track.sort_by_key(|(f, _)| *f);
        for run in gap_free_runs(track, frame_stride) {
            if run.len() < WINDOW_LEN {
                continue;
            }
            for start in 0..=run.len() - WINDOW_LEN {
                let steps = &run[start..start + WINDOW_LEN];
                let obs: [Vec2; OBS_LEN] = std::array::from_fn(|k| steps[k].1);
                let fut: [Vec2; PRED_LEN] = std::array::from_fn(|k| steps[OBS_LEN + k].1);
                let last_frame = steps[OBS_LEN - 1].0;
                let agent_last = obs[OBS_LEN - 1];

                let mut neighbors: Vec<Neighbor> = at_frame
                    .get(&last_frame)
                    .into_iter()
                    .flatten()
                    .filter(|(id, pos)| *id != ped && (*pos - agent_last).norm() <= NEIGHBOR_RADIUS)
                    .map(|(id, _)| Neighbor {
                        ped_id: *id,
                        track: std::array::from_fn(|k| lookup.get(&(steps[k].0, *id)).copied()),
                    })
                    .collect();
                neighbors.sort_by_key(|n| n.ped_id);
                windows.push(TrackletWindow::new(ped, steps[0].0, obs, fut, neighbors, dt)?);
            }
        }
    }
    Ok(windows)
}

fn gap_free_runs(track: &[(i64, Vec2)], stride: i64) -> Vec<&[(i64, Vec2)]> {
    let mut runs = Vec::new();
    let mut begin = 0;
    for i in 1..=track.len() {
        if i == track.len() || track[i].0 - track[i - 1].0 != stride {
            runs.push(&track[begin..i]);
            begin = i;
        }
    }
    runs
}

/// Finite-difference velocities and accelerations over the observed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Kinematics {
    pub vel: [Vec2; OBS_LEN],
    pub acc: [Vec2; OBS_LEN],
}

impl Kinematics {
    /// Backward differences; the first velocity copies the second and the
    /// first acceleration is zero so all sequences keep length 8.
    pub fn derive(w: &TrackletWindow) -> Self {
        Self::from_track(w.obs(), w.dt())
    }

    pub fn from_track(obs: &[Vec2; OBS_LEN], dt: f64) -> Self {
        let mut vel = [Vec2::ZERO; OBS_LEN];
        for t in 1..OBS_LEN {
            vel[t] = (obs[t] - obs[t - 1]) * (1.0 / dt);
        }
        vel[0] = vel[1];
        let mut acc = [Vec2::ZERO; OBS_LEN];
        for t in 1..OBS_LEN {
            acc[t] = (vel[t] - vel[t - 1]) * (1.0 / dt);
        }
        Self { vel, acc }
    }

    /// Mean observed speed over the differenced steps.
    pub fn mean_speed(&self) -> f64 {
        self.vel[1..].iter().map(|v| v.norm()).sum::<f64>() / (OBS_LEN - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_scenes: Vec<String>,
    pub test_scene: String,
}

/// One plan per scene, each holding that scene out of training.
pub fn leave_one_out(scenes: &[String]) -> Result<Vec<SplitPlan>> {
    if scenes.len() < 2 {
        return Err(Error::invalid(format!(
            "leave-one-out needs at least 2 scenes, got {}",
            scenes.len()
        )));
    }
    let mut unique = BTreeSet::new();
    if let Some(dup) = scenes.iter().find(|s| !unique.insert(s.as_str())) {
        return Err(Error::invalid(format!("duplicate scene name `{dup}`")));
    }
    Ok(scenes
        .iter()
        .map(|test| SplitPlan {
            train_scenes: scenes.iter().filter(|s| *s != test).cloned().collect(),
            test_scene: test.clone(),
        })
        .collect())
}

/// A named annotation file from a scene registry.
#[derive(Debug, Clone)]
pub struct SceneFile {
    pub name: String,
    pub path: PathBuf,
}

/// Lists scene files (`*.txt`) in `dir`, sorted by name.
pub fn list_scenes(dir: impl AsRef<Path>) -> Result<Vec<SceneFile>> {
    let dir = dir.as_ref();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                scenes.push(SceneFile {
                    name: stem.to_string(),
                    path: path.clone(),
                });
            }
        }
    }
    scenes.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(scenes)
}

/// Writes annotations in the canonical text format.
pub fn write_annotation_file(path: impl AsRef<Path>, annotations: &[RawAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let mut rows: Vec<&RawAnnotation> = annotations.iter().collect();
    rows.sort_by_key(|a| (a.frame, a.ped_id));
    let mut text = String::from("# frame ped_id x y\n");
    for a in rows {
        text.push_str(&format!("{} {} {} {}\n", a.frame, a.ped_id, a.pos.x, a.pos.y));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DT;
    use proptest::prelude::*;

    fn walker(ped: i64, start_frame: i64, steps: usize, origin: Vec2, step: Vec2) -> Vec<RawAnnotation> {
        (0..steps)
            .map(|k| RawAnnotation {
                frame: start_frame + 10 * k as i64,
                ped_id: ped,
                pos: origin + step * k as f64,
            })
            .collect()
    }

    #[test]
    fn parses_rows_and_comments() {
        let text = "# header\n\n840 1 8.46 3.59\n830.0 2 1 2\n";
        let rows = parse_annotations(text, Path::new("scene.txt")).unwrap();
        assert_eq!(
            rows[0],
            RawAnnotation {
                frame: 840,
                ped_id: 1,
                pos: Vec2::new(8.46, 3.59)
            }
        );
        assert_eq!(rows[1].frame, 830);
        assert!(parse_annotations("", Path::new("e.txt")).unwrap().is_empty());
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_annotations("840 1 8.46 3.59\n850 1 8.0\n", Path::new("s.txt")).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
        let err = parse_annotations("840 x 1 2\n", Path::new("s.txt")).unwrap_err();
        assert!(err.to_string().contains("s.txt:1"));
        let err = parse_annotations("840 1 1 2\n840 1 3 4\n", Path::new("s.txt")).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn unreadable_file_is_reported() {
        assert!(matches!(
            parse_annotation_file("/nonexistent/scene.txt"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn window_counts_follow_run_length() {
        let a = walker(1, 0, 25, Vec2::ZERO, Vec2::new(0.5, 0.0));
        assert_eq!(build_windows(&a, DT, 10).unwrap().len(), 25 - 20 + 1);
        let b = walker(2, 0, 19, Vec2::ZERO, Vec2::new(0.5, 0.0));
        assert!(build_windows(&b, DT, 10).unwrap().is_empty());
    }

    #[test]
    fn gaps_split_runs() {
        let mut a = walker(1, 0, 22, Vec2::ZERO, Vec2::new(0.5, 0.0));
        a.extend(walker(1, 1000, 21, Vec2::ZERO, Vec2::new(0.5, 0.0)));
        // 22-step run -> 3 windows, 21-step run -> 2 windows; none straddle the gap.
        let w = build_windows(&a, DT, 10).unwrap();
        let starts: Vec<i64> = w.iter().map(|w| w.start_frame()).collect();
        assert_eq!(starts, vec![0, 10, 20, 1000, 1010]);
    }

    #[test]
    fn lone_pedestrian_has_no_neighbors() {
        let w = build_windows(&walker(1, 0, 20, Vec2::ZERO, Vec2::new(0.5, 0.0)), DT, 10).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].neighbors().is_empty());
    }

    #[test]
    fn neighbors_respect_radius_and_presence() {
        let mut a = walker(1, 0, 20, Vec2::ZERO, Vec2::new(0.5, 0.0));
        // Near neighbor that appears halfway through the observation.
        a.extend(walker(2, 40, 16, Vec2::new(2.0, 1.0), Vec2::new(0.5, 0.0)));
        // Far pedestrian.
        a.extend(walker(3, 0, 20, Vec2::new(0.0, 50.0), Vec2::new(0.5, 0.0)));
        let w = build_windows(&a, DT, 10).unwrap();
        let agent = w.iter().find(|w| w.agent_id() == 1).unwrap();
        assert_eq!(agent.neighbors().len(), 1);
        let n = &agent.neighbors()[0];
        assert_eq!(n.ped_id, 2);
        assert_eq!(n.track.iter().filter(|p| p.is_some()).count(), 4);
        assert!(n.track[3].is_none() && n.track[4].is_some());
    }

    #[test]
    fn window_rejects_self_neighbor() {
        let obs = [Vec2::ZERO; OBS_LEN];
        let fut = [Vec2::ZERO; PRED_LEN];
        let n = Neighbor {
            ped_id: 4,
            track: [Some(Vec2::ZERO); OBS_LEN],
        };
        assert!(TrackletWindow::new(4, 0, obs, fut, vec![n], DT).is_err());
    }

    #[test]
    fn kinematics_examples() {
        let still = Kinematics::from_track(&[Vec2::new(1.0, 2.0); OBS_LEN], DT);
        assert!(still.vel.iter().chain(still.acc.iter()).all(|v| *v == Vec2::ZERO));

        let uniform: [Vec2; OBS_LEN] = std::array::from_fn(|t| Vec2::new(t as f64, 0.0));
        let k = Kinematics::from_track(&uniform, DT);
        assert!(k.vel.iter().all(|v| (v.x - 2.5).abs() < 1e-12 && v.y == 0.0));
        assert!(k.acc.iter().all(|a| a.norm() < 1e-9));
        assert!((k.mean_speed() - 2.5).abs() < 1e-12);

        // x(τ) = τ² sampled at τ = t·dt: backward differences give a = 2 exactly from t ≥ 2.
        let quad: [Vec2; OBS_LEN] = std::array::from_fn(|t| {
            let tau = t as f64 * DT;
            Vec2::new(tau * tau, 0.0)
        });
        let k = Kinematics::from_track(&quad, DT);
        for t in 2..OBS_LEN {
            assert!((k.acc[t].x - 2.0).abs() < 1e-9, "t={t}: {}", k.acc[t].x);
            // Backward difference equals the closed-form derivative at the midpoint.
            let mid = (t as f64 - 0.5) * DT;
            assert!((k.vel[t].x - 2.0 * mid).abs() < 1e-9);
        }
        assert_eq!(k.acc[0], Vec2::ZERO);
    }

    #[test]
    fn leave_one_out_plans() {
        let names: Vec<String> = ["eth", "hotel", "univ", "zara1", "zara2"].map(String::from).to_vec();
        let plans = leave_one_out(&names).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            assert_eq!(p.train_scenes.len(), 4);
            assert!(!p.train_scenes.contains(&p.test_scene));
        }
        assert_eq!(leave_one_out(&names[..2]).unwrap().len(), 2);
        assert!(leave_one_out(&names[..1]).is_err());
        assert!(leave_one_out(&["a".to_string(), "a".to_string()]).is_err());
    }

    proptest! {
        #[test]
        fn windowing_is_translation_equivariant(cx in -100.0..100.0f64, cy in -100.0..100.0f64, n in 20usize..30) {
            let mut a = walker(1, 0, n, Vec2::new(0.3, 0.1), Vec2::new(0.4, 0.05));
            a.extend(walker(2, 0, n, Vec2::new(1.0, 2.0), Vec2::new(0.3, -0.1)));
            let c = Vec2::new(cx, cy);
            let shifted: Vec<RawAnnotation> = a.iter().map(|r| RawAnnotation { pos: r.pos + c, ..*r }).collect();
            let w0 = build_windows(&a, DT, 10).unwrap();
            let w1 = build_windows(&shifted, DT, 10).unwrap();
            prop_assert_eq!(w0.len(), w1.len());
            for (a, b) in w0.iter().zip(&w1) {
                prop_assert_eq!(a.neighbors().len(), b.neighbors().len());
                for (p, q) in a.obs().iter().chain(a.fut()).zip(b.obs().iter().chain(b.fut())) {
                    prop_assert!(((*p + c) - *q).norm() < 1e-9);
                }
            }
        }

        #[test]
        fn kinematics_reintegrate_to_observations(pts in proptest::collection::vec((-20.0..20.0f64, -20.0..20.0f64), OBS_LEN)) {
            let obs: [Vec2; OBS_LEN] = std::array::from_fn(|t| Vec2::new(pts[t].0, pts[t].1));
            let k = Kinematics::from_track(&obs, DT);
            let mut x = obs[0];
            for t in 1..OBS_LEN {
                x += k.vel[t] * DT;
                prop_assert!((x - obs[t]).norm() < 1e-9);
            }
        }
    }
}
