//! Versioned binary cache of built windows, grouped by scene.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic   b"PCWC"
//! version u32
//! scenes  u32
//! per scene:
//!   name        u32 length + UTF-8 bytes
//!   windows     u32
//!   per window:
//!     agent_id i64, start_frame i64, dt f64
//!     obs 8 × (x f64, y f64), fut 12 × (x f64, y f64)
//!     neighbors u32
//!     per neighbor: ped_id i64, 8 × (present u8, x f64, y f64)
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Neighbor, TrackletWindow};
use crate::binio::*;
use crate::{Error, Result, Vec2, OBS_LEN, PRED_LEN};

const MAGIC: &[u8; 4] = b"PCWC";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindows {
    pub name: String,
    pub windows: Vec<TrackletWindow>,
}

pub fn write_window_cache(path: impl AsRef<Path>, scenes: &[SceneWindows]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(&mut w, scenes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_window_cache(path: impl AsRef<Path>) -> Result<Vec<SceneWindows>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "not a window cache (bad magic)".into(),
        });
    }
    let version = read_u32(&mut r).map_err(|e| Error::io(path, e))?;
    if version != CACHE_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported cache version {version}, expected {CACHE_VERSION}"),
        });
    }
    decode(&mut r).map_err(|e| match e {
        DecodeError::Io(e) => Error::io(path, e),
        DecodeError::Invalid(err) => Error::Format {
            path: path.to_path_buf(),
            msg: err.to_string(),
        },
    })
}

fn write_vec2<W: Write>(w: &mut W, p: Vec2) -> std::io::Result<()> {
    write_f64(w, p.x)?;
    write_f64(w, p.y)
}

fn read_vec2<R: Read>(r: &mut R) -> std::io::Result<Vec2> {
    Ok(Vec2::new(read_f64(r)?, read_f64(r)?))
}

fn encode<W: Write>(w: &mut W, scenes: &[SceneWindows]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, CACHE_VERSION)?;
    write_u32(w, scenes.len() as u32)?;
    for scene in scenes {
        write_str(w, &scene.name)?;
        write_u32(w, scene.windows.len() as u32)?;
        for win in &scene.windows {
            write_i64(w, win.agent_id())?;
            write_i64(w, win.start_frame())?;
            write_f64(w, win.dt())?;
            for p in win.obs().iter().chain(win.fut()) {
                write_vec2(w, *p)?;
            }
            write_u32(w, win.neighbors().len() as u32)?;
            for n in win.neighbors() {
                write_i64(w, n.ped_id)?;
                for slot in &n.track {
                    write_u8(w, slot.is_some() as u8)?;
                    write_vec2(w, slot.unwrap_or(Vec2::ZERO))?;
                }
            }
        }
    }
    Ok(())
}

enum DecodeError {
    Io(std::io::Error),
    Invalid(Error),
}

impl From<std::io::Error> for DecodeError {
    fn from(e: std::io::Error) -> Self {
        DecodeError::Io(e)
    }
}

fn decode<R: Read>(r: &mut R) -> std::result::Result<Vec<SceneWindows>, DecodeError> {
    let n_scenes = read_u32(r)?;
    let mut scenes = Vec::with_capacity(n_scenes as usize);
    for _ in 0..n_scenes {
        let name = read_str(r)?;
        let n_windows = read_u32(r)?;
        let mut windows = Vec::with_capacity(n_windows as usize);
        for _ in 0..n_windows {
            let agent_id = read_i64(r)?;
            let start_frame = read_i64(r)?;
            let dt = read_f64(r)?;
            let mut obs = [Vec2::ZERO; OBS_LEN];
            for p in obs.iter_mut() {
                *p = read_vec2(r)?;
            }
            let mut fut = [Vec2::ZERO; PRED_LEN];
            for p in fut.iter_mut() {
                *p = read_vec2(r)?;
            }
            let n_neigh = read_u32(r)?;
            let mut neighbors = Vec::with_capacity(n_neigh as usize);
            for _ in 0..n_neigh {
                let ped_id = read_i64(r)?;
                let mut track = [None; OBS_LEN];
                for slot in track.iter_mut() {
                    let present = read_u8(r)? != 0;
                    let p = read_vec2(r)?;
                    *slot = present.then_some(p);
                }
                neighbors.push(Neighbor { ped_id, track });
            }
            let win =
                TrackletWindow::new(agent_id, start_frame, obs, fut, neighbors, dt).map_err(DecodeError::Invalid)?;
            windows.push(win);
        }
        scenes.push(SceneWindows { name, windows });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_windows, RawAnnotation};
    use crate::DT;

    fn scene() -> SceneWindows {
        let mut rows = Vec::new();
        for ped in 0..3 {
            for k in 0..22 {
                // Ped 2 skips one frame inside the observation of some windows.
                if ped == 2 && k == 3 {
                    continue;
                }
                rows.push(RawAnnotation {
                    frame: 10 * k,
                    ped_id: ped,
                    pos: Vec2::new(0.1 * k as f64 + ped as f64, 0.37 * ped as f64),
                });
            }
        }
        SceneWindows {
            name: "toy".into(),
            windows: build_windows(&rows, DT, 10).unwrap(),
        }
    }

    #[test]
    fn round_trips_and_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let scenes = vec![scene()];
        write_window_cache(&a, &scenes).unwrap();
        write_window_cache(&b, &scenes).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(read_window_cache(&a).unwrap(), scenes);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        fs::write(&p, b"nope-not-a-cache").unwrap();
        assert!(matches!(read_window_cache(&p), Err(Error::Format { .. })));
    }
}
