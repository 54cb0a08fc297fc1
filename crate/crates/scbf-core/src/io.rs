//! Artifact persistence: JSON for fields, measures, and reports; CSV for
//! the plot-ready tables; a small versioned binary format for trajectory
//! checkpoints. Everything here is deterministic byte-for-byte given the
//! same inputs — reproducibility of artifacts is a contract, not a nicety.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Result, ScbfError};
use crate::measure::{EmpiricalMeasure, MeasureMeta};
use crate::scalar::Scalar;
use crate::spectral::{FieldRecord, Lattice, SpectralField};
use crate::stopping::{Regions, ViSolution};

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn save_field<T: Scalar>(path: &Path, x: &SpectralField<T>) -> Result<()> {
    write_json(path, &x.to_record())
}

pub fn load_field<T: Scalar>(path: &Path) -> Result<SpectralField<T>> {
    let rec: FieldRecord = read_json(path)?;
    SpectralField::from_record(&rec)
}

/// Serialized snapshot collection: metadata, stream block lengths, and the
/// snapshots themselves in canonical mode order.
#[derive(Serialize, Deserialize)]
pub struct MeasureRecord {
    pub meta: MeasureMeta,
    pub block_lens: Vec<usize>,
    pub snapshots: Vec<FieldRecord>,
}

pub fn save_measure<T: Scalar>(path: &Path, m: &EmpiricalMeasure<T>) -> Result<()> {
    let rec = MeasureRecord {
        meta: m.meta.clone(),
        block_lens: m.blocks.iter().map(|b| b.len()).collect(),
        snapshots: m.snapshots.iter().map(|s| s.to_record()).collect(),
    };
    write_json(path, &rec)
}

pub fn load_measure<T: Scalar>(path: &Path) -> Result<EmpiricalMeasure<T>> {
    let rec: MeasureRecord = read_json(path)?;
    if rec.block_lens.iter().sum::<usize>() != rec.snapshots.len() {
        return Err(ScbfError::BadFieldRecord(
            "block lengths do not cover the snapshots".into(),
        ));
    }
    let snapshots: Vec<SpectralField<T>> = rec
        .snapshots
        .iter()
        .map(|r| SpectralField::from_record(r))
        .collect::<Result<_>>()?;
    let lattice = match snapshots.first() {
        Some(s) => s.lattice().clone(),
        None => {
            return Err(ScbfError::BadFieldRecord(
                "measure file holds no snapshots".into(),
            ))
        }
    };
    for s in &snapshots {
        if !lattice.same_geometry(s.lattice()) {
            return Err(ScbfError::LatticeMismatch(
                lattice.describe(),
                s.lattice().describe(),
            ));
        }
    }
    let mut blocks = Vec::with_capacity(rec.block_lens.len());
    let mut at = 0;
    for len in rec.block_lens {
        blocks.push(at..at + len);
        at += len;
    }
    Ok(EmpiricalMeasure { lattice, snapshots, blocks, meta: rec.meta })
}

/// Per-step path diagnostics (one row per recorded time).
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub norm_h: f64,
    pub norm_v: f64,
    pub norm_lr: f64,
    pub energy_residual: f64,
}

/// Moment-check table row: an estimate against its theoretical bound.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct MomentRow {
    pub functional: String,
    pub value: f64,
    pub se: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Generic check table row (generator identities, resolvent bounds, …).
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub target: f64,
    pub se: f64,
    pub pass: bool,
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    for r in rows {
        w.serialize(r).map_err(ScbfError::from)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<D: DeserializeOwned>(path: &Path) -> Result<Vec<D>> {
    let mut r = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec.map_err(ScbfError::from)?);
    }
    Ok(out)
}

/// Obstacle-problem export: one row per (time frame, grid node) with the
/// value, multiplier, and stopping flag. The multiplier attached to frame n
/// is the one that produced it (zero for the initial frame).
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct ViGridRow {
    pub t: f64,
    pub y0: f64,
    pub y1: f64,
    pub phi: f64,
    pub zeta: f64,
    pub stop: bool,
}

pub fn vi_grid_rows<T: Scalar>(
    grid: &crate::stopping::ModeGrid<T>,
    sol: &ViSolution<T>,
    regions: &Regions,
) -> Vec<ViGridRow> {
    let mut rows = Vec::with_capacity(sol.phi.len() * grid.len());
    for (n, frame) in sol.phi.iter().enumerate() {
        let t = sol.times[n].to_f64_lossy();
        for idx in 0..grid.len() {
            let y = grid.node(idx);
            rows.push(ViGridRow {
                t,
                y0: y[0].to_f64_lossy(),
                y1: y[1].to_f64_lossy(),
                phi: frame[idx].to_f64_lossy(),
                zeta: if n == 0 {
                    0.0
                } else {
                    sol.zeta[n - 1][idx].to_f64_lossy()
                },
                stop: regions.stopping[n][idx],
            });
        }
    }
    rows
}

/// Free-boundary trace: midpoints of grid edges where the stopping flag
/// flips, one row per crossing per frame.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct BoundaryRow {
    pub t: f64,
    pub axis: usize,
    pub y0: f64,
    pub y1: f64,
}

pub fn region_boundary_rows<T: Scalar>(
    grid: &crate::stopping::ModeGrid<T>,
    sol: &ViSolution<T>,
    regions: &Regions,
) -> Vec<BoundaryRow> {
    let mut rows = Vec::new();
    let shape = grid.shape;
    for (n, mask) in regions.stopping.iter().enumerate() {
        let t = sol.times[n].to_f64_lossy();
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                let here = mask[grid.index(i0, i1)];
                if i0 + 1 < shape[0] && mask[grid.index(i0 + 1, i1)] != here {
                    let a = grid.node(grid.index(i0, i1));
                    let b = grid.node(grid.index(i0 + 1, i1));
                    rows.push(BoundaryRow {
                        t,
                        axis: 0,
                        y0: ((a[0] + b[0]) * T::half()).to_f64_lossy(),
                        y1: a[1].to_f64_lossy(),
                    });
                }
                if grid.dims == 2 && i1 + 1 < shape[1] && mask[grid.index(i0, i1 + 1)] != here
                {
                    let a = grid.node(grid.index(i0, i1));
                    let b = grid.node(grid.index(i0, i1 + 1));
                    rows.push(BoundaryRow {
                        t,
                        axis: 1,
                        y0: a[0].to_f64_lossy(),
                        y1: ((a[1] + b[1]) * T::half()).to_f64_lossy(),
                    });
                }
            }
        }
    }
    rows
}

const TRAJ_MAGIC: &[u8; 8] = b"SCBFTRJ1";
const TRAJ_VERSION: u32 = 1;

/// Binary trajectory checkpoint: little-endian, header {magic, version,
/// cutoff, period, pair count, frame count}, then per frame the time stamp
/// followed by the canonical complex amplitudes.
pub fn save_trajectory<T: Scalar>(
    path: &Path,
    lat: &Arc<Lattice<T>>,
    frames: &[(T, SpectralField<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJ_MAGIC)?;
    w.write_all(&TRAJ_VERSION.to_le_bytes())?;
    w.write_all(&(lat.cutoff() as u64).to_le_bytes())?;
    w.write_all(&lat.period().to_f64_lossy().to_le_bytes())?;
    w.write_all(&(lat.pairs().len() as u64).to_le_bytes())?;
    w.write_all(&(frames.len() as u64).to_le_bytes())?;
    for (t, x) in frames {
        if !lat.same_geometry(x.lattice()) {
            return Err(ScbfError::LatticeMismatch(
                lat.describe(),
                x.lattice().describe(),
            ));
        }
        w.write_all(&t.to_f64_lossy().to_le_bytes())?;
        for &k in lat.pairs() {
            let c = x.amps()[lat.idx(k)];
            w.write_all(&c.re.to_f64_lossy().to_le_bytes())?;
            w.write_all(&c.im.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectory<T: Scalar>(path: &Path) -> Result<Vec<(T, SpectralField<T>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TRAJ_MAGIC {
        return Err(ScbfError::BadFieldRecord("not a trajectory file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != TRAJ_VERSION {
        return Err(ScbfError::BadFieldRecord(format!(
            "trajectory version {version} unsupported"
        )));
    }
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let l = f64::from_le_bytes(b8);
    if !(l.is_finite() && l > 0.0) || n == 0 {
        return Err(ScbfError::BadFieldRecord("bad trajectory geometry".into()));
    }
    let lat = Lattice::new(n, T::of(l));
    r.read_exact(&mut b8)?;
    let n_pairs = u64::from_le_bytes(b8) as usize;
    if n_pairs != lat.pairs().len() {
        return Err(ScbfError::BadFieldRecord(format!(
            "pair count {n_pairs} does not match cutoff {n}"
        )));
    }
    r.read_exact(&mut b8)?;
    let n_frames = u64::from_le_bytes(b8) as usize;
    let mut out = Vec::with_capacity(n_frames);
    for _ in 0..n_frames {
        r.read_exact(&mut b8)?;
        let t = f64::from_le_bytes(b8);
        let mut x = SpectralField::zero(&lat);
        for pi in 0..n_pairs {
            let k = lat.pairs()[pi];
            r.read_exact(&mut b8)?;
            let re = f64::from_le_bytes(b8);
            r.read_exact(&mut b8)?;
            let im = f64::from_le_bytes(b8);
            if !(re.is_finite() && im.is_finite()) {
                return Err(ScbfError::BadFieldRecord("non-finite amplitude".into()));
            }
            x.set_pair(k, num_complex::Complex::new(T::of(re), T::of(im)));
        }
        out.push((T::of(t), x));
    }
    Ok(out)
}
