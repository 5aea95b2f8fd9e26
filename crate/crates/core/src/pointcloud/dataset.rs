//! `R2PD` binary dataset container.
//!
//! Layout (little-endian): magic `"R2PD"`, `u32` sample count, then per sample
//! the input cloud and the ground-truth cloud, each as a `u64` point count
//! followed by that many `f64` triples.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Point, PointCloud, Source};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"R2PD";

const MAX_POINTS: u64 = 1 << 28;

/// One (coarse input, ground truth) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: PointCloud,
    pub target: PointCloud,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `train_count` samples for training, the rest held out.
    pub fn split(&self, train_count: usize) -> Result<(Dataset, Dataset)> {
        if train_count > self.len() {
            return Err(Error::usage(format!(
                "cannot take {train_count} training samples from {}",
                self.len()
            )));
        }
        let (a, b) = self.samples.split_at(train_count);
        Ok((Dataset::new(a.to_vec()), Dataset::new(b.to_vec())))
    }

    /// Common (n, m) when every sample agrees.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or(Error::EmptyInput("dataset"))?;
        let dims = (first.input.len(), first.target.len());
        if self.samples.iter().any(|s| (s.input.len(), s.target.len()) != dims) {
            return Err(Error::usage("dataset samples have inconsistent point counts"));
        }
        Ok(dims)
    }
}

fn write_points<W: Write>(w: &mut W, pc: &PointCloud) -> Result<()> {
    w.write_u64::<LittleEndian>(pc.len() as u64)?;
    for p in pc.points() {
        for v in p {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }
    Ok(())
}

fn read_points<R: Read>(r: &mut R, source: Source) -> Result<PointCloud> {
    let n = r.read_u64::<LittleEndian>()?;
    if n > MAX_POINTS {
        return Err(Error::Format(format!("implausible point count {n}")));
    }
    let mut flat = vec![0.0; n as usize * 3];
    r.read_f64_into::<LittleEndian>(&mut flat)?;
    let pts: Vec<Point> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    PointCloud::new(pts, source)
}

pub fn write_dataset_to<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    let count = u32::try_from(ds.len()).map_err(|_| Error::usage("too many samples"))?;
    w.write_u32::<LittleEndian>(count)?;
    for s in &ds.samples {
        write_points(w, &s.input)?;
        write_points(w, &s.target)?;
    }
    Ok(())
}

pub fn read_dataset_from<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!("expected dataset magic R2PD, got {magic:?}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut samples = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let input = read_points(r, Source::UnionInput)?;
        let target = read_points(r, Source::GroundTruth)?;
        samples.push(Sample { input, target });
    }
    Ok(Dataset::new(samples))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_dataset_to(&mut w, ds)?;
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    read_dataset_from(&mut BufReader::new(fs::File::open(path)?))
}
