//! Binary index blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      7 bytes  "MVRIDX1"
//! backend    u8       0 = flat, 1 = ivf_flat, 2 = lsh
//! rows       u64      gallery rows the index was built over
//! dim        u64
//! -- ivf_flat --
//! nlist u64, nprobe u64, seed u64
//! centroids  nlist * dim f32
//! per list:  len u64, then len u32 rows
//! -- lsh --
//! bits u64, seed u64
//! planes     bits * dim f32
//! codes      rows * ceil(bits / 64) u64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{FlatIndex, IvfIndex, LshIndex, NeighborIndex};
use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

pub const INDEX_MAGIC: &[u8; 7] = b"MVRIDX1";

const TAG_FLAT: u8 = 0;
const TAG_IVF: u8 = 1;
const TAG_LSH: u8 = 2;

fn io_err(e: std::io::Error) -> Error {
    Error::IndexFormat(e.to_string())
}

fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

fn get_len<R: Read>(r: &mut R, limit: usize, what: &str) -> Result<usize> {
    let v = get_u64(r)? as usize;
    if v > limit {
        return Err(Error::IndexFormat(format!("{what} {v} exceeds {limit}")));
    }
    Ok(v)
}

fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

fn get_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Serializes an index.
pub fn write_index<W: Write>(index: &NeighborIndex<'_>, mut w: W) -> Result<()> {
    let g = index.gallery();
    w.write_all(INDEX_MAGIC).map_err(io_err)?;
    let tag = match index {
        NeighborIndex::Flat(_) => TAG_FLAT,
        NeighborIndex::IvfFlat(_) => TAG_IVF,
        NeighborIndex::Lsh(_) => TAG_LSH,
    };
    w.write_all(&[tag]).map_err(io_err)?;
    put_u64(&mut w, g.rows() as u64)?;
    put_u64(&mut w, g.dim() as u64)?;
    match index {
        NeighborIndex::Flat(_) => {}
        NeighborIndex::IvfFlat(ivf) => {
            put_u64(&mut w, ivf.nlist() as u64)?;
            put_u64(&mut w, ivf.nprobe() as u64)?;
            put_u64(&mut w, ivf.seed())?;
            put_f32s(&mut w, ivf.centroids())?;
            for list in ivf.lists() {
                put_u64(&mut w, list.len() as u64)?;
                for r in list {
                    w.write_all(&r.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
        NeighborIndex::Lsh(lsh) => {
            put_u64(&mut w, lsh.bits() as u64)?;
            put_u64(&mut w, lsh.seed())?;
            put_f32s(&mut w, lsh.planes())?;
            for c in lsh.codes() {
                put_u64(&mut w, *c)?;
            }
        }
    }
    w.flush().map_err(io_err)
}

/// Deserializes an index over `gallery`. Rejects blobs built over a gallery
/// with a different shape.
pub fn read_index<'g, R: Read>(mut r: R, gallery: &'g FeatureMatrix) -> Result<NeighborIndex<'g>> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != INDEX_MAGIC {
        return Err(Error::IndexFormat("bad magic".into()));
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag).map_err(io_err)?;
    let rows = get_u64(&mut r)? as usize;
    let dim = get_u64(&mut r)? as usize;
    if rows != gallery.rows() {
        return Err(Error::IndexFormat(format!(
            "index built over {rows} gallery rows, gallery has {}",
            gallery.rows()
        )));
    }
    if dim != gallery.dim() {
        return Err(Error::IndexFormat(format!(
            "index dim {dim} does not match gallery dim {}",
            gallery.dim()
        )));
    }
    let index = match tag[0] {
        TAG_FLAT => NeighborIndex::Flat(FlatIndex::build(gallery)?),
        TAG_IVF => {
            let nlist = get_len(&mut r, rows, "nlist")?;
            let nprobe = get_u64(&mut r)? as usize;
            let seed = get_u64(&mut r)?;
            let centroids = get_f32s(&mut r, nlist * dim)?;
            let mut lists = Vec::with_capacity(nlist);
            for _ in 0..nlist {
                let len = get_len(&mut r, rows, "list length")?;
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf).map_err(io_err)?;
                lists.push(
                    buf.chunks_exact(4)
                        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                );
            }
            NeighborIndex::IvfFlat(IvfIndex::from_parts(
                gallery, centroids, lists, nprobe, seed,
            )?)
        }
        TAG_LSH => {
            let bits = get_len(&mut r, 1 << 20, "bits")?;
            let seed = get_u64(&mut r)?;
            let planes = get_f32s(&mut r, bits * dim)?;
            let words = bits.div_ceil(64);
            let mut codes = Vec::with_capacity(rows * words);
            for _ in 0..rows * words {
                codes.push(get_u64(&mut r)?);
            }
            NeighborIndex::Lsh(LshIndex::from_parts(gallery, bits, seed, planes, codes)?)
        }
        other => return Err(Error::IndexFormat(format!("unknown backend tag {other}"))),
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(io_err)? != 0 {
        return Err(Error::IndexFormat("trailing bytes".into()));
    }
    Ok(index)
}

pub fn save_index(path: impl AsRef<Path>, index: &NeighborIndex<'_>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_index(index, BufWriter::new(file))
}

pub fn load_index<'g>(
    path: impl AsRef<Path>,
    gallery: &'g FeatureMatrix,
) -> Result<NeighborIndex<'g>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_index(BufReader::new(file), gallery)
}
