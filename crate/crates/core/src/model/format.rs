//! Binary model container.
//!
//! ```text
//! magic "FPSRMDL\0" | u32 version | header | arrays... | u32 CRC32
//! ```
//!
//! All integers and floats are little-endian. Every array is prefixed with
//! its element count as `u64`; `V` is additionally prefixed with its row and
//! column counts and stored column-major. The CRC covers every byte before
//! the trailer.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use super::{ModelHeader, SimilarityCsr, SimilarityModel};
use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::partition::{PartitionAssignment, TraceNode};
use crate::spectral::SpectralBasis;
use crate::sparse::IdMap;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"FPSRMDL\0";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.write_u32::<LE>(v).unwrap();
    }
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).unwrap();
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).unwrap();
    }
    fn f64s(&mut self, xs: &[f64]) {
        self.usize(xs.len());
        for &x in xs {
            self.f64(x);
        }
    }
    fn u32s(&mut self, xs: &[u32]) {
        self.usize(xs.len());
        for &x in xs {
            self.u32(x);
        }
    }
    fn usizes(&mut self, xs: &[usize]) {
        self.usize(xs.len());
        for &x in xs {
            self.usize(x);
        }
    }
    fn opt_usize(&mut self, v: Option<usize>) {
        self.u8(v.is_some() as u8);
        self.usize(v.unwrap_or(0));
    }
    fn strings(&mut self, xs: &[String]) {
        self.usize(xs.len());
        for s in xs {
            self.usize(s.len());
            self.0.extend_from_slice(s.as_bytes());
        }
    }
}

struct Reader<'a>(Cursor<&'a [u8]>);

fn truncated(e: std::io::Error) -> Error {
    Error::ModelCorrupt(format!("truncated payload: {e}"))
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }
    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(truncated)
    }
    fn u32(&mut self) -> Result<u32> {
        self.0.read_u32::<LE>().map_err(truncated)
    }
    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(truncated)
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::ModelCorrupt(format!("count {v} overflows")))
    }
    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(truncated)
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.checked_mul(elem).is_none_or(|b| b > self.remaining()) {
            return Err(Error::ModelCorrupt(format!("array of {n} elements exceeds file size")));
        }
        Ok(n)
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len(4)?;
        (0..n).map(|_| self.u32()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn opt_usize(&mut self) -> Result<Option<usize>> {
        let flag = self.u8()?;
        let v = self.usize()?;
        Ok((flag != 0).then_some(v))
    }
    fn strings(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n)
            .map(|_| {
                let len = self.len(1)?;
                let mut buf = vec![0u8; len];
                self.0.read_exact(&mut buf).map_err(truncated)?;
                String::from_utf8(buf).map_err(|e| Error::ModelCorrupt(format!("id is not UTF-8: {e}")))
            })
            .collect()
    }
}

pub(super) fn encode(model: &SimilarityModel) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);

    let h = &model.header;
    let a = &h.admm;
    w.f64(model.lambda);
    for x in [a.theta1, a.theta2, a.eta, a.lambda, a.rho] {
        w.f64(x);
    }
    w.usize(a.max_iter);
    w.f64(a.prune_threshold);
    w.f64(a.tol);
    w.usize(h.k);
    w.f64(h.tau);
    w.u64(h.seed);
    w.usize(h.n_users);
    w.usize(h.n_items);
    w.u32(h.fingerprint);

    let b = &model.basis;
    w.u32s(b.items());
    w.usize(b.v().nrows());
    w.usize(b.v().ncols());
    w.f64s(b.v().as_slice());
    w.f64s(b.sigma());
    w.f64s(b.d_inv_sqrt());
    w.f64s(b.d_sqrt());

    w.usize(model.s.n);
    w.usizes(&model.s.indptr);
    w.u32s(&model.s.indices);
    w.f64s(&model.s.values);

    let asg = &model.assignment;
    w.f64(asg.tau());
    w.u32s(asg.assignment());
    w.usize(asg.trace().len());
    for t in asg.trace() {
        w.usize(t.id);
        w.opt_usize(t.parent);
        w.usize(t.depth);
        w.usize(t.size);
        w.u8(t.fiedler_value.is_some() as u8);
        w.f64(t.fiedler_value.unwrap_or(0.0));
        w.opt_usize(t.split.map(|s| s.0));
        w.opt_usize(t.split.map(|s| s.1));
        w.opt_usize(t.partition.map(|p| p as usize));
        w.u8(t.unsplittable as u8);
    }

    w.strings(model.user_ids.ids());
    w.strings(model.item_ids.ids());

    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub(super) fn decode(bytes: &[u8]) -> Result<SimilarityModel> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::ModelCorrupt("not a model file (bad magic)".into()));
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().expect("4-byte trailer"));
    if crc32fast::hash(payload) != stored {
        return Err(Error::ModelCorrupt("checksum mismatch".into()));
    }
    let mut r = Reader(Cursor::new(payload));
    r.0.set_position(MAGIC.len() as u64);
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::ModelVersionError {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let lambda = r.f64()?;
    let admm = AdmmConfig {
        theta1: r.f64()?,
        theta2: r.f64()?,
        eta: r.f64()?,
        lambda: r.f64()?,
        rho: r.f64()?,
        max_iter: r.usize()?,
        prune_threshold: r.f64()?,
        tol: r.f64()?,
    };
    let header = ModelHeader {
        version,
        admm,
        k: r.usize()?,
        tau: r.f64()?,
        seed: r.u64()?,
        n_users: r.usize()?,
        n_items: r.usize()?,
        fingerprint: r.u32()?,
    };

    let items = r.u32s()?;
    let (rows, cols) = (r.usize()?, r.usize()?);
    let v_data = r.f64s()?;
    if rows.checked_mul(cols) != Some(v_data.len()) {
        return Err(Error::ModelCorrupt(format!("V holds {} values, not {rows}x{cols}", v_data.len())));
    }
    let v = DMatrix::from_vec(rows, cols, v_data);
    let basis = SpectralBasis::from_parts(items, v, r.f64s()?, r.f64s()?, r.f64s()?)
        .map_err(|e| Error::ModelCorrupt(e.to_string()))?;

    let s = SimilarityCsr {
        n: r.usize()?,
        indptr: r.usizes()?,
        indices: r.u32s()?,
        values: r.f64s()?,
    };
    if s.indptr.len() != s.n + 1
        || s.indptr.last() != Some(&s.indices.len())
        || s.indices.len() != s.values.len()
        || s.indptr.windows(2).any(|w| w[0] > w[1])
        || s.indices.iter().any(|&j| j as usize >= s.n)
    {
        return Err(Error::ModelCorrupt("inconsistent CSR arrays for S".into()));
    }

    let tau = r.f64()?;
    let assignment = r.u32s()?;
    let n_nodes = r.len(1)?;
    let mut trace = Vec::with_capacity(n_nodes);
    for _ in 0..n_nodes {
        let id = r.usize()?;
        let parent = r.opt_usize()?;
        let depth = r.usize()?;
        let size = r.usize()?;
        let has_value = r.u8()? != 0;
        let value = r.f64()?;
        let left = r.opt_usize()?;
        let right = r.opt_usize()?;
        let partition = r.opt_usize()?.map(|p| p as u32);
        let unsplittable = r.u8()? != 0;
        trace.push(TraceNode {
            id,
            parent,
            depth,
            size,
            fiedler_value: has_value.then_some(value),
            split: left.zip(right),
            partition,
            unsplittable,
        });
    }
    let assignment =
        PartitionAssignment::from_assignment(assignment, tau, trace).map_err(|e| Error::ModelCorrupt(e.to_string()))?;

    let user_ids = IdMap::from_ids(r.strings()?).map_err(|e| Error::ModelCorrupt(e.to_string()))?;
    let item_ids = IdMap::from_ids(r.strings()?).map_err(|e| Error::ModelCorrupt(e.to_string()))?;
    if r.remaining() != 0 {
        return Err(Error::ModelCorrupt(format!("{} trailing bytes", r.remaining())));
    }
    if basis.n_items() != s.n || assignment.assignment().len() != s.n || item_ids.len() != s.n {
        return Err(Error::ModelCorrupt("component sizes disagree".into()));
    }
    Ok(SimilarityModel::from_parts(header, lambda, basis, s, assignment, user_ids, item_ids))
}

pub fn save(model: &SimilarityModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<SimilarityModel> {
    decode(&fs::read(path)?)
}
