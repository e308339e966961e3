//! Offset sets and kernel maps: the execution plan of every sparse op.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::voxel::{CoordIndex, VoxelCoord};

/// Ordered list of distinct lattice steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OffsetSet {
    offsets: Vec<[i32; 3]>,
}

impl OffsetSet {
    pub fn new(offsets: Vec<[i32; 3]>) -> Result<Self> {
        let mut sorted = offsets.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != offsets.len() {
            return Err(Error::InvalidInput("offsets must be distinct".into()));
        }
        Ok(Self { offsets })
    }

    /// `{-d, 0, d}^3` in lexicographic order; slot 13 is the origin.
    pub fn dilated(dilation: u32) -> Result<Self> {
        if dilation == 0 {
            return Err(Error::InvalidInput("dilation must be >= 1".into()));
        }
        let d = dilation as i32;
        let mut offsets = Vec::with_capacity(27);
        for dx in [-d, 0, d] {
            for dy in [-d, 0, d] {
                for dz in [-d, 0, d] {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
        Ok(Self { offsets })
    }

    /// `{0, 1}^3`, the child cells of a stride-2 parent.
    pub fn cube2() -> Self {
        let mut offsets = Vec::with_capacity(8);
        for dx in 0..2 {
            for dy in 0..2 {
                for dz in 0..2 {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
        Self { offsets }
    }

    pub fn pointwise() -> Self {
        Self {
            offsets: vec![[0, 0, 0]],
        }
    }

    pub fn as_slice(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn slot_of(&self, off: [i32; 3]) -> Option<usize> {
        self.offsets.iter().position(|&o| o == off)
    }
}

pub fn dilated_offsets(dilation: u32) -> Result<OffsetSet> {
    OffsetSet::dilated(dilation)
}

/// Matches `(in_row, out_row, slot)`, stored sorted by `(out_row, slot)`,
/// with CSR views grouped by output row, input row and slot.
#[derive(Clone, Debug)]
pub struct KernelMap {
    num_in: usize,
    num_slots: usize,
    out_coords: Vec<VoxelCoord>,
    in_rows: Vec<u32>,
    out_rows: Vec<u32>,
    slots: Vec<u16>,
    out_start: Vec<usize>,
    by_in: Vec<u32>,
    in_start: Vec<usize>,
    by_slot: Vec<u32>,
    slot_start: Vec<usize>,
}

fn csr(keys: impl Iterator<Item = usize> + Clone, n_keys: usize) -> (Vec<u32>, Vec<usize>) {
    let mut start = vec![0usize; n_keys + 1];
    for k in keys.clone() {
        start[k + 1] += 1;
    }
    for i in 0..n_keys {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut order = vec![0u32; start[n_keys]];
    // stable: triple ids enter each bucket in ascending order
    for (t, k) in keys.enumerate() {
        order[fill[k]] = t as u32;
        fill[k] += 1;
    }
    (order, start)
}

impl KernelMap {
    /// Assemble from triples; they are re-sorted by `(out_row, slot)`.
    pub fn from_triples(
        num_in: usize,
        out_coords: Vec<VoxelCoord>,
        num_slots: usize,
        mut triples: Vec<(u32, u32, u16)>,
    ) -> Result<Self> {
        let num_out = out_coords.len();
        triples.sort_unstable_by_key(|&(i, o, s)| (o, s, i));
        for w in triples.windows(2) {
            if w[0].1 == w[1].1 && w[0].2 == w[1].2 {
                return Err(Error::Invariant("duplicate (out_row, slot) in kernel map".into()));
            }
        }
        if triples
            .iter()
            .any(|&(i, o, s)| i as usize >= num_in || o as usize >= num_out || s as usize >= num_slots)
        {
            return Err(Error::Invariant("kernel map triple out of bounds".into()));
        }
        let in_rows: Vec<u32> = triples.iter().map(|t| t.0).collect();
        let out_rows: Vec<u32> = triples.iter().map(|t| t.1).collect();
        let slots: Vec<u16> = triples.iter().map(|t| t.2).collect();
        let (_, out_start) = csr(out_rows.iter().map(|&o| o as usize), num_out);
        let (by_in, in_start) = csr(in_rows.iter().map(|&i| i as usize), num_in);
        let (by_slot, slot_start) = csr(slots.iter().map(|&s| s as usize), num_slots);
        Ok(Self {
            num_in,
            num_slots,
            out_coords,
            in_rows,
            out_rows,
            slots,
            out_start,
            by_in,
            in_start,
            by_slot,
            slot_start,
        })
    }

    pub fn num_in(&self) -> usize {
        self.num_in
    }

    pub fn num_out(&self) -> usize {
        self.out_coords.len()
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn out_coords(&self) -> &[VoxelCoord] {
        &self.out_coords
    }

    pub fn len(&self) -> usize {
        self.in_rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_rows.is_empty()
    }

    #[inline]
    pub fn triple(&self, t: usize) -> (usize, usize, usize) {
        (self.in_rows[t] as usize, self.out_rows[t] as usize, self.slots[t] as usize)
    }

    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.len()).map(|t| self.triple(t))
    }

    /// `(in_row, slot)` pairs feeding output `o`, ascending by slot.
    #[inline]
    pub fn for_out(&self, o: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.out_start[o]..self.out_start[o + 1]).map(|t| (self.in_rows[t] as usize, self.slots[t] as usize))
    }

    pub fn out_degree(&self, o: usize) -> usize {
        self.out_start[o + 1] - self.out_start[o]
    }

    /// `(out_row, slot)` pairs reading input `i`.
    #[inline]
    pub fn for_in(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.by_in[self.in_start[i]..self.in_start[i + 1]]
            .iter()
            .map(|&t| (self.out_rows[t as usize] as usize, self.slots[t as usize] as usize))
    }

    /// `(in_row, out_row)` pairs using slot `s`.
    #[inline]
    pub fn for_slot(&self, s: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.by_slot[self.slot_start[s]..self.slot_start[s + 1]]
            .iter()
            .map(|&t| (self.in_rows[t as usize] as usize, self.out_rows[t as usize] as usize))
    }

    /// Swap the roles of inputs and outputs; `in_coords` become the new outputs.
    pub fn transpose(&self, in_coords: &[VoxelCoord]) -> Result<Self> {
        if in_coords.len() != self.num_in {
            return Err(Error::Shape("transpose needs the original input coords".into()));
        }
        let triples = self
            .triples()
            .map(|(i, o, s)| (o as u32, i as u32, s as u16))
            .collect();
        Self::from_triples(self.num_out(), in_coords.to_vec(), self.num_slots, triples)
    }
}

/// Same-level map: `(i, o, s)` iff `in_coords[i] == out_coords[o] + offsets[s]`.
///
/// Offsets are in cell units of the tensor's own level.
pub fn build_kernel_map(
    index: &CoordIndex,
    num_in: usize,
    out_coords: &[VoxelCoord],
    offsets: &OffsetSet,
) -> Result<KernelMap> {
    let mut triples = Vec::with_capacity(out_coords.len() * 4);
    for (o, oc) in out_coords.iter().enumerate() {
        for (s, &off) in offsets.as_slice().iter().enumerate() {
            if let Some(i) = index.get(&oc.offset(off)) {
                triples.push((i as u32, o as u32, s as u16));
            }
        }
    }
    KernelMap::from_triples(num_in, out_coords.to_vec(), offsets.len(), triples)
}

/// Submanifold map over `coords` for a `{-d, 0, d}^3` window.
pub fn submanifold_map(coords: &[VoxelCoord], dilation: u32) -> Result<KernelMap> {
    let index = CoordIndex::build(coords)?;
    build_kernel_map(&index, coords.len(), coords, &OffsetSet::dilated(dilation)?)
}

/// Active sites of one level with lazily built submanifold maps per dilation.
pub struct SiteMaps {
    coords: Vec<VoxelCoord>,
    index: CoordIndex,
    cache: RefCell<BTreeMap<u32, Rc<KernelMap>>>,
}

impl SiteMaps {
    pub fn new(coords: Vec<VoxelCoord>) -> Result<Self> {
        let index = CoordIndex::build(&coords)?;
        Ok(Self {
            coords,
            index,
            cache: RefCell::default(),
        })
    }

    pub fn coords(&self) -> &[VoxelCoord] {
        &self.coords
    }

    pub fn index(&self) -> &CoordIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn dilated(&self, dilation: u32) -> Result<Rc<KernelMap>> {
        if let Some(km) = self.cache.borrow().get(&dilation) {
            return Ok(Rc::clone(km));
        }
        let km = Rc::new(build_kernel_map(
            &self.index,
            self.coords.len(),
            &self.coords,
            &OffsetSet::dilated(dilation)?,
        )?);
        self.cache.borrow_mut().insert(dilation, Rc::clone(&km));
        Ok(km)
    }
}

/// Stride-2 downsampling map: fine site `c` feeds parent `c div 2` at the
/// slot of `c - 2 * parent` in [`OffsetSet::cube2`].
pub fn build_downsample_map(fine: &[VoxelCoord], coarse: &[VoxelCoord]) -> Result<KernelMap> {
    let index = CoordIndex::build(coarse)?;
    let cube = OffsetSet::cube2();
    let mut triples = Vec::with_capacity(fine.len());
    for (i, &c) in fine.iter().enumerate() {
        let p = c.div_floor(2);
        let o = index
            .get(&p)
            .ok_or_else(|| Error::Invariant(format!("parent of {c:?} missing from coarse level")))?;
        let rel = [c.x - 2 * p.x, c.y - 2 * p.y, c.z - 2 * p.z];
        let s = cube.slot_of(rel).expect("floor remainder lies in {0,1}^3");
        triples.push((i as u32, o as u32, s as u16));
    }
    KernelMap::from_triples(fine.len(), coarse.to_vec(), cube.len(), triples)
}
