//! Subnetwork bookkeeping: which kernels belong to which task and which
//! parameters are frozen.
//!
//! Masking granularity is the kernel, i.e. one (out-channel, in-channel)
//! pair of a convolution layer. A task's subnetwork is a bitset over all
//! kernels of the architecture. The frozen set is always the exact union of
//! the stored task masks; masks may overlap (shared kernels are reused
//! read-only by later tasks).
//!
//! A filter's bias is owned by the first task whose mask contains any kernel
//! of that filter and is frozen from that point on.

use crate::bitset::Bitset;
use crate::error::{Error, Result};
use alloc::format;
use alloc::vec::Vec;

/// Position of one kernel inside the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelAddress {
    pub layer: usize,
    pub out_ch: usize,
    pub in_ch: usize,
}

/// Channel dimensions of one prunable convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerDims {
    pub out_ch: usize,
    pub in_ch: usize,
}

/// Flat addressing scheme over every kernel and filter of an architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KernelLayout {
    layers: Vec<LayerDims>,
    kernel_offsets: Vec<usize>,
    filter_offsets: Vec<usize>,
    total_kernels: usize,
    total_filters: usize,
}

impl KernelLayout {
    pub fn new(layers: Vec<LayerDims>) -> Self {
        let mut kernel_offsets = Vec::with_capacity(layers.len());
        let mut filter_offsets = Vec::with_capacity(layers.len());
        let mut kernels = 0;
        let mut filters = 0;
        for dims in &layers {
            kernel_offsets.push(kernels);
            filter_offsets.push(filters);
            kernels += dims.out_ch * dims.in_ch;
            filters += dims.out_ch;
        }
        KernelLayout {
            layers,
            kernel_offsets,
            filter_offsets,
            total_kernels: kernels,
            total_filters: filters,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_dims(&self, layer: usize) -> LayerDims {
        self.layers[layer]
    }

    pub fn kernel_count(&self) -> usize {
        self.total_kernels
    }

    pub fn filter_count(&self) -> usize {
        self.total_filters
    }

    pub fn kernel_index(&self, addr: KernelAddress) -> usize {
        let dims = self.layers[addr.layer];
        debug_assert!(addr.out_ch < dims.out_ch && addr.in_ch < dims.in_ch);
        self.kernel_offsets[addr.layer] + addr.out_ch * dims.in_ch + addr.in_ch
    }

    pub fn address_of(&self, index: usize) -> KernelAddress {
        debug_assert!(index < self.total_kernels);
        let layer = match self.kernel_offsets.binary_search(&index) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        let rel = index - self.kernel_offsets[layer];
        let dims = self.layers[layer];
        KernelAddress {
            layer,
            out_ch: rel / dims.in_ch,
            in_ch: rel % dims.in_ch,
        }
    }

    pub fn filter_index(&self, layer: usize, out_ch: usize) -> usize {
        debug_assert!(out_ch < self.layers[layer].out_ch);
        self.filter_offsets[layer] + out_ch
    }

    /// View of one layer's kernels inside a full-architecture bitset.
    pub fn layer_kernels<'a>(&self, bits: &'a Bitset, layer: usize) -> LayerKernels<'a> {
        debug_assert_eq!(bits.len(), self.total_kernels);
        LayerKernels {
            bits,
            offset: self.kernel_offsets[layer],
            in_ch: self.layers[layer].in_ch,
        }
    }

    /// Architecture fingerprint, used to reject masks built for other models.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for dims in &self.layers {
            for v in [dims.out_ch as u64, dims.in_ch as u64] {
                for b in v.to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Per-layer kernel activity view used by the convolution kernels.
#[derive(Clone, Copy)]
pub struct LayerKernels<'a> {
    bits: &'a Bitset,
    offset: usize,
    in_ch: usize,
}

impl<'a> LayerKernels<'a> {
    #[inline]
    pub fn active(&self, out_ch: usize, in_ch: usize) -> bool {
        self.bits.get(self.offset + out_ch * self.in_ch + in_ch)
    }
}

/// The kernels one task's subnetwork uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskMask {
    pub task: usize,
    pub bits: Bitset,
}

/// Ordered collection of frozen task masks plus derived sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskRegistry {
    layout: KernelLayout,
    fingerprint: u64,
    masks: Vec<TaskMask>,
    frozen: Bitset,
    frozen_filters: Bitset,
}

impl MaskRegistry {
    pub fn new(layout: KernelLayout) -> Self {
        let kernels = layout.kernel_count();
        let filters = layout.filter_count();
        let fingerprint = layout.fingerprint();
        MaskRegistry {
            layout,
            fingerprint,
            masks: Vec::new(),
            frozen: Bitset::zeros(kernels),
            frozen_filters: Bitset::zeros(filters),
        }
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn task_count(&self) -> usize {
        self.masks.len()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskMask> {
        self.masks.iter()
    }

    /// Reject masks or models built against another architecture.
    pub fn check_fingerprint(&self, other: u64) -> Result<()> {
        if self.fingerprint != other {
            return Err(Error::Registry(format!(
                "architecture fingerprint mismatch: registry {:#x}, model {:#x}",
                self.fingerprint, other
            )));
        }
        Ok(())
    }

    /// Kernels not yet assigned to any task; these are the only trainable ones.
    pub fn trainable_kernels(&self) -> Bitset {
        self.frozen.complement()
    }

    pub fn frozen_kernels(&self) -> &Bitset {
        &self.frozen
    }

    /// Filters whose bias is frozen (any kernel of the filter is frozen).
    pub fn frozen_filters(&self) -> &Bitset {
        &self.frozen_filters
    }

    /// Filters whose bias is still trainable.
    pub fn trainable_filters(&self) -> Bitset {
        self.frozen_filters.complement()
    }

    /// Store a completed task's mask; it is immutable afterwards.
    pub fn freeze_task(&mut self, task: usize, bits: Bitset) -> Result<()> {
        if bits.len() != self.layout.kernel_count() {
            return Err(Error::Registry(format!(
                "mask length {} does not match architecture kernel count {}",
                bits.len(),
                self.layout.kernel_count()
            )));
        }
        if self.masks.iter().any(|m| m.task == task) {
            return Err(Error::Registry(format!("task {task} already frozen")));
        }
        if bits.is_empty() {
            return Err(Error::Registry(format!("task {task}: empty mask")));
        }
        self.frozen.union_with(&bits);
        for layer in 0..self.layout.layer_count() {
            let dims = self.layout.layer_dims(layer);
            let view = self.layout.layer_kernels(&bits, layer);
            for oc in 0..dims.out_ch {
                if (0..dims.in_ch).any(|ic| view.active(oc, ic)) {
                    let fi = self.layout.filter_index(layer, oc);
                    self.frozen_filters.set(fi, true);
                }
            }
        }
        self.masks.push(TaskMask { task, bits });
        Ok(())
    }

    /// The stored mask of a finished task, unchanged.
    pub fn active_mask(&self, task: usize) -> Result<&TaskMask> {
        self.masks
            .iter()
            .find(|m| m.task == task)
            .ok_or(Error::UnknownTask(task))
    }
}
