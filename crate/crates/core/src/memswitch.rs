//! Page-mapping cost model for weight loading and KV-cache mapping.
//!
//! Weight loads run as a two-stage pipeline: chunk `c + 1` is mapped while
//! chunk `c` is being copied, so only the first chunk's mapping sits on the
//! critical path when mapping a chunk is no slower than copying it. KV pages
//! are mapped in the background and only stall inference when the engine
//! consumes pages faster than they can be mapped. Unmaps are asynchronous and
//! are queued on a per-GPU utility timeline.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::Millis;

/// Host-to-GPU link and page-table parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub bandwidth_bytes_per_ms: f64,
    /// Page-table update cost per page. Zero disables mapping cost.
    pub map_ms_per_page: f64,
    pub page_size: u64,
    pub chunk_pages: u64,
}

impl LinkParams {
    pub fn pages_for(&self, bytes: u64) -> u64 {
        bytes.div_ceil(self.page_size)
    }

    pub fn chunk_map_ms(&self) -> f64 {
        self.chunk_pages as f64 * self.map_ms_per_page
    }

    pub fn chunk_transfer_ms(&self) -> f64 {
        (self.chunk_pages * self.page_size) as f64 / self.bandwidth_bytes_per_ms
    }

    /// Whether steady-state mapping keeps up with the copy engine.
    pub fn mapping_hidden(&self) -> bool {
        self.chunk_map_ms() <= self.chunk_transfer_ms()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Map,
    Unmap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MapTarget {
    Slot(u64),
    Kv,
}

/// One page-table operation as recorded on a GPU's utility timeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingOp {
    pub gpu_id: usize,
    pub target: MapTarget,
    pub pages: u64,
    pub kind: MapKind,
    pub issue_time: Millis,
    pub map_ms_per_page: f64,
}

impl MappingOp {
    pub fn duration_ms(&self) -> f64 {
        self.pages as f64 * self.map_ms_per_page
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChunkSchedule {
    pub pages: u64,
    pub bytes: u64,
    pub map_done: f64,
    pub transfer_start: f64,
    pub transfer_done: f64,
}

/// Result of scheduling one pipelined weight load. Times are relative to the
/// start of the load, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferPlan {
    pub total_bytes: u64,
    pub bandwidth_bytes_per_ms: f64,
    pub chunk_pages: u64,
    pub finish_time: f64,
    pub critical_path_stall: f64,
    pub chunks: Vec<ChunkSchedule>,
}

impl TransferPlan {
    pub fn transfer_lower_bound(&self) -> f64 {
        self.total_bytes as f64 / self.bandwidth_bytes_per_ms
    }

    pub fn first_chunk_map(&self) -> f64 {
        self.chunks.first().map(|c| c.map_done).unwrap_or(0.0)
    }

    /// Bytes resident after `t` ms.
    pub fn bytes_at(&self, t: f64) -> u64 {
        let mut done = 0u64;
        for c in &self.chunks {
            if t >= c.transfer_done {
                done += c.bytes;
            } else {
                if t > c.transfer_start {
                    let frac = (t - c.transfer_start) / (c.transfer_done - c.transfer_start);
                    done += (c.bytes as f64 * frac).floor() as u64;
                }
                break;
            }
        }
        done
    }

    /// Earliest time at which at least `bytes` are resident.
    pub fn time_to_bytes(&self, bytes: u64) -> f64 {
        if bytes == 0 {
            return 0.0;
        }
        let mut done = 0u64;
        for c in &self.chunks {
            if done + c.bytes >= bytes {
                let need = (bytes - done) as f64;
                return c.transfer_start + need / self.bandwidth_bytes_per_ms;
            }
            done += c.bytes;
        }
        self.finish_time
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        for c in &self.chunks {
            wtr.serialize(c)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Schedules a load of `bytes` through the map/copy pipeline.
pub fn pipelined_load(bytes: u64, link: &LinkParams) -> TransferPlan {
    assert!(
        link.bandwidth_bytes_per_ms > 0.0,
        "bandwidth must be positive"
    );
    assert!(link.chunk_pages >= 1 && link.page_size >= 1);
    let chunk_bytes = link.chunk_pages * link.page_size;
    let mut chunks = Vec::new();
    let mut remaining = bytes;
    let (mut map_done, mut xfer_done) = (0.0f64, 0.0f64);
    while remaining > 0 {
        let b = remaining.min(chunk_bytes);
        let pages = b.div_ceil(link.page_size);
        map_done += pages as f64 * link.map_ms_per_page;
        let start = xfer_done.max(map_done);
        xfer_done = start + b as f64 / link.bandwidth_bytes_per_ms;
        chunks.push(ChunkSchedule {
            pages,
            bytes: b,
            map_done,
            transfer_start: start,
            transfer_done: xfer_done,
        });
        remaining -= b;
    }
    let lower = bytes as f64 / link.bandwidth_bytes_per_ms;
    let first_map = chunks.first().map(|c| c.map_done).unwrap_or(0.0);
    TransferPlan {
        total_bytes: bytes,
        bandwidth_bytes_per_ms: link.bandwidth_bytes_per_ms,
        chunk_pages: link.chunk_pages,
        finish_time: xfer_done,
        critical_path_stall: (xfer_done - lower - first_map).max(0.0),
        chunks,
    }
}

/// Stall incurred when KV pages are consumed at `consumption_pages_per_ms`
/// while `pages` are mapped in the background at `map_ms_per_page`.
pub fn background_kv_mapping(
    pages: u64,
    map_ms_per_page: f64,
    consumption_pages_per_ms: f64,
) -> f64 {
    if pages == 0 || map_ms_per_page <= 0.0 || consumption_pages_per_ms <= 0.0 {
        return 0.0;
    }
    let consume_ms_per_page = 1.0 / consumption_pages_per_ms;
    if map_ms_per_page <= consume_ms_per_page {
        0.0
    } else {
        pages as f64 * (map_ms_per_page - consume_ms_per_page)
    }
}

/// Per-GPU FIFO of asynchronous page-table work (unmaps and background maps).
#[derive(Debug, Clone, Default)]
pub struct UtilityTimeline {
    free_at: f64,
    ops: Vec<MappingOp>,
}

impl UtilityTimeline {
    /// Queues `op` and returns when it completes.
    pub fn enqueue(&mut self, op: MappingOp) -> f64 {
        let start = self.free_at.max(op.issue_time as f64);
        self.free_at = start + op.duration_ms();
        self.ops.push(op);
        self.free_at
    }

    pub fn free_at(&self) -> f64 {
        self.free_at
    }

    pub fn ops(&self) -> &[MappingOp] {
        &self.ops
    }
}
