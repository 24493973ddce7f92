//! 2D 5-point stencil halo exchange.
//!
//! The global mesh is split into a grid of nodes, and each node's part into a
//! `side × side` grid of thread blocks. Threads read neighbor blocks on their
//! own node directly and exchange edges with other nodes through the runtime.
//! After each exchange every block takes one Jacobi step, and the final mesh
//! is compared with a sequential run.

use std::sync::{Barrier, RwLock};
use std::time::Instant;

use vcirt::{Comm, Config, Rank, Request, World};

use crate::common::{check, median, run_threads, BenchError, BenchResult, Harness, Mode, RowKey, Table};

#[derive(Debug, Clone)]
pub struct Stencil {
    pub mode: Mode,
    /// Nodes along each dimension.
    pub node_grid: (usize, usize),
    /// Threads per node, a perfect square.
    pub threads: usize,
    /// Cells per side of one thread's block.
    pub block: usize,
    pub iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dir {
    North,
    South,
    West,
    East,
}

const DIRS: [Dir; 4] = [Dir::North, Dir::South, Dir::West, Dir::East];

impl Dir {
    fn opposite(self) -> Dir {
        match self {
            Dir::North => Dir::South,
            Dir::South => Dir::North,
            Dir::West => Dir::East,
            Dir::East => Dir::West,
        }
    }

    fn delta(self) -> (isize, isize) {
        match self {
            Dir::North => (-1, 0),
            Dir::South => (1, 0),
            Dir::West => (0, -1),
            Dir::East => (0, 1),
        }
    }

    /// Tag of a message travelling in this direction.
    fn tag(self) -> i32 {
        self as i32
    }
}

/// Geometry shared by all threads of one run.
#[derive(Debug, Clone, Copy)]
struct Layout {
    nodes: (usize, usize),
    side: usize,
    b: usize,
}

impl Layout {
    fn rows(&self) -> usize {
        self.nodes.0 * self.side * self.b
    }

    fn cols(&self) -> usize {
        self.nodes.1 * self.side * self.b
    }

    fn per_node(&self) -> usize {
        self.side * self.side
    }

    /// Global thread-block coordinates of `(node, local)`.
    fn block_of(&self, node: usize, local: usize) -> (usize, usize) {
        let (pr, pc) = (node / self.nodes.1, node % self.nodes.1);
        (pr * self.side + local / self.side, pc * self.side + local % self.side)
    }

    fn owner(&self, (gr, gc): (usize, usize)) -> (usize, usize) {
        let node = (gr / self.side) * self.nodes.1 + gc / self.side;
        (node, (gr % self.side) * self.side + gc % self.side)
    }

    fn neighbor(&self, node: usize, local: usize, d: Dir) -> Option<(usize, usize)> {
        let (gr, gc) = self.block_of(node, local);
        let (dr, dc) = d.delta();
        let r = gr.checked_add_signed(dr)?;
        let c = gc.checked_add_signed(dc)?;
        (r < self.nodes.0 * self.side && c < self.nodes.1 * self.side).then(|| self.owner((r, c)))
    }

    /// Position of a block along the node boundary it faces in direction `d`,
    /// and the index of that boundary.
    fn boundary(&self, node: usize, local: usize, d: Dir) -> (usize, usize) {
        let (gr, gc) = self.block_of(node, local);
        match d {
            Dir::North => (gc % self.side, gr / self.side - 1),
            Dir::South => (gc % self.side, gr / self.side),
            Dir::West => (gr % self.side, gc / self.side - 1),
            Dir::East => (gr % self.side, gc / self.side),
        }
    }

    fn initial(&self, r: usize, c: usize) -> f64 {
        ((r * 31 + c * 17) % 101) as f64
    }
}

/// Communicators a rank uses for one mode.
enum Wiring {
    /// One communicator, tags distinguish flows.
    Shared(Comm),
    /// Odd/even boundary sets; `[ns|ew][parity][position]`.
    Sets([[Vec<Comm>; 2]; 2]),
    /// One endpoint per perimeter thread, indexed by `perimeter`.
    Endpoints(Vec<Comm>),
}

/// Endpoint slot of each local thread on the block perimeter.
fn perimeter(side: usize) -> Vec<Option<usize>> {
    let mut next = 0;
    (0..side * side)
        .map(|l| {
            let (r, c) = (l / side, l % side);
            (r == 0 || c == 0 || r + 1 == side || c + 1 == side).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect()
}

impl Stencil {
    fn layout(&self) -> BenchResult<Layout> {
        let side = (self.threads as f64).sqrt().round() as usize;
        if side * side != self.threads || side == 0 {
            return Err(BenchError::Params(format!("threads per node must be a perfect square, got {}", self.threads)));
        }
        if self.node_grid.0 == 0 || self.node_grid.1 == 0 || self.block == 0 || self.iters == 0 {
            return Err(BenchError::Params("node grid, block and iters must be positive".into()));
        }
        Ok(Layout { nodes: self.node_grid, side, b: self.block })
    }

    pub fn run(&self, h: &Harness) -> BenchResult<Table> {
        let key = RowKey {
            benchmark: "stencil",
            mode: format!("{}/{}x{}", self.mode, self.node_grid.0, self.node_grid.1),
            threads: self.threads,
            vcis: if self.mode == Mode::Everywhere { 1 } else { h.cfg.vcis },
            msg_size: self.block * 8,
            iters: self.iters,
        };
        h.repeat(&key, |_| Ok(vec![("halo_us", self.once(h)?)]))
    }

    /// One repetition; returns the median over iterations of the slowest
    /// thread's halo-exchange time, in µs.
    pub fn once(&self, h: &Harness) -> BenchResult<f64> {
        let lay = self.layout()?;
        if self.mode == Mode::Everywhere {
            // One single-threaded rank per block; every exchange goes through the runtime.
            let flat = Stencil {
                mode: Mode::Ser,
                node_grid: (lay.nodes.0 * lay.side, lay.nodes.1 * lay.side),
                threads: 1,
                ..self.clone()
            };
            let cfg = Config { vcis: 1, ..h.cfg.clone() };
            return flat.execute(&Harness { cfg, ..h.clone() });
        }
        self.execute(h)
    }

    fn wiring(&self, world: &World, lay: &Layout) -> BenchResult<Vec<Wiring>> {
        let ranks = world.ranks();
        let mut out = Vec::with_capacity(ranks.len());
        match self.mode {
            Mode::Ser | Mode::Everywhere => {
                for r in &ranks {
                    out.push(Wiring::Shared(r.comm_dup(&r.world_comm())?));
                }
            }
            Mode::Par => {
                // Only create the parity sets some boundary actually uses.
                let sets = |n: usize| n.saturating_sub(1).min(2);
                let counts = [sets(lay.nodes.0), sets(lay.nodes.1)];
                for r in &ranks {
                    let mut w: [[Vec<Comm>; 2]; 2] = Default::default();
                    for (axis, &n) in counts.iter().enumerate() {
                        for parity in w[axis].iter_mut().take(n) {
                            for _ in 0..lay.side {
                                parity.push(r.comm_dup(&r.world_comm())?);
                            }
                        }
                    }
                    out.push(Wiring::Sets(w));
                }
            }
            Mode::Ep => {
                let n = perimeter(lay.side).iter().flatten().count();
                for r in &ranks {
                    out.push(Wiring::Endpoints(r.create_endpoints(&r.world_comm(), n)?));
                }
            }
        }
        Ok(out)
    }

    fn execute(&self, h: &Harness) -> BenchResult<f64> {
        let lay = self.layout()?;
        let nnodes = lay.nodes.0 * lay.nodes.1;
        let per = lay.per_node();
        let world = World::init(h.cfg.clone(), nnodes, per)?;
        let wiring = self.wiring(&world, &lay)?;
        let slots = perimeter(lay.side);
        let blocks: Vec<RwLock<Vec<f64>>> = (0..nnodes * per)
            .map(|id| {
                let (gr, gc) = lay.block_of(id / per, id % per);
                let b = lay.b;
                RwLock::new((0..b * b).map(|k| lay.initial(gr * b + k / b, gc * b + k % b)).collect())
            })
            .collect();
        let node_barriers: Vec<Barrier> = (0..nnodes).map(|_| Barrier::new(per)).collect();
        let ranks = world.ranks();
        let iters = self.iters;
        let times = run_threads(nnodes * per, |id, start| {
            let (node, local) = (id / per, id % per);
            let rank = &ranks[node];
            let nb = &node_barriers[node];
            let ex = Exchange { lay: &lay, wiring: &wiring[node], slots: &slots, node, local, rank };
            start.wait();
            let mut halo_us = Vec::with_capacity(iters);
            for _ in 0..iters {
                nb.wait();
                if local == 0 {
                    rank.barrier(&rank.world_comm())?;
                }
                nb.wait();
                let t0 = Instant::now();
                let halos = ex.exchange(&blocks)?;
                halo_us.push(t0.elapsed().as_secs_f64() * 1e6);
                // Neighbors must finish reading this block before it changes.
                nb.wait();
                let mut mine = blocks[id].write().expect("block lock");
                *mine = jacobi(&mine, lay.b, &halos);
            }
            Ok(halo_us)
        })?;
        drop(wiring);
        h.finish(world)?;
        let mesh = gather(&lay, &blocks);
        let expect = oracle(&lay, iters);
        check(mesh == expect, || "stencil mesh differs from the sequential run".into())?;
        let per_iter: Vec<f64> = (0..iters).map(|i| times.iter().map(|t| t[i]).fold(0.0, f64::max)).collect();
        Ok(median(&per_iter))
    }
}

/// Halo rows/columns around one block, zero outside the mesh.
#[derive(Default)]
struct Halos([Vec<f64>; 4]);

struct Exchange<'a> {
    lay: &'a Layout,
    wiring: &'a Wiring,
    slots: &'a [Option<usize>],
    node: usize,
    local: usize,
    rank: &'a Rank,
}

impl Exchange<'_> {
    /// Communicator, peer rank and tag for traffic with the neighbor in `d`.
    /// Both sides compute the same communicator for a given boundary.
    fn route(&self, d: Dir, peer: (usize, usize)) -> (&Comm, u32, i32, i32) {
        match self.wiring {
            Wiring::Shared(c) => {
                let (pos, _) = self.lay.boundary(self.node, self.local, d);
                let side = self.lay.side as i32;
                let send = d.tag() * side + pos as i32;
                let recv = d.opposite().tag() * side + pos as i32;
                (c, peer.0 as u32, send, recv)
            }
            Wiring::Sets(sets) => {
                let (pos, boundary) = self.lay.boundary(self.node, self.local, d);
                let axis = usize::from(matches!(d, Dir::West | Dir::East));
                (&sets[axis][boundary % 2][pos], peer.0 as u32, d.tag(), d.opposite().tag())
            }
            Wiring::Endpoints(eps) => {
                let n = eps.len();
                let mine = self.slots[self.local].expect("edge thread owns an endpoint");
                let theirs = self.slots[peer.1].expect("edge thread owns an endpoint");
                (&eps[mine], (peer.0 * n + theirs) as u32, d.tag(), d.opposite().tag())
            }
        }
    }

    /// North-south edges first, then east-west.
    fn exchange(&self, blocks: &[RwLock<Vec<f64>>]) -> BenchResult<Halos> {
        let lay = self.lay;
        let per = lay.per_node();
        let me = self.node * per + self.local;
        let b = lay.b;
        let mut halos = Halos::default();
        for phase in DIRS.chunks(2) {
            let mut recvs: Vec<(usize, Request)> = Vec::new();
            let mut sends = Vec::new();
            for &d in phase {
                let k = d as usize;
                let Some(peer) = lay.neighbor(self.node, self.local, d) else {
                    halos.0[k] = vec![0.0; b];
                    continue;
                };
                if peer.0 == self.node {
                    let theirs = blocks[peer.0 * per + peer.1].read().expect("block lock");
                    halos.0[k] = edge(&theirs, b, d.opposite());
                    continue;
                }
                let (comm, to, send_tag, recv_tag) = self.route(d, peer);
                recvs.push((k, self.rank.irecv(comm, to as i32, recv_tag, b * 8)?));
                let out = edge(&blocks[me].read().expect("block lock"), b, d);
                sends.push(self.rank.isend(comm, to, send_tag, to_bytes(&out))?);
            }
            let (slots, reqs): (Vec<usize>, Vec<Request>) = recvs.into_iter().unzip();
            for (k, c) in slots.into_iter().zip(self.rank.waitall(reqs)?) {
                halos.0[k] = from_bytes(&c.data);
            }
            self.rank.waitall(sends)?;
        }
        Ok(halos)
    }
}

/// The row or column of a block facing direction `d`.
fn edge(block: &[f64], b: usize, d: Dir) -> Vec<f64> {
    match d {
        Dir::North => block[..b].to_vec(),
        Dir::South => block[(b - 1) * b..].to_vec(),
        Dir::West => (0..b).map(|r| block[r * b]).collect(),
        Dir::East => (0..b).map(|r| block[r * b + b - 1]).collect(),
    }
}

fn to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn from_bytes(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}

fn jacobi(block: &[f64], b: usize, h: &Halos) -> Vec<f64> {
    let [n, s, w, e] = &h.0;
    let at = |r: isize, c: isize| -> f64 {
        match (r, c) {
            (-1, c) => n[c as usize],
            (r, -1) => w[r as usize],
            (r, c) if r == b as isize => s[c as usize],
            (r, c) if c == b as isize => e[r as usize],
            (r, c) => block[r as usize * b + c as usize],
        }
    };
    let mut out = vec![0.0; b * b];
    for r in 0..b as isize {
        for c in 0..b as isize {
            out[r as usize * b + c as usize] = 0.25 * (at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1));
        }
    }
    out
}

fn gather(lay: &Layout, blocks: &[RwLock<Vec<f64>>]) -> Vec<f64> {
    let (rows, cols, b, per) = (lay.rows(), lay.cols(), lay.b, lay.per_node());
    let mut mesh = vec![0.0; rows * cols];
    for (id, blk) in blocks.iter().enumerate() {
        let (gr, gc) = lay.block_of(id / per, id % per);
        let blk = blk.read().expect("block lock");
        for k in 0..b * b {
            mesh[(gr * b + k / b) * cols + gc * b + k % b] = blk[k];
        }
    }
    mesh
}

/// The same iteration on the whole mesh at once.
fn oracle(lay: &Layout, iters: usize) -> Vec<f64> {
    let (rows, cols) = (lay.rows(), lay.cols());
    let mut mesh: Vec<f64> = (0..rows * cols).map(|k| lay.initial(k / cols, k % cols)).collect();
    for _ in 0..iters {
        let at = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r >= rows as isize || c >= cols as isize {
                0.0
            } else {
                mesh[r as usize * cols + c as usize]
            }
        };
        let mut next = vec![0.0; rows * cols];
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                next[r as usize * cols + c as usize] =
                    0.25 * (at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1));
            }
        }
        mesh = next;
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perimeter_skips_interior() {
        let p = perimeter(3);
        assert_eq!(p.iter().flatten().count(), 8);
        assert_eq!(p[4], None);
        assert_eq!(perimeter(1), vec![Some(0)]);
    }

    #[test]
    fn boundary_sides_agree() {
        let lay = Layout { nodes: (3, 2), side: 2, b: 4 };
        for node in 0..6 {
            for local in 0..4 {
                for d in DIRS {
                    let Some(peer) = lay.neighbor(node, local, d) else { continue };
                    if peer.0 == node {
                        continue;
                    }
                    let mine = lay.boundary(node, local, d);
                    let theirs = lay.boundary(peer.0, peer.1, d.opposite());
                    assert_eq!(mine, theirs, "node {node} local {local} {d:?}");
                }
            }
        }
    }
}
