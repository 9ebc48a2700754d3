//! Weight initialization that makes a morphism function-preserving.
//!
//! Inserted Conv/Dense/BatchNorm layers start as identities, widened layers
//! copy the old weights into the old channel positions and leave the new
//! channels at zero, additive skip branches start at zero, and a concat
//! reducer starts as `[I | 0]` so it passes the trunk operand through. All
//! fresh weight entries then receive uniform noise in `[-s, s]`; with
//! `s = 0` the child computes exactly what the parent did.

use std::collections::HashMap;

use rand::Rng;

use super::{apply, MorphError, MorphOp};
use crate::graph::{ArchGraph, LayerKind, NodeId};
use crate::refexec::{
    check_weights, BatchNormWeights, ConvWeights, DenseWeights, LayerWeights, WeightSet,
};

/// Default noise scale for fresh weights.
pub const DEFAULT_NOISE: f64 = 1e-5;

/// Applies `op` to `g` and derives the child's weights from `w`.
pub fn morph_weights<R: Rng + ?Sized>(
    g: &ArchGraph,
    w: &WeightSet,
    op: &MorphOp,
    noise: f64,
    rng: &mut R,
) -> Result<(ArchGraph, WeightSet), MorphError> {
    check_weights(g, w)?;
    let child = apply(g, op)?;
    let maps = channel_maps(g, &child);
    let mut noise_fn = |v: &mut f64| {
        if noise > 0.0 {
            *v += rng.random_range(-noise..=noise);
        }
    };

    let mut out = WeightSet::new();
    for id in child.topo_order()? {
        let l = &child.layers()[&id];
        let cout = l.width as usize;
        let cin = l.inputs.first().map_or(0, |n| child.shape(*n).unwrap().channels as usize);
        let in_map = l.inputs.first().map(|n| maps[n].as_slice()).unwrap_or(&[]);
        let fresh = !g.layers().contains_key(&id);
        let lw = match l.kind {
            LayerKind::Conv { kernel_size, .. } => {
                let k = kernel_size as usize;
                let mut c = ConvWeights::zeros(k, cin, cout);
                if fresh {
                    seed_pass_through(op, cin, cout, |i| {
                        let at = c.index(k / 2, k / 2, i, i);
                        c.kernel[at] = 1.0;
                    });
                    c.kernel.iter_mut().for_each(&mut noise_fn);
                } else {
                    let Some(LayerWeights::Conv(old)) = w.get(&id) else {
                        unreachable!("weights checked")
                    };
                    if (old.cin, old.cout) == (cin, cout) {
                        c = old.clone();
                    } else {
                        c.kernel.iter_mut().for_each(&mut noise_fn);
                        for ky in 0..k {
                            for kx in 0..k {
                                for (ci, &nci) in in_map.iter().enumerate() {
                                    for co in 0..old.cout {
                                        let at = c.index(ky, kx, nci, co);
                                        c.kernel[at] = old.kernel[old.index(ky, kx, ci, co)];
                                    }
                                }
                            }
                        }
                        c.bias[..old.cout].copy_from_slice(&old.bias);
                    }
                }
                LayerWeights::Conv(c)
            }
            LayerKind::Dense { .. } => {
                let mut d = DenseWeights::zeros(cin, cout);
                if fresh {
                    seed_pass_through(op, cin, cout, |i| {
                        let at = d.index(i, i);
                        d.matrix[at] = 1.0;
                    });
                    d.matrix.iter_mut().for_each(&mut noise_fn);
                } else {
                    let Some(LayerWeights::Dense(old)) = w.get(&id) else {
                        unreachable!("weights checked")
                    };
                    if (old.inputs, old.outputs) == (cin, cout) {
                        d = old.clone();
                    } else {
                        d.matrix.iter_mut().for_each(&mut noise_fn);
                        for (i, &ni) in in_map.iter().enumerate() {
                            for o in 0..old.outputs {
                                let at = d.index(ni, o);
                                d.matrix[at] = old.matrix[old.index(i, o)];
                            }
                        }
                        d.bias[..old.outputs].copy_from_slice(&old.bias);
                    }
                }
                LayerWeights::Dense(d)
            }
            LayerKind::BatchNorm => {
                let mut b = BatchNormWeights::identity(cout);
                if let Some(LayerWeights::BatchNorm(old)) = w.get(&id) {
                    for (ci, &nci) in in_map.iter().enumerate() {
                        b.scale[nci] = old.scale[ci];
                        b.shift[nci] = old.shift[ci];
                        b.mean[nci] = old.mean[ci];
                        b.var[nci] = old.var[ci];
                    }
                }
                LayerWeights::BatchNorm(b)
            }
            _ => continue,
        };
        out.insert(id, lw);
    }
    check_weights(&child, &out)?;
    Ok((child, out))
}

/// Writes the pass-through entries of a freshly inserted Conv/Dense: the
/// identity for a deep insertion, `[I | 0]` for a concat reducer, nothing
/// for an additive branch.
fn seed_pass_through(op: &MorphOp, cin: usize, cout: usize, mut set: impl FnMut(usize)) {
    match op {
        MorphOp::Deep { .. } | MorphOp::ConcatSkip { .. } => (0..cin.min(cout)).for_each(&mut set),
        MorphOp::AddSkip { .. } | MorphOp::Wide { .. } => {}
    }
}

/// For every child node, where each of its parent-graph channels landed.
/// Conv/Dense outputs keep their old channels as a prefix; Concat offsets
/// its second operand by the (possibly widened) first operand's width.
fn channel_maps(parent: &ArchGraph, child: &ArchGraph) -> HashMap<NodeId, Vec<usize>> {
    let mut maps: HashMap<NodeId, Vec<usize>> = HashMap::new();
    let order = child.topo_order().expect("child validated");
    for id in order {
        let l = &child.layers()[&id];
        let map = match l.kind {
            LayerKind::Input => (0..l.width as usize).collect(),
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => {
                let old = parent.layer(id).map_or(l.width, |p| p.width);
                (0..old as usize).collect()
            }
            LayerKind::Concat => {
                let offset = child.shape(l.inputs[0]).unwrap().channels as usize;
                let mut m = maps[&l.inputs[0]].clone();
                m.extend(maps[&l.inputs[1]].iter().map(|c| c + offset));
                m
            }
            _ => maps[&l.inputs[0]].clone(),
        };
        maps.insert(l.output, map);
    }
    maps
}
