//! Whole-grid forward pass with no regions, crops or tape. Used as the
//! oracle for the regional implementation.

use super::config::{NetConfig, SCALES};
use super::weights::{self, LayerSpec, Weights};
use super::Flags;
use crate::error::Result;
use crate::tensor::{ops, Scalar, Tensor};

fn block<T: Scalar>(w: &Weights<T>, cfg: &NetConfig, layers: &[LayerSpec], mut x: Tensor<T>) -> Result<Tensor<T>> {
    for l in layers {
        x = ops::conv2d(&x, w.get(&l.weight())?, Some(w.get(&l.bias())?), l.k / 2, 1)?;
        x = ops::relu(&x);
        if l.norm {
            x = ops::group_norm(&x, cfg.groups(l.cout), w.get(&l.gamma())?, w.get(&l.beta())?, cfg.gn_eps)?.y;
        }
    }
    Ok(x)
}

/// Header output over the whole fused grid and the updated memory (empty
/// when memory is off). `memory` must already be aligned to the input frame.
pub fn dense_forward<T: Scalar>(
    cfg: &NetConfig,
    w: &Weights<T>,
    lidar: &Tensor<T>,
    map: &Tensor<T>,
    memory: &[Tensor<T>],
    flags: Flags,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let mut x = lidar.clone();
    let mut xm = map.clone();
    let mut feats = Vec::new();
    let mut map_feats = Vec::new();
    let mut new_mem = Vec::new();
    for s in 0..SCALES {
        let y = block(w, cfg, &weights::lidar_block(cfg, s), x.clone())?;
        let z = if flags.no_memory {
            y
        } else {
            let cat = ops::concat_channels(&[&memory[s], &y])?;
            let u = block(w, cfg, &weights::memory_block(cfg, s), cat)?;
            new_mem.push(u.clone());
            u
        };
        if s + 1 < SCALES {
            x = ops::max_pool2(&z)?.0;
        }
        feats.push(z);
        let (_, h, wd) = feats[s].chw();
        if flags.no_map {
            map_feats.push(Tensor::zeros(&[cfg.map_channels[s], h, wd]));
        } else {
            let m = block(w, cfg, &weights::map_block(cfg, s), xm.clone())?;
            if s + 1 < SCALES {
                xm = ops::max_pool2(&m)?.0;
            }
            map_feats.push(m);
        }
    }
    let (_, h2, w2) = feats[super::FUSED_SCALE as usize].chw();
    let mut resized = Vec::new();
    for f in feats.iter().chain(&map_feats) {
        resized.push(ops::bilinear_resize(f, h2, w2)?);
    }
    let refs: Vec<&Tensor<T>> = resized.iter().collect();
    let f = block(w, cfg, &weights::fusion_block(cfg), ops::concat_channels(&refs)?)?;
    let [h0, h1] = weights::header_layers(cfg);
    let h = ops::relu(&ops::conv2d(&f, w.get(&h0.weight())?, Some(w.get(&h0.bias())?), 1, 1)?);
    let out = ops::conv2d(&h, w.get(&h1.weight())?, Some(w.get(&h1.bias())?), 0, 1)?;
    Ok((out, new_mem))
}
