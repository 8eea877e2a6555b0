//! Forward composition of the network's building blocks.
//!
//! Every block reads its convolutions from the parameter store by
//! hierarchical name prefix. Spatial-size-preserving convolutions pad by
//! `(kh-1)/2, (kw-1)/2`, so 9x1 pads (4,0), 1x9 pads (0,4), 3x3 pads (1,1).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Size-preserving convolution looked up by layer name.
pub(crate) fn conv_same<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    name: &str,
    x: &Tensor<S>,
) -> Result<Tensor<S>> {
    let weight = store.value(&format!("{name}.weight"))?;
    let bias = store.value(&format!("{name}.bias"))?;
    let ws = weight.shape();
    tape.conv2d(x, weight, bias, (1, 1), ((ws.h - 1) / 2, (ws.w - 1) / 2))
}

/// Residual dense block: `layers` densely connected 3x3 conv+ReLU layers
/// each emitting the growth-rate channel count, a 1x1 fusion back to the
/// block width, and a local residual add of the input.
pub fn rdb_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
    layers: usize,
) -> Result<Tensor<S>> {
    let mut feats: Vec<Tensor<S>> = vec![x.clone()];
    for j in 0..layers {
        let input = if feats.len() == 1 {
            feats[0].clone()
        } else {
            tape.concat_channels(&feats)?
        };
        let y = conv_same(tape, store, &format!("{prefix}.layer{j}"), &input)?;
        feats.push(tape.relu(&y));
    }
    let all = tape.concat_channels(&feats)?;
    let fused = conv_same(tape, store, &format!("{prefix}.fuse"), &all)?;
    tape.add(&fused, x)
}

/// Residual dense network: three chained RDBs, their outputs concatenated
/// and fused by a 1x1 conv, refined by a 3x3 conv, plus the block-level
/// residual from the input.
pub fn rdn_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    x: &Tensor<S>,
    layers: usize,
) -> Result<Tensor<S>> {
    let r0 = rdb_forward(tape, store, &format!("{prefix}.rdb0"), x, layers)?;
    let r1 = rdb_forward(tape, store, &format!("{prefix}.rdb1"), &r0, layers)?;
    let r2 = rdb_forward(tape, store, &format!("{prefix}.rdb2"), &r1, layers)?;
    let cat = tape.concat_channels(&[r0, r1, r2])?;
    let fused = conv_same(tape, store, &format!("{prefix}.fuse"), &cat)?;
    let refined = conv_same(tape, store, &format!("{prefix}.conv"), &fused)?;
    tape.add(&refined, x)
}

/// Single-channel spatial attention from depth features: two parallel
/// separable conv sets (9x1→1x9 and 1x9→9x1, reducing C→C/2→1), added and
/// squashed through a sigmoid.
pub fn attention_map<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    df: &Tensor<S>,
) -> Result<Tensor<S>> {
    let s1 = conv_same(tape, store, &format!("{prefix}.set1.a"), df)?;
    let s1 = conv_same(tape, store, &format!("{prefix}.set1.b"), &s1)?;
    let s2 = conv_same(tape, store, &format!("{prefix}.set2.a"), df)?;
    let s2 = conv_same(tape, store, &format!("{prefix}.set2.b"), &s2)?;
    let sum = tape.add(&s1, &s2)?;
    Ok(tape.sigmoid(&sum))
}

pub struct AgfeParts<S> {
    /// Guidance features after the entry convolution, before gating.
    pub guided: Tensor<S>,
    /// The spatial attention map, values in (0, 1).
    pub attention: Tensor<S>,
    /// Gated guidance features: `guided * attention`.
    pub attended: Tensor<S>,
}

/// Attention-guided feature extraction with the intermediates exposed.
pub fn agfe_parts<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    df: &Tensor<S>,
    gf: &Tensor<S>,
) -> Result<AgfeParts<S>> {
    let (ds, gs) = (df.shape(), gf.shape());
    if ds.n != gs.n || ds.h != gs.h || ds.w != gs.w {
        return Err(Error::Ratio {
            context: "attention module needs depth and guidance features at equal size",
            expected: format!("{}x{}x{}", ds.n, ds.h, ds.w),
            got: format!("{}x{}x{}", gs.n, gs.h, gs.w),
        });
    }
    let guided = conv_same(tape, store, &format!("{prefix}.guide"), gf)?;
    let attention = attention_map(tape, store, prefix, df)?;
    let attended = tape.mul_broadcast(&guided, &attention)?;
    Ok(AgfeParts {
        guided,
        attention,
        attended,
    })
}

/// Attention-guided feature extraction: gate the convolved guidance
/// features with the depth-derived attention map.
pub fn agfe_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    df: &Tensor<S>,
    gf: &Tensor<S>,
) -> Result<Tensor<S>> {
    agfe_parts(tape, store, prefix, df, gf).map(|p| p.attended)
}

/// Multi-scale guidance features, finest first: index 0 is the full
/// resolution level `IF_l`, the last entry is `IF_1` at `H/2^(l-1)`.
/// Each downsampling step is a 3x3 refinement followed by a
/// kernel-2 stride-2 convolution.
pub fn guidance_pyramid<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    ih: &Tensor<S>,
    l: usize,
) -> Result<Vec<Tensor<S>>> {
    let s = ih.shape();
    if s.c != 3 {
        return Err(Error::DimMismatch {
            dim: "guidance channels",
            expected: 3,
            got: s.c,
        });
    }
    let divisor = 1usize << (l - 1);
    if s.h % divisor != 0 || s.w % divisor != 0 {
        return Err(Error::NotDivisible {
            h: s.h,
            w: s.w,
            divisor,
            what: "the guidance pyramid",
        });
    }
    let mut levels = Vec::with_capacity(l);
    let mut current = conv_same(tape, store, "pyramid.entry", ih)?;
    levels.push(current.clone());
    for j in 1..l {
        let refined = conv_same(tape, store, &format!("pyramid.down{j}.refine"), &current)?;
        let weight = store.value(&format!("pyramid.down{j}.down.weight"))?;
        let bias = store.value(&format!("pyramid.down{j}.down.bias"))?;
        current = tape.conv2d(&refined, weight, bias, (2, 2), (0, 0))?;
        levels.push(current.clone());
    }
    Ok(levels)
}

pub struct StageTrace<S> {
    /// Depth features after the x2 pixel shuffle.
    pub upsampled: Tensor<S>,
    /// Guidance features after the stage's entry convolution.
    pub guided: Tensor<S>,
    /// The stage's spatial attention map.
    pub attention: Tensor<S>,
    /// Gated guidance features.
    pub attended: Tensor<S>,
    /// Stage output.
    pub output: Tensor<S>,
}

/// One x2 stage with its intermediates exposed.
///
/// Sub-stage 1 upsamples: RDN-A, a 1x1 expansion to 4C channels and a
/// pixel shuffle. Sub-stage 2 fuses guidance attentively: AGFE on the
/// upsampled features, channel concat, 3x3 fusion conv, RDN-B, and a
/// residual add of the upsampled features.
pub fn stage_forward_traced<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    df: &Tensor<S>,
    gf: &Tensor<S>,
    layers: usize,
) -> Result<StageTrace<S>> {
    let (ds, gs) = (df.shape(), gf.shape());
    if gs.h != 2 * ds.h || gs.w != 2 * ds.w || gs.n != ds.n {
        return Err(Error::Ratio {
            context: "stage guidance must be exactly twice the depth-feature size",
            expected: format!("{}x{}x{}", ds.n, 2 * ds.h, 2 * ds.w),
            got: format!("{}x{}x{}", gs.n, gs.h, gs.w),
        });
    }
    let a = rdn_forward(tape, store, &format!("{prefix}.rdn_a"), df, layers)?;
    let expanded = conv_same(tape, store, &format!("{prefix}.expand"), &a)?;
    let upsampled = tape.pixel_shuffle(&expanded, 2)?;
    let agfe = agfe_parts(tape, store, &format!("{prefix}.agfe"), &upsampled, gf)?;
    let cat = tape.concat_channels(&[upsampled.clone(), agfe.attended.clone()])?;
    let fused = conv_same(tape, store, &format!("{prefix}.fuse"), &cat)?;
    let refined = rdn_forward(tape, store, &format!("{prefix}.rdn_b"), &fused, layers)?;
    let output = tape.add(&refined, &upsampled)?;
    Ok(StageTrace {
        upsampled,
        guided: agfe.guided,
        attention: agfe.attention,
        attended: agfe.attended,
        output,
    })
}

/// One x2 stage of the depth stream.
pub fn stage_forward<S: Scalar>(
    tape: &mut Tape<S>,
    store: &ParamStore<S>,
    prefix: &str,
    df: &Tensor<S>,
    gf: &Tensor<S>,
    layers: usize,
) -> Result<Tensor<S>> {
    stage_forward_traced(tape, store, prefix, df, gf, layers).map(|t| t.output)
}
