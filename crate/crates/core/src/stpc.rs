//! Spatial transformer point convolution.
//!
//! One layer turns the unordered neighborhood of every point into an
//! ordered set of `M` slots, one per atom of a learned direction
//! dictionary, and then filters each slot with its own weights:
//!
//! 1. the dictionary is advanced from the previous layer's atoms by a
//!    shared perceptron, `A^l = F_a(A^{l-1})`;
//! 2. each neighbor offset `p_i − p_k` is lifted to a direction feature
//!    `d_k = F_s(p_i − p_k)`;
//! 3. `d_k` is encoded against the atoms with a softmax over cosine
//!    similarities; coefficients below `tau` are dropped;
//! 4. neighbor features `F_f(p_k, x_k)` are summed into the slots with
//!    those coefficients;
//! 5. slot `m` is filtered by `W_m` and the results are added.
//!
//! Because step 4 sums over neighbors, the output does not depend on the
//! order of a neighbor row. With a single atom every coefficient is 1 and
//! the layer reduces to sum pooling followed by a linear map.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{relative_offsets, NeighborIndex};
use crate::nn::{Bound, Init, Mlp, ParamGroup, ParamId, ParamStore, LEAKY_SLOPE};
use crate::tape::{Pool, Tape, Var};
use crate::tensor::Tensor;

/// Default sparsification threshold on encoding coefficients.
pub const DEFAULT_TAU: f64 = 0.01;

/// Bound of the uniform biases of `F_s`. Every self-neighbor feeds `F_s`
/// a zero offset; with zero biases that lands on the activation kink and
/// maps to the zero vector, where the cosine has no direction.
pub const SPATIAL_BIAS_INIT: f64 = 0.01;

/// Random initial atoms: standard normal rows scaled to unit norm.
pub fn init_atoms(init: Init, name: &str, atoms: usize, dim: usize) -> Tensor {
    let mut rng = init.rng(name);
    let mut data: Vec<f64> = (0..atoms * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    for row in data.chunks_exact_mut(dim) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Tensor::from_parts_unchecked(vec![atoms, dim], data)
}

/// `A^l = F_a(A^{l-1})`, the update map applied to each atom.
pub fn update_dictionary(tape: &mut Tape, bound: &Bound, update_map: &Mlp, previous: Var) -> Result<Var> {
    update_map.forward(tape, bound, previous)
}

/// Sum of cosine similarities over all ordered pairs of distinct atoms.
pub fn decorrelation_loss(tape: &mut Tape, atoms: Var) -> Result<Var> {
    let m = tape.shape(atoms)[0];
    let sim = tape.cosine_similarity(atoms, atoms)?;
    let mut mask = Tensor::filled(vec![m, m], 1.0);
    for p in 0..m {
        mask.data_mut()[p * m + p] = 0.0;
    }
    let mask = tape.constant(mask);
    let off_diagonal = tape.mul(sim, mask)?;
    Ok(tape.sum_all(off_diagonal))
}

/// `d_k = F_s(offset_k)` for offsets `[R × 3]`, giving `[R × c]`.
pub fn spatial_direction_features(tape: &mut Tape, bound: &Bound, spatial_map: &Mlp, offsets: Var) -> Result<Var> {
    spatial_map.forward(tape, bound, offsets)
}

/// Coefficients of every neighbor against every atom.
#[derive(Debug, Clone, Copy)]
pub struct EncodingCoefficients {
    /// Softmax output before thresholding, `[N × K × M]`; rows sum to 1.
    pub pre_threshold: Var,
    /// After dropping entries below `tau`, `[N × K × M]`.
    pub alpha: Var,
    pub tau: f64,
}

/// Encodes direction features `d[N·K × c]` against `atoms[M × c]`.
pub fn encode_directions(tape: &mut Tape, directions: Var, atoms: Var, k: usize, tau: f64) -> Result<EncodingCoefficients> {
    let rows = tape.shape(directions)[0];
    if k == 0 || rows % k != 0 {
        return Err(Error::ShapeMismatch {
            op: "encode_directions",
            lhs: tape.shape(directions).to_vec(),
            rhs: vec![k],
        });
    }
    let m = tape.shape(atoms)[0];
    let sim = tape.cosine_similarity(directions, atoms)?;
    let sim = tape.reshape(sim, &[rows / k, k, m])?;
    let pre = tape.softmax(sim, 2)?;
    let alpha = tape.threshold(pre, tau);
    Ok(EncodingCoefficients {
        pre_threshold: pre,
        alpha,
        tau,
    })
}

/// Projects neighbor features onto the atom slots.
///
/// `inputs` holds the rows fed to `F_f`; `index[i·K + k]` names the input
/// row of neighbor `k` of point `i`. Returns `[N × M × C_f]`.
pub fn spatial_transform(
    tape: &mut Tape,
    bound: &Bound,
    feature_map: &Mlp,
    alpha: Var,
    inputs: Var,
    index: &[usize],
) -> Result<Var> {
    let feats = feature_map.forward(tape, bound, inputs)?;
    tape.project_neighbors(alpha, feats, index)
}

/// Per-slot filter weights. `weight` is `[slots·C_f × C_out]`; rows
/// `m·C_f .. (m+1)·C_f` hold the transpose of slot `m`'s matrix.
#[derive(Debug, Clone, Copy)]
pub struct SlotConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub slots: usize,
    pub channels: usize,
    pub outputs: usize,
}

impl SlotConv {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, slots: usize, channels: usize, outputs: usize) -> Self {
        let fan_in = (slots * channels) as f64;
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = init.uniform(&wname, &[slots * channels, outputs], gain * (3.0 / fan_in).sqrt());
        let b = Tensor::zeros(vec![outputs]);
        SlotConv {
            weight: store.add(wname, w, ParamGroup::Network),
            bias: store.add(bname, b, ParamGroup::Network),
            slots,
            channels,
            outputs,
        }
    }

    pub fn param_count(slots: usize, channels: usize, outputs: usize) -> usize {
        slots * channels * outputs + outputs
    }
}

/// `out_i = Σ_m W_m x̃_{i,m} + b` for `x̃[N × M × C_f]`.
pub fn anisotropic_conv(tape: &mut Tape, bound: &Bound, conv: &SlotConv, slots: Var) -> Result<Var> {
    let n = tape.shape(slots)[0];
    let flat = tape.reshape(slots, &[n, conv.slots * conv.channels])?;
    let y = tape.matmul(flat, bound.var(conv.weight))?;
    tape.add(y, bound.var(conv.bias))
}

/// Sizes of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    /// Attribute channels of the incoming points (0 for bare xyz).
    pub in_channels: usize,
    /// Width of `F_f`.
    pub features: usize,
    pub outputs: usize,
    pub atoms: usize,
    pub atom_dim: usize,
}

/// Learnable state of one spatial transformer point convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct StpcLayerParams {
    pub shape: LayerShape,
    /// `F_s`: 3 → c.
    pub spatial_map: Mlp,
    /// `F_f`: 3 + C_in → C_f.
    pub feature_map: Mlp,
    pub conv: SlotConv,
    /// `F_a`: c → c, advancing the dictionary into this layer.
    pub update_map: Mlp,
    pub tau: f64,
    /// Feed `F_f` the offset `p_i − p_k` instead of the absolute `p_k`.
    pub relative_coords: bool,
}

/// What one layer hands on.
#[derive(Debug, Clone, Copy)]
pub struct StpcOutput {
    /// `[N × C_out]`, before any activation.
    pub features: Var,
    /// This layer's atoms, the next layer's previous atoms.
    pub atoms: Var,
    pub decorrelation: Var,
    pub coefficients: EncodingCoefficients,
}

impl StpcLayerParams {
    pub fn new(store: &mut ParamStore, init: Init, name: &str, shape: LayerShape, tau: f64, relative_coords: bool) -> Self {
        let c = shape.atom_dim;
        let spatial_map = Mlp::new(store, init, &format!("{name}.spatial_map"), 3, c, ParamGroup::Network);
        for lin in [spatial_map.hidden, spatial_map.output] {
            let p = store.get_mut(lin.bias);
            p.tensor = init.uniform(&p.name, &[c], SPATIAL_BIAS_INIT);
        }
        StpcLayerParams {
            shape,
            spatial_map,
            feature_map: Mlp::new(
                store,
                init,
                &format!("{name}.feature_map"),
                3 + shape.in_channels,
                shape.features,
                ParamGroup::Network,
            ),
            conv: SlotConv::new(store, init, &format!("{name}.conv"), shape.atoms, shape.features, shape.outputs),
            update_map: Mlp::new(store, init, &format!("{name}.update_map"), c, c, ParamGroup::Dictionary),
            tau,
            relative_coords,
        }
    }

    pub fn param_count(shape: &LayerShape) -> usize {
        let c = shape.atom_dim;
        Mlp::param_count(3, c)
            + Mlp::param_count(3 + shape.in_channels, shape.features)
            + SlotConv::param_count(shape.atoms, shape.features, shape.outputs)
            + Mlp::param_count(c, c)
    }

    /// Full layer: dictionary update, direction encoding, spatial
    /// transform and anisotropic convolution.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        coords: &[[f64; 3]],
        features: Option<Var>,
        nbr: &NeighborIndex,
        previous_atoms: Var,
    ) -> Result<StpcOutput> {
        let atoms = update_dictionary(tape, bound, &self.update_map, previous_atoms)?;
        let decorrelation = decorrelation_loss(tape, atoms)?;

        let k = nbr.k();
        let offsets = offsets_var(tape, coords, nbr)?;
        let directions = spatial_direction_features(tape, bound, &self.spatial_map, offsets)?;
        let coefficients = encode_directions(tape, directions, atoms, k, self.tau)?;

        let (inputs, index) = feature_inputs(tape, coords, features, nbr, self.relative_coords, offsets)?;
        let slots = spatial_transform(tape, bound, &self.feature_map, coefficients.alpha, inputs, &index)?;
        let out = anisotropic_conv(tape, bound, &self.conv, slots)?;
        Ok(StpcOutput {
            features: out,
            atoms,
            decorrelation,
            coefficients,
        })
    }
}

fn offsets_var(tape: &mut Tape, coords: &[[f64; 3]], nbr: &NeighborIndex) -> Result<Var> {
    let data = relative_offsets(coords, nbr);
    Ok(tape.constant(Tensor::new(vec![nbr.as_slice().len(), 3], data)?))
}

pub(crate) fn coords_var(tape: &mut Tape, coords: &[[f64; 3]]) -> Result<Var> {
    let data = coords.iter().flatten().copied().collect();
    Ok(tape.constant(Tensor::new(vec![coords.len(), 3], data)?))
}

/// Rows fed to `F_f` and, per neighbor slot, the row each one reads.
fn feature_inputs(
    tape: &mut Tape,
    coords: &[[f64; 3]],
    features: Option<Var>,
    nbr: &NeighborIndex,
    relative: bool,
    offsets: Var,
) -> Result<(Var, Vec<usize>)> {
    if relative {
        let inputs = match features {
            Some(f) => {
                let gathered = tape.gather_rows(f, nbr.as_slice())?;
                tape.concat(&[offsets, gathered])?
            }
            None => offsets,
        };
        Ok((inputs, (0..nbr.as_slice().len()).collect()))
    } else {
        let xyz = coords_var(tape, coords)?;
        let inputs = match features {
            Some(f) => tape.concat(&[xyz, f])?,
            None => xyz,
        };
        Ok((inputs, nbr.as_slice().to_vec()))
    }
}

/// How a layer combines each neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Aggregation {
    /// Dictionary slots with per-slot filters (the full layer).
    Anisotropic,
    /// Max pooling, then one shared filter.
    Max,
    Mean,
    Sum,
    /// One filter per neighbor rank, applied in KNN order.
    Unordered,
}

impl Aggregation {
    pub const ALL: [Aggregation; 5] = [
        Aggregation::Unordered,
        Aggregation::Max,
        Aggregation::Mean,
        Aggregation::Sum,
        Aggregation::Anisotropic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Anisotropic => "anisotropic",
            Aggregation::Max => "max",
            Aggregation::Mean => "mean",
            Aggregation::Sum => "sum",
            Aggregation::Unordered => "none",
        }
    }

    fn pool(self) -> Option<Pool> {
        match self {
            Aggregation::Max => Some(Pool::Max),
            Aggregation::Mean => Some(Pool::Mean),
            Aggregation::Sum => Some(Pool::Sum),
            _ => None,
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("aggregation", format!("unknown mode `{s}` (expected anisotropic, max, mean, sum or none)")))
    }
}

/// Isotropic stand-in for the full layer: `F_f` features pooled over each
/// neighborhood and filtered by one shared matrix (or, for
/// [`Aggregation::Unordered`], one matrix per neighbor rank).
#[derive(Debug, Clone, Copy)]
pub struct IsotropicLayer {
    pub feature_map: Mlp,
    pub conv: SlotConv,
    pub mode: Aggregation,
    pub relative_coords: bool,
}

impl IsotropicLayer {
    pub fn new(
        store: &mut ParamStore,
        init: Init,
        name: &str,
        shape: LayerShape,
        mode: Aggregation,
        k: usize,
        relative_coords: bool,
    ) -> Result<Self> {
        let slots = Self::slots(mode, k)?;
        Ok(IsotropicLayer {
            feature_map: Mlp::new(
                store,
                init,
                &format!("{name}.feature_map"),
                3 + shape.in_channels,
                shape.features,
                ParamGroup::Network,
            ),
            conv: SlotConv::new(store, init, &format!("{name}.conv"), slots, shape.features, shape.outputs),
            mode,
            relative_coords,
        })
    }

    fn slots(mode: Aggregation, k: usize) -> Result<usize> {
        match mode {
            Aggregation::Anisotropic => Err(Error::config("aggregation", "anisotropic is not an isotropic mode")),
            Aggregation::Unordered => Ok(k),
            _ => Ok(1),
        }
    }

    pub fn param_count(shape: &LayerShape, mode: Aggregation, k: usize) -> usize {
        let slots = if mode == Aggregation::Unordered { k } else { 1 };
        Mlp::param_count(3 + shape.in_channels, shape.features) + SlotConv::param_count(slots, shape.features, shape.outputs)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        coords: &[[f64; 3]],
        features: Option<Var>,
        nbr: &NeighborIndex,
    ) -> Result<Var> {
        let offsets = offsets_var(tape, coords, nbr)?;
        let (inputs, index) = feature_inputs(tape, coords, features, nbr, self.relative_coords, offsets)?;
        isotropic_aggregate(tape, bound, self.mode, &self.feature_map, &self.conv, inputs, &index, nbr.k())
    }
}

/// Pools `F_f(inputs)` over each group of `k` index entries and filters
/// the result. For `Unordered` the `k` neighbor features are laid side by
/// side and filtered by one matrix per rank.
#[allow(clippy::too_many_arguments)]
pub fn isotropic_aggregate(
    tape: &mut Tape,
    bound: &Bound,
    mode: Aggregation,
    feature_map: &Mlp,
    conv: &SlotConv,
    inputs: Var,
    index: &[usize],
    k: usize,
) -> Result<Var> {
    let feats = feature_map.forward(tape, bound, inputs)?;
    let n = index.len() / k;
    let pooled = match mode.pool() {
        Some(pool) => tape.pool_neighbors(feats, index, k, pool)?,
        None if mode == Aggregation::Unordered => {
            let rows = tape.gather_rows(feats, index)?;
            let c = tape.shape(rows)[1];
            tape.reshape(rows, &[n, k * c])?
        }
        None => return Err(Error::config("aggregation", "anisotropic is not an isotropic mode")),
    };
    if tape.shape(pooled)[1] != conv.slots * conv.channels {
        return Err(Error::ShapeMismatch {
            op: "isotropic_aggregate",
            lhs: tape.shape(pooled).to_vec(),
            rhs: vec![conv.slots, conv.channels],
        });
    }
    let y = tape.matmul(pooled, bound.var(conv.weight))?;
    tape.add(y, bound.var(conv.bias))
}
