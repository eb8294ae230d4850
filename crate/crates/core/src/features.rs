//! Input feature block (skeleton ⊕ positional encoding) and the pairwise distance channel.

use ndarray::{concatenate, s, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{SceneClip, Skeleton, NUM_JOINTS};

pub const SKELETON_DIM: usize = 2 * NUM_JOINTS;
pub const POSITION_DIM: usize = 32;
pub const FEATURE_DIM: usize = SKELETON_DIM + POSITION_DIM;

const FREQS_PER_AXIS: usize = POSITION_DIM / 4;

/// Coordinate frame used for the skeleton and positional features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoordMode {
    /// Divide pixel coordinates by the scene extent.
    #[default]
    Normalized,
    /// Feed raw pixel coordinates.
    Raw,
}

fn check_extent(extent: (f64, f64)) -> Result<()> {
    if !(extent.0 > 0.0 && extent.1 > 0.0) {
        return Err(Error::Validation(format!("scene extent must be positive, got {extent:?}")));
    }
    Ok(())
}

/// Joint-major flattening (j1x, j1y, ..., j16x, j16y), divided by the scene extent.
pub fn normalize_skeleton(joints: &Skeleton, extent: (f64, f64)) -> Result<[f64; SKELETON_DIM]> {
    check_extent(extent)?;
    let mut out = [0.0; SKELETON_DIM];
    for (j, p) in joints.iter().enumerate() {
        if !(p[0].is_finite() && p[1].is_finite()) {
            return Err(Error::Validation(format!("joint {j} is not finite")));
        }
        out[2 * j] = p[0] / extent.0;
        out[2 * j + 1] = p[1] / extent.1;
    }
    Ok(out)
}

fn encode_axis(v: f64, out: &mut [f64]) {
    for k in 0..FREQS_PER_AXIS {
        let wavelength = 10000f64.powf(2.0 * k as f64 / (2 * FREQS_PER_AXIS) as f64);
        let a = v / wavelength;
        out[2 * k] = a.sin();
        out[2 * k + 1] = a.cos();
    }
}

/// Sinusoidal encoding of a subject center: 16 dims for x followed by 16 for y,
/// each interleaving sin/cos over 8 geometric wavelengths starting at 1.
pub fn encode_position(center: [f64; 2], extent: (f64, f64), mode: CoordMode) -> Result<[f64; POSITION_DIM]> {
    check_extent(extent)?;
    if !(center[0].is_finite() && center[1].is_finite()) {
        return Err(Error::Validation("center is not finite".into()));
    }
    let (x, y) = match mode {
        CoordMode::Normalized => (center[0] / extent.0, center[1] / extent.1),
        CoordMode::Raw => (center[0], center[1]),
    };
    let mut out = [0.0; POSITION_DIM];
    encode_axis(x, &mut out[..POSITION_DIM / 2]);
    encode_axis(y, &mut out[POSITION_DIM / 2..]);
    Ok(out)
}

/// K and P blocks for one clip, with the presence mask carried along.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    /// T×N×32 skeleton features.
    pub skeleton: Array3<f64>,
    /// T×N×32 positional features.
    pub position: Array3<f64>,
    /// Frame-major T*N.
    pub presence: Vec<bool>,
}

impl FeatureBlock {
    pub fn frames(&self) -> usize {
        self.skeleton.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.skeleton.shape()[1]
    }

    /// V = K ⊕ P along the feature axis.
    pub fn v(&self) -> Array3<f64> {
        concatenate(Axis(2), &[self.skeleton.view(), self.position.view()]).expect("matching shapes")
    }
}

/// Per-subject centers as a T×N×2 array (zero where absent).
pub fn centers(clip: &SceneClip) -> Array3<f64> {
    let mut c = Array3::zeros((clip.frames, clip.slots, 2));
    for t in 0..clip.frames {
        for i in clip.present_in_frame(t) {
            let p = clip.center(t, i);
            c[[t, i, 0]] = p[0];
            c[[t, i, 1]] = p[1];
        }
    }
    c
}

/// Positional block for arbitrary centers; absent rows stay zero.
pub fn position_block(centers: &Array3<f64>, presence: &[bool], extent: (f64, f64), mode: CoordMode) -> Result<Array3<f64>> {
    let (t_len, n) = (centers.shape()[0], centers.shape()[1]);
    let mut p = Array3::zeros((t_len, n, POSITION_DIM));
    for t in 0..t_len {
        for i in 0..n {
            if presence[t * n + i] {
                let enc = encode_position([centers[[t, i, 0]], centers[[t, i, 1]]], extent, mode)?;
                p.slice_mut(s![t, i, ..]).assign(&ndarray::ArrayView1::from(&enc[..]));
            }
        }
    }
    Ok(p)
}

pub fn assemble_feature_block(clip: &SceneClip) -> Result<FeatureBlock> {
    assemble_feature_block_with(clip, CoordMode::Normalized)
}

pub fn assemble_feature_block_with(clip: &SceneClip, mode: CoordMode) -> Result<FeatureBlock> {
    let (t_len, n) = (clip.frames, clip.slots);
    let mut k = Array3::zeros((t_len, n, SKELETON_DIM));
    let extent = match mode {
        CoordMode::Normalized => clip.extent,
        CoordMode::Raw => (1.0, 1.0),
    };
    for t in 0..t_len {
        for i in clip.present_in_frame(t) {
            let sk = normalize_skeleton(clip.joints(t, i), extent)?;
            k.slice_mut(s![t, i, ..]).assign(&ndarray::ArrayView1::from(&sk[..]));
        }
    }
    let position = position_block(&centers(clip), clip.presence(), clip.extent, mode)?;
    Ok(FeatureBlock {
        skeleton: k,
        position,
        presence: clip.presence().to_vec(),
    })
}

/// D[t][i][j] = min(1, |c_i - c_j| / diagonal); pairs with an absent subject are 1, diagonal 0.
pub fn distance_channel(centers: &Array3<f64>, presence: &[bool], extent: (f64, f64)) -> Array3<f64> {
    let (t_len, n) = (centers.shape()[0], centers.shape()[1]);
    let diag = extent.0.hypot(extent.1);
    let mut d = Array3::from_elem((t_len, n, n), 1.0);
    for t in 0..t_len {
        for i in 0..n {
            d[[t, i, i]] = 0.0;
            if !presence[t * n + i] {
                continue;
            }
            for j in (i + 1)..n {
                if !presence[t * n + j] {
                    continue;
                }
                let dist = (centers[[t, i, 0]] - centers[[t, j, 0]]).hypot(centers[[t, i, 1]] - centers[[t, j, 1]]);
                let v = (dist / diag).min(1.0);
                d[[t, i, j]] = v;
                d[[t, j, i]] = v;
            }
        }
    }
    d
}

pub fn pairwise_distance_channel(clip: &SceneClip) -> Array3<f64> {
    distance_channel(&centers(clip), clip.presence(), clip.extent)
}
