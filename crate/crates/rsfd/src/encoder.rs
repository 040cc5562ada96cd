//! Highway embedding layer (HEL) over per-modality video features and the
//! concatenated encoder memory fed to cross-attention.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::error::{Result, RsfdError};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Two modality matrices, `K` frames by `d_v` dims each.
#[derive(Debug, Clone)]
pub struct VideoFeatures {
    pub image: Array2<f64>,
    pub motion: Array2<f64>,
}

impl VideoFeatures {
    pub fn validate(&self) -> Result<()> {
        if self.image.dim() != self.motion.dim() {
            return Err(RsfdError::ShapeMismatch(format!(
                "image {:?} vs motion {:?}",
                self.image.dim(),
                self.motion.dim()
            )));
        }
        if self.image.iter().chain(self.motion.iter()).any(|x| !x.is_finite()) {
            return Err(RsfdError::NonFinite("video features".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.image.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// HEL weights for one modality, batch-norm state included.
#[derive(Debug, Clone)]
pub struct HighwayWeights {
    pub w_eh: Array2<f64>, // d_v x d_h
    pub w_ep: Array2<f64>, // d_h x d_h
    pub w_et: Array2<f64>, // d_h x d_h
    pub b_et: Array1<f64>, // d_h, gate bias
    pub bn_scale: Array1<f64>,
    pub bn_shift: Array1<f64>,
    pub bn_mean: Array1<f64>,
    pub bn_var: Array1<f64>,
    pub bn_initialized: bool,
}

fn uniform_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl HighwayWeights {
    pub fn init<R: Rng>(d_v: usize, d_h: usize, rng: &mut R) -> Self {
        HighwayWeights {
            w_eh: uniform_init(d_v, d_h, rng),
            w_ep: uniform_init(d_h, d_h, rng),
            w_et: uniform_init(d_h, d_h, rng),
            // gate starts near 0.27 so the transform path dominates early
            b_et: Array1::from_elem(d_h, -1.0),
            bn_scale: Array1::ones(d_h),
            bn_shift: Array1::zeros(d_h),
            bn_mean: Array1::zeros(d_h),
            bn_var: Array1::ones(d_h),
            bn_initialized: false,
        }
    }

    pub fn zeros_like(&self) -> Self {
        HighwayWeights {
            w_eh: Array2::zeros(self.w_eh.dim()),
            w_ep: Array2::zeros(self.w_ep.dim()),
            w_et: Array2::zeros(self.w_et.dim()),
            b_et: Array1::zeros(self.b_et.dim()),
            bn_scale: Array1::zeros(self.bn_scale.dim()),
            bn_shift: Array1::zeros(self.bn_shift.dim()),
            bn_mean: Array1::zeros(self.bn_mean.dim()),
            bn_var: Array1::zeros(self.bn_var.dim()),
            bn_initialized: false,
        }
    }

    /// Mark the batch-norm state as identity (mean 0, var 1). Used when
    /// evaluating a model that has never seen a training step.
    pub fn freeze_identity_stats(&mut self) {
        self.bn_mean.fill(0.0);
        self.bn_var.fill(1.0);
        self.bn_initialized = true;
    }
}

#[derive(Debug)]
pub struct HighwayCache {
    pub v: Array2<f64>,
    pub h: Array2<f64>,
    pub p: Array2<f64>,
    pub t: Array2<f64>,
    pub pre_bn: Array2<f64>,
    pub bn_xhat: Array2<f64>,
    pub bn_inv_std: Array1<f64>,
    pub train_mode: bool,
}

/// `BN(T(V) ∘ H(V) + (1 − T(V)) ∘ P(V))` with `H = V W_eh`,
/// `P = tanh(H W_ep)`, `T = sigmoid(H W_et + b_et)`.
///
/// Train mode normalizes with batch statistics over the frame axis and
/// updates the running moments; eval mode uses the running moments.
pub fn highway_embed(
    v: &Array2<f64>,
    w: &mut HighwayWeights,
    mode: Mode,
) -> Result<(Array2<f64>, HighwayCache)> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RsfdError::NonFinite("highway_embed input".into()));
    }
    if v.ncols() != w.w_eh.nrows() {
        return Err(RsfdError::ShapeMismatch(format!(
            "input has {} dims, w_eh expects {}",
            v.ncols(),
            w.w_eh.nrows()
        )));
    }
    let h = v.dot(&w.w_eh);
    let p = h.dot(&w.w_ep).mapv(f64::tanh);
    let t = (h.dot(&w.w_et) + &w.b_et).mapv(|x| 1.0 / (1.0 + (-x).exp()));
    let pre_bn = &t * &h + (1.0 - &t) * &p;

    let k = pre_bn.nrows() as f64;
    let (out, xhat, inv_std) = match mode {
        Mode::Train => {
            let mean = pre_bn.mean_axis(Axis(0)).unwrap();
            let var = pre_bn
                .mapv(|x| x * x)
                .mean_axis(Axis(0))
                .unwrap()
                - mean.mapv(|m| m * m);
            let var = var.mapv(|x| x.max(0.0));
            let inv_std = var.mapv(|x| 1.0 / (x + BN_EPS).sqrt());
            let xhat = (&pre_bn - &mean) * &inv_std;
            let out = &xhat * &w.bn_scale + &w.bn_shift;
            if w.bn_initialized {
                w.bn_mean = (1.0 - BN_MOMENTUM) * &w.bn_mean + BN_MOMENTUM * &mean;
                w.bn_var = (1.0 - BN_MOMENTUM) * &w.bn_var + BN_MOMENTUM * &var;
            } else {
                w.bn_mean = mean;
                w.bn_var = var;
                w.bn_initialized = true;
            }
            (out, xhat, inv_std)
        }
        Mode::Eval => {
            if !w.bn_initialized {
                return Err(RsfdError::UninitializedBatchNorm);
            }
            let inv_std = w.bn_var.mapv(|x| 1.0 / (x + BN_EPS).sqrt());
            let xhat = (&pre_bn - &w.bn_mean) * &inv_std;
            let out = &xhat * &w.bn_scale + &w.bn_shift;
            (out, xhat, inv_std)
        }
    };
    let _ = k;
    Ok((
        out,
        HighwayCache {
            v: v.clone(),
            h,
            p,
            t,
            pre_bn,
            bn_xhat: xhat,
            bn_inv_std: inv_std,
            train_mode: mode == Mode::Train,
        },
    ))
}

/// Backward through one HEL call. Accumulates parameter gradients into
/// `grads` and returns the gradient w.r.t. the input features.
pub fn highway_backward(
    d_out: &Array2<f64>,
    cache: &HighwayCache,
    w: &HighwayWeights,
    grads: &mut HighwayWeights,
) -> Array2<f64> {
    let n = d_out.nrows() as f64;

    grads.bn_scale = &grads.bn_scale + &(d_out * &cache.bn_xhat).sum_axis(Axis(0));
    grads.bn_shift = &grads.bn_shift + &d_out.sum_axis(Axis(0));

    let d_xhat = d_out * &w.bn_scale;
    let d_pre = if cache.train_mode {
        // batch-stat backward: d_x = inv_std/N * (N d_xhat - Σd_xhat - xhat Σ(d_xhat∘xhat))
        let sum_dxhat = d_xhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&d_xhat * &cache.bn_xhat).sum_axis(Axis(0));
        let term = n * &d_xhat - &sum_dxhat - &cache.bn_xhat * &sum_dxhat_xhat;
        term * &cache.bn_inv_std / n
    } else {
        d_xhat * &cache.bn_inv_std
    };

    let d_t = &d_pre * &(&cache.h - &cache.p);
    let d_h_direct = &d_pre * &cache.t;
    let d_p = &d_pre * &(1.0 - &cache.t);

    // through P = tanh(H w_ep)
    let d_hp = &d_p * &cache.p.mapv(|x| 1.0 - x * x);
    grads.w_ep = &grads.w_ep + &cache.h.t().dot(&d_hp);
    let d_h_via_p = d_hp.dot(&w.w_ep.t());

    // through T = sigmoid(H w_et + b_et)
    let d_z = &d_t * &cache.t * &cache.t.mapv(|x| 1.0 - x);
    grads.w_et = &grads.w_et + &cache.h.t().dot(&d_z);
    grads.b_et = &grads.b_et + &d_z.sum_axis(Axis(0));
    let d_h_via_t = d_z.dot(&w.w_et.t());

    let d_h = d_h_direct + d_h_via_p + d_h_via_t;
    grads.w_eh = &grads.w_eh + &cache.v.t().dot(&d_h);
    d_h.dot(&w.w_eh.t())
}

pub struct EncodeCache {
    pub image: HighwayCache,
    pub motion: HighwayCache,
}

/// Encoder memory `R`: image rows first, motion rows below, `2K x d_h`.
pub fn encode_video(
    features: &VideoFeatures,
    w_image: &mut HighwayWeights,
    w_motion: &mut HighwayWeights,
    mode: Mode,
) -> Result<(Array2<f64>, EncodeCache)> {
    features.validate()?;
    let (ri, ci) = highway_embed(&features.image, w_image, mode)?;
    let (rm, cm) = highway_embed(&features.motion, w_motion, mode)?;
    let mut r = Array2::zeros((ri.nrows() + rm.nrows(), ri.ncols()));
    r.slice_mut(ndarray::s![..ri.nrows(), ..]).assign(&ri);
    r.slice_mut(ndarray::s![ri.nrows().., ..]).assign(&rm);
    Ok((r, EncodeCache { image: ci, motion: cm }))
}

/// Backward for `encode_video`; splits `d_r` into modality halves.
pub fn encode_video_backward(
    d_r: &Array2<f64>,
    cache: &EncodeCache,
    w_image: &HighwayWeights,
    w_motion: &HighwayWeights,
    g_image: &mut HighwayWeights,
    g_motion: &mut HighwayWeights,
) {
    let k = cache.image.v.nrows();
    let d_img = d_r.slice(ndarray::s![..k, ..]).to_owned();
    let d_mot = d_r.slice(ndarray::s![k.., ..]).to_owned();
    highway_backward(&d_img, &cache.image, w_image, g_image);
    highway_backward(&d_mot, &cache.motion, w_motion, g_motion);
}
