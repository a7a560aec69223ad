use ndarray::{s, Array1, Array2, Array4, Axis, Zip};

use super::forward::{gelu_grad, BatchTrace};
use super::params::{AdapterBank, AdapterSite, LowRank, ParamSet, Parameters};
use crate::error::{Error, Result};

/// Which parameter set receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Adapters,
}

/// Gradients flowing into a packed forward trace. Either part may be absent.
#[derive(Debug, Default)]
pub struct Upstream {
    /// `N x V`, aligned with `BatchTrace::logits`.
    pub dlogits: Option<Array2<f64>>,
    /// One `(L, H, n, n)` tensor per sequence: gradient of the loss with
    /// respect to the post-softmax attention probabilities.
    pub dattn: Option<Vec<Array4<f64>>>,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Gradients {
    Base(Parameters),
    Adapters(AdapterBank),
}

impl Gradients {
    pub fn into_base(self) -> Parameters {
        match self {
            Gradients::Base(p) => p,
            Gradients::Adapters(_) => panic!("expected base-parameter gradients"),
        }
    }

    pub fn into_adapters(self) -> AdapterBank {
        match self {
            Gradients::Adapters(a) => a,
            Gradients::Base(_) => panic!("expected adapter gradients"),
        }
    }
}

fn rmsnorm_backward(
    x: &Array2<f64>,
    inv_rms: &Array1<f64>,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
    dgain: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dg_acc = dgain;
    for ((xr, dyr), (mut dxr, &r)) in
        x.axis_iter(Axis(0)).zip(dy.axis_iter(Axis(0))).zip(dx.axis_iter_mut(Axis(0)).zip(inv_rms.iter()))
    {
        let gdy = &dyr * gain;
        let dot = gdy.dot(&xr);
        let c = r * r * r * dot / d;
        Zip::from(&mut dxr).and(&gdy).and(&xr).for_each(|o, &g, &xv| *o = r * g - c * xv);
        if let Some(dg) = dg_acc.as_deref_mut() {
            Zip::from(dg).and(&dyr).and(&xr).for_each(|o, &dyv, &xv| *o += dyv * xv * r);
        }
    }
    dx
}

/// Backward through `out = x·Wᵀ + (x·downᵀ)·upᵀ`. Accumulates into the
/// provided gradient slots and returns `d x`.
fn project_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    lr: Option<(&LowRank, &Array2<f64>)>,
    dout: &Array2<f64>,
    dw: Option<&mut Array2<f64>>,
    dlr: Option<&mut LowRank>,
    need_dx: bool,
) -> Option<Array2<f64>> {
    if let Some(dw) = dw {
        *dw += &dout.t().dot(x);
    }
    let mut dx = need_dx.then(|| dout.dot(w));
    if let Some((lr, t)) = lr {
        let dt = dout.dot(&lr.up);
        if let Some(g) = dlr {
            g.up += &dout.t().dot(t);
            g.down += &dt.t().dot(x);
        }
        if let Some(dx) = dx.as_mut() {
            *dx += &dt.dot(&lr.down);
        }
    }
    dx
}

fn lowrank_slot(bank: &mut Option<AdapterBank>, layer: usize, site: AdapterSite) -> Option<&mut LowRank> {
    bank.as_mut().and_then(|b| b.sites[layer][site.index()].as_mut())
}

/// Reverse-mode pass over a packed forward trace.
///
/// `adapters` must be the bank that produced `trace`. With
/// [`Trainable::Adapters`] only adapter gradients are accumulated and the
/// base weight products are skipped entirely.
pub fn backward(
    params: &Parameters,
    adapters: &AdapterBank,
    trace: &BatchTrace,
    upstream: &Upstream,
    trainable: Trainable,
) -> Result<Gradients> {
    let cfg = &params.config;
    let total = trace.ids.len();
    let dh_dim = cfg.d_head();
    let scale = 1.0 / (dh_dim as f64).sqrt();

    if trainable == Trainable::Adapters && !(adapters.enabled && !adapters.is_empty()) {
        return Err(Error::invalid("adapter gradients requested but no adapters are active"));
    }
    if trace.adapters_enabled != adapters.enabled {
        return Err(Error::invalid("trace was produced with a different adapter state"));
    }
    if let Some(dl) = &upstream.dlogits {
        if dl.dim() != trace.logits.dim() {
            return Err(Error::ShapeMismatch(format!("dlogits {:?} vs logits {:?}", dl.dim(), trace.logits.dim())));
        }
    }
    if let Some(da) = &upstream.dattn {
        if da.len() != trace.num_sequences() || da.iter().zip(&trace.attention).any(|(g, a)| g.dim() != a.values.dim())
        {
            return Err(Error::ShapeMismatch("attention gradient layout differs from trace".into()));
        }
    }

    let mut gbase = (trainable == Trainable::Base).then(|| params.zeros_like());
    let mut gadapt = (trainable == Trainable::Adapters).then(|| adapters.zeros_like());

    let mut dh: Option<Array2<f64>> = None;
    if let Some(dlog) = &upstream.dlogits {
        if let Some(g) = gbase.as_mut() {
            g.w_out += &dlog.t().dot(&trace.uf);
            g.b_out += &dlog.sum_axis(Axis(0));
        }
        let duf = dlog.dot(&params.w_out);
        let dgain = gbase.as_mut().map(|g| &mut g.final_norm);
        dh = Some(rmsnorm_backward(&trace.final_in, &trace.inv_rms_f, &params.final_norm, &duf, dgain));
    }

    for l in (0..cfg.n_layers).rev() {
        let cache = &trace.layers[l];
        let layer = &params.layers[l];
        if dh.is_none() && upstream.dattn.is_none() {
            continue;
        }
        let need_input_grad = l > 0 || gbase.is_some();

        // MLP branch
        let dh_mid = match dh.take() {
            Some(dout) => {
                let (gdown, gbd, gup, gbu, gnorm) = match gbase.as_mut() {
                    Some(g) => {
                        let gl = &mut g.layers[l];
                        (
                            Some(&mut gl.w_down),
                            Some(&mut gl.b_down),
                            Some(&mut gl.w_up),
                            Some(&mut gl.b_up),
                            Some(&mut gl.mlp_norm),
                        )
                    }
                    None => (None, None, None, None, None),
                };
                if let Some(gw) = gdown {
                    *gw += &dout.t().dot(&cache.act);
                }
                if let Some(gb) = gbd {
                    *gb += &dout.sum_axis(Axis(0));
                }
                let mut dz = dout.dot(&layer.w_down);
                Zip::from(&mut dz).and(&cache.z).for_each(|g, &z| *g *= gelu_grad(z));
                if let Some(gw) = gup {
                    *gw += &dz.t().dot(&cache.u2);
                }
                if let Some(gb) = gbu {
                    *gb += &dz.sum_axis(Axis(0));
                }
                let du2 = dz.dot(&layer.w_up);
                let dx2 = rmsnorm_backward(&cache.h_mid, &cache.inv_rms2, &layer.mlp_norm, &du2, gnorm);
                Some(dout + &dx2)
            }
            None => None,
        };

        // attention output projection
        let dctx = match &dh_mid {
            Some(dm) => {
                let lr = adapters
                    .site(l, AdapterSite::Output)
                    .map(|lr| (lr, cache.lowrank_in[AdapterSite::Output.index()].as_ref().expect("cached")));
                let dw = gbase.as_mut().map(|g| &mut g.layers[l].wo);
                let dlr = lowrank_slot(&mut gadapt, l, AdapterSite::Output);
                project_backward(&cache.ctx, &layer.wo, lr, dm, dw, dlr, true).expect("requested")
            }
            None => Array2::zeros((total, cfg.d_model)),
        };

        let mut dq = Array2::<f64>::zeros((total, cfg.d_model));
        let mut dk = Array2::<f64>::zeros((total, cfg.d_model));
        let mut dv = Array2::<f64>::zeros((total, cfg.d_model));
        for (s, att) in trace.attention.iter().enumerate() {
            let (off, n) = (trace.offsets[s], trace.lens[s]);
            for hd in 0..cfg.n_heads {
                let cols = hd * dh_dim..(hd + 1) * dh_dim;
                let rows = off..off + n;
                let probs = att.values.slice(s![l, hd, .., ..]);
                let dctx_h = dctx.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let mut da = dctx_h.dot(&vh.t());
                if let Some(inj) = &upstream.dattn {
                    da += &inj[s].slice(s![l, hd, .., ..]);
                }
                dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&probs.t().dot(&dctx_h));
                // softmax: dS_ij = P_ij (dA_ij - sum_k P_ik dA_ik)
                let mut dscore = Array2::<f64>::zeros((n, n));
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..=i {
                        dot += probs[[i, j]] * da[[i, j]];
                    }
                    for j in 0..=i {
                        dscore[[i, j]] = probs[[i, j]] * (da[[i, j]] - dot) * scale;
                    }
                }
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&dscore.dot(&kh));
                dk.slice_mut(s![rows, cols]).assign(&dscore.t().dot(&qh));
            }
        }

        let mut du1 = Array2::<f64>::zeros((total, cfg.d_model));
        for (site, dout) in [(AdapterSite::Query, &dq), (AdapterSite::Key, &dk), (AdapterSite::Value, &dv)] {
            let lr = adapters.site(l, site).map(|lr| (lr, cache.lowrank_in[site.index()].as_ref().expect("cached")));
            let dw = gbase.as_mut().map(|g| match site {
                AdapterSite::Query => &mut g.layers[l].wq,
                AdapterSite::Key => &mut g.layers[l].wk,
                _ => &mut g.layers[l].wv,
            });
            let dlr = lowrank_slot(&mut gadapt, l, site);
            if let Some(dx) = project_backward(&cache.u1, layer.projection(site), lr, dout, dw, dlr, need_input_grad) {
                du1 += &dx;
            }
        }

        if need_input_grad {
            let gnorm = gbase.as_mut().map(|g| &mut g.layers[l].attn_norm);
            let dx1 = rmsnorm_backward(&cache.x, &cache.inv_rms1, &layer.attn_norm, &du1, gnorm);
            dh = Some(match dh_mid {
                Some(dm) => dm + &dx1,
                None => dx1,
            });
        }
    }

    if let (Some(g), Some(dx)) = (gbase.as_mut(), dh.as_ref()) {
        for (s, &off) in trace.offsets.iter().enumerate() {
            for p in 0..trace.lens[s] {
                let row = dx.row(off + p);
                let id = trace.ids[off + p] as usize;
                let mut te = g.tok_emb.row_mut(id);
                te += &row;
                let mut pe = g.pos_emb.row_mut(p);
                pe += &row;
            }
        }
    }

    let grads = match (gbase, gadapt) {
        (Some(g), _) => Gradients::Base(g),
        (None, Some(g)) => Gradients::Adapters(g),
        (None, None) => unreachable!("one gradient set is always allocated"),
    };
    let finite = match &grads {
        Gradients::Base(g) => g.flatten().iter().all(|x| x.is_finite()),
        Gradients::Adapters(g) => g.flatten().iter().all(|x| x.is_finite()),
    };
    if !finite {
        return Err(Error::NonFinite("gradient contains NaN or infinity".into()));
    }
    Ok(grads)
}
