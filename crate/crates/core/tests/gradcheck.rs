//! Central finite differences against the analytic backward pass on a
//! two-layer, width-8, context-8 model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftlab::corpus::TokenSequence;
use shiftlab::importance::ImportanceMask;
use shiftlab::model::{AdapterBank, AdapterSite, ModelConfig, ParamSet, Parameters, Trainable};
use shiftlab::unlearn::{akl_loss, as_loss, asp_loss, cross_entropy};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
const FLOOR: f64 = 1e-6;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

fn mini(sites: Vec<AdapterSite>) -> (Parameters, AdapterBank) {
    let mut cfg = ModelConfig::new(13);
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 8;
    cfg.max_seq = 8;
    cfg.adapter_rank = 2;
    cfg.adapter_sites = sites;
    let mut p = Parameters::init(&cfg, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // larger weights than the init scale so attention is far from uniform
    for (_, mut a) in p.arrays_mut() {
        a.mapv_inplace(|x| x * 10.0 + rng.random_range(-0.05..0.05));
    }
    let mut a = AdapterBank::init(&cfg, 42).unwrap();
    for (_, mut arr) in a.arrays_mut() {
        arr.mapv_inplace(|_| rng.random_range(-0.4..0.4));
    }
    (p, a)
}

fn batch() -> (Vec<TokenSequence>, Vec<ImportanceMask>) {
    let seqs = vec![
        TokenSequence { ids: vec![1, 5, 7, 3, 9, 11, 12, 2], boundary: 3 },
        TokenSequence { ids: vec![1, 6, 3, 10, 4, 2], boundary: 2 },
        TokenSequence { ids: vec![1, 8, 8, 3, 2], boundary: 3 },
    ];
    let flags = [
        vec![false, true, true, false, true, false, true, false],
        vec![false, true, false, true, false, false],
        vec![true, false, true, false, false],
    ];
    let masks = flags.iter().map(|f| ImportanceMask { flagged: f.clone(), threshold_pct: 40.0 }).collect();
    (seqs, masks)
}

/// Compare `analytic` with central differences of `loss` over every value of
/// `target`. Returns the worst relative error.
fn check<P: ParamSet + Clone>(target: &P, analytic: &[f64], loss: impl Fn(&P) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = target.clone();
    let mut idx = 0;
    let names: Vec<String> = target.arrays().into_iter().map(|(n, _)| n).collect();
    for (ai, name) in names.iter().enumerate() {
        let len = target.arrays()[ai].1.len();
        for k in 0..len {
            let orig = { probe.arrays()[ai].1.iter().nth(k).copied().unwrap() };
            set(&mut probe, ai, k, orig + STEP);
            let up = loss(&probe);
            set(&mut probe, ai, k, orig - STEP);
            let down = loss(&probe);
            set(&mut probe, ai, k, orig);
            let fd = (up - down) / (2.0 * STEP);
            let e = rel_err(analytic[idx], fd);
            assert!(e <= TOL, "{name}[{k}]: analytic {} vs numeric {fd} (rel {e:.2e})", analytic[idx]);
            worst = worst.max(e);
            idx += 1;
        }
    }
    assert_eq!(idx, analytic.len());
    worst
}

fn set<P: ParamSet>(p: &mut P, array: usize, k: usize, v: f64) {
    let mut arrays = p.arrays_mut();
    *arrays[array].1.iter_mut().nth(k).unwrap() = v;
}

#[test]
fn as_loss_adapter_gradients_match_finite_differences() {
    for sites in [vec![AdapterSite::Query, AdapterSite::Key], AdapterSite::ALL.to_vec()] {
        let (p, a) = mini(sites);
        let (seqs, masks) = batch();
        let fb: Vec<&TokenSequence> = seqs[..2].iter().collect();
        let fm: Vec<&ImportanceMask> = masks[..2].iter().collect();
        let nb: Vec<&TokenSequence> = seqs[1..].iter().collect();
        let nm: Vec<&ImportanceMask> = masks[1..].iter().collect();
        let (lambda, beta, alpha) = (0.9, 0.6, 0.35);

        let (_, ga) = asp_loss(&p, &a, &fb, &fm, lambda, true).unwrap();
        let (_, gk) = akl_loss(&p, &a, &nb, &nm, beta, true).unwrap();
        let mut g = ga.unwrap();
        g.scale(alpha);
        g.add_scaled(&gk.unwrap(), 1.0 - alpha);
        assert!(g.sq_norm() > 0.0);
        let worst = check(&a, &g.flatten(), |probe| {
            let asp = asp_loss(&p, probe, &fb, &fm, lambda, false).unwrap().0;
            let akl = akl_loss(&p, probe, &nb, &nm, beta, false).unwrap().0;
            as_loss(asp, akl, alpha)
        });
        eprintln!("as_loss worst relative error {worst:.2e}");
    }
}

#[test]
fn cross_entropy_base_gradients_match_finite_differences() {
    let (p, _) = mini(vec![AdapterSite::Query, AdapterSite::Key]);
    let none = AdapterBank::empty(&p.config);
    let (seqs, _) = batch();
    let b: Vec<&TokenSequence> = seqs.iter().collect();
    let g = cross_entropy(&p, &none, &b, Some(Trainable::Base), 1.0).unwrap().1.unwrap().into_base();
    let worst = check(&p, &g.flatten(), |probe| cross_entropy(probe, &none, &b, None, 1.0).unwrap().0);
    eprintln!("cross-entropy worst relative error {worst:.2e}");
}

#[test]
fn ascent_adapter_gradients_match_finite_differences() {
    let (p, a) = mini(AdapterSite::ALL.to_vec());
    let (seqs, _) = batch();
    let b: Vec<&TokenSequence> = seqs.iter().collect();
    let g = cross_entropy(&p, &a, &b, Some(Trainable::Adapters), -1.0).unwrap().1.unwrap().into_adapters();
    check(&a, &g.flatten(), |probe| -cross_entropy(&p, probe, &b, None, 1.0).unwrap().0);
}

#[test]
fn parameters_without_influence_get_zero_gradient() {
    // token 12 never appears, so its embedding row gets nothing
    let (p, _) = mini(vec![AdapterSite::Query, AdapterSite::Key]);
    let none = AdapterBank::empty(&p.config);
    let seqs = [TokenSequence { ids: vec![1, 5, 3, 7, 2], boundary: 2 }];
    let b: Vec<&TokenSequence> = seqs.iter().collect();
    let g = cross_entropy(&p, &none, &b, Some(Trainable::Base), 1.0).unwrap().1.unwrap().into_base();
    assert!(g.tok_emb.row(12).iter().all(|&x| x == 0.0));
    assert!(g.pos_emb.row(6).iter().all(|&x| x == 0.0));
}

#[test]
fn kl_kernel_gradients_match_finite_differences() {
    use ndarray::Array4;
    use shiftlab::shift::{kl_rowwise, kl_rowwise_grad_p, kl_rowwise_grad_q, KL_EPS};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut rand_rows = || {
        let mut t = Array4::from_shape_fn((2, 2, 3, 4), |_| rng.random_range(0.05..1.0));
        for mut row in t.rows_mut() {
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        t
    };
    let (p, q) = (rand_rows(), rand_rows());
    let gp = kl_rowwise_grad_p(p.view(), q.view(), KL_EPS).unwrap();
    let gq = kl_rowwise_grad_q(p.view(), q.view(), KL_EPS).unwrap();
    let f = |p: &Array4<f64>, q: &Array4<f64>| kl_rowwise(p.view(), q.view(), KL_EPS).unwrap();
    for idx in ndarray::indices(p.dim()) {
        let (mut up, mut down) = (p.clone(), p.clone());
        up[idx] += STEP;
        down[idx] -= STEP;
        let fd = (f(&up, &q) - f(&down, &q)) / (2.0 * STEP);
        assert!((fd - gp[idx]).abs() <= 1e-6, "dP{idx:?}: {} vs {fd}", gp[idx]);
        let (mut up, mut down) = (q.clone(), q.clone());
        up[idx] += STEP;
        down[idx] -= STEP;
        let fd = (f(&p, &up) - f(&p, &down)) / (2.0 * STEP);
        assert!((fd - gq[idx]).abs() <= 1e-6, "dQ{idx:?}: {} vs {fd}", gq[idx]);
    }
}
