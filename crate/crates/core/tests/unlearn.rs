use std::sync::OnceLock;

use shiftlab::corpus::{generate_corpus, Corpus, Split, TokenSequence};
use shiftlab::importance::{entropy_importance, mask_by_percentile, ImportanceMask};
use shiftlab::model::{AdapterBank, ModelConfig, ParamSet, Parameters, Trainable};
use shiftlab::unlearn::{
    asp_loss, cross_entropy, ga_baseline, run_unlearning, train_to_memorization, AdamW, AlphaMode, Method,
    PretrainConfig, UnlearnConfig,
};

struct Fixture {
    corpus: Corpus,
    params: Parameters,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_corpus(1, 12, 2).unwrap();
        let mut cfg = ModelConfig::new(corpus.vocab.len());
        cfg.n_layers = 2;
        cfg.n_heads = 2;
        cfg.d_model = 16;
        cfg.max_seq = 32;
        cfg.adapter_rank = 4;
        let init = Parameters::init(&cfg, 3).unwrap();
        let pc =
            PretrainConfig { max_epochs: 60, learning_rate: 1e-2, batch_size: 8, eval_every: 20, ..Default::default() };
        let out = train_to_memorization(init, &corpus, &pc, 0, None, |_| {}).unwrap();
        Fixture { corpus, params: out.params }
    })
}

fn forget_batch(f: &Fixture) -> (Vec<TokenSequence>, Vec<ImportanceMask>) {
    let seqs: Vec<TokenSequence> = f.corpus.examples(Split::Forget).unwrap().into_iter().map(|e| e.seq).collect();
    let masks = seqs
        .iter()
        .map(|s| {
            let none = AdapterBank::empty(&f.params.config);
            mask_by_percentile(&entropy_importance(&f.params, &none, s).unwrap(), 60.0).unwrap()
        })
        .collect();
    (seqs, masks)
}

fn short_cfg(method: Method) -> UnlearnConfig {
    UnlearnConfig { method, max_epochs: 2, early_stop: false, learning_rate: 1e-2, ..Default::default() }
}

#[test]
fn asp_loss_falls_over_fifty_steps() {
    let f = fixture();
    let (seqs, masks) = forget_batch(f);
    let b: Vec<&TokenSequence> = seqs.iter().collect();
    let m: Vec<&ImportanceMask> = masks.iter().collect();
    let mut a = AdapterBank::init(&f.params.config, 0).unwrap();
    let mut opt = AdamW::new(&a, 1e-2, 0.0);
    let first = asp_loss(&f.params, &a, &b, &m, 0.99, false).unwrap().0;
    let mut last = first;
    for _ in 0..50 {
        let (l, g) = asp_loss(&f.params, &a, &b, &m, 0.99, true).unwrap();
        opt.step(&mut a, &g.unwrap());
        last = l;
    }
    let end = asp_loss(&f.params, &a, &b, &m, 0.99, false).unwrap().0;
    assert!(end < first * 0.9, "asp {first} -> {last} -> {end}");
}

#[test]
fn ascent_raises_forget_cross_entropy_every_step() {
    let f = fixture();
    let (seqs, _) = forget_batch(f);
    let b: Vec<&TokenSequence> = seqs.iter().collect();
    let mut a = AdapterBank::init(&f.params.config, 0).unwrap();
    let mut opt = AdamW::new(&a, 1e-4, 0.0);
    let mut prev = cross_entropy(&f.params, &a, &b, None, 1.0).unwrap().0;
    for step in 0..5 {
        let g = cross_entropy(&f.params, &a, &b, Some(Trainable::Adapters), -1.0).unwrap().1.unwrap().into_adapters();
        opt.step(&mut a, &g);
        let ce = cross_entropy(&f.params, &a, &b, None, 1.0).unwrap().0;
        assert!(ce > prev, "step {step}: {prev} -> {ce}");
        prev = ce;
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let f = fixture();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    for method in [Method::As, Method::Ga] {
        let cfg = UnlearnConfig { learning_rate: 0.0, max_epochs: 1, ..short_cfg(method) };
        let out = match method {
            Method::As => run_unlearning(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap(),
            Method::Ga => ga_baseline(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap(),
        };
        assert_eq!(out.adapters.flatten(), init.flatten());
    }
}

#[test]
fn no_shift_is_a_no_op() {
    let f = fixture();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    let cfg = UnlearnConfig { lambda: 0.0, beta: 0.0, max_epochs: 1, ..short_cfg(Method::As) };
    let out = run_unlearning(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap();
    assert_eq!(out.adapters.flatten(), init.flatten());
    let r = &out.state.history[0];
    assert_eq!((r.forget_loss, r.retain_loss), (0.0, 0.0));
}

#[test]
fn only_adapters_move_and_runs_repeat() {
    let f = fixture();
    let before = f.params.flatten();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    let cfg = UnlearnConfig { max_epochs: 3, ..short_cfg(Method::As) };
    let mut seen = Vec::new();
    let a = run_unlearning(&f.params, &init, &f.corpus, &cfg, |r| {
        seen.push(r.epoch);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, [1, 2, 3]);
    assert_eq!(f.params.flatten(), before);
    assert_ne!(a.adapters.flatten(), init.flatten());
    for r in &a.state.history {
        assert!((cfg.alpha_min..=cfg.alpha_max).contains(&r.alpha), "alpha {}", r.alpha);
        assert!((-1.0..=1.0).contains(&r.grad_cosine));
    }

    let b = run_unlearning(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.state.log_csv(), b.state.log_csv());
    assert_eq!(a.adapters.flatten(), b.adapters.flatten());

    let other = UnlearnConfig { seed: 1, ..cfg.clone() };
    let c = run_unlearning(&f.params, &init, &f.corpus, &other, |_| Ok(())).unwrap();
    assert_ne!(a.adapters.flatten(), c.adapters.flatten());
}

#[test]
fn fixed_alpha_never_moves() {
    let f = fixture();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    let cfg = UnlearnConfig { alpha_mode: AlphaMode::Fixed, alpha0: 0.3, ..short_cfg(Method::As) };
    let out = run_unlearning(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap();
    assert!(out.state.history.iter().all(|r| r.alpha == 0.3));
}

#[test]
fn ascent_baseline_raises_forget_loss() {
    let f = fixture();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    let cfg = UnlearnConfig { learning_rate: 1e-3, ..short_cfg(Method::Ga) };
    let out = ga_baseline(&f.params, &init, &f.corpus, &cfg, |_| Ok(())).unwrap();
    let h = &out.state.history;
    assert_eq!(h.len(), 2);
    assert!(h[1].forget_loss > h[0].forget_loss);
    assert_eq!(out.state.method, Method::Ga);
}

#[test]
fn callback_errors_abort_the_run() {
    let f = fixture();
    let init = AdapterBank::init(&f.params.config, 5).unwrap();
    let cfg = short_cfg(Method::As);
    let err =
        run_unlearning(&f.params, &init, &f.corpus, &cfg, |_| Err(shiftlab::Error::InvalidArgument("stop".into())));
    assert!(err.is_err());
}
