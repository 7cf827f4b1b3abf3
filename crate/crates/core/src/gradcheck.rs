//! Central finite-difference gradient checks, plus the standard suites over
//! every layer and every model family at tiny sizes.

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::layers::{
    Activation, BiLstmLayer, ConformerLayer, ContextNetBlock, ConvModule, FeedForward, Mhsa, SeqCtx,
    SqueezeExcite, SubsampleFrontend, TransformerLayer,
};
use crate::models::{Arch, ArchConfig, Model, N_MELS};
use crate::rf::AttnRange;
use crate::rng::{seeded, Rng};
use crate::store::{Mode, ParamBuilder, ParamStore, Session};
use crate::{Result, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const PROBES: usize = 120;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport {
    pub probes: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn passes(&self) -> bool {
        self.probes >= 100 && self.max_rel < TOLERANCE
    }
}

pub fn randn(shape: &[usize], scale: f64, seed: u64) -> Tensor {
    let mut r = seeded(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(&mut r);
        scale * z
    })
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    // Gradients that vanish identically (e.g. a bias feeding a batch norm) leave
    // only finite-difference round-off of order 1e-10, hence the floor.
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Up to `n` distinct flat positions across tensors with the given lengths.
fn probe_sites(lens: &[usize], n: usize, seed: u64) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = lens
        .iter()
        .enumerate()
        .flat_map(|(t, &len)| (0..len).map(move |i| (t, i)))
        .collect();
    if all.len() <= n {
        return all;
    }
    sample(&mut seeded(seed), all.len(), n)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

/// Weighted-sum readout `Σ out ⊙ w` with fixed random weights; scalars pass through.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    if g.value(out).len() == 1 {
        return g.reshape(out, &[1]);
    }
    let w = g.constant(randn(g.shape(out), 1.0, seed ^ 0xfeed));
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// Checks the gradients of a pure graph function of `inputs`.
pub fn check_op<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let l = readout(&mut g, out, 7)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let l = readout(&mut g, out, 7)?;
    g.backward(l)?;
    let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).expect("param has a gradient")).collect();
    let lens: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let sites = probe_sites(&lens, PROBES, 11);
    let mut max_rel: f64 = 0.0;
    for &(t, i) in &sites {
        let mut xs = inputs.to_vec();
        xs[t].data_mut()[i] += STEP;
        let up = eval(&xs)?;
        xs[t].data_mut()[i] -= 2.0 * STEP;
        let down = eval(&xs)?;
        let numeric = (up - down) / (2.0 * STEP);
        max_rel = max_rel.max(rel_err(grads[t].data()[i], numeric));
    }
    Ok(GradReport {
        probes: sites.len(),
        max_rel,
    })
}

/// Jitters every trainable tensor so unit-initialised gains are not special.
pub fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = seeded(seed);
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| {
            let z: f64 = StandardNormal.sample(&mut r);
            *v += 0.1 * z
        });
    }
}

/// Checks input and parameter gradients of a training-mode forward.
pub fn check_session<F>(store: &ParamStore, x: &Tensor, f: F) -> Result<GradReport>
where
    F: Fn(&mut Session, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut s = Session::new(store, Mode::Train, Graph::new());
        let xv = s.graph.param(x.clone());
        let out = f(&mut s, xv)?;
        let l = readout(&mut s.graph, out, 5)?;
        Ok(s.graph.value(l).item())
    };
    let mut s = Session::new(store, Mode::Train, Graph::new());
    let xv = s.graph.param(x.clone());
    let out = f(&mut s, xv)?;
    let l = readout(&mut s.graph, out, 5)?;
    s.graph.backward(l)?;
    let gx = s.graph.grad(xv).expect("input has a gradient");
    let gp = s.gradients();
    let mut lens = vec![x.len()];
    lens.extend(gp.iter().map(|(_, g)| g.len()));
    let sites = probe_sites(&lens, PROBES, 13);
    let mut max_rel: f64 = 0.0;
    for &(t, i) in &sites {
        let (analytic, numeric) = if t == 0 {
            let mut xp = x.clone();
            xp.data_mut()[i] += STEP;
            let up = eval(store, &xp)?;
            xp.data_mut()[i] -= 2.0 * STEP;
            (gx.data()[i], (up - eval(store, &xp)?) / (2.0 * STEP))
        } else {
            let (id, g) = &gp[t - 1];
            let mut sp = store.clone();
            sp.get_mut(*id).data_mut()[i] += STEP;
            let up = eval(&sp, x)?;
            sp.get_mut(*id).data_mut()[i] -= 2.0 * STEP;
            (g.data()[i], (up - eval(&sp, x)?) / (2.0 * STEP))
        };
        max_rel = max_rel.max(rel_err(analytic, numeric));
    }
    Ok(GradReport {
        probes: sites.len(),
        max_rel,
    })
}

/// Every layer type at d=8, T=12, with padding and a limited attention range.
pub fn layer_suite() -> Result<Vec<(String, GradReport)>> {
    let (d, t) = (8, 12);
    let ctx = |valid| SeqCtx {
        valid,
        range: AttnRange::Limited(3),
    };
    let x_td = randn(&[t, d], 1.0, 60);
    let x_dt = randn(&[d, t], 1.0, 61);
    let mut out = Vec::new();

    let mut b = ParamBuilder::new(1);
    let ff = FeedForward::new(&mut b, "ff", d, Activation::Swish);
    let mut store = b.finish();
    jitter(&mut store, 2);
    out.push(("feed_forward".into(), check_session(&store, &x_td, |s, x| ff.forward(s, x))?));

    let mut b = ParamBuilder::new(3);
    let mhsa = Mhsa::new(&mut b, "mhsa", d, 2);
    let store = b.finish();
    out.push(("mhsa".into(), check_session(&store, &x_td, |s, x| mhsa.forward(s, x, &ctx(9)))?));

    let mut b = ParamBuilder::new(4);
    let layer = TransformerLayer::new(&mut b, "tl", d, 2);
    let mut store = b.finish();
    jitter(&mut store, 5);
    out.push((
        "transformer_layer".into(),
        check_session(&store, &x_td, |s, x| layer.forward(s, x, &ctx(t)))?,
    ));

    let mut b = ParamBuilder::new(6);
    let conv = ConvModule::new(&mut b, "cm", d, 5);
    let mut store = b.finish();
    jitter(&mut store, 7);
    out.push(("conv_module".into(), check_session(&store, &x_td, |s, x| conv.forward(s, x, 10))?));

    let mut b = ParamBuilder::new(8);
    let layer = ConformerLayer::new(&mut b, "cl", d, 2, 5);
    let mut store = b.finish();
    jitter(&mut store, 9);
    out.push((
        "conformer_layer".into(),
        check_session(&store, &x_td, |s, x| layer.forward(s, x, &ctx(11)))?,
    ));

    let mut b = ParamBuilder::new(10);
    let lstm = BiLstmLayer::new(&mut b, "bl", d, d / 2);
    let store = b.finish();
    out.push(("bilstm".into(), check_session(&store, &x_td, |s, x| lstm.forward(s, x, 10))?));

    let mut b = ParamBuilder::new(12);
    let se = SqueezeExcite::new(&mut b, d, 2);
    let store = b.finish();
    out.push(("squeeze_excite".into(), check_session(&store, &x_dt, |s, x| se.forward(s, x, 9))?));

    for (ds, se) in [(true, true), (false, false)] {
        let mut b = ParamBuilder::new(13);
        let blk = ContextNetBlock::new(&mut b, "blk", d, d, 3, ds, se, 2);
        let mut store = b.finish();
        jitter(&mut store, 14);
        out.push((
            format!("contextnet_block ds={ds} se={se}"),
            check_session(&store, &x_dt, |s, x| blk.forward(s, x, 10))?,
        ));
    }
    let mut b = ParamBuilder::new(15);
    let blk = ContextNetBlock::new(&mut b, "proj", d, 6, 3, true, true, 2);
    let store = b.finish();
    out.push((
        "contextnet_block_projection".into(),
        check_session(&store, &x_dt, |s, x| blk.forward(s, x, 12))?,
    ));

    let mut b = ParamBuilder::new(16);
    let fe = SubsampleFrontend::new(&mut b, 12, 2, d);
    let store = b.finish();
    let x = randn(&[12, 22], 1.0, 17);
    out.push((
        "frontend".into(),
        check_session(&store, &x, |s, x| fe.forward(s, x, 19).map(|(h, _)| h))?,
    ));
    Ok(out)
}

/// Each model family end to end through the cross-entropy loss on a padded input.
pub fn model_suite() -> Result<Vec<(String, GradReport)>> {
    let configs = [
        ArchConfig::new(Arch::ContextNet, 2, 8).kernel(3).se(true).channels(2),
        ArchConfig::new(Arch::Lstm, 2, 8).channels(2),
        ArchConfig::new(Arch::Transformer, 2, 8)
            .heads(2)
            .range(AttnRange::Limited(2))
            .channels(2),
        ArchConfig::new(Arch::Conformer, 1, 8).heads(2).kernel(3).channels(2),
    ];
    let mut out = Vec::new();
    for mut cfg in configs {
        cfg.se_ratio = 2;
        let mut model = Model::build(&cfg, 3)?;
        jitter(model.store_mut(), 4);
        let x = randn(&[N_MELS, 26], 1.0, 5);
        let mut r: Rng = seeded(6);
        let labels: Vec<usize> = (0..6).map(|_| r.random_range(0..cfg.n_classes)).collect();
        let report = check_session(model.store(), &x, |s, x| {
            let (logits, v) = model.forward(s, x, 23, None)?;
            let logits = s.graph.narrow(logits, 0, 0, v)?;
            s.graph.cross_entropy(logits, &labels[..v])
        })?;
        out.push((format!("model {}", cfg.arch), report));
    }
    Ok(out)
}
