//! Feed-forward network and LSTM encoder / dense decoder with hand-written
//! backpropagation and an Adam trainer.

use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::spatial_skill;
use crate::features::SequenceSample;

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn uniform(rng: &mut ChaCha8Rng, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let a = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn(shape, |_| rng.random_range(-a..=a))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense { w: uniform(rng, (w[0], w[1]), w[0]), b: Array1::zeros(w[1]) })
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> (Array2<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w) + &layer.b;
            inputs.push(a);
            a = if l + 1 < self.layers.len() { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        (a, MlpCache { inputs, pre })
    }

    /// Parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &MlpCache, dout: Array2<f64>) -> (Mlp, Array2<f64>) {
        let mut grads = vec![None; self.layers.len()];
        let mut d = dout;
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                d.zip_mut_with(&cache.pre[l], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            grads[l] = Some(Dense { w: cache.inputs[l].t().dot(&d).as_standard_layout().into_owned(), b: d.sum_axis(Axis(0)) });
            d = d.dot(&self.layers[l].w.t());
        }
        (Mlp { layers: grads.into_iter().map(Option::unwrap).collect() }, d)
    }
}

/// One LSTM layer; gate blocks in the columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LstmLayer {
    pub w: Array2<f64>,
    pub u: Array2<f64>,
    pub b: Array1<f64>,
}

pub struct LstmStep {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

pub struct LstmCache {
    steps: Vec<LstmStep>,
}

impl LstmLayer {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        Self { w: uniform(rng, (input, 4 * hidden), input), u: uniform(rng, (hidden, 4 * hidden), hidden), b }
    }

    pub fn hidden(&self) -> usize {
        self.u.nrows()
    }

    /// Runs the recurrence over `xs` (one `B x in` matrix per step) from zero state.
    pub fn forward(&self, xs: &[Array2<f64>]) -> (Vec<Array2<f64>>, LstmCache) {
        let hd = self.hidden();
        let bsz = xs.first().map_or(0, |x| x.nrows());
        let mut h = Array2::zeros((bsz, hd));
        let mut c = Array2::zeros((bsz, hd));
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let mut gates = x.dot(&self.w) + h.dot(&self.u) + &self.b;
            for mut row in gates.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if (2 * hd..3 * hd).contains(&j) { v.tanh() } else { sigmoid(*v) };
                }
            }
            let i = gates.slice(s![.., 0..hd]);
            let f = gates.slice(s![.., hd..2 * hd]);
            let g = gates.slice(s![.., 2 * hd..3 * hd]);
            let o = gates.slice(s![.., 3 * hd..]);
            let c_new = &f * &c + &i * &g;
            let tanh_c = c_new.mapv(f64::tanh);
            let h_new = &o * &tanh_c;
            steps.push(LstmStep { x: x.clone(), h_prev: h, c_prev: c, gates, tanh_c });
            h = h_new;
            c = c_new;
            hs.push(h.clone());
        }
        (hs, LstmCache { steps })
    }

    /// Single-sequence convenience: `T x in` in, `T x hidden` out.
    pub fn forward_sequence(&self, seq: ArrayView2<'_, f64>) -> Array2<f64> {
        let xs: Vec<Array2<f64>> = seq.rows().into_iter().map(|r| r.to_owned().insert_axis(Axis(0))).collect();
        let (hs, _) = self.forward(&xs);
        let mut out = Array2::zeros((seq.nrows(), self.hidden()));
        for (t, h) in hs.iter().enumerate() {
            out.row_mut(t).assign(&h.row(0));
        }
        out
    }

    /// Backpropagation through time given the loss gradient at every hidden output.
    pub fn backward(&self, cache: &LstmCache, dhs: &[Array2<f64>]) -> (LstmLayer, Vec<Array2<f64>>) {
        let hd = self.hidden();
        let mut gw = Array2::zeros(self.w.raw_dim());
        let mut gu = Array2::zeros(self.u.raw_dim());
        let mut gb = Array1::zeros(self.b.len());
        let bsz = dhs.first().map_or(0, |d| d.nrows());
        let mut dh_next = Array2::zeros((bsz, hd));
        let mut dc_next = Array2::zeros((bsz, hd));
        let mut dxs = vec![Array2::zeros((0, 0)); cache.steps.len()];
        for t in (0..cache.steps.len()).rev() {
            let st = &cache.steps[t];
            let dh = &dhs[t] + &dh_next;
            let i = st.gates.slice(s![.., 0..hd]);
            let f = st.gates.slice(s![.., hd..2 * hd]);
            let g = st.gates.slice(s![.., 2 * hd..3 * hd]);
            let o = st.gates.slice(s![.., 3 * hd..]);
            let d_o = &dh * &st.tanh_c;
            let dc = &dh * &o * &st.tanh_c.mapv(|v| 1.0 - v * v) + &dc_next;
            let mut dz = Array2::zeros(st.gates.raw_dim());
            dz.slice_mut(s![.., 0..hd]).assign(&(&dc * &g * &i * &i.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., hd..2 * hd]).assign(&(&dc * &st.c_prev * &f * &f.mapv(|v| 1.0 - v)));
            dz.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(&dc * &i * &g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hd..]).assign(&(&d_o * &o * &o.mapv(|v| 1.0 - v)));
            dc_next = &dc * &f;
            gw += &st.x.t().dot(&dz);
            gu += &st.h_prev.t().dot(&dz);
            gb += &dz.sum_axis(Axis(0));
            dxs[t] = dz.dot(&self.w.t());
            dh_next = dz.dot(&self.u.t());
        }
        (LstmLayer { w: gw, u: gu, b: gb }, dxs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wiring {
    /// Every step's hidden state, concatenated, feeds the decoder.
    AllSteps,
    /// Only the final hidden state feeds the decoder.
    LastStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncDec {
    pub lstm: Vec<LstmLayer>,
    pub decoder: Mlp,
    pub wiring: Wiring,
    pub steps: usize,
}

impl EncDec {
    pub fn new(steps: usize, input: usize, hidden: usize, layers: usize, decoder_hidden: usize, output: usize, wiring: Wiring, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = (0..layers.max(1))
            .map(|l| LstmLayer::new(if l == 0 { input } else { hidden }, hidden, &mut rng))
            .collect();
        let dec_in = match wiring {
            Wiring::AllSteps => steps * hidden,
            Wiring::LastStep => hidden,
        };
        Self { lstm, decoder: Mlp::new(&[dec_in, decoder_hidden, output], &mut rng), wiring, steps }
    }

    fn hidden(&self) -> usize {
        self.lstm[0].hidden()
    }

    /// Encoder outputs of the top layer mapped to the decoder input.
    pub fn decoder_input(&self, hs: &[Array2<f64>]) -> Array2<f64> {
        match self.wiring {
            Wiring::LastStep => hs.last().unwrap().clone(),
            Wiring::AllSteps => {
                let views: Vec<_> = hs.iter().map(|h| h.view()).collect();
                ndarray::concatenate(Axis(1), &views).unwrap()
            }
        }
    }

    pub fn predict_sample(&self, sample: &SequenceSample) -> Result<Array1<f64>> {
        let x = sample.features.view().insert_axis(Axis(0));
        Ok(Net::EncDec(self.clone()).predict(x)?.row(0).to_owned())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Net {
    Fnn(Mlp),
    EncDec(EncDec),
}

/// FNN baseline: two hidden ReLU layers on the flattened input.
pub fn new_fnn(input: usize, hidden: &[usize], output: usize, seed: u64) -> Net {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    Net::Fnn(Mlp::new(&sizes, &mut rng))
}

impl Net {
    fn steps_of(x: ArrayView3<'_, f64>) -> Vec<Array2<f64>> {
        x.axis_iter(Axis(1)).map(|v| v.to_owned()).collect()
    }

    fn check_input(&self, x: ArrayView3<'_, f64>) -> Result<()> {
        let (_, t, f) = x.dim();
        match self {
            Net::Fnn(m) if m.input_width() != t * f => Err(Error::Dimension(format!("fnn expects {} inputs, got {t}x{f}", m.input_width()))),
            Net::EncDec(e) if e.steps != t || e.lstm[0].w.nrows() != f => Err(Error::Dimension(format!(
                "encoder expects {}x{} sequences, got {t}x{f}",
                e.steps,
                e.lstm[0].w.nrows()
            ))),
            _ => Ok(()),
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Net::Fnn(m) => m.output_width(),
            Net::EncDec(e) => e.decoder.output_width(),
        }
    }

    /// `x` is `B x T x F`; returns `B x G`.
    pub fn predict(&self, x: ArrayView3<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        Ok(match self {
            Net::Fnn(m) => {
                let flat = x.to_owned().into_shape_with_order((x.dim().0, x.dim().1 * x.dim().2)).unwrap();
                m.forward(flat.view()).0
            }
            Net::EncDec(e) => {
                let mut hs = Self::steps_of(x);
                for layer in &e.lstm {
                    hs = layer.forward(&hs).0;
                }
                e.decoder.forward(e.decoder_input(&hs).view()).0
            }
        })
    }

    /// Mean squared error over the batch and outputs, times `scale`, with its gradient.
    pub fn loss_and_grad(&self, x: ArrayView3<'_, f64>, y: ArrayView2<'_, f64>, scale: f64) -> Result<(f64, Net)> {
        self.check_input(x)?;
        if y.dim() != (x.dim().0, self.output_width()) {
            return Err(Error::Dimension(format!("targets {:?} for batch of {}", y.dim(), x.dim().0)));
        }
        let norm = scale / y.len() as f64;
        match self {
            Net::Fnn(m) => {
                let flat = x.to_owned().into_shape_with_order((x.dim().0, x.dim().1 * x.dim().2)).unwrap();
                let (out, cache) = m.forward(flat.view());
                let diff = &out - &y;
                let loss = diff.mapv(|v| v * v).sum() * norm;
                let (g, _) = m.backward(&cache, diff * (2.0 * norm));
                Ok((loss, Net::Fnn(g)))
            }
            Net::EncDec(e) => {
                let mut inputs = Self::steps_of(x);
                let mut caches = Vec::with_capacity(e.lstm.len());
                for layer in &e.lstm {
                    let (hs, cache) = layer.forward(&inputs);
                    caches.push(cache);
                    inputs = hs;
                }
                let dec_in = e.decoder_input(&inputs);
                let (out, dcache) = e.decoder.forward(dec_in.view());
                let diff = &out - &y;
                let loss = diff.mapv(|v| v * v).sum() * norm;
                let (gdec, dx) = e.decoder.backward(&dcache, diff * (2.0 * norm));
                let hd = e.hidden();
                let bsz = x.dim().0;
                let mut dhs: Vec<Array2<f64>> = vec![Array2::zeros((bsz, hd)); e.steps];
                match e.wiring {
                    Wiring::LastStep => dhs[e.steps - 1] = dx,
                    Wiring::AllSteps => {
                        for (t, d) in dhs.iter_mut().enumerate() {
                            d.assign(&dx.slice(s![.., t * hd..(t + 1) * hd]));
                        }
                    }
                }
                let mut glstm = vec![None; e.lstm.len()];
                for l in (0..e.lstm.len()).rev() {
                    let (g, dxs) = e.lstm[l].backward(&caches[l], &dhs);
                    glstm[l] = Some(g);
                    dhs = dxs;
                }
                Ok((
                    loss,
                    Net::EncDec(EncDec {
                        lstm: glstm.into_iter().map(Option::unwrap).collect(),
                        decoder: gdec,
                        wiring: e.wiring,
                        steps: e.steps,
                    }),
                ))
            }
        }
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        fn mlp<'a>(m: &'a Mlp, out: &mut Vec<&'a [f64]>) {
            for l in &m.layers {
                out.push(l.w.as_slice().unwrap());
                out.push(l.b.as_slice().unwrap());
            }
        }
        match self {
            Net::Fnn(m) => mlp(m, &mut out),
            Net::EncDec(e) => {
                for l in &e.lstm {
                    out.push(l.w.as_slice().unwrap());
                    out.push(l.u.as_slice().unwrap());
                    out.push(l.b.as_slice().unwrap());
                }
                mlp(&e.decoder, &mut out);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn mlp<'a>(m: &'a mut Mlp, out: &mut Vec<&'a mut [f64]>) {
            for l in &mut m.layers {
                out.push(l.w.as_slice_mut().unwrap());
                out.push(l.b.as_slice_mut().unwrap());
            }
        }
        match self {
            Net::Fnn(m) => mlp(m, &mut out),
            Net::EncDec(e) => {
                for l in &mut e.lstm {
                    out.push(l.w.as_slice_mut().unwrap());
                    out.push(l.u.as_slice_mut().unwrap());
                    out.push(l.b.as_slice_mut().unwrap());
                }
                mlp(&mut e.decoder, &mut out);
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Net, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }
}

/// Bias-corrected Adam update of `net` in place.
pub fn adam_step(state: &mut AdamState, net: &mut Net, grads: &Net) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (k, (p, g)) in net.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let step = state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
            p[j] -= step;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 1e-3, batch_size: 32, max_epochs: 200, patience: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_skill: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned snapshot (0 means the initial parameters).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mse", "val_skill"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_mse.to_string(), e.val_skill.map_or(String::new(), |v| v.to_string())])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// A validation fold: inputs `B x T x F` and targets `B x G`.
pub type ValidationSet = (Array3<f64>, Array2<f64>);

/// Mean over folds of each fold's mean spatial cosine.
pub fn fold_skill(net: &Net, folds: &[ValidationSet]) -> Result<f64> {
    let mut total = 0.0;
    for (x, y) in folds {
        let pred = net.predict(x.view())?;
        let mut s = 0.0;
        for (p, t) in pred.rows().into_iter().zip(y.rows()) {
            s += spatial_skill(p, t)?;
        }
        total += s / y.nrows().max(1) as f64;
    }
    Ok(total / folds.len().max(1) as f64)
}

/// Mini-batch Adam on squared error. With validation folds, training stops
/// once the fold skill has not improved for `patience` epochs and the best
/// snapshot is returned; without them all `max_epochs` run.
pub fn train(mut net: Net, x: ArrayView3<'_, f64>, y: ArrayView2<'_, f64>, val: &[ValidationSet], cfg: &TrainConfig) -> Result<(Net, TrainHistory)> {
    let n = x.dim().0;
    if n == 0 || y.nrows() != n {
        return Err(Error::InvalidInput(format!("training set has {n} inputs and {} targets", y.nrows())));
    }
    if val.iter().any(|(vx, vy)| vx.dim().0 == 0 || vy.nrows() != vx.dim().0) {
        return Err(Error::InvalidInput("empty or misaligned validation fold".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&net, cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory { epochs: Vec::new(), best_epoch: 0 };
    let mut best = if val.is_empty() { None } else { Some((fold_skill(&net, val)?, net.clone())) };
    let mut since_best = 0;
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let bx = x.select(Axis(0), chunk);
            let by = y.select(Axis(0), chunk);
            let (loss, grads) = net.loss_and_grad(bx.view(), by.view(), 1.0)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            adam_step(&mut adam, &mut net, &grads);
        }
        if net.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::Diverged { epoch });
        }
        let val_skill = if val.is_empty() { None } else { Some(fold_skill(&net, val)?) };
        history.epochs.push(EpochRecord { epoch, train_mse: total / n as f64, val_skill });
        if let (Some(s), Some((b, snap))) = (val_skill, best.as_mut()) {
            if s > *b {
                *b = s;
                *snap = net.clone();
                history.best_epoch = epoch;
                since_best = 0;
            } else {
                if since_best >= cfg.patience {
                    break;
                }
                since_best += 1;
            }
        } else {
            history.best_epoch = epoch;
        }
    }
    Ok((best.map_or(net, |(_, snap)| snap), history))
}

pub fn write_checkpoint(net: &Net, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(net)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Net> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::StandardNormal;

    fn randn3(rng: &mut ChaCha8Rng, d: (usize, usize, usize)) -> Array3<f64> {
        Array3::from_shape_fn(d, |_| rng.sample(StandardNormal))
    }

    fn randn2(rng: &mut ChaCha8Rng, d: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(d, |_| rng.sample(StandardNormal))
    }

    fn zero(net: &mut Net) {
        for t in net.tensors_mut() {
            t.fill(0.0);
        }
    }

    fn fd_check(net: &Net, x: &Array3<f64>, y: &Array2<f64>) {
        let (_, grads) = net.loss_and_grad(x.view(), y.view(), 1.0).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let mut probe = net.clone();
        let mut idx = 0;
        let sizes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        for (k, len) in sizes.into_iter().enumerate() {
            for j in 0..len {
                let orig = probe.tensors()[k][j];
                probe.tensors_mut()[k][j] = orig + 1e-5;
                let lp = probe.loss_and_grad(x.view(), y.view(), 1.0).unwrap().0;
                probe.tensors_mut()[k][j] = orig - 1e-5;
                let lm = probe.loss_and_grad(x.view(), y.view(), 1.0).unwrap().0;
                probe.tensors_mut()[k][j] = orig;
                let num = (lp - lm) / 2e-5;
                let a = analytic[idx];
                let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
                assert!(rel < 1e-4, "tensor {k} entry {j}: analytic {a} numeric {num}");
                idx += 1;
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (wiring, layers) in [(Wiring::AllSteps, 1), (Wiring::LastStep, 1), (Wiring::AllSteps, 2)] {
            let net = Net::EncDec(EncDec::new(3, 4, 3, layers, 5, 2, wiring, 7));
            fd_check(&net, &randn3(&mut rng, (3, 3, 4)), &randn2(&mut rng, (3, 2)));
        }
        let fnn = new_fnn(6, &[5, 4], 3, 2);
        fd_check(&fnn, &randn3(&mut rng, (4, 1, 6)), &randn2(&mut rng, (4, 3)));
        // a single sample makes the weight-gradient product column-major
        fd_check(&fnn, &randn3(&mut rng, (1, 1, 6)), &randn2(&mut rng, (1, 3)));
    }

    #[test]
    fn zero_weights_give_zero_hidden_and_output() {
        let mut net = Net::EncDec(EncDec::new(4, 3, 2, 1, 4, 2, Wiring::AllSteps, 0));
        zero(&mut net);
        let Net::EncDec(e) = &net else { unreachable!() };
        let seq = Array2::from_elem((4, 3), 0.7);
        assert!(e.lstm[0].forward_sequence(seq.view()).iter().all(|&v| v == 0.0));
        let out = net.predict(seq.view().insert_axis(Axis(0))).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_lstm_step_by_hand() {
        let layer = LstmLayer { w: ndarray::array![[0.5, -0.3, 0.8, 0.2]], u: ndarray::array![[0.1, 0.2, -0.4, 0.3]], b: ndarray::array![0.0, 1.0, 0.1, -0.2] };
        let out = layer.forward_sequence(ndarray::array![[1.0], [-2.0]].view());
        // zero initial cell state, so the first forget gate drops out
        let (i, g, o) = (sigmoid(0.5), (0.8f64 + 0.1).tanh(), sigmoid(0.2 - 0.2));
        let c1 = i * g;
        let h1 = o * c1.tanh();
        assert_abs_diff_eq!(out[[0, 0]], h1, epsilon = 1e-14);
        let i2 = sigmoid(-1.0 + 0.1 * h1);
        let f2 = sigmoid(0.6 + 0.2 * h1 + 1.0);
        let g2 = (-1.6 - 0.4 * h1 + 0.1f64).tanh();
        let o2 = sigmoid(-0.4 + 0.3 * h1 - 0.2);
        let c2 = f2 * c1 + i2 * g2;
        assert_abs_diff_eq!(out[[1, 0]], o2 * c2.tanh(), epsilon = 1e-14);
    }

    #[test]
    fn saturated_forget_gate_accumulates() {
        // input and forget gates pinned open, output gate open, cell candidate ~ input
        let layer = LstmLayer { w: ndarray::array![[0.0, 0.0, 0.01, 0.0]], u: Array2::zeros((1, 4)), b: ndarray::array![10.0, 10.0, 0.0, 10.0] };
        let xs = [1.0, 2.0, -1.0, 0.5];
        let out = layer.forward_sequence(Array2::from_shape_vec((4, 1), xs.to_vec()).unwrap().view());
        let mut c = 0.0;
        for (t, x) in xs.iter().enumerate() {
            c += (0.01 * x).tanh();
            assert_abs_diff_eq!(out[[t, 0]].atanh(), c, epsilon = 1e-3);
        }
    }

    #[test]
    fn encdec_hand_trace() {
        // H = 2 steps, hidden 1, output 1, decoder hidden 1
        let lstm = LstmLayer { w: ndarray::array![[0.3, 0.2, 0.5, -0.1]], u: ndarray::array![[0.4, -0.2, 0.1, 0.6]], b: ndarray::array![0.1, 1.0, 0.0, 0.2] };
        let decoder = Mlp { layers: vec![Dense { w: ndarray::array![[1.5], [-0.5]], b: ndarray::array![0.2] }, Dense { w: ndarray::array![[2.0]], b: ndarray::array![-0.1] }] };
        let e = EncDec { lstm: vec![lstm.clone()], decoder, wiring: Wiring::AllSteps, steps: 2 };
        let hs = lstm.forward_sequence(ndarray::array![[1.0], [2.0]].view());
        let hidden = (1.5 * hs[[0, 0]] - 0.5 * hs[[1, 0]] + 0.2f64).max(0.0);
        let sample = SequenceSample { target_date: crate::timegrid::Date::ymd(2000, 1, 1), features: ndarray::array![[1.0], [2.0]], target: ndarray::array![0.0] };
        assert_abs_diff_eq!(e.predict_sample(&sample).unwrap()[0], 2.0 * hidden - 0.1, epsilon = 1e-14);
    }

    #[test]
    fn last_step_ignores_earlier_outputs() {
        let e = EncDec::new(4, 3, 2, 1, 4, 2, Wiring::LastStep, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hs: Vec<Array2<f64>> = (0..4).map(|_| randn2(&mut rng, (2, 2))).collect();
        let mut altered = hs.clone();
        for h in altered.iter_mut().take(3) {
            *h = randn2(&mut rng, (2, 2));
        }
        let a = e.decoder.forward(e.decoder_input(&hs).view()).0;
        let b = e.decoder.forward(e.decoder_input(&altered).view()).0;
        assert_eq!(a, b);
    }

    #[test]
    fn gradients_vanish_at_exact_fit_and_scale_linearly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Net::EncDec(EncDec::new(3, 2, 3, 1, 4, 2, Wiring::AllSteps, 1));
        let x = randn3(&mut rng, (5, 3, 2));
        let y = net.predict(x.view()).unwrap();
        let (loss, g) = net.loss_and_grad(x.view(), y.view(), 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
        let y2 = randn2(&mut rng, (5, 2));
        let (_, g1) = net.loss_and_grad(x.view(), y2.view(), 1.0).unwrap();
        let (_, g2) = net.loss_and_grad(x.view(), y2.view(), 2.0).unwrap();
        for (a, b) in g1.tensors().concat().iter().zip(g2.tensors().concat()) {
            assert_abs_diff_eq!(2.0 * a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut net = new_fnn(3, &[4], 2, 0);
        let before = net.clone();
        let mut grads = net.clone();
        for t in grads.tensors_mut() {
            for (j, v) in t.iter_mut().enumerate() {
                *v = if j % 3 == 0 { 0.0 } else if j % 2 == 0 { 0.5 } else { -2.0 };
            }
        }
        let mut st = AdamState::new(&net, 0.01);
        adam_step(&mut st, &mut net, &grads);
        for ((a, b), g) in net.tensors().concat().iter().zip(before.tensors().concat()).zip(grads.tensors().concat()) {
            let expect = if g == 0.0 { 0.0 } else { -0.01 * g.signum() };
            assert_abs_diff_eq!(a - b, expect, epsilon = 1e-8);
        }
    }

    fn linear_fixture(seed: u64, n: usize) -> (Array3<f64>, Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn3(&mut rng, (n, 1, 6));
        let w = randn2(&mut rng, (6, 4));
        let clean = x.index_axis(Axis(1), 0).dot(&w);
        let y = &clean + &(randn2(&mut rng, (n, 4)) * 0.3);
        (x, y, clean)
    }

    #[test]
    fn training_recovers_linear_signal() {
        let (x, y, clean) = linear_fixture(9, 600);
        let (tx, ty) = (x.slice(s![..500, .., ..]).to_owned(), y.slice(s![..500, ..]).to_owned());
        let val = vec![(x.slice(s![500.., .., ..]).to_owned(), y.slice(s![500.., ..]).to_owned())];
        let ceiling = fold_skill_of(&clean.slice(s![500.., ..]).to_owned(), &val[0].1);
        let cfg = TrainConfig { lr: 1e-2, max_epochs: 60, patience: 10, ..Default::default() };
        let (net, hist) = train(new_fnn(6, &[16, 8], 4, 1), tx.view(), ty.view(), &val, &cfg).unwrap();
        let skill = fold_skill(&net, &val).unwrap();
        assert!(skill >= 0.8 * ceiling, "{skill} vs ceiling {ceiling}");
        assert!(hist.best_epoch > 0);
        // first five epochs strictly reduce the training loss at lr = 1e-3
        let cfg = TrainConfig { lr: 1e-3, max_epochs: 5, ..Default::default() };
        let (_, hist) = train(new_fnn(6, &[16, 8], 4, 1), tx.view(), ty.view(), &[], &cfg).unwrap();
        assert!(hist.epochs.windows(2).all(|w| w[1].train_mse < w[0].train_mse));
    }

    fn fold_skill_of(pred: &Array2<f64>, truth: &Array2<f64>) -> f64 {
        pred.rows().into_iter().zip(truth.rows()).map(|(p, t)| spatial_skill(p, t).unwrap()).sum::<f64>() / pred.nrows() as f64
    }

    #[test]
    fn patience_and_determinism() {
        let (x, y, _) = linear_fixture(3, 120);
        let val = vec![(x.slice(s![100.., .., ..]).to_owned(), y.slice(s![100.., ..]).to_owned())];
        let (tx, ty) = (x.slice(s![..100, .., ..]), y.slice(s![..100, ..]));
        let cfg = TrainConfig { lr: 0.3, max_epochs: 50, patience: 0, ..Default::default() };
        let (_, h) = train(new_fnn(6, &[8], 4, 0), tx, ty, &val, &cfg).unwrap();
        let mut best = fold_skill(&new_fnn(6, &[8], 4, 0), &val).unwrap();
        let mut expect = h.epochs.len();
        for e in &h.epochs {
            let v = e.val_skill.unwrap();
            if v > best {
                best = v;
            } else {
                expect = e.epoch;
                break;
            }
        }
        assert_eq!(h.epochs.len(), expect);
        let cfg = TrainConfig { lr: 1e-2, max_epochs: 5, ..Default::default() };
        let a = train(new_fnn(6, &[8], 4, 0), tx, ty, &val, &cfg).unwrap();
        let b = train(new_fnn(6, &[8], 4, 0), tx, ty, &val, &cfg).unwrap();
        assert_eq!(a, b);
        let c = train(new_fnn(6, &[8], 4, 0), tx, ty, &val, &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.1, c.1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = Net::EncDec(EncDec::new(3, 2, 2, 1, 3, 2, Wiring::LastStep, 5));
        let p = dir.path().join("net.json");
        write_checkpoint(&net, &p).unwrap();
        assert_eq!(read_checkpoint(&p).unwrap(), net);
    }
}
