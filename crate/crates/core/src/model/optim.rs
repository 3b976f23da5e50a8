//! Adam optimiser and the per-batch training step.

use crate::autodiff::{Gradients, Graph, ParamStore};
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::ctc::ctc_loss_var;
use crate::model::network::CorrNet;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument("optimizer state does not match the parameter store".into()));
        }
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let n = grads.global_norm().to_f64().unwrap();
            if n > c {
                scale = c / n;
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = gv.to_f64().unwrap() * scale;
                let mn = b1 * mv.to_f64().unwrap() + (1.0 - b1) * gv;
                let vn = b2 * vv.to_f64().unwrap() + (1.0 - b2) * gv * gv;
                *mv = S::of(mn);
                *vv = S::of(vn);
                let upd = self.lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *pv = S::of(pv.to_f64().unwrap() - upd);
            }
        }
        Ok(())
    }

    /// Stores moments as `adam.m/<name>`, `adam.v/<name>` and the step count.
    pub fn save_into(&self, store: &ParamStore<S>, ck: &mut Checkpoint) {
        for (k, (_, name, _)) in store.iter().enumerate() {
            ck.insert(format!("adam.m/{name}"), self.m[k].cast());
            ck.insert(format!("adam.v/{name}"), self.v[k].cast());
        }
        ck.insert_u64("adam.step", self.step);
    }

    pub fn load_from(&mut self, store: &ParamStore<S>, ck: &Checkpoint) -> Result<()> {
        for (k, (_, name, t)) in store.iter().enumerate() {
            for (slot, kind) in [(&mut self.m[k], "m"), (&mut self.v[k], "v")] {
                let rec = ck.require(&format!("adam.{kind}/{name}"))?;
                if rec.shape() != t.shape() {
                    return Err(Error::Format(format!("optimizer record for {name:?} has the wrong shape")));
                }
                *slot = rec.cast();
            }
        }
        self.step = ck.get_u64("adam.step")?;
        Ok(())
    }
}

/// One video and its gloss targets.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a, S> {
    pub video: &'a Tensor<S>,
    pub target: &'a [usize],
}

/// Mean CTC loss over `batch` and its parameter gradient, summed in batch order.
pub fn batch_gradients<S: Scalar>(
    model: &CorrNet,
    store: &ParamStore<S>,
    batch: &[Example<'_, S>],
    step: u64,
) -> Result<(f64, Gradients<S>)> {
    if batch.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut total = Gradients::zeros_like(store);
    let mut loss_sum = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mut g = Graph::new(store);
        let x = g.input(ex.video.clone());
        let out = model.forward(&mut g, x).map_err(|e| match e {
            Error::NonFinite(what) => Error::Diverged { step, detail: format!("non-finite {what} on batch item {i}") },
            other => other,
        })?;
        let (loss, ctc) = ctc_loss_var(&mut g, out.logits, ex.target, model.config.blank())?;
        if !ctc.loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!(
                    "loss {} on batch item {i} ({} logit steps, {} target tokens)",
                    ctc.loss,
                    g.shape(out.logits)[0],
                    ex.target.len()
                ),
            });
        }
        loss_sum += ctc.loss;
        total.accumulate(&g.backward(loss)?)?;
    }
    total.scale(S::one() / S::of(batch.len() as f64));
    if !total.all_finite() {
        return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
    }
    Ok((loss_sum / batch.len() as f64, total))
}

/// Gradient step on the mean batch loss; returns that loss.
pub fn train_step<S: Scalar>(
    model: &CorrNet,
    store: &mut ParamStore<S>,
    optimizer: &mut Adam<S>,
    batch: &[Example<'_, S>],
) -> Result<f64> {
    let step = optimizer.steps();
    let (loss, grads) = batch_gradients(model, store, batch, step)?;
    optimizer.update(store, &grads)?;
    if store.iter().any(|(_, _, t)| !t.all_finite()) {
        return Err(Error::Diverged { step, detail: "non-finite parameters after update".into() });
    }
    Ok(loss)
}
