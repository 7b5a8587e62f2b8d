//! Preference discriminator: the surrogate encoder plus a logistic head,
//! fine-tuned end to end with cross-entropy on the VQA answers.

use super::{encode, EncoderConfig, EncoderParams, LayerActivations};
use crate::error::{Error, Result};
use crate::linalg;
use crate::optim::{AdamState, AdamWConfig};
use crate::synth::{FeatureImage, PreferenceHistory, VQARecord};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Optimization settings. The learning rate and weight decay mirror the
/// reference fine-tuning recipe; the low-rank-adaptation fields are recorded
/// for provenance but training updates the dense weights directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            weight_decay: 1e-2,
            lora_rank: 8,
            lora_alpha: 8.0,
            lora_dropout: 0.1,
        }
    }
}

/// Encoder parameters plus the scalar-output classification head.
/// The head starts at zero, so an untrained model predicts exactly 0.5.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefDiscModel {
    pub config: EncoderConfig,
    pub params: EncoderParams,
    pub head_w: Array1<f64>,
    pub head_b: f64,
    pub train_config: TrainConfig,
}

impl PrefDiscModel {
    pub fn new(config: EncoderConfig, train_config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config);
        let d = config.d_model;
        Ok(PrefDiscModel {
            config,
            params,
            head_w: Array1::zeros(d),
            head_b: 0.0,
            train_config,
        })
    }

    pub fn encode(
        &self,
        history: &PreferenceHistory,
        query: &str,
        candidate: &FeatureImage,
    ) -> Result<LayerActivations> {
        encode(&self.params, &self.config, history, query, candidate)
    }

    fn logit_from_acts(&self, acts: &LayerActivations) -> f64 {
        let top = acts.layer(self.config.n_layers);
        let last = top.row(acts.seq_len() - 1);
        linalg::dot(last.as_slice().expect("contiguous"), self.head_w.as_slice().unwrap())
            + self.head_b
    }

    /// sigma(head . last-token top-layer activation). In [0,1] by
    /// construction; 0.5 at the 0.5 threshold is the discriminator decision.
    pub fn predict_preference(
        &self,
        history: &PreferenceHistory,
        query: &str,
        candidate: &FeatureImage,
    ) -> Result<f64> {
        let acts = self.encode(history, query, candidate)?;
        Ok(sigmoid(self.logit_from_acts(&acts)))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically safe binary cross-entropy from the logit.
fn bce_from_logit(logit: f64, y: f64) -> f64 {
    // log(1 + e^z) stabilized
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - y * logit
}

#[derive(Debug, Clone)]
struct Grads {
    head_w: Array1<f64>,
    head_b: f64,
    layers: Vec<(Array2<f64>, Array2<f64>, Array1<f64>)>,
}

impl Grads {
    fn zeros(model: &PrefDiscModel) -> Self {
        let d = model.config.d_model;
        Grads {
            head_w: Array1::zeros(d),
            head_b: 0.0,
            layers: model
                .params
                .layers
                .iter()
                .map(|_| (Array2::zeros((d, d)), Array2::zeros((d, d)), Array1::zeros(d)))
                .collect(),
        }
    }

    fn scale(&mut self, s: f64) {
        self.head_w *= s;
        self.head_b *= s;
        for (w, u, b) in &mut self.layers {
            *w *= s;
            *u *= s;
            *b *= s;
        }
    }
}

/// Backprop a gradient seeded at the top layer's last token down the stack,
/// accumulating layer grads. `delta_last` is dL/d(top-layer last token).
fn backprop_from_last_token(
    model: &PrefDiscModel,
    acts: &LayerActivations,
    delta_last: &[f64],
    grads: &mut Grads,
) {
    let d = model.config.d_model;
    let t_total = acts.seq_len();
    let n_layers = model.config.n_layers;

    // dL/dh_l, maintained for the layer currently being processed
    let mut delta = Array2::<f64>::zeros((t_total, d));
    for j in 0..d {
        delta[[t_total - 1, j]] = delta_last[j];
    }

    for l in (1..=n_layers).rev() {
        let layer = &model.params.layers[l - 1];
        let h_l = acts.layer(l);
        let h_prev = acts.layer(l - 1);

        // prefix means of the previous layer, c[t] = mean(h_prev[0..=t])
        let mut prefix = Array2::<f64>::zeros((t_total, d));
        let mut run = vec![0.0; d];
        for t in 0..t_total {
            for j in 0..d {
                run[j] += h_prev[[t, j]];
                prefix[[t, j]] = run[j] / (t + 1) as f64;
            }
        }

        // delta_a[t] = (1 - h_l[t]^2) * delta[t]
        let mut delta_a = Array2::<f64>::zeros((t_total, d));
        for t in 0..t_total {
            for j in 0..d {
                let h = h_l[[t, j]];
                delta_a[[t, j]] = (1.0 - h * h) * delta[[t, j]];
            }
        }

        let (gw, gu, gb) = &mut grads.layers[l - 1];
        // suffix accumulator for the prefix-mean path:
        // dL/dh_prev[s] += sum_{t>=s} U^T delta_a[t] / (t+1)
        let mut suffix = vec![0.0; d];
        let mut new_delta = Array2::<f64>::zeros((t_total, d));
        for t in (0..t_total).rev() {
            let da = delta_a.row(t);
            let da_slice = da.as_slice().expect("contiguous");
            let inv = 1.0 / (t + 1) as f64;
            // parameter grads
            for i in 0..d {
                let dai = da_slice[i];
                if dai == 0.0 {
                    continue;
                }
                gb[i] += dai;
                for j in 0..d {
                    gw[[i, j]] += dai * h_prev[[t, j]];
                    gu[[i, j]] += dai * prefix[[t, j]];
                }
            }
            // U^T delta_a[t] / (t+1) joins the suffix accumulator
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += model.params.layers[l - 1].u[[i, j]] * da_slice[i];
                }
                suffix[j] += acc * inv;
            }
            // W^T delta_a[t] + suffix
            for j in 0..d {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += layer.w[[i, j]] * da_slice[i];
                }
                new_delta[[t, j]] = acc + suffix[j];
            }
        }
        delta = new_delta;
    }
}

/// Mean cross-entropy and decision accuracy of a model on a record set.
pub fn evaluate(model: &PrefDiscModel, records: &[VQARecord]) -> Result<(f64, f64)> {
    let (loss, _grads, acc) = loss_grads_inner(model, records)?;
    Ok((loss, acc))
}

fn loss_grads_inner(
    model: &PrefDiscModel,
    records: &[VQARecord],
) -> Result<(f64, Grads, f64)> {
    let mut grads = Grads::zeros(model);
    let mut loss = 0.0;
    let mut correct = 0usize;
    let d = model.config.d_model;
    for rec in records {
        let acts = model.encode(&rec.history, &rec.query, &rec.candidate)?;
        let top = acts.layer(model.config.n_layers);
        let last = top.row(acts.seq_len() - 1).to_owned();
        let logit =
            linalg::dot(last.as_slice().unwrap(), model.head_w.as_slice().unwrap()) + model.head_b;
        let y = f64::from(rec.answer);
        loss += bce_from_logit(logit, y);
        let p = sigmoid(logit);
        if (p > 0.5) == (rec.answer == 1) {
            correct += 1;
        }
        let dlogit = p - y;
        for j in 0..d {
            grads.head_w[j] += dlogit * last[j];
        }
        grads.head_b += dlogit;
        let delta_last: Vec<f64> = model.head_w.iter().map(|w| dlogit * w).collect();
        backprop_from_last_token(model, &acts, &delta_last, &mut grads);
    }
    let n = records.len() as f64;
    loss /= n;
    grads.scale(1.0 / n);
    Ok((loss, grads, correct as f64 / records.len() as f64))
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Full-batch AdamW on the cross-entropy objective. Deterministic
/// (single-threaded, fixed order); `epochs = 0` leaves parameters unchanged.
pub fn train_prefdisc(
    model: &PrefDiscModel,
    records: &[VQARecord],
    epochs: usize,
    _seed: u64,
) -> Result<(PrefDiscModel, TrainReport)> {
    let n_pos = records.iter().filter(|r| r.answer == 1).count();
    if records.is_empty() || n_pos == 0 || n_pos == records.len() {
        return Err(Error::validation(
            "cross-entropy training needs both labels present",
        ));
    }
    let mut m = model.clone();
    let cfg = AdamWConfig::new(m.train_config.lr, m.train_config.weight_decay);
    let d = m.config.d_model;
    let mut head_state = AdamState::zeros(d + 1);
    let mut layer_states: Vec<AdamState> = m
        .params
        .layers
        .iter()
        .map(|l| AdamState::zeros(l.w.len() + l.u.len() + l.b.len()))
        .collect();

    let mut losses = Vec::with_capacity(epochs + 1);
    let (initial_loss, _, _) = loss_grads_inner(&m, records)?;
    losses.push(initial_loss);

    for epoch in 0..epochs {
        let (loss, grads, _) = loss_grads_inner(&m, records)?;
        if !loss.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite cross-entropy at epoch {epoch}"
            )));
        }
        let t = epoch + 1;
        let mut head_params: Vec<f64> = m.head_w.to_vec();
        head_params.push(m.head_b);
        let mut head_grads: Vec<f64> = grads.head_w.to_vec();
        head_grads.push(grads.head_b);
        head_state.step(&mut head_params, &head_grads, t, &cfg);
        m.head_b = head_params.pop().expect("bias slot");
        m.head_w = Array1::from_vec(head_params);

        for (li, (lp, (gw, gu, gb))) in
            m.params.layers.iter_mut().zip(&grads.layers).enumerate()
        {
            let mut flat: Vec<f64> = lp
                .w
                .iter()
                .chain(lp.u.iter())
                .chain(lp.b.iter())
                .copied()
                .collect();
            let flat_g: Vec<f64> = gw.iter().chain(gu.iter()).chain(gb.iter()).copied().collect();
            layer_states[li].step(&mut flat, &flat_g, t, &cfg);
            let (w_len, u_len) = (lp.w.len(), lp.u.len());
            lp.w.as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(&flat[..w_len]);
            lp.u.as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(&flat[w_len..w_len + u_len]);
            lp.b.as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(&flat[w_len + u_len..]);
        }
        losses.push(loss);
    }
    let (final_loss, _, train_accuracy) = loss_grads_inner(&m, records)?;
    let report = TrainReport {
        initial_loss,
        final_loss,
        losses,
        train_accuracy,
    };
    Ok((m, report))
}
