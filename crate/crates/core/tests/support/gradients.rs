//! Central finite differences against reverse-mode gradients. Shared by the
//! core tests and the acceptance runner.

use cbsa_core::alignment::alignment_degrees;
use cbsa_core::encoders::{ClassDictionary, PromptKind};
use cbsa_core::losses::{sup_alignment_loss, unsup_alignment_loss, AslParams};
use cbsa_core::model::{Ablation, Model, ModelConfig};
use cbsa_core::nn::Session;
use cbsa_core::rng::{gaussian, substream, Rng};
use cbsa_core::{Tape, Tensor, Var};
use rand::Rng as _;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_TOL: f64 = 1e-7;
const SMALL: f64 = 1e-3;

fn agrees(analytic: f64, numeric: f64) -> bool {
    let err = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale < SMALL {
        err < ABS_TOL
    } else {
        err / scale < REL_TOL
    }
}

fn random_tensor(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| gaussian(rng, std)).collect()).unwrap()
}

/// One randomly drawn op sequence over `r x c` matrices.
#[derive(Clone, Debug)]
struct Graph {
    rows: usize,
    cols: usize,
    ops: Vec<(u8, usize, usize, f64)>,
    weights: Tensor,
}

impl Graph {
    fn draw(rng: &mut Rng) -> Self {
        let rows = rng.random_range(2..=4);
        let cols = rng.random_range(2..=5);
        let n_ops = rng.random_range(4..=9);
        let ops = (0..n_ops)
            .map(|i| {
                // Operands index into the growing list of earlier values.
                let avail = 2 + i;
                (
                    rng.random_range(0..16u8),
                    rng.random_range(0..avail),
                    rng.random_range(0..avail),
                    rng.random_range(0.5..2.0),
                )
            })
            .collect();
        let weights = random_tensor(rng, rows, cols, 1.0);
        Self { rows, cols, ops, weights }
    }

    fn inputs(&self, rng: &mut Rng) -> Vec<Tensor> {
        let (r, c) = (self.rows, self.cols);
        vec![
            random_tensor(rng, r, c, 0.8),
            random_tensor(rng, r, c, 0.8),
            random_tensor(rng, c, c, 0.5),
            random_tensor(rng, 1, c, 0.5),
            random_tensor(rng, 1, c, 0.3).map(|v| 1.0 + v),
        ]
    }

    fn build(&self, t: &mut Tape, leaves: &[Var]) -> Var {
        let (x, y, w, b, gain) = (leaves[0], leaves[1], leaves[2], leaves[3], leaves[4]);
        let c = self.cols;
        let mut vals = vec![x, y];
        for &(op, i, j, a) in &self.ops {
            let (u, v) = (vals[i], vals[j]);
            let out = match op {
                0 => t.sigmoid(u),
                1 => t.gelu(u),
                2 => t.affine(u, a, 0.1),
                3 => t.mul(u, v).unwrap(),
                4 => t.add(u, v).unwrap(),
                5 => t.sub(u, v).unwrap(),
                6 => t.matmul(u, w).unwrap(),
                7 => t.matmul_nt(u, w).unwrap(),
                8 => t.softmax_rows(u, a).unwrap(),
                9 => t.l2_normalize_rows(u).unwrap(),
                10 => t.layer_norm(u, gain, b).unwrap(),
                11 => t.add_row(u, b).unwrap(),
                12 => {
                    let s = t.sigmoid(u);
                    t.pow(s, a).unwrap()
                }
                13 => {
                    let s = t.sigmoid(u);
                    let s = t.affine(s, 1.0, 0.1);
                    t.log(s).unwrap()
                }
                14 => {
                    let left = t.slice_cols(u, 0, 1).unwrap();
                    let right = t.slice_cols(v, 1, c - 1).unwrap();
                    t.concat_cols(&[right, left]).unwrap()
                }
                _ => {
                    let m = t.mean_rows(u);
                    let tr = t.transpose(v);
                    let back = t.transpose(tr);
                    t.add_row(back, m).unwrap()
                }
            };
            vals.push(out);
        }
        let last = *vals.last().unwrap();
        let weights = t.constant(self.weights.clone());
        let weighted = t.mul(last, weights).unwrap();
        let dots = t.row_dot(last, y).unwrap();
        let s1 = t.sum(weighted);
        let s2 = t.mean(dots);
        t.add(s1, s2).unwrap()
    }

    fn eval(&self, inputs: &[Tensor]) -> f64 {
        let mut t = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let root = self.build(&mut t, &leaves);
        t.value(root).item()
    }
}

/// Checks `n` random graphs; returns the number of entries compared.
pub fn composite_graphs(seed: u64, n: usize) -> Result<usize, String> {
    let mut rng = substream(seed, "gradient-oracle");
    let mut checked = 0;
    for g in 0..n {
        let graph = Graph::draw(&mut rng);
        let inputs = graph.inputs(&mut rng);
        let mut t = Tape::new();
        let leaves: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let root = graph.build(&mut t, &leaves);
        let grads = t.backward(root).map_err(|e| e.to_string())?;
        for (slot, &leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(leaf)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[slot].shape()));
            for e in 0..inputs[slot].len() {
                let mut plus = inputs.clone();
                plus[slot].data_mut()[e] += H;
                let mut minus = inputs.clone();
                minus[slot].data_mut()[e] -= H;
                let numeric = (graph.eval(&plus) - graph.eval(&minus)) / (2.0 * H);
                let a = analytic.data()[e];
                if !agrees(a, numeric) {
                    return Err(format!("graph {g} {graph:?}: input {slot}[{e}] analytic {a:e} numeric {numeric:e}"));
                }
                checked += 1;
            }
        }
    }
    Ok(checked)
}

fn small_model() -> Model {
    let cfg = ModelConfig {
        n_tokens: 3,
        decoder_ff: 16,
        ..ModelConfig::default()
    };
    let dict = ClassDictionary::generate(4, 16, 0.3, &mut substream(5, "dict"));
    let mut model = Model::new(cfg, dict, Ablation::TpSaa, 3, 5).unwrap();
    // Move every trainable parameter off its initial value so zero-initialized
    // projections do not hide whole branches.
    let mut rng = substream(5, "jitter");
    for id in model.store.trainable_ids() {
        for v in model.store.value_mut(id).data_mut() {
            *v += gaussian(&mut rng, 0.1);
        }
    }
    model
}

struct Batch {
    views: Vec<(Tensor, Tensor)>,
    y: Tensor,
    y_hat: Tensor,
}

fn chain_loss(model: &Model, batch: &Batch, s: &mut Session) -> Var {
    let text = model.text_vars(s).unwrap();
    let degrees: Vec<Var> = batch
        .views
        .iter()
        .map(|(g, l)| model.degrees(s, &text, g, l).unwrap())
        .collect();
    let p = s.tape.concat_rows(&degrees).unwrap();
    let params = AslParams::default();
    let sup = sup_alignment_loss(s, p, &batch.y, &params).unwrap();
    let unsup = unsup_alignment_loss(s, p, &batch.y_hat, &params).unwrap();
    s.tape.add(sup, unsup).unwrap()
}

/// Every trainable parameter of a small model through prompts, text encoder,
/// decoder, alignment and both ASL terms.
pub fn prompt_to_asl_chain() -> Result<usize, String> {
    let model = small_model();
    let mut rng = substream(5, "views");
    let views: Vec<(Tensor, Tensor)> = (0..3)
        .map(|_| model.pool_view(&random_tensor(&mut rng, 4, 16, 1.0)).unwrap())
        .collect();
    let y = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0, 1.0],
        vec![0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 1.0, 1.0],
    ])
    .unwrap();
    let y_hat = Tensor::from_rows(&[
        vec![1.0, -1.0, 0.0, 0.0],
        vec![-1.0, 1.0, 0.0, -1.0],
        vec![0.0, 0.0, 1.0, 1.0],
    ])
    .unwrap();
    let batch = Batch { views, y, y_hat };

    let mut s = Session::new(&model.store);
    let root = chain_loss(&model, &batch, &mut s);
    let grads = s.param_grads(root).map_err(|e| e.to_string())?;

    let prompt_ids = [model.prompts.param(PromptKind::Semantic), model.prompts.param(PromptKind::Target)];
    let mut nonzero_prompt = false;
    let mut checked = 0;
    let mut probe = model.clone();
    for (id, analytic) in &grads {
        for e in 0..analytic.len() {
            let base = probe.store.get(*id).value.data()[e];
            let mut eval = |v: f64| {
                probe.store.value_mut(*id).data_mut()[e] = v;
                let mut s = Session::new(&probe.store);
                let r = chain_loss(&probe, &batch, &mut s);
                s.value(r).item()
            };
            let numeric = (eval(base + H) - eval(base - H)) / (2.0 * H);
            eval(base);
            let a = analytic.data()[e];
            if !agrees(a, numeric) {
                return Err(format!("{}[{e}]: analytic {a:e} numeric {numeric:e}", model.store.get(*id).name));
            }
            if prompt_ids.contains(id) && a.abs() > 1e-6 {
                nonzero_prompt = true;
            }
            checked += 1;
        }
    }
    if !nonzero_prompt {
        return Err("prompt gradients vanished".into());
    }
    Ok(checked)
}

/// Frozen encoder and pool weights never receive a gradient slot.
pub fn frozen_weights_have_no_gradient_slot() {
    let model = small_model();
    let trainable = model.store.trainable_ids();
    for id in model.store.ids() {
        let p = model.store.get(id);
        let frozen = p.name.starts_with("text.") || p.name.starts_with("pool.");
        if frozen {
            assert!(!p.trainable && !trainable.contains(&id), "{} is trainable", p.name);
        }
    }
    let mut s = Session::new(&model.store);
    let text = model.text_vars(&mut s).unwrap();
    let degrees = alignment_degrees(&mut s, text.semantic.unwrap(), text.target, &model.cfg.alignment).unwrap();
    let root = s.tape.sum(degrees);
    assert_eq!(s.param_grads(root).unwrap().len(), trainable.len());
}
