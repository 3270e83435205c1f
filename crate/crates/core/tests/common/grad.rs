//! Gradient checks shared by the gradient tests and the acceptance suite.

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use tgdp::config::Config;
use tgdp::losses::{info_nce, LossTerms};
use tgdp::masking::MaskSpec;
use tgdp::rng::{stream, Purpose};
use tgdp::tokenizer::{Modality, TokenSequence};
use tgdp::training::{
    compute_terms, contrastive_globals, encode_view, random_masks, reconstruction_terms, Batch, EncodedView,
    Objective, TrainState,
};

use super::{central_difference, max_abs, scalar};

pub const SPECIAL_PARAMS: [&str; 6] = [
    "visual.global",
    "visual.registers",
    "visual.pos_special",
    "audio.global",
    "audio.registers",
    "audio.pos_special",
];

pub fn rec_total(state: &TrainState, batch: &Batch) -> Tensor {
    let t = compute_terms(state, batch, 1, Objective::Full).unwrap();
    (t.rec_v + t.rec_a).unwrap()
}

pub struct Isolation {
    /// Largest |∂L_rec/∂special| over all special parameters, by autodiff.
    pub autodiff: f64,
    /// Largest |central difference| over probed special elements.
    pub finite_diff: f64,
    /// Largest |∂L_rec/∂θ| over all parameters, the scale for relative checks.
    pub scale: f64,
    pub probed: usize,
}

/// Reconstruction loss gradients with respect to global and register tokens.
pub fn reconstruction_isolation(state: &TrainState, batch: &Batch, h: f64) -> Isolation {
    let loss = rec_total(state, batch);
    let grads = loss.backward().unwrap();
    let mut scale = 0.0f64;
    for (_, v) in state.student.params.iter() {
        if let Some(g) = grads.get(v.as_tensor()) {
            scale = scale.max(max_abs(g));
        }
    }
    let mut autodiff = 0.0f64;
    let mut finite_diff = 0.0f64;
    let mut probed = 0;
    let mut r = stream(3, Purpose::Generic, &[]);
    for name in SPECIAL_PARAMS {
        let var = state.student.params.get(name).unwrap();
        if let Some(g) = grads.get(var.as_tensor()) {
            autodiff = autodiff.max(max_abs(g));
        }
        let n = var.elem_count();
        for _ in 0..3 {
            let i = r.random_range(0..n);
            let d = central_difference(var, i, h, || scalar(&rec_total(state, batch)));
            finite_diff = finite_diff.max(d.abs());
            probed += 1;
        }
    }
    Isolation {
        autodiff,
        finite_diff,
        scale,
        probed,
    }
}

/// Replace a view's encoded tokens by a fresh leaf so gradients can be queried.
pub fn inject(view: EncodedView) -> (EncodedView, Var) {
    let var = Var::from_tensor(&view.encoded.tokens.detach()).unwrap();
    let encoded = TokenSequence {
        tokens: var.as_tensor().clone(),
        ..view.encoded
    };
    (EncodedView { encoded, book: view.book }, var)
}

pub struct Separation {
    /// L_contra under two different reconstruction mask draws.
    pub contra: (f64, f64),
    /// L_rec under the same two draws (must differ for the check to mean anything).
    pub rec: (f64, f64),
    /// Whether any gradient of L_contra reached the reconstruction-pass tokens.
    pub contra_reaches_rec_pass: bool,
    /// Largest |∂L_rec/∂ reconstruction-pass tokens|, which must be positive.
    pub rec_grad: f64,
}

fn seq_pair(state: &TrainState, batch: &Batch) -> (TokenSequence, TokenSequence) {
    let enc = &state.student.enc;
    (
        enc.embed(Modality::Visual, &batch.pv, &batch.frame_index).unwrap(),
        enc.embed(Modality::Audio, &batch.pa, &batch.frame_index).unwrap(),
    )
}

fn rec_masks(state: &TrainState, batch: &Batch, seq: &TokenSequence, step: u64) -> Vec<MaskSpec> {
    let tc = &state.config.train;
    random_masks(
        seq.num_patch_tokens(),
        tc.recon_mask_ratio,
        seq.modality,
        &batch.keys,
        Purpose::ReconstructionMask,
        step,
        tc.seed,
    )
}

/// Dual-pass step assembled by hand: one contrastive view, two alternative
/// reconstruction views with injected leaves.
pub fn dual_pass_separation(state: &TrainState, batch: &Batch) -> Separation {
    let tc = &state.config.train;
    let s = &state.student;
    let (sv, sa) = seq_pair(state, batch);
    let cm = |seq: &TokenSequence| {
        random_masks(
            seq.num_patch_tokens(),
            tc.contra_mask_ratio,
            seq.modality,
            &batch.keys,
            Purpose::ContrastiveMask,
            1,
            tc.seed,
        )
    };
    let cv = encode_view(s, &sv, &cm(&sv)).unwrap();
    let ca = encode_view(s, &sa, &cm(&sa)).unwrap();
    let (gv, ga) = contrastive_globals(s, &cv, &ca).unwrap();

    let mut contra = Vec::new();
    let mut rec = Vec::new();
    let mut reaches = false;
    let mut rec_grad = 0.0f64;
    for step in [1u64, 2] {
        let (rv, var_v) = inject(encode_view(s, &sv, &rec_masks(state, batch, &sv, step)).unwrap());
        let (ra, var_a) = inject(encode_view(s, &sa, &rec_masks(state, batch, &sa, step)).unwrap());
        let (lv, la) = reconstruction_terms(s, &rv, &ra, batch).unwrap();
        let l_rec = (lv + la).unwrap();
        let l_contra = info_nce(&gv, &ga, tc.temperature, tc.symmetric_contrastive).unwrap();
        let gc = l_contra.backward().unwrap();
        reaches |= gc.get(var_v.as_tensor()).is_some() || gc.get(var_a.as_tensor()).is_some();
        let gr = l_rec.backward().unwrap();
        for var in [&var_v, &var_a] {
            if let Some(g) = gr.get(var.as_tensor()) {
                rec_grad = rec_grad.max(max_abs(g));
            }
        }
        contra.push(scalar(&l_contra));
        rec.push(scalar(&l_rec));
    }
    Separation {
        contra: (contra[0], contra[1]),
        rec: (rec[0], rec[1]),
        contra_reaches_rec_pass: reaches,
        rec_grad,
    }
}

/// Single-pass control: the shared view's tokens receive L_contra gradient.
pub fn single_pass_contra_grad(state: &TrainState, batch: &Batch) -> f64 {
    let tc = &state.config.train;
    let s = &state.student;
    let (sv, sa) = seq_pair(state, batch);
    let (v, var_v) = inject(encode_view(s, &sv, &rec_masks(state, batch, &sv, 1)).unwrap());
    let (a, _) = inject(encode_view(s, &sa, &rec_masks(state, batch, &sa, 1)).unwrap());
    let (gv, ga) = contrastive_globals(s, &v, &a).unwrap();
    let l = info_nce(&gv, &ga, tc.temperature, tc.symmetric_contrastive).unwrap();
    l.backward()
        .unwrap()
        .get(var_v.as_tensor())
        .map_or(0.0, max_abs)
}

pub struct FdCheck {
    pub term: &'static str,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdCheck {
    pub fn rel_err(&self) -> f64 {
        let denom = self.analytic.abs().max(self.numeric.abs());
        if denom == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / denom
        }
    }
}

fn term_of(terms: LossTerms, term: &str) -> Tensor {
    match term {
        "rec_v" => terms.rec_v,
        "rec_a" => terms.rec_a,
        "contra" => terms.contra,
        "dis" => terms.dis.expect("distillation enabled"),
        _ => unreachable!(),
    }
}

/// Analytic vs central-difference gradients of every loss term with respect to
/// `slices` random parameter elements each, in float64.
pub fn finite_difference_suite(cfg: &Config, batch: &Batch, slices: usize, h: f64) -> Vec<FdCheck> {
    let state = TrainState::new(cfg, DType::F64).unwrap();
    let mut r = stream(cfg.train.seed, Purpose::Generic, &[0xfd]);
    let mut out = Vec::new();
    for term in ["rec_v", "rec_a", "contra", "dis"] {
        let eval = |state: &TrainState| term_of(compute_terms(state, batch, 1, Objective::Full).unwrap(), term);
        let grads = eval(&state).backward().unwrap();
        // parameters whose gradient for this term is non-negligible
        let mut candidates = Vec::new();
        for (name, var) in state.student.params.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let top = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                if top > 1e-6 {
                    candidates.push((name.to_string(), g, top));
                }
            }
        }
        assert!(candidates.len() >= slices, "{term}: only {} parameters with gradient", candidates.len());
        for _ in 0..slices {
            let (name, g, top) = candidates.swap_remove(r.random_range(0..candidates.len()));
            // a random element carrying a meaningful share of this slice's gradient
            let pool: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() >= 0.1 * top).collect();
            let index = pool[r.random_range(0..pool.len())];
            let var = state.student.params.get(&name).unwrap();
            let numeric = central_difference(var, index, h, || scalar(&eval(&state)));
            out.push(FdCheck {
                term,
                param: name,
                index,
                analytic: g[index],
                numeric,
            });
        }
    }
    out
}
