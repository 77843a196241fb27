//! Helpers shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vgpeft::autodiff::{Tape, Var};
use vgpeft::gradcheck::finite_diff_check;
use vgpeft::metrics::BBox;
use vgpeft::model::{GroundingModel, ModelConfig, NormBox};
use vgpeft::peft::{inject, PeftSpec};
use vgpeft::tensor::{ParamKind, ParamSet, Parameter, Tensor};
use vgpeft::train::box_loss;
use vgpeft::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, std).unwrap();
    Tensor::new(shape, (0..shape.iter().product::<usize>()).map(|_| n.sample(rng)).collect()).unwrap()
}

pub fn random_patches(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian(&[cfg.n_patches(), cfg.patch_dim], 1.0, &mut rng)
}

pub fn random_tokens(cfg: &ModelConfig, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = rng.random_range(1..=8);
    (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
}

/// Cell count of the overlap of two boxes on the integer grid, by scanning
/// every unit cell. Boxes must have integer corners.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (lo_x, hi_x) = (a[0].min(b[0]), a[2].max(b[2]));
    let (lo_y, hi_y) = (a[1].min(b[1]), a[3].max(b[3]));
    let (mut inter, mut union) = (0u64, 0u64);
    for x in lo_x..hi_x {
        for y in lo_y..hi_y {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

pub fn bbox(r: [i64; 4]) -> BBox {
    BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).unwrap()
}

/// Contracts `v` with fixed random weights so every output coordinate
/// contributes a distinct amount to the scalar.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = gaussian(tape.shape(v), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let s = |a: &[usize]| a.to_vec();
    vec![
        ("matmul", vec![s(&[3, 4]), s(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![s(&[3, 4]), s(&[2, 4])], Box::new(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add_bias", vec![s(&[3, 4]), s(&[4])], Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ("add", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        (
            "div",
            vec![s(&[2, 3]), s(&[2, 3])],
            Box::new(|t, v| {
                // keep the denominator away from zero
                let d = t.mul(v[1], v[1])?;
                let d = t.add_scalar(d, 0.5)?;
                t.div(v[0], d)
            }),
        ),
        ("minimum", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.minimum(v[0], v[1]))),
        ("maximum", vec![s(&[2, 3]), s(&[2, 3])], Box::new(|t, v| t.maximum(v[0], v[1]))),
        ("scale", vec![s(&[2, 3])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("add_scalar", vec![s(&[2, 3])], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("gelu", vec![s(&[2, 5])], Box::new(|t, v| t.gelu(v[0]))),
        ("sigmoid", vec![s(&[2, 5])], Box::new(|t, v| t.sigmoid(v[0]))),
        ("relu", vec![s(&[2, 5])], Box::new(|t, v| t.relu(v[0]))),
        ("smooth_l1", vec![s(&[2, 5])], Box::new(|t, v| t.smooth_l1(v[0], 0.4))),
        ("softmax_rows", vec![s(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_cols", vec![s(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 0))),
        ("layer_norm", vec![s(&[3, 6]), s(&[6]), s(&[6])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("embedding", vec![s(&[5, 3])], Box::new(|t, v| t.embedding(v[0], &[4, 0, 4, 2]))),
        ("slice_cols", vec![s(&[3, 5])], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("concat_rows", vec![s(&[2, 3]), s(&[1, 3])], Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]]))),
        ("concat_cols", vec![s(&[2, 3]), s(&[2, 1])], Box::new(|t, v| t.concat_cols(&[v[1], v[0]]))),
        ("mean_rows", vec![s(&[4, 3])], Box::new(|t, v| t.mean_rows(v[0]))),
        ("sum", vec![s(&[4, 3])], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![s(&[4, 3])], Box::new(|t, v| t.mean(v[0]))),
    ]
}

/// Worst relative finite-difference error of every tape primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, (name, shapes, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
            let mut params = ParamSet::new();
            for (i, shape) in shapes.iter().enumerate() {
                let kind = if shape.len() == 1 { ParamKind::Bias } else { ParamKind::Weight };
                params.push(Parameter::new(format!("x{i}"), gaussian(shape, 1.0, &mut rng), kind).unwrap()).unwrap();
            }
            let err = finite_diff_check(
                &mut params,
                |t: &mut Tape, v: &[Var]| {
                    let out = f(t, v)?;
                    probe(t, out, 7)
                },
                FD_STEP,
                usize::MAX,
                k as u64,
            )
            .unwrap();
            (name, err)
        })
        .collect()
}

/// A small model with `spec` injected and every zero-initialized PEFT
/// tensor filled with noise so no gradient path is trivially dead.
pub fn perturbed(spec: &PeftSpec, seed: u64) -> GroundingModel {
    let cfg = ModelConfig { d_model: 8, n_heads: 2, ffn_dim: 12, vocab_size: 16, patch_grid: 3, patch_dim: 4, ..Default::default() };
    let mut m = GroundingModel::build(&cfg).unwrap();
    inject(&mut m, spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut().iter_mut().filter(|p| p.trainable) {
        let noise = gaussian(p.tensor.shape(), 0.3, &mut rng);
        p.tensor.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
    }
    m
}

/// Finite-difference error of the composite loss w.r.t. the trainable
/// parameters of `model`, checking at most `coords` coordinates.
pub fn model_loss_error(model: &mut GroundingModel, coords: usize, seed: u64) -> f64 {
    let cfg = model.config().clone();
    let patches = random_patches(&cfg, seed);
    let tokens = random_tokens(&cfg, seed);
    let gt = NormBox { cx: 0.4, cy: 0.55, w: 0.3, h: 0.2 };
    let frozen = model.clone();
    let mut params = model.params().clone();
    let err = finite_diff_check(
        &mut params,
        |t: &mut Tape, v: &[Var]| {
            let pred = frozen.forward_box(t, v, &patches, &tokens)?;
            box_loss(t, pred, &gt, 1.0, 1.0)
        },
        FD_STEP,
        coords,
        seed,
    )
    .unwrap();
    *model.params_mut() = params;
    err
}
