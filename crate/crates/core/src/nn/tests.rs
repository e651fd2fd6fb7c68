use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::patch::{interpolate_pos_table, PatchEmbedParams};
use super::*;
use crate::autograd::gradcheck::{finite_diff_check_with, FdOptions, DEFAULT_EPS};

struct Params(HashMap<String, Var>);

impl ParamSource for Params {
    fn var(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing {name}")))
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

fn bind_random(
    tape: &mut Tape<f64>,
    rng: &mut ChaCha8Rng,
    shapes: &[(String, Vec<usize>)],
) -> Params {
    Params(
        shapes
            .iter()
            .map(|(n, s)| (n.clone(), tape.param(random(rng, s, 0.5))))
            .collect(),
    )
}

fn layer_shapes(prefix: &str, d: usize, ffn: usize, cross: bool) -> Vec<(String, Vec<usize>)> {
    let mut v = LayerNorm::shapes(&format!("{prefix}.ln1"), d);
    v.extend(AttentionParams::shapes(&format!("{prefix}.attn"), d));
    if cross {
        v.extend(LayerNorm::shapes(&format!("{prefix}.lnx"), d));
        v.extend(AttentionParams::shapes(&format!("{prefix}.xattn"), d));
    }
    v.extend(LayerNorm::shapes(&format!("{prefix}.ln2"), d));
    v.extend(FeedForwardParams::shapes(&format!("{prefix}.ffn"), d, ffn));
    v
}

fn bind_layer(p: &Params, prefix: &str, cross: bool) -> LayerParams {
    LayerParams {
        ln_self: LayerNorm::bind(p, &format!("{prefix}.ln1")).unwrap(),
        self_attn: AttentionParams::bind(p, &format!("{prefix}.attn")).unwrap(),
        cross: cross.then(|| {
            (
                LayerNorm::bind(p, &format!("{prefix}.lnx")).unwrap(),
                AttentionParams::bind(p, &format!("{prefix}.xattn")).unwrap(),
            )
        }),
        ln_ffn: LayerNorm::bind(p, &format!("{prefix}.ln2")).unwrap(),
        ffn: FeedForwardParams::bind(p, &format!("{prefix}.ffn")).unwrap(),
    }
}

#[test]
fn one_hot_attention_returns_projected_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (d, heads, lk, j) = (8, 2, 5, 3);
    let mut tape = Tape::<f64>::new();
    let p = bind_random(&mut tape, &mut rng, &AttentionParams::shapes("a", d));
    let attn = AttentionParams::bind(&p, "a").unwrap();
    let q = tape.constant(random(&mut rng, &[1, 2, d], 1.0));
    let kv_t = random(&mut rng, &[1, lk, d], 1.0);
    let kv = tape.constant(kv_t.clone());
    let mut valid = vec![false; lk];
    valid[j] = true;
    let mask = KeyMask::new(1, lk, valid).unwrap();
    let out = multi_head_attention(&mut tape, q, kv, &mask, &attn, heads).unwrap();

    // Oracle: value projection of row j followed by the output projection.
    let row = &kv_t.data()[j * d..(j + 1) * d];
    let lin = |w: Var, b: Var, x: &[f64], tape: &Tape<f64>| -> Vec<f64> {
        let (w, b) = (tape.value(w).data(), tape.value(b).data());
        (0..d)
            .map(|o| b[o] + (0..d).map(|i| x[i] * w[i * d + o]).sum::<f64>())
            .collect()
    };
    let v = lin(attn.value.weight, attn.value.bias, row, &tape);
    let expected = lin(attn.out.weight, attn.out.bias, &v, &tape);
    for qrow in 0..2 {
        for (a, b) in tape.value(out).data()[qrow * d..(qrow + 1) * d]
            .iter()
            .zip(&expected)
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn key_permutation_leaves_attention_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (d, heads, l) = (8, 4, 6);
    let mut tape = Tape::<f64>::new();
    let p = bind_random(&mut tape, &mut rng, &AttentionParams::shapes("a", d));
    let attn = AttentionParams::bind(&p, "a").unwrap();
    let q = tape.constant(random(&mut rng, &[1, 3, d], 1.0));
    let kv = random(&mut rng, &[1, l, d], 1.0);
    let valid = vec![true, false, true, true, false, true];
    let perm = [4, 2, 0, 5, 1, 3];
    let mut kv_p = Vec::new();
    let mut valid_p = Vec::new();
    for &i in &perm {
        kv_p.extend_from_slice(&kv.data()[i * d..(i + 1) * d]);
        valid_p.push(valid[i]);
    }
    let a = tape.constant(kv);
    let b = tape.constant(Tensor::new(vec![1, l, d], kv_p).unwrap());
    let out_a = multi_head_attention(
        &mut tape,
        q,
        a,
        &KeyMask::new(1, l, valid).unwrap(),
        &attn,
        heads,
    )
    .unwrap();
    let out_b = multi_head_attention(
        &mut tape,
        q,
        b,
        &KeyMask::new(1, l, valid_p).unwrap(),
        &attn,
        heads,
    )
    .unwrap();
    assert!(tape.value(out_a).max_abs_diff(tape.value(out_b)) < 1e-12);
}

#[test]
fn zero_output_projection_gives_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 4;
    let mut tape = Tape::<f64>::new();
    let mut shapes = AttentionParams::shapes("a", d);
    shapes.retain(|(n, _)| !n.starts_with("a.o"));
    let mut p = bind_random(&mut tape, &mut rng, &shapes);
    p.0.insert("a.o.w".into(), tape.param(Tensor::zeros(vec![d, d])));
    p.0.insert("a.o.b".into(), tape.param(Tensor::zeros(vec![d])));
    let attn = AttentionParams::bind(&p, "a").unwrap();
    let q = tape.constant(random(&mut rng, &[1, 1, d], 1.0));
    let out = multi_head_attention(&mut tape, q, q, &KeyMask::all_valid(1, 1), &attn, 2).unwrap();
    assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rejects_width_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::<f64>::new();
    let p = bind_random(&mut tape, &mut rng, &AttentionParams::shapes("a", 4));
    let attn = AttentionParams::bind(&p, "a").unwrap();
    let q = tape.constant(random(&mut rng, &[1, 2, 4], 1.0));
    let kv = tape.constant(random(&mut rng, &[1, 2, 6], 1.0));
    let err =
        multi_head_attention(&mut tape, q, kv, &KeyMask::all_valid(1, 2), &attn, 2).unwrap_err();
    assert!(err.to_string().contains("multi_head_attention"));
}

#[test]
fn attention_weights_sum_to_one_over_unmasked_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (d, heads, lq, lk, b) = (8, 2, rng.random_range(1..6), rng.random_range(1..7), 2);
        let mut tape = Tape::<f64>::new();
        let p = bind_random(&mut tape, &mut rng, &AttentionParams::shapes("a", d));
        let attn = AttentionParams::bind(&p, "a").unwrap();
        let q = tape.constant(random(&mut rng, &[b, lq, d], 2.0));
        let kv = tape.constant(random(&mut rng, &[b, lk, d], 2.0));
        let mut valid: Vec<bool> = (0..b * lk).map(|_| rng.random_bool(0.7)).collect();
        valid[0] = true;
        valid[lk] = true;
        let mask = KeyMask::new(b, lk, valid.clone()).unwrap();
        let out = multi_head_attention_with_weights(&mut tape, q, kv, &mask, &attn, heads).unwrap();
        let w = tape.value(out.weights).data();
        for bh in 0..b * heads {
            let bi = bh / heads;
            for r in 0..lq {
                let row = &w[(bh * lq + r) * lk..(bh * lq + r + 1) * lk];
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                for (k, &v) in row.iter().enumerate() {
                    if !valid[bi * lk + k] {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }
}

fn zeroed_layer(
    tape: &mut Tape<f64>,
    rng: &mut ChaCha8Rng,
    d: usize,
    ffn: usize,
    cross: bool,
) -> LayerParams {
    let shapes = layer_shapes("l", d, ffn, cross);
    let mut p = bind_random(tape, rng, &shapes);
    for (name, shape) in &shapes {
        let zero = name.starts_with("l.attn.o")
            || name.starts_with("l.xattn.o")
            || name.starts_with("l.ffn.down");
        if zero {
            p.0.insert(name.clone(), tape.param(Tensor::zeros(shape.clone())));
        }
    }
    bind_layer(&p, "l", cross)
}

#[test]
fn zeroed_residual_branches_make_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = BlockConfig {
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.0,
    };
    let mut tape = Tape::<f64>::new();
    let layer = zeroed_layer(&mut tape, &mut rng, 8, 16, true);
    let x_t = random(&mut rng, &[2, 5, 8], 1.0);
    let x = tape.constant(x_t.clone());
    let other = tape.constant(random(&mut rng, &[2, 3, 8], 1.0));
    let omask = KeyMask::all_valid(2, 3);
    let cross = CrossInput {
        sequence: other,
        mask: &omask,
    };
    let y = encoder_layer(
        &mut tape,
        x,
        &KeyMask::all_valid(2, 5),
        Some(cross),
        &layer,
        &cfg,
        None,
    )
    .unwrap();
    assert_eq!(tape.value(y), &x_t);
}

#[test]
fn layer_preserves_query_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = BlockConfig {
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.0,
    };
    let mut tape = Tape::<f64>::new();
    let p = bind_random(&mut tape, &mut rng, &layer_shapes("l", 8, 16, true));
    let layer = bind_layer(&p, "l", true);
    let other = tape.constant(random(&mut rng, &[1, 7, 8], 1.0));
    let omask = KeyMask::all_valid(1, 7);
    for len in 1..=64 {
        let x = tape.constant(random(&mut rng, &[1, len, 8], 1.0));
        let cross = CrossInput {
            sequence: other,
            mask: &omask,
        };
        let y = encoder_layer(
            &mut tape,
            x,
            &KeyMask::all_valid(1, len),
            Some(cross),
            &layer,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[1, len, 8]);
        let y = encoder_layer(
            &mut tape,
            x,
            &KeyMask::all_valid(1, len),
            None,
            &layer,
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[1, len, 8]);
    }
}

#[test]
fn cross_input_without_cross_weights_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = BlockConfig {
        hidden_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout_rate: 0.0,
    };
    let mut tape = Tape::<f64>::new();
    let p = bind_random(&mut tape, &mut rng, &layer_shapes("l", 8, 16, false));
    let layer = bind_layer(&p, "l", false);
    let x = tape.constant(random(&mut rng, &[1, 3, 8], 1.0));
    let omask = KeyMask::all_valid(1, 3);
    let cross = CrossInput {
        sequence: x,
        mask: &omask,
    };
    assert!(encoder_layer(
        &mut tape,
        x,
        &KeyMask::all_valid(1, 3),
        Some(cross),
        &layer,
        &cfg,
        None
    )
    .is_err());
}

#[test]
fn two_layer_stack_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (d, ffn, seq) = (8, 16, 5);
    let cfg = BlockConfig {
        hidden_dim: d,
        num_heads: 2,
        ffn_dim: ffn,
        dropout_rate: 0.0,
    };
    let mut shapes = layer_shapes("l0", d, ffn, true);
    shapes.extend(layer_shapes("l1", d, ffn, true));
    let mut inputs: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|(_, s)| random(&mut rng, s, 0.5))
        .collect();
    inputs.push(random(&mut rng, &[1, seq, d], 1.0));
    inputs.push(random(&mut rng, &[1, 4, d], 1.0));
    let names: Vec<String> = shapes.iter().map(|(n, _)| n.clone()).collect();
    let mut valid = vec![true; seq];
    valid[4] = false;
    let self_mask = KeyMask::new(1, seq, valid).unwrap();
    let other_mask = KeyMask::new(1, 4, vec![true, true, false, true]).unwrap();
    let report = finite_diff_check_with(
        |tape: &mut Tape<f64>, vars: &[Var]| {
            let p = Params(names.iter().cloned().zip(vars.iter().copied()).collect());
            let n = names.len();
            let mut x = vars[n];
            for prefix in ["l0", "l1"] {
                let layer = bind_layer(&p, prefix, true);
                let cross = CrossInput {
                    sequence: vars[n + 1],
                    mask: &other_mask,
                };
                x = encoder_layer(tape, x, &self_mask, Some(cross), &layer, &cfg, None)?;
            }
            let sq = tape.mul(x, x)?;
            Ok(tape.mean(sq))
        },
        &inputs,
        &FdOptions {
            eps: DEFAULT_EPS,
            max_coords_per_input: Some(6),
            seed: 1,
        },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn patch_counts() {
    let mut tape = Tape::<f32>::new();
    for (size, patch, tiles) in [(224, 32, 49), (32, 8, 16)] {
        let d = 4;
        let params = PatchEmbedParams {
            proj: Linear {
                weight: tape.param(Tensor::full(vec![patch * patch * 3, d], 0.01)),
                bias: tape.param(Tensor::zeros(vec![d])),
            },
            cls: tape.param(Tensor::zeros(vec![d])),
            pos: tape.param(Tensor::zeros(vec![tiles + 1, d])),
        };
        let img = Image::filled(size, size, 3, 0.5);
        let out = patch_embed(&mut tape, &[img.clone(), img], patch, &params).unwrap();
        assert_eq!(tape.shape(out), &[2, tiles + 1, d]);
        let v = tape.value(out);
        assert_eq!(&v.data()[..(tiles + 1) * d], &v.data()[(tiles + 1) * d..]);
    }
}

#[test]
fn indivisible_image_names_dimensions() {
    let err = patchify::<f32>(&[Image::filled(30, 32, 3, 0.0)], 8)
        .unwrap_err()
        .to_string();
    assert!(
        err.contains("30") && err.contains("32") && err.contains('8'),
        "{err}"
    );
}

#[test]
fn patchify_orders_tiles_row_major() {
    // 4x4 single-channel image, values = pixel index.
    let img = Image::new(4, 4, 1, (0..16).map(|v| v as f32).collect()).unwrap();
    let p = patchify::<f32>(&[img], 2).unwrap();
    assert_eq!(p.shape(), &[1, 4, 4]);
    assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
    assert_eq!(&p.data()[8..12], &[8.0, 9.0, 12.0, 13.0]);
}

#[test]
fn interpolation_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grid = Tensor::new(
        vec![9, 5],
        (0..45).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap();
    let same = interpolate_pos_embed(&grid, 3).unwrap();
    assert!(same
        .data()
        .iter()
        .zip(grid.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));

    let constant = Tensor::full(vec![4, 3], 0.37f32);
    for new_g in [1, 3, 5, 7] {
        let out = interpolate_pos_embed(&constant, new_g).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.37).abs() < 1e-7));
    }
    assert!(interpolate_pos_embed(&Tensor::zeros(vec![5, 2]), 3).is_err());
}

/// Scalar bilinear interpolation at fractional grid coordinates.
fn bilinear_oracle(field: &[f64], g: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let f = |r: usize, c: usize| field[r * g + c];
    f(y0, x0) * (1.0 - ty) * (1.0 - tx)
        + f(y0, x1) * (1.0 - ty) * tx
        + f(y1, x0) * ty * (1.0 - tx)
        + f(y1, x1) * ty * tx
}

#[test]
fn ramp_field_matches_scalar_oracle() {
    let (g, new_g, d) = (2, 3, 3);
    // Dimension k holds the linear ramp a_k + b_k·row + c_k·col.
    let coeffs = [(0.1, 0.5, -0.25), (1.0, -2.0, 0.75), (-0.3, 0.0, 1.5)];
    let mut data = Vec::new();
    for r in 0..g {
        for c in 0..g {
            for &(a, b, cc) in &coeffs {
                data.push((a + b * r as f64 + cc * c as f64) as f32);
            }
        }
    }
    let grid = Tensor::new(vec![g * g, d], data.clone()).unwrap();
    let out = interpolate_pos_embed(&grid, new_g).unwrap();
    for k in 0..d {
        let field: Vec<f64> = (0..g * g).map(|i| data[i * d + k] as f64).collect();
        for oy in 0..new_g {
            for ox in 0..new_g {
                let scale = (g - 1) as f64 / (new_g - 1) as f64;
                let want = bilinear_oracle(&field, g, oy as f64 * scale, ox as f64 * scale);
                let got = out.data()[(oy * new_g + ox) * d + k] as f64;
                assert!(
                    (got - want).abs() < 1e-6,
                    "dim {k} ({oy},{ox}): {got} vs {want}"
                );
            }
        }
    }
}

#[test]
fn interpolation_stays_within_cell_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let g = rng.random_range(2..5);
        let new_g = rng.random_range(1..9);
        let grid = Tensor::new(
            vec![g * g, 2],
            (0..g * g * 2)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect(),
        )
        .unwrap();
        let out = interpolate_pos_embed(&grid, new_g).unwrap();
        for oy in 0..new_g {
            for ox in 0..new_g {
                let s = |i: usize| {
                    if new_g == 1 {
                        0.0
                    } else {
                        i as f64 * (g - 1) as f64 / (new_g - 1) as f64
                    }
                };
                let (y0, x0) = (s(oy).floor() as usize, s(ox).floor() as usize);
                let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
                for k in 0..2 {
                    let cells = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)]
                        .map(|(r, c)| grid.data()[(r * g + c) * 2 + k]);
                    let lo = cells.iter().cloned().fold(f32::INFINITY, f32::min);
                    let hi = cells.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let v = out.data()[(oy * new_g + ox) * 2 + k];
                    assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }
    }
}

#[test]
fn pos_table_keeps_cls_row() {
    let table = Tensor::new(
        vec![5, 2],
        vec![9.0, 8.0, 0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
    )
    .unwrap();
    let out = interpolate_pos_table(&table, 3).unwrap();
    assert_eq!(out.shape(), &[10, 2]);
    assert_eq!(&out.data()[..2], &[9.0, 8.0]);
}

#[test]
fn text_embedding_matches_table_lookup() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (vocab, max_len, d) = (10, 6, 4);
    let tok_t = random(&mut rng, &[vocab, d], 1.0);
    let pos_t = random(&mut rng, &[max_len, d], 1.0);
    let mut tape = Tape::<f64>::new();
    let tok = tape.param(tok_t.clone());
    let pos = tape.param(pos_t.clone());

    let cls_only = text_embed(&mut tape, &[1], 1, 1, tok, pos).unwrap();
    assert_eq!(tape.shape(cls_only), &[1, 1, d]);

    let ids = [1, 7, 7, 3, 1, 0, 0, 0];
    let out = text_embed(&mut tape, &ids, 2, 4, tok, pos).unwrap();
    let v = tape.value(out).data();
    for (slot, &id) in ids.iter().enumerate() {
        let p = slot % 4;
        for k in 0..d {
            let want = tok_t.data()[id * d + k] + pos_t.data()[p * d + k];
            assert_eq!(v[slot * d + k], want);
        }
    }
    // Same token at positions 1 and 2 embeds differently.
    assert_ne!(&v[d..2 * d], &v[2 * d..3 * d]);
    assert!(text_embed(&mut tape, &[10], 1, 1, tok, pos).is_err());
    assert!(text_embed(&mut tape, &[1; 7], 1, 7, tok, pos).is_err());
}

#[test]
fn block_config_validation() {
    let ok = BlockConfig {
        hidden_dim: 64,
        num_heads: 4,
        ffn_dim: 256,
        dropout_rate: 0.0,
    };
    assert!(ok.validate().is_ok());
    assert!(BlockConfig { num_heads: 5, ..ok }.validate().is_err());
    assert!(BlockConfig {
        dropout_rate: 1.0,
        ..ok
    }
    .validate()
    .is_err());
}
