use std::path::Path;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{parse_statements_str, Statement, Vocab, VocabBuilder};
use crate::model::{Activation, DecoderConfig, ModelConfig, TableSizes};
use crate::tensor::grad_check;

type Rows = Vec<Vec<f64>>;

fn parse(text: &str) -> (Vec<Statement>, Vocab) {
    let mut b = VocabBuilder::new();
    let s = parse_statements_str(text, Path::new("toy"), &mut b).unwrap();
    (s, b.finish())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn max_diff(a: &Rows, b: &Tensor) -> f64 {
    assert_eq!(a.len(), b.rows());
    a.iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().zip(b.row(i)).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

// Dense reference arithmetic, written independently of the tape.

fn rot(x: &[f64], r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for k in 0..x.len() / 2 {
        let (xr, xi) = (x[2 * k], x[2 * k + 1]);
        let m = (r[2 * k] * r[2 * k] + r[2 * k + 1] * r[2 * k + 1]).sqrt().max(ROTATE_EPS);
        let (c, s) = (r[2 * k] / m, r[2 * k + 1] / m);
        out[2 * k] = xr * c - xi * s;
        out[2 * k + 1] = xr * s + xi * c;
    }
    out
}

fn vecmat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for (i, vi) in v.iter().enumerate() {
        for (j, o) in out.iter_mut().enumerate() {
            *o += vi * w.row(i)[j];
        }
    }
    out
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

struct BaseWeights<'a> {
    w_std: &'a Tensor,
    w_inv: &'a Tensor,
    w_self: &'a Tensor,
    w_q: &'a Tensor,
    w_rel: &'a Tensor,
}

/// Term-by-term neighbourhood sum over explicit (receiver, neighbour,
/// relation, qualifiers) edges derived straight from the statements.
fn oracle_base(
    ent: &Rows,
    rel: &Rows,
    stmts: &[Statement],
    num_entities: usize,
    num_relations: usize,
    w: &BaseWeights,
    cfg: &EncoderConfig,
) -> (Rows, Rows) {
    let d = ent[0].len();
    let alpha = cfg.alpha;
    // (receiver, neighbour, relation, qualifiers, bucket)
    let mut edges: Vec<(usize, usize, usize, Vec<(usize, usize)>, usize)> = Vec::new();
    for s in stmts {
        let q: Vec<_> = s.qualifiers.iter().map(|q| (q.relation, q.entity)).collect();
        edges.push((s.subject, s.object, s.relation, q.clone(), 0));
        edges.push((s.object, s.subject, s.relation + num_relations, q, 1));
    }
    for v in 0..num_entities {
        edges.push((v, v, 2 * num_relations, Vec::new(), 2));
    }
    let weights = [w.w_std, w.w_inv, w.w_self];
    let mut out = ent.clone();
    for v in 0..num_entities {
        let mut total = vec![0.0; d];
        for bucket in 0..3 {
            let mine: Vec<_> = edges.iter().filter(|e| e.0 == v && e.4 == bucket).collect();
            for (_, u, r, quals, _) in &mine {
                let mut hq = vec![0.0; d];
                for &(qr, qv) in quals {
                    axpy(1.0, &rot(&rel[qr], &ent[qv]), &mut hq);
                }
                let hq = vecmat(&hq, w.w_q);
                let qualified = !quals.is_empty();
                let a = if qualified || cfg.strict_alpha { alpha } else { 1.0 };
                let b = if qualified { 1.0 - alpha } else { 0.0 };
                let psi = match cfg.mix {
                    QualifierMix::QuadMix => {
                        let mut p = vec![0.0; d];
                        axpy(a, &rot(&ent[*u], &rel[*r]), &mut p);
                        axpy(b, &hq, &mut p);
                        p
                    }
                    QualifierMix::StareGamma => {
                        let mut g = vec![0.0; d];
                        axpy(a, &rel[*r], &mut g);
                        axpy(b, &hq, &mut g);
                        rot(&ent[*u], &g)
                    }
                };
                let msg = vecmat(&psi, weights[bucket]);
                let scale = if cfg.degree_norm { 1.0 / mine.len() as f64 } else { 1.0 };
                axpy(scale, &msg, &mut total);
            }
        }
        out[v] = total.iter().map(|&x| cfg.activation.kind().apply(x)).collect();
    }
    let new_rel = rel
        .iter()
        .enumerate()
        .map(|(i, r)| if i < 2 * num_relations { vecmat(r, w.w_rel) } else { r.clone() })
        .collect();
    (out, new_rel)
}

fn oracle_triple(hv: &[f64], hr: &[f64], hu: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cat: Vec<f64> = hv.iter().chain(hr).chain(hu).copied().collect();
    let mut out = vecmat(&cat, w);
    axpy(1.0, b.data(), &mut out);
    out
}

fn oracle_qual(
    ent: &Rows,
    rel: &Rows,
    stmts: &[Statement],
    w_triple: &Tensor,
    b_triple: &Tensor,
    w_dir: &Tensor,
    act: Activation,
) -> Rows {
    let d = ent[0].len();
    let mut out = ent.clone();
    for v in 0..ent.len() {
        let mut sum = vec![0.0; d];
        let mut n = 0;
        for s in stmts {
            for q in s.qualifiers.iter().filter(|q| q.entity == v) {
                let ht = oracle_triple(&ent[s.subject], &rel[s.relation], &ent[s.object], w_triple, b_triple);
                axpy(1.0, &vecmat(&rot(&ht, &rel[q.relation]), w_dir), &mut sum);
                n += 1;
            }
        }
        if n > 0 {
            out[v] = sum.iter().map(|x| act.kind().apply(x / n as f64)).collect();
        }
    }
    out
}

fn small_config(d: usize, encoder: EncoderConfig) -> ModelConfig {
    ModelConfig {
        dim: d,
        encoder,
        decoder: DecoderConfig {
            layers: 1,
            heads: 2,
            hidden: 8,
            ..DecoderConfig::default()
        },
    }
}

fn model(vocab: &Vocab, config: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelParams::init(config, TableSizes::from_vocab(vocab, 2), &mut rng).unwrap()
}

fn run_encode(params: &ModelParams, graph: &EncoderGraph) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let bound = params.store.bind_frozen(&mut tape);
    let out = encode(&mut tape, graph, params, &bound, &mut ForwardCtx::eval()).unwrap();
    (tape.value(out.entities).clone(), tape.value(out.relations).clone())
}

const TOY: &str = "a,r0,b,r1,c\nb,r1,c\n";
const TOY_DEGREE: &str = "a,r0,b,r1,c\nb,r1,c\na,r1,c\nb,r0,a,r0,c,r1,b\n";
const PSEUDONYM: &str = "StephenKing,AuthorOf,TheRunningMan,UnderPseudonym,RichardBachman\n";

#[test]
fn rotate_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.3, -1.2, 2.0, 0.5]));
    let zero_phase = tape.constant(Tensor::vector(vec![2.5, 0.0, 0.1, 0.0]));
    let out = compose_rotate(&mut tape, x, zero_phase).unwrap();
    assert_eq!(tape.value(out).data(), &[0.3, -1.2, 2.0, 0.5]);

    let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let quarter = tape.constant(Tensor::vector(vec![0.0, 3.0]));
    let out = compose_rotate(&mut tape, x, quarter).unwrap();
    assert_eq!(tape.value(out).data(), &[0.0, 1.0]);

    let odd = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
    assert!(matches!(compose_rotate(&mut tape, odd, odd), Err(Error::Config(_))));
}

#[test]
fn rotate_preserves_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let mut tape = Tape::new();
        let xt = rand_tensor(&mut rng, &[1, 8]);
        let x = tape.constant(xt.clone());
        let r = tape.constant(rand_tensor(&mut rng, &[1, 8]));
        let out = compose_rotate(&mut tape, x, r).unwrap();
        let rel = (tape.value(out).norm() - xt.norm()).abs() / xt.norm();
        assert!(rel < 1e-6, "{rel}");
    }
}

#[test]
fn qualifier_encoding_sums_pairs() {
    let (stmts, vocab) = parse("a,r,b,q1,c,q2,d\n");
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), 4]);
    let rel_t = rand_tensor(&mut rng, &[vocab.relation_rows(), 4]);
    let wq_t = rand_tensor(&mut rng, &[4, 4]);
    let mut tape = Tape::new();
    let ent = tape.constant(ent_t.clone());
    let rel = tape.constant(rel_t.clone());
    let wq = tape.constant(wq_t.clone());

    let empty = encode_qualifiers(&mut tape, &[], ent, rel, wq).unwrap();
    assert_eq!(tape.value(empty), &Tensor::zeros(&[1, 4]));

    let q = &stmts[0].qualifiers;
    let one = encode_qualifiers(&mut tape, &q[..1], ent, rel, wq).unwrap();
    let expect = vecmat(&rot(rel_t.row(q[0].relation), ent_t.row(q[0].entity)), &wq_t);
    assert!(max_diff(&vec![expect], tape.value(one)) < 1e-12);

    let reversed: Vec<_> = q.iter().rev().copied().collect();
    let fwd = encode_qualifiers(&mut tape, q, ent, rel, wq).unwrap();
    let bwd = encode_qualifiers(&mut tape, &reversed, ent, rel, wq).unwrap();
    assert!(tape.value(fwd).max_abs_diff(tape.value(bwd)) < 1e-12);
}

#[test]
fn self_loop_only_node_is_unchanged() {
    let (_, vocab) = parse("a,r,a\n");
    let graph = EncoderGraph::new(&vocab, &[]);
    let mut ent_t = Tensor::zeros(&[vocab.entity_rows(), 2]);
    ent_t.row_mut(0).copy_from_slice(&[0.4, -0.7]);
    let mut rel_t = Tensor::zeros(&[vocab.relation_rows(), 2]);
    rel_t.row_mut(vocab.self_loop()).copy_from_slice(&[1.0, 0.0]);
    let cfg = EncoderConfig {
        activation: Activation::Identity,
        ..EncoderConfig::default()
    };
    let mut tape = Tape::new();
    let ent = tape.constant(ent_t.clone());
    let rel = tape.constant(rel_t);
    let eye = tape.constant(Tensor::eye(2));
    let zero = tape.constant(Tensor::zeros(&[2, 2]));
    let layer = BaseLayer {
        w_std: zero,
        w_inv: zero,
        w_self: eye,
        w_q: zero,
        w_rel: eye,
    };
    let (out, _) =
        base_aggregate(&mut tape, &graph, ent, rel, &layer, &cfg, &mut ForwardCtx::eval()).unwrap();
    assert_eq!(tape.value(out).row(0), &[0.4, -0.7]);
}

#[test]
fn missing_self_loops_is_a_contract_error() {
    let (stmts, vocab) = parse("a,r,b\nc,r,c\n");
    let graph = EncoderGraph::build(&vocab, &stmts[..1], false);
    let mut tape = Tape::new();
    let ent = tape.constant(Tensor::zeros(&[vocab.entity_rows(), 2]));
    let rel = tape.constant(Tensor::zeros(&[vocab.relation_rows(), 2]));
    let w = tape.constant(Tensor::eye(2));
    let layer = BaseLayer {
        w_std: w,
        w_inv: w,
        w_self: w,
        w_q: w,
        w_rel: w,
    };
    let err = base_aggregate(&mut tape, &graph, ent, rel, &layer, &EncoderConfig::default(), &mut ForwardCtx::eval())
        .unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
}

fn base_oracle_case(text: &str, cfg: EncoderConfig, seed: u64) -> f64 {
    let (stmts, vocab) = parse(text);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let d = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), d]);
    let rel_t = rand_tensor(&mut rng, &[vocab.relation_rows(), d]);
    let ws: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[d, d])).collect();
    let mut tape = Tape::new();
    let ent = tape.constant(ent_t.clone());
    let rel = tape.constant(rel_t.clone());
    let v: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
    let layer = BaseLayer {
        w_std: v[0],
        w_inv: v[1],
        w_self: v[2],
        w_q: v[3],
        w_rel: v[4],
    };
    let (e, r) =
        base_aggregate(&mut tape, &graph, ent, rel, &layer, &cfg, &mut ForwardCtx::eval()).unwrap();
    let w = BaseWeights {
        w_std: &ws[0],
        w_inv: &ws[1],
        w_self: &ws[2],
        w_q: &ws[3],
        w_rel: &ws[4],
    };
    let (oe, or) = oracle_base(
        &rows(&ent_t),
        &rows(&rel_t),
        &stmts,
        vocab.num_entities(),
        vocab.num_relations(),
        &w,
        &cfg,
    );
    max_diff(&oe, tape.value(e)).max(max_diff(&or, tape.value(r)))
}

#[test]
fn base_aggregate_matches_dense_oracle() {
    let variants = [
        EncoderConfig::default(),
        EncoderConfig {
            mix: QualifierMix::StareGamma,
            ..EncoderConfig::default()
        },
        EncoderConfig {
            strict_alpha: true,
            activation: Activation::Relu,
            ..EncoderConfig::default()
        },
        EncoderConfig {
            degree_norm: false,
            alpha: 0.3,
            ..EncoderConfig::default()
        },
    ];
    for (i, cfg) in variants.into_iter().enumerate() {
        for text in [TOY, TOY_DEGREE] {
            let diff = base_oracle_case(text, cfg.clone(), 10 + i as u64);
            assert!(diff < 1e-10, "variant {i}: {diff}");
        }
    }
}

#[test]
fn alpha_one_ignores_qualifier_inputs() {
    let (stmts, vocab) = parse("a,r,b,q,z\nb,r,a\n");
    let graph = EncoderGraph::new(&vocab, &stmts);
    let cfg = EncoderConfig {
        alpha: 1.0,
        ..EncoderConfig::default()
    };
    let z = vocab.entity_id("z").unwrap();
    let q = vocab.relation_id("q").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), 4]);
    let rel_t = rand_tensor(&mut rng, &[vocab.relation_rows(), 4]);
    let ws: Vec<Tensor> = (0..5).map(|_| rand_tensor(&mut rng, &[4, 4])).collect();
    let run = |ent_t: &Tensor, rel_t: &Tensor, w_q: &Tensor| {
        let mut tape = Tape::new();
        let ent = tape.constant(ent_t.clone());
        let rel = tape.constant(rel_t.clone());
        let v: Vec<Var> = ws.iter().map(|w| tape.constant(w.clone())).collect();
        let wq = tape.constant(w_q.clone());
        let layer = BaseLayer {
            w_std: v[0],
            w_inv: v[1],
            w_self: v[2],
            w_q: wq,
            w_rel: v[4],
        };
        let (e, _) =
            base_aggregate(&mut tape, &graph, ent, rel, &layer, &cfg, &mut ForwardCtx::eval()).unwrap();
        tape.value(e).clone()
    };
    let reference = run(&ent_t, &rel_t, &ws[3]);
    let mut ent_p = ent_t.clone();
    ent_p.row_mut(z).fill(0.0);
    let mut rel_p = rel_t.clone();
    rel_p.row_mut(q).copy_from_slice(&[9.0, -3.0, 0.5, 0.25]);
    let perturbed = run(&ent_p, &rel_p, &Tensor::zeros(&[4, 4]));
    for v in [vocab.entity_id("a").unwrap(), vocab.entity_id("b").unwrap()] {
        assert_eq!(reference.row(v), perturbed.row(v));
    }
}

#[test]
fn triple_projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 4;
    let mut tape = Tape::new();
    let zero_v = tape.constant(Tensor::zeros(&[1, d]));
    let w_t = rand_tensor(&mut rng, &[3 * d, d]);
    let w = tape.constant(w_t.clone());
    let zero_b = tape.constant(Tensor::zeros(&[d]));
    let out = triple_project(&mut tape, zero_v, zero_v, zero_v, w, zero_b).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[1, d]));

    let hv_t = rand_tensor(&mut rng, &[2, d]);
    let hr_t = rand_tensor(&mut rng, &[2, d]);
    let hu_t = rand_tensor(&mut rng, &[2, d]);
    let (hv, hr, hu) = (
        tape.constant(hv_t.clone()),
        tape.constant(hr_t.clone()),
        tape.constant(hu_t.clone()),
    );
    let mut sel = Tensor::zeros(&[3 * d, d]);
    for i in 0..d {
        sel.row_mut(i)[i] = 1.0;
    }
    let sel = tape.constant(sel);
    let out = triple_project(&mut tape, hv, hr, hu, sel, zero_b).unwrap();
    assert_eq!(tape.value(out), &hv_t);

    let b_t = rand_tensor(&mut rng, &[d]);
    let b = tape.constant(b_t.clone());
    let out = triple_project(&mut tape, hv, hr, hu, w, b).unwrap();
    let expect: Rows = (0..2)
        .map(|i| oracle_triple(hv_t.row(i), hr_t.row(i), hu_t.row(i), &w_t, &b_t))
        .collect();
    assert!(max_diff(&expect, tape.value(out)) < 1e-12);
}

fn qual_layer(tape: &mut Tape, w_triple: &Tensor, b: &Tensor, w_dir: &Tensor) -> QualLayer {
    QualLayer {
        w_triple: tape.constant(w_triple.clone()),
        b_triple: tape.constant(b.clone()),
        w_dir: tape.constant(w_dir.clone()),
    }
}

#[test]
fn qual_aggregate_without_qualifiers_is_identity() {
    let (stmts, vocab) = parse("a,r,b\nb,r,c\n");
    let graph = EncoderGraph::new(&vocab, &stmts);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), 4]);
    let mut tape = Tape::new();
    let ent = tape.constant(ent_t.clone());
    let rel = tape.constant(rand_tensor(&mut rng, &[vocab.relation_rows(), 4]));
    let layer = qual_layer(
        &mut tape,
        &rand_tensor(&mut rng, &[12, 4]),
        &rand_tensor(&mut rng, &[4]),
        &rand_tensor(&mut rng, &[4, 4]),
    );
    let out = qual_aggregate(&mut tape, &graph, ent, rel, &layer, &EncoderConfig::default(), &mut ForwardCtx::eval())
        .unwrap();
    assert_eq!(tape.value(out), &ent_t);
}

#[test]
fn qual_aggregate_single_occurrence_with_identity_weights() {
    let (stmts, vocab) = parse(PSEUDONYM);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let d = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), d]);
    let rel_t = rand_tensor(&mut rng, &[vocab.relation_rows(), d]);
    let w_triple = rand_tensor(&mut rng, &[3 * d, d]);
    let b = rand_tensor(&mut rng, &[d]);
    let cfg = EncoderConfig {
        activation: Activation::Identity,
        ..EncoderConfig::default()
    };
    let mut tape = Tape::new();
    let ent = tape.constant(ent_t.clone());
    let rel = tape.constant(rel_t.clone());
    let layer = qual_layer(&mut tape, &w_triple, &b, &Tensor::eye(d));
    let out = qual_aggregate(&mut tape, &graph, ent, rel, &layer, &cfg, &mut ForwardCtx::eval()).unwrap();
    let s = &stmts[0];
    let ht = oracle_triple(ent_t.row(s.subject), rel_t.row(s.relation), ent_t.row(s.object), &w_triple, &b);
    let expect = rot(&ht, rel_t.row(s.qualifiers[0].relation));
    let got = tape.value(out).row(s.qualifiers[0].entity);
    for (e, g) in expect.iter().zip(got) {
        assert!((e - g).abs() < 1e-12);
    }
}

#[test]
fn qual_aggregate_matches_pseudonym_oracle() {
    for text in [PSEUDONYM, TOY_DEGREE] {
        let (stmts, vocab) = parse(text);
        let graph = EncoderGraph::new(&vocab, &stmts);
        let d = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ent_t = rand_tensor(&mut rng, &[vocab.entity_rows(), d]);
        let rel_t = rand_tensor(&mut rng, &[vocab.relation_rows(), d]);
        let w_triple = rand_tensor(&mut rng, &[3 * d, d]);
        let b = rand_tensor(&mut rng, &[d]);
        let w_dir = rand_tensor(&mut rng, &[d, d]);
        let cfg = EncoderConfig::default();
        let mut tape = Tape::new();
        let ent = tape.constant(ent_t.clone());
        let rel = tape.constant(rel_t.clone());
        let layer = qual_layer(&mut tape, &w_triple, &b, &w_dir);
        let out = qual_aggregate(&mut tape, &graph, ent, rel, &layer, &cfg, &mut ForwardCtx::eval()).unwrap();
        let expect = oracle_qual(&rows(&ent_t), &rows(&rel_t), &stmts, &w_triple, &b, &w_dir, cfg.activation);
        assert!(max_diff(&expect, tape.value(out)) < 1e-10, "{text}");
    }
}

#[test]
fn sequential_encoder_composes_the_oracles() {
    let (stmts, vocab) = parse(TOY_DEGREE);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let enc = EncoderConfig {
        base_layers: 1,
        qual_layers: 1,
        ..EncoderConfig::default()
    };
    let config = small_config(6, enc.clone());
    let params = model(&vocab, &config, 11);
    let (e, r) = run_encode(&params, &graph);

    let ids = &params.ids;
    let st = &params.store;
    let w = BaseWeights {
        w_std: st.get(ids.base[0].w_std),
        w_inv: st.get(ids.base[0].w_inv),
        w_self: st.get(ids.base[0].w_self),
        w_q: st.get(ids.base[0].w_q),
        w_rel: st.get(ids.base[0].w_rel),
    };
    let (be, br) = oracle_base(
        &rows(st.get(ids.entities)),
        &rows(st.get(ids.relations)),
        &stmts,
        vocab.num_entities(),
        vocab.num_relations(),
        &w,
        &enc,
    );
    let qe = oracle_qual(
        &be,
        &br,
        &stmts,
        st.get(ids.qual[0].w_triple),
        st.get(ids.qual[0].b_triple),
        st.get(ids.qual[0].w_dir),
        enc.activation,
    );
    assert!(max_diff(&qe, &e) < 1e-10);
    assert!(max_diff(&br, &r) < 1e-10);
}

#[test]
fn identity_mode_returns_tables() {
    let (stmts, vocab) = parse(TOY);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let config = small_config(
        4,
        EncoderConfig {
            mode: EncoderMode::Identity,
            ..EncoderConfig::default()
        },
    );
    let params = model(&vocab, &config, 12);
    let (e, r) = run_encode(&params, &graph);
    assert_eq!(&e, params.store.get(params.ids.entities));
    assert_eq!(&r, params.store.get(params.ids.relations));
}

#[test]
fn layer_norm_mode_normalizes_tables() {
    let (stmts, vocab) = parse(TOY);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let config = small_config(
        4,
        EncoderConfig {
            mode: EncoderMode::LayerNormOnly,
            ..EncoderConfig::default()
        },
    );
    let params = model(&vocab, &config, 13);
    let (e, r) = run_encode(&params, &graph);
    for (table, out) in [(params.ids.entities, &e), (params.ids.relations, &r)] {
        let t = params.store.get(table);
        for i in 0..t.rows() {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / row.len() as f64;
            for (x, y) in row.iter().zip(out.row(i)) {
                let expect = (x - mean) / (var + layer_norm_eps()).sqrt();
                assert!((expect - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn parallel_selector_recovers_base_branch() {
    let (stmts, vocab) = parse(TOY_DEGREE);
    let graph = EncoderGraph::new(&vocab, &stmts);
    let d = 4;
    let par = EncoderConfig {
        mode: EncoderMode::Parallel,
        ..EncoderConfig::default()
    };
    let mut params = model(&vocab, &small_config(d, par), 14);
    let mut sel = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        sel.row_mut(i)[i] = 1.0;
    }
    *params.store.get_mut(params.ids.w_parallel) = sel;
    let (e, r) = run_encode(&params, &graph);

    let base_only = EncoderConfig {
        mode: EncoderMode::BaseOnly,
        ..EncoderConfig::default()
    };
    let mut base = params.clone();
    base.config.encoder = base_only;
    let (be, br) = run_encode(&base, &graph);
    assert!(e.max_abs_diff(&be) < 1e-12);
    assert_eq!(r, br);
}

fn shuffled_qualifiers(stmts: &[Statement], rng: &mut ChaCha8Rng) -> Vec<Statement> {
    stmts
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.qualifiers.shuffle(rng);
            s
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn qualifier_order_does_not_change_encoding(seed in 0u64..1000, parallel in any::<bool>()) {
        let data = crate::data::generate_synthetic(
            &crate::data::SyntheticConfig { entities: 20, relations: 6, statements: 40, ..Default::default() },
            seed,
        ).unwrap();
        let mode = if parallel { EncoderMode::Parallel } else { EncoderMode::Sequential };
        let config = small_config(4, EncoderConfig { mode, ..EncoderConfig::default() });
        let params = model(&data.vocab, &config, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let permuted = shuffled_qualifiers(&data.train, &mut rng);
        let (e1, r1) = run_encode(&params, &EncoderGraph::new(&data.vocab, &data.train));
        let (e2, r2) = run_encode(&params, &EncoderGraph::new(&data.vocab, &permuted));
        prop_assert!(e1.max_abs_diff(&e2) < 1e-10);
        prop_assert!(r1.max_abs_diff(&r2) < 1e-10);
    }
}

#[test]
fn perturbations_stay_within_receptive_field() {
    // chain e0 - e1 - e2 - e3 - e4 with e5 qualifying the last link
    let (stmts, vocab) = parse("e0,r,e1\ne1,r,e2\ne2,r,e3\ne3,r,e4,q,e5\n");
    let graph = EncoderGraph::new(&vocab, &stmts);
    let id = |l: &str| vocab.entity_id(l).unwrap();
    let cases = [
        (EncoderMode::BaseOnly, 2, 0, id("e4"), vec!["e0", "e1"], "e2"),
        (EncoderMode::BaseOnly, 1, 0, id("e0"), vec!["e2", "e3", "e4"], "e1"),
        (EncoderMode::Sequential, 1, 1, id("e5"), vec!["e0", "e1", "e2"], "e3"),
    ];
    for (mode, base_layers, qual_layers, poke, unchanged, changed) in cases {
        let enc = EncoderConfig {
            mode,
            base_layers,
            qual_layers,
            ..EncoderConfig::default()
        };
        let params = model(&vocab, &small_config(4, enc), 15);
        let (before, _) = run_encode(&params, &graph);
        let mut poked = params.clone();
        poked.store.get_mut(poked.ids.entities).row_mut(poke).fill(0.9);
        let (after, _) = run_encode(&poked, &graph);
        for l in unchanged {
            assert_eq!(before.row(id(l)), after.row(id(l)), "{mode:?} {l}");
        }
        assert_ne!(before.row(id(changed)), after.row(id(changed)), "{mode:?} {changed}");
    }
}

#[test]
fn encoder_gradients_match_central_differences() {
    let (stmts, vocab) = parse(TOY_DEGREE);
    let graph = EncoderGraph::new(&vocab, &stmts);
    for mode in [EncoderMode::Sequential, EncoderMode::Parallel] {
        let enc = EncoderConfig {
            mode,
            base_layers: 2,
            qual_layers: 1,
            ..EncoderConfig::default()
        };
        let params = model(&vocab, &small_config(4, enc), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ce = rand_tensor(&mut rng, &[vocab.entity_rows(), 4]);
        let cr = rand_tensor(&mut rng, &[vocab.relation_rows(), 4]);
        let report = grad_check(
            |tape, vars| {
                let bound = Bound::new(vars.to_vec());
                let out = encode(tape, &graph, &params, &bound, &mut ForwardCtx::eval())?;
                let ce = tape.constant(ce.clone());
                let cr = tape.constant(cr.clone());
                let a = tape.mul(out.entities, ce)?;
                let b = tape.mul(out.relations, cr)?;
                let a = tape.sum(a);
                let b = tape.sum(b);
                tape.add(a, b)
            },
            params.store.tensors(),
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{mode:?}: {}", report.max_rel_error());
    }
}
