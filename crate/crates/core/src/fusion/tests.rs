use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::{finite_diff_grad, max_relative_error, Tensor, RELATIVE_ERROR_FLOOR};
use crate::transformer::{block_with_scores, embed_input, score_tokens, BlockOptions, ParamStore, StackDims};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn token_set(g: &mut Graph<f64>, t: Tensor<f64>, modality: usize, batch: usize) -> TokenSet {
    let tokens = t.rows() / batch;
    let features = g.constant(t);
    TokenSet { modality, features, layer: 1, batch, tokens }
}

#[test]
fn make_mask_examples() {
    let m = make_mask(&[0.5f64, 0.001], 0.02).unwrap();
    assert_eq!(m.keep, vec![true, false]);
    assert_eq!(m.substitute, vec![false, true]);
    let m = make_mask(&[1e-9f64, 0.3, 0.9], 1e-12).unwrap();
    assert!(m.substitute.iter().all(|&s| !s));
    for bad in [0.0, 1.0, -0.1, 2.0, f64::NAN] {
        assert!(matches!(make_mask(&[0.5f64], bad), Err(Error::Config(_))));
    }
}

#[test]
fn uniform_scores_substitute_at_threshold_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let draws = 100_000;
    let s: Vec<f64> = (0..draws).map(|_| rng.random::<f64>()).collect();
    let frac = make_mask(&s, 0.02).unwrap().count() as f64 / draws as f64;
    let sd = (0.02f64 * 0.98 / draws as f64).sqrt();
    assert!((frac - 0.02).abs() < 4.0 * sd, "fraction {frac}");
}

#[test]
fn two_modalities_have_a_single_donor() {
    let a = allocate_groups(9, 2, 1, 5).unwrap();
    assert!(a.owner.iter().all(|&o| o == 0));
    let a = allocate_groups(9, 2, 0, 5).unwrap();
    assert!(a.owner.iter().all(|&o| o == 1));
}

#[test]
fn three_modalities_four_tokens_split_two_and_two() {
    for seed in 0..200 {
        for m in 0..3 {
            let a = allocate_groups(4, 3, m, seed).unwrap();
            let donors: Vec<usize> = (0..3).filter(|&d| d != m).collect();
            let g0 = a.group(donors[0]);
            let g1 = a.group(donors[1]);
            assert_eq!((g0.len(), g1.len()), (2, 2));
            let mut all = [g0, g1].concat();
            all.sort();
            assert_eq!(all, vec![0, 1, 2, 3]);
        }
    }
}

#[test]
fn allocation_is_seed_deterministic() {
    let a = allocate_groups(64, 4, 2, 7).unwrap();
    assert_eq!(a, allocate_groups(64, 4, 2, 7).unwrap());
    assert_ne!(a.owner, allocate_groups(64, 4, 2, 8).unwrap().owner);
    assert!(matches!(allocate_groups(5, 1, 0, 0), Err(Error::Config(_))));
    assert!(matches!(allocate_groups(2, 4, 0, 0), Err(Error::Config(_))));
}

#[test]
fn empty_mask_leaves_tokens_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let e = token_set(&mut g, random(&[6, 4], &mut rng), 0, 2);
    let o = token_set(&mut g, random(&[6, 4], &mut rng), 1, 2);
    let alloc = allocate_groups(3, 2, 0, 0).unwrap();
    let srcs = vec![None, Some(ProjectedSource::dense(1, o.features, 6))];
    let sub = substitute_tokens(&mut g, &e, &FusionMask::none(6), &alloc, &srcs).unwrap();
    assert_eq!(sub.tokens.features, e.features);
    assert!(sub.applied.iter().all(|&a| !a));
}

#[test]
fn full_mask_swaps_in_the_other_modality() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let e = token_set(&mut g, random(&[6, 4], &mut rng), 0, 2);
    let other = random(&[6, 4], &mut rng);
    let o = token_set(&mut g, other.clone(), 1, 2);
    let alloc = allocate_groups(3, 2, 0, 0).unwrap();
    let srcs = vec![None, Some(ProjectedSource::dense(1, o.features, 6))];
    let mask = FusionMask::from_substitute(vec![true; 6], 0.02);
    let sub = substitute_tokens(&mut g, &e, &mask, &alloc, &srcs).unwrap();
    assert!(g.value(sub.tokens.features).bitwise_eq(&other));
}

#[test]
fn missing_donor_is_contract_error() {
    let mut g = Graph::new();
    let e = token_set(&mut g, Tensor::ones(&[3, 2]), 0, 1);
    let alloc = allocate_groups(3, 2, 0, 0).unwrap();
    let mask = FusionMask::from_substitute(vec![false, true, false], 0.02);
    let err = substitute_tokens(&mut g, &e, &mask, &alloc, &[None, None]);
    assert!(matches!(err, Err(Error::Contract(_))));
}

/// Reference: every row decided independently from owner and mask.
fn substitution_loop(e: &Tensor<f64>, sources: &[Option<Tensor<f64>>], mask: &[bool], owner: &[usize], n: usize) -> Tensor<f64> {
    let c = e.cols();
    let mut out = Vec::with_capacity(e.len());
    for r in 0..e.rows() {
        if mask[r] {
            out.extend_from_slice(sources[owner[r % n]].as_ref().unwrap().row(r));
        } else {
            out.extend_from_slice(e.row(r));
        }
    }
    Tensor::new(&[e.rows(), c], out).unwrap()
}

fn substitution_case(seed: u64, n: usize, modalities: usize, batch: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 3;
    let m = rng.random_range(0..modalities);
    let mut g = Graph::new();
    let base = random(&[batch * n, c], &mut rng);
    let e = token_set(&mut g, base.clone(), m, batch);
    let mut tensors = Vec::new();
    let mut srcs = Vec::new();
    for d in 0..modalities {
        if d == m {
            tensors.push(None);
            srcs.push(None);
        } else {
            let t = random(&[batch * n, c], &mut rng);
            let node = g.constant(t.clone());
            tensors.push(Some(t));
            srcs.push(Some(ProjectedSource::dense(d, node, batch * n)));
        }
    }
    let mask: Vec<bool> = (0..batch * n).map(|_| rng.random_bool(0.4)).collect();
    let alloc = allocate_groups(n, modalities, m, seed).unwrap();
    let sub = substitute_tokens(&mut g, &e, &FusionMask::from_substitute(mask.clone(), 0.02), &alloc, &srcs).unwrap();
    let expect = substitution_loop(&base, &tensors, &mask, &alloc.owner, n);
    let got = g.value(sub.tokens.features);
    assert!(got.bitwise_eq(&expect));
    for r in 0..batch * n {
        if !mask[r] {
            assert_eq!(got.row(r), base.row(r));
        }
    }
    assert_eq!(sub.applied, mask);
}

#[test]
fn six_tokens_three_modalities_match_loop() {
    for seed in 0..20 {
        substitution_case(seed, 6, 3, 1);
    }
}

#[test]
fn gradients_reach_kept_tokens_and_donor_rows_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::<f64>::new();
    let e_node = g.leaf(random(&[4, 2], &mut rng).with_grad(true));
    let o_node = g.leaf(random(&[4, 2], &mut rng).with_grad(true));
    let e = TokenSet { modality: 0, features: e_node, layer: 1, batch: 1, tokens: 4 };
    let alloc = allocate_groups(4, 2, 0, 0).unwrap();
    let mask = FusionMask::from_substitute(vec![true, false, false, true], 0.02);
    let srcs = vec![None, Some(ProjectedSource::dense(1, o_node, 4))];
    let sub = substitute_tokens(&mut g, &e, &mask, &alloc, &srcs).unwrap();
    let loss = g.sum(sub.tokens.features);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(e_node).data(), &[0., 0., 1., 1., 1., 1., 0., 0.]);
    assert_eq!(grads.get(o_node).data(), &[1., 1., 0., 0., 0., 0., 1., 1.]);
}

#[test]
fn unresolved_rows_keep_their_token() {
    let mut g = Graph::new();
    let e = token_set(&mut g, Tensor::from_f64(&[3, 1], &[1., 2., 3.]).unwrap(), 0, 1);
    let src = g.constant(Tensor::from_f64(&[1, 1], &[9.]).unwrap());
    let alloc = allocate_groups(3, 2, 0, 0).unwrap();
    let srcs = vec![None, Some(ProjectedSource { modality: 1, features: src, row_of: vec![None, Some(0), None] })];
    let mask = FusionMask::from_substitute(vec![true, true, false], 0.02);
    let sub = substitute_tokens(&mut g, &e, &mask, &alloc, &srcs).unwrap();
    assert_eq!(g.value(sub.tokens.features).data(), &[1., 9., 3.]);
    assert_eq!(sub.applied, vec![false, true, false]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn substitution_matches_loop(seed in 0u64..100_000, n in 3usize..=16, modalities in 2usize..=4, batch in 1usize..=3) {
        substitution_case(seed, n, modalities, batch);
    }

    #[test]
    fn allocation_partitions_evenly(n in 3usize..=64, modalities in 3usize..=4, seed in 0u64..1000) {
        for m in 0..modalities {
            let a = allocate_groups(n, modalities, m, seed).unwrap();
            let sizes: Vec<usize> = (0..modalities).filter(|&d| d != m).map(|d| a.group(d).len()).collect();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            prop_assert!(a.owner.iter().all(|&o| o != m && o < modalities));
        }
    }
}

fn homo_spec(m: usize, tokens: usize, layers: usize) -> ModelSpec {
    let d = StackDims { tokens, in_channels: 5, dim: 8, heads: 2, layers, mlp_ratio: 2, out_dim: 2, scoring: true };
    ModelSpec {
        topology: Topology::Homogeneous,
        stacks: vec![d; m],
        share_backbone: true,
        share_pe: true,
        residuals: true,
        rpa: true,
        theta: DEFAULT_THETA,
        bidirectional: false,
        num_query_tokens: 0,
        score_bias: 0.0,
        alloc_seed: 3,
        init_seed: 4,
    }
}

fn homo_batch(m: usize, tokens: usize, batch: usize, seed: u64) -> FusedBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FusedBatch { inputs: (0..m).map(|_| random(&[batch * tokens, 5], &mut rng)).collect(), batch, correspondence: None }
}

#[test]
fn rpa_with_zero_table_is_identity() {
    let (model, mut store) = FusedModel::build::<f64>(homo_spec(2, 4, 1)).unwrap();
    let pe = model.stacks[0].pe;
    store.get_mut(pe.table).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[8, 8], &mut rng);
    for layer in 1..4 {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let e = token_set(&mut g, x.clone(), 0, 2);
        let out = rpa_inject(&mut g, &p, &e, &pe, layer).unwrap();
        assert!(g.value(out.features).bitwise_eq(&x));
    }
}

#[test]
fn disabled_fusion_reduces_to_single_stacks() {
    let (model, store) = FusedModel::build::<f64>(homo_spec(3, 4, 2)).unwrap();
    let batch = homo_batch(3, 4, 2, 9);
    for policy in [MaskPolicy::Disabled, MaskPolicy::Score] {
        let mut spec_model = model.clone();
        if policy == MaskPolicy::Score {
            spec_model.spec.theta = 1e-300;
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = spec_model.forward(&mut g, &p, &batch, &policy, 0).unwrap();
        assert!(out.masks.iter().all(|m| m.applied.iter().all(|&a| !a)));
        for m in 0..3 {
            let mut g2 = Graph::new();
            let p2 = store.bind(&mut g2);
            let x = g2.constant(batch.inputs[m].clone());
            let (fin, _) = model.stacks[m].forward_single(&mut g2, &p2, x, 2, true, BlockOptions::default()).unwrap();
            let pred = model.stacks[m].predict(&mut g2, &p2, &fin).unwrap();
            assert!(g.value(out.final_tokens[m].features).bitwise_eq(g2.value(fin.features)));
            assert!(g.value(out.predictions[m]).bitwise_eq(g2.value(pred)));
        }
    }
}

#[test]
fn first_layer_full_swap_matches_hand_assembly() {
    let (mut model, store) = FusedModel::build::<f64>(homo_spec(2, 4, 2)).unwrap();
    model.spec.residuals = true;
    let batch = homo_batch(2, 4, 1, 10);
    let masks = vec![vec![vec![true; 4]; 2], vec![vec![false; 4]; 2]];
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Fixed(masks), 0).unwrap();

    let mut h = Graph::new();
    let q = store.bind(&mut h);
    let e: Vec<TokenSet> = (0..2)
        .map(|m| {
            let x = h.constant(batch.inputs[m].clone());
            embed_input(&mut h, &q, x, &model.stacks[m].embed, m, 1).unwrap()
        })
        .collect();
    for m in 0..2 {
        let st = &model.stacks[m];
        let own = rpa_inject(&mut h, &q, &e[m], &st.pe, 1).unwrap();
        let s = score_tokens(&mut h, &q, &own, st.layers[0].score_head.as_ref().unwrap()).unwrap();
        let swapped = rpa_inject(&mut h, &q, &TokenSet { modality: m, ..e[1 - m] }, &st.pe, 1).unwrap();
        let next = block_with_scores(&mut h, &q, &swapped, Some(&s), &st.layers[0], BlockOptions::default()).unwrap();
        assert!(g.value(out.layer_inputs[m][0].features).bitwise_eq(h.value(e[1 - m].features)));
        assert!(g.value(out.layer_inputs[m][1].features).bitwise_eq(h.value(next.features)));
    }
}

#[test]
fn substituted_tokens_keep_their_position_embedding() {
    let (model, store) = FusedModel::build::<f64>(homo_spec(2, 4, 3)).unwrap();
    let batch = homo_batch(2, 4, 2, 11);
    let sub = vec![true, false, false, true, false, true, false, false];
    let masks = vec![vec![vec![false; 8]; 2], vec![sub.clone(), vec![false; 8]], vec![vec![false; 8]; 2]];
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Fixed(masks), 0).unwrap();
    let donor_raw = g.value(out.layer_inputs[1][1].features).clone();
    let block_in = g.value(out.block_inputs[0][1].features).clone();
    let pe = store.get(model.stacks[0].pe.table);
    for r in 0..8 {
        let n = r % 4;
        if sub[r] {
            for c in 0..8 {
                assert_eq!(block_in.row(r)[c], donor_raw.row(r)[c] + pe.row(n)[c]);
            }
        }
    }
    assert_eq!(out.masks[2].applied, sub);
}

#[test]
fn masks_follow_the_input() {
    let mut spec = homo_spec(2, 9, 1);
    spec.theta = 0.5;
    let (model, store) = FusedModel::build::<f64>(spec).unwrap();
    let mut seen = std::collections::HashSet::new();
    for seed in 0..6 {
        let batch = homo_batch(2, 9, 1, 100 + seed);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Score, 0).unwrap();
        seen.insert(out.masks[0].substitute.clone());
    }
    assert!(seen.len() > 1);
}

#[test]
fn random_policy_is_reproducible_and_near_rate() {
    let (model, store) = FusedModel::build::<f64>(homo_spec(2, 16, 2)).unwrap();
    let batch = homo_batch(2, 16, 4, 12);
    let policy = MaskPolicy::Random { rate: 0.3, seed: 5 };
    let run = |step| {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        model.forward(&mut g, &p, &batch, &policy, step).unwrap().masks
    };
    let a = run(3);
    assert_eq!(a, run(3));
    assert_ne!(a, run(4));
    let total: usize = a.iter().map(|m| m.applied.iter().filter(|&&x| x).count()).sum();
    let frac = total as f64 / (4.0 * 64.0);
    assert!((frac - 0.3).abs() < 0.08, "{frac}");
}

/// Small objective: prediction MSE plus score sum.
fn fused_loss(model: &FusedModel, store: &ParamStore<f64>, batch: &FusedBatch<f64>, policy: &MaskPolicy, frozen: bool) -> (Graph<f64>, crate::transformer::Bound, NodeId) {
    let mut g = Graph::new();
    let p = if frozen { store.bind_frozen(&mut g) } else { store.bind(&mut g) };
    let out = model.forward(&mut g, &p, batch, policy, 0).unwrap();
    let mut loss = None;
    for &pred in &out.predictions {
        let t = Tensor::from_fn(g.shape(pred), |i| (i as f64 * 0.71).cos());
        let l = g.mse(pred, t).unwrap();
        loss = Some(match loss {
            None => l,
            Some(a) => g.add(a, l).unwrap(),
        });
    }
    let mut loss = loss.unwrap();
    for s in &out.scores {
        let t = g.sum(s.values);
        let t = g.scale(t, 0.05);
        loss = g.add(loss, t).unwrap();
    }
    (g, p, loss)
}

fn max_param_error(model: &FusedModel, store: &ParamStore<f64>, batch: &FusedBatch<f64>, policy: &MaskPolicy) -> f64 {
    let (g, p, loss) = fused_loss(model, store, batch, policy, false);
    let mut grads = g.backward(loss).unwrap();
    let analytic = store.gradients(&mut grads, &p);
    let mut worst = 0.0f64;
    for id in store.ids() {
        let numeric = finite_diff_grad(
            |probe| {
                let mut st = store.clone();
                *st.get_mut(id) = probe.clone();
                let (g, _, l) = fused_loss(model, &st, batch, policy, true);
                g.value(l).item()
            },
            store.get(id),
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_relative_error(&analytic[id.index()], &numeric, RELATIVE_ERROR_FLOOR));
    }
    worst
}

fn with_live_heads(model: &FusedModel, store: &mut ParamStore<f64>) {
    let mut init = crate::transformer::Init::new(77);
    for s in &model.stacks {
        *store.get_mut(s.head.weight) = init.normal(&[s.dims.dim, s.dims.out_dim], 0.5);
    }
}

#[test]
fn fused_gradient_check_with_fixed_masks() {
    let mut spec = homo_spec(2, 4, 2);
    spec.rpa = false;
    let (model, mut store) = FusedModel::build::<f64>(spec).unwrap();
    with_live_heads(&model, &mut store);
    let batch = homo_batch(2, 4, 2, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let masks: Vec<Vec<Vec<bool>>> = (0..2).map(|_| (0..2).map(|_| (0..8).map(|_| rng.random_bool(0.4)).collect()).collect()).collect();
    let worst = max_param_error(&model, &store, &batch, &MaskPolicy::Fixed(masks));
    assert!(worst < 1e-4, "{worst}");
}

fn hetero_spec(layers_pt: usize, layers_img: usize, bidirectional: bool, queries: usize) -> ModelSpec {
    let pt = StackDims { tokens: 5, in_channels: 4, dim: 8, heads: 2, layers: layers_pt, mlp_ratio: 2, out_dim: 1, scoring: true };
    let img = StackDims { tokens: 4, in_channels: 3, dim: 4, heads: 2, layers: layers_img, mlp_ratio: 2, out_dim: 1, scoring: bidirectional };
    ModelSpec {
        topology: Topology::Heterogeneous,
        stacks: vec![pt, img],
        share_backbone: false,
        share_pe: false,
        residuals: true,
        rpa: true,
        theta: DEFAULT_THETA,
        bidirectional,
        num_query_tokens: queries,
        score_bias: 0.0,
        alloc_seed: 1,
        init_seed: 2,
    }
}

fn hetero_batch(batch: usize, seed: u64) -> FusedBatch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corr = (0..batch * 5).map(|i| if i % 3 == 2 { None } else { Some(rng.random_range(0..4)) }).collect();
    FusedBatch {
        inputs: vec![random(&[batch * 5, 4], &mut rng), random(&[batch * 4, 3], &mut rng)],
        batch,
        correspondence: Some(corr),
    }
}

#[test]
fn heterogeneous_configs_are_validated() {
    assert!(matches!(FusedModel::build::<f64>(hetero_spec(2, 3, true, 0)), Err(Error::Config(_))));
    let mut spec = hetero_spec(2, 2, false, 0);
    spec.share_pe = true;
    assert!(FusedModel::build::<f64>(spec).is_err());
    let (model, store) = FusedModel::build::<f64>(hetero_spec(2, 2, false, 0)).unwrap();
    let mut batch = hetero_batch(1, 0);
    batch.correspondence = None;
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    assert!(matches!(model.forward(&mut g, &p, &batch, &MaskPolicy::Score, 0), Err(Error::Contract(_))));
}

#[test]
fn layer_pairing_rounds_up() {
    let (model, _) = FusedModel::build::<f64>(hetero_spec(3, 2, false, 0)).unwrap();
    assert_eq!((1..=3).map(|l| model.paired_image_layer(l)).collect::<Vec<_>>(), vec![1, 2, 2]);
    let (model, _) = FusedModel::build::<f64>(hetero_spec(2, 4, false, 0)).unwrap();
    assert_eq!((1..=2).map(|l| model.paired_image_layer(l)).collect::<Vec<_>>(), vec![2, 4]);
}

#[test]
fn heterogeneous_substitution_uses_matching_patch() {
    let (model, store) = FusedModel::build::<f64>(hetero_spec(2, 2, false, 0)).unwrap();
    let batch = hetero_batch(2, 3);
    let corr = batch.correspondence.clone().unwrap();
    let masks = vec![vec![vec![true; 10], vec![false; 8]], vec![vec![false; 10], vec![false; 8]]];
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Fixed(masks), 0).unwrap();
    let m0 = out.masks.iter().find(|m| m.layer == 1 && m.modality == 0).unwrap();
    let expected: Vec<bool> = corr.iter().map(|c| c.is_some()).collect();
    assert_eq!(m0.applied, expected);

    let img_raw = g.value(out.layer_inputs[1][0].features).clone();
    let sub = g.value(out.layer_inputs[0][0].features).clone();
    let a = model.adapters[0];
    let lin = |l: &crate::transformer::Linear, v: &[f64]| -> Vec<f64> {
        let w = store.get(l.weight).data();
        let b = store.get(l.bias).data();
        (0..l.out_dim).map(|j| b[j] + (0..l.in_dim).map(|i| v[i] * w[i * l.out_dim + j]).sum::<f64>()).collect()
    };
    for (r, c) in corr.iter().enumerate() {
        if let Some(j) = c {
            let src = img_raw.row((r / 5) * 4 + j);
            let h: Vec<f64> = lin(&a.fc1, src).into_iter().map(crate::numeric::gelu).collect();
            let expect = lin(&a.fc2, &h);
            for (x, y) in sub.row(r).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }
}

#[test]
fn query_tokens_are_never_substituted() {
    let (model, store) = FusedModel::build::<f64>(hetero_spec(2, 2, true, 2)).unwrap();
    let batch = hetero_batch(2, 4);
    let masks = vec![vec![vec![true; 14], vec![true; 12]]; 2];
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let out = model.forward(&mut g, &p, &batch, &MaskPolicy::Fixed(masks), 0).unwrap();
    for m in &out.masks {
        let per = if m.modality == 0 { 7 } else { 6 };
        let real = if m.modality == 0 { 5 } else { 4 };
        for (r, &a) in m.applied.iter().enumerate() {
            if r % per >= real {
                assert!(!a);
            }
        }
    }
    assert_eq!(g.shape(out.predictions[0]), &[10, 1]);
    assert_eq!(g.shape(out.predictions[1]), &[8, 1]);
    assert_eq!(out.scores.iter().find(|s| s.modality == 0).map(|s| g.value(s.values).len()), Some(10));
}

#[test]
fn heterogeneous_gradient_check() {
    for bidirectional in [false, true] {
        let mut spec = hetero_spec(2, 2, bidirectional, 1);
        spec.rpa = false;
        let (model, mut store) = FusedModel::build::<f64>(spec).unwrap();
        with_live_heads(&model, &mut store);
        let batch = hetero_batch(1, 5);
        let masks = vec![
            vec![vec![true, false, true, true, false, false], vec![false, true, true, false, false]],
            vec![vec![false, true, false, true, true, false], vec![true, false, false, true, false]],
        ];
        let masks = if bidirectional {
            masks
        } else {
            masks.into_iter().map(|l| vec![l[0].clone(), vec![false; 5]]).collect()
        };
        let worst = max_param_error(&model, &store, &batch, &MaskPolicy::Fixed(masks));
        assert!(worst < 1e-4, "bidirectional={bidirectional}: {worst}");
    }
}

/// Fused forward re-assembled from the public layer functions, with layers
/// after the first reading positional embeddings from `late_pe`.
fn frozen_copy_loss(
    model: &FusedModel,
    store: &ParamStore<f64>,
    late_pe: &crate::transformer::PositionalEmbedding,
    batch: &FusedBatch<f64>,
    masks: &[Vec<Vec<bool>>],
) -> f64 {
    use crate::transformer::add_positional;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let mut e: Vec<TokenSet> = (0..2)
        .map(|m| {
            let x = g.constant(batch.inputs[m].clone());
            embed_input(&mut g, &p, x, &model.stacks[m].embed, m, batch.batch).unwrap()
        })
        .collect();
    let mut score_sum = Vec::new();
    for l in 1..=model.stacks[0].dims.layers {
        let raw = e.clone();
        for m in 0..2 {
            let st = &model.stacks[m];
            let pe = if l == 1 { &st.pe } else { late_pe };
            let input = add_positional(&mut g, &p, &raw[m], pe, false).unwrap();
            let s = score_tokens(&mut g, &p, &input, st.layers[l - 1].score_head.as_ref().unwrap()).unwrap();
            let mask = FusionMask::from_substitute(masks[l - 1][m].clone(), 0.02);
            let rows = raw[m].rows();
            let srcs: Vec<_> = (0..2).map(|d| (d != m).then(|| ProjectedSource::dense(d, raw[d].features, rows))).collect();
            let sub = substitute_tokens(&mut g, &raw[m], &mask, model.allocations[m].as_ref().unwrap(), &srcs).unwrap();
            let input = add_positional(&mut g, &p, &sub.tokens, pe, false).unwrap();
            e[m] = block_with_scores(&mut g, &p, &input, Some(&s), &st.layers[l - 1], BlockOptions::default()).unwrap();
            score_sum.push(s.values);
        }
    }
    let mut loss = None;
    for m in 0..2 {
        let pred = model.stacks[m].predict(&mut g, &p, &e[m]).unwrap();
        let t = Tensor::from_fn(g.shape(pred), |i| (i as f64 * 0.71).cos());
        let l = g.mse(pred, t).unwrap();
        loss = Some(match loss {
            None => l,
            Some(a) => g.add(a, l).unwrap(),
        });
    }
    let mut loss = loss.unwrap();
    for s in score_sum {
        let t = g.sum(s);
        let t = g.scale(t, 0.05);
        loss = g.add(loss, t).unwrap();
    }
    g.value(loss).item().unwrap()
}

#[test]
fn rpa_gradient_equals_frozen_copy_finite_differences() {
    let (model, mut store) = FusedModel::build::<f64>(homo_spec(2, 4, 3)).unwrap();
    with_live_heads(&model, &mut store);
    let batch = homo_batch(2, 4, 2, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let masks: Vec<Vec<Vec<bool>>> = (0..3).map(|_| (0..2).map(|_| (0..8).map(|_| rng.random_bool(0.3)).collect()).collect()).collect();
    let policy = MaskPolicy::Fixed(masks.clone());

    let (g, p, loss) = fused_loss(&model, &store, &batch, &policy, false);
    let mut grads = g.backward(loss).unwrap();
    let table = model.stacks[0].pe.table;
    let analytic = grads.take(p.node(table));

    let mut oracle_store = store.clone();
    let copy = oracle_store.add("pe_copy", store.get(table).clone());
    let late = crate::transformer::PositionalEmbedding { table: copy, ..model.stacks[0].pe };
    assert!((frozen_copy_loss(&model, &oracle_store, &late, &batch, &masks) - g.value(loss).item().unwrap()).abs() < 1e-12);
    let numeric = finite_diff_grad(
        |probe| {
            let mut st = oracle_store.clone();
            *st.get_mut(table) = probe.clone();
            Ok(frozen_copy_loss(&model, &st, &late, &batch, &masks))
        },
        store.get(table),
        1e-5,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric, RELATIVE_ERROR_FLOOR);
    assert!(err < 1e-4, "{err}");
}
